use super::{linear_to_srgb, srgb_to_linear, EncodedImage, Image, LinearImage};
use crate::error::{Error, Result};
use std::path::Path;

/// Reads an 8-bit RGB PNG. Pixels are gamma-decoded unless `linear` marks the
/// file as already linear, in which case they are only rescaled to `[0, 1]`.
pub fn read_png(path: &Path, linear: bool) -> Result<LinearImage> {
    let decoded = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    if decoded.color().channel_count() != 3 {
        return Err(Error::Shape(format!(
            "{} has {} channels, expected RGB",
            path.display(),
            decoded.color().channel_count()
        )));
    }
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let encoded = EncodedImage::rgb(h, w, rgb.into_raw())?;
    if linear {
        LinearImage::new(Image::from_fn(h, w, |c, y, x| encoded.data[(y * w + x) * 3 + c] as f64 / 255.0))
    } else {
        srgb_to_linear(&encoded)
    }
}

/// Writes an 8-bit RGB PNG, gamma-encoding unless `linear` is set. Returns the
/// number of values clipped into `[0, 1]`.
pub fn write_png(path: &Path, img: &Image, linear: bool) -> Result<usize> {
    let (h, w) = img.dims();
    let (bytes, clipped) = if linear {
        let (clamped, clipped) = img.clip_unit();
        let mut data = vec![0u8; h * w * 3];
        for c in 0..3 {
            for (i, v) in clamped.plane(c).iter().enumerate() {
                data[i * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        (data, clipped)
    } else {
        let (enc, clipped) = linear_to_srgb(img);
        (enc.data, clipped)
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(clipped)
}
