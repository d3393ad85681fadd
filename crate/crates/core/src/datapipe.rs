//! Dataset ingestion: directory indexing, randomized-resolution patch
//! extraction and the shuffled synthetic/real training stream.

use crate::compositor::LayerTriple;
use crate::error::{Error, Result};
use crate::imagecore::{read_png, Image, LinearImage};
use crate::rng::keyed_rng;
use image::imageops::{self, FilterType};
use image::{ImageDecoder, ImageReader, Rgb32FImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Test => "test.txt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub input: PathBuf,
    pub transmission: PathBuf,
    pub reflection: Option<PathBuf>,
    pub is_real: bool,
    /// `(height, width)` shared by every file of the entry.
    pub dims: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub split: Split,
    pub entries: Vec<DatasetEntry>,
    /// Files hold linear values rather than gamma-encoded ones.
    pub linear: bool,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Reads dimensions and channel count from the header without decoding pixels.
fn probe(path: &Path) -> Result<(usize, usize)> {
    let decode_err = |e: image::ImageError| Error::Decode { path: path.to_path_buf(), message: e.to_string() };
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = reader.with_guessed_format().map_err(|e| Error::io(path, e))?.into_decoder().map_err(decode_err)?;
    let channels = decoder.color_type().channel_count();
    if channels != 3 {
        return Err(Error::Shape(format!("{} has {channels} channels, expected RGB", path.display())));
    }
    let (w, h) = decoder.dimensions();
    Ok((h as usize, w as usize))
}

fn read_split_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.strip_suffix(".png").unwrap_or(l).to_string())
        .collect())
}

/// Indexes `root/blended`, `root/transmission` and (for synthetic data)
/// `root/reflection`, matched by file stem. When `root/<split>.txt` exists
/// only the listed ids are kept; otherwise every sample belongs to the split.
pub fn index_dataset(root: &Path, kind: DatasetKind, split: Split) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let inputs = png_stems(&root.join("blended"))?;
    let transmissions = png_stems(&root.join("transmission"))?;
    let reflections = match kind {
        DatasetKind::Synthetic => png_stems(&root.join("reflection"))?,
        DatasetKind::Real => BTreeMap::new(),
    };
    for id in transmissions.keys().chain(reflections.keys()) {
        if !inputs.contains_key(id) {
            return Err(Error::Dataset(format!("sample {id} has no blended image")));
        }
    }

    let split_file = root.join(split.file_name());
    let ids: Vec<String> = if split_file.is_file() {
        let listed = read_split_ids(&split_file)?;
        if let Some(id) = listed.iter().find(|id| !inputs.contains_key(*id)) {
            return Err(Error::Dataset(format!("sample {id} listed in {} has no blended image", split.file_name())));
        }
        let mut listed = listed;
        listed.sort();
        listed.dedup();
        listed
    } else {
        inputs.keys().cloned().collect()
    };

    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let input = inputs[&id].clone();
        let transmission = transmissions
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("sample {id} has no transmission image")))?;
        let reflection = match kind {
            DatasetKind::Synthetic => Some(
                reflections
                    .get(&id)
                    .cloned()
                    .ok_or_else(|| Error::Dataset(format!("sample {id} has no reflection image")))?,
            ),
            DatasetKind::Real => None,
        };
        let dims = probe(&input)?;
        for other in std::iter::once(&transmission).chain(reflection.as_ref()) {
            let d = probe(other)?;
            if d != dims {
                return Err(Error::Dataset(format!(
                    "sample {id}: {} is {}x{}, blended image is {}x{}",
                    other.display(),
                    d.0,
                    d.1,
                    dims.0,
                    dims.1
                )));
            }
        }
        entries.push(DatasetEntry { id, input, transmission, reflection, is_real: kind == DatasetKind::Real, dims });
    }
    Ok(DatasetIndex { root: root.to_path_buf(), kind, split, entries, linear: false })
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, entry: &DatasetEntry) -> Result<LayerTriple> {
        let input = read_png(&entry.input, self.linear)?;
        let transmission = read_png(&entry.transmission, self.linear)?;
        let reflection = entry.reflection.as_deref().map(|p| read_png(p, self.linear)).transpose()?;
        LayerTriple::loaded(entry.id.clone(), input, transmission, reflection, entry.is_real)
    }

    pub fn load_all(&self) -> Result<Vec<LayerTriple>> {
        self.entries.iter().map(|e| self.load(e)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchCount {
    PerImage(usize),
    /// Spread over the images as evenly as possible, earlier images first.
    Total(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub short_side_range: (usize, usize),
    pub count: PatchCount,
}

/// Sources whose short side is below this are skipped.
pub const MIN_SOURCE_SIDE: usize = 64;

impl Default for PatchSpec {
    fn default() -> Self {
        Self { short_side_range: (256, 480), count: PatchCount::Total(500) }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.short_side_range;
        if !(MIN_SOURCE_SIDE <= lo && lo <= hi && hi <= 1024) {
            return Err(Error::Config(format!("short side range ({lo}, {hi}) must satisfy 64 <= min <= max <= 1024")));
        }
        Ok(())
    }

    fn count_for(&self, image: usize, images: usize) -> usize {
        match self.count {
            PatchCount::PerImage(n) => n,
            PatchCount::Total(n) => n / images + usize::from(image < n % images),
        }
    }
}

/// `(height, width)` after scaling the short side to `short`, rounding the long side.
pub fn resized_dims(h: usize, w: usize, short: usize) -> (usize, usize) {
    if h <= w {
        (short, ((w as f64 * short as f64 / h as f64).round() as usize).max(short))
    } else {
        (((h as f64 * short as f64 / w as f64).round() as usize).max(short), short)
    }
}

/// Bilinear (triangle-filter) resize in linear space.
pub fn resize(img: &LinearImage, h: usize, w: usize) -> Result<LinearImage> {
    if img.dims() == (h, w) {
        return Ok(img.clone());
    }
    let (ih, iw) = img.dims();
    let mut buf = Rgb32FImage::new(iw as u32, ih as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        px.0 = [0, 1, 2].map(|c| img.get(c, y, x) as f32);
    }
    let out = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
    LinearImage::new(Image::from_fn(h, w, |c, y, x| (out.get_pixel(x as u32, y as u32).0[c] as f64).clamp(0.0, 1.0)))
}

fn crop(img: &LinearImage, top: usize, left: usize, side: usize) -> Result<LinearImage> {
    LinearImage::new(Image::from_fn(side, side, |c, y, x| img.get(c, top + y, left + x)))
}

/// Where one patch comes from: the drawn short side, the resized extent and
/// the square crop window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchDraw {
    pub short_side: usize,
    pub resized: (usize, usize),
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

pub fn draw_patch(dims: (usize, usize), spec: &PatchSpec, rng: &mut impl Rng) -> PatchDraw {
    let (lo, hi) = spec.short_side_range;
    let s = rng.random_range(lo..=hi);
    let resized = resized_dims(dims.0, dims.1, s);
    let side = s.min(resized.0.max(resized.1));
    let top = rng.random_range(0..=resized.0 - side);
    let left = rng.random_range(0..=resized.1 - side);
    PatchDraw { short_side: s, resized, top, left, side }
}

/// Cuts identically placed patches from every layer of `triple`.
pub fn patch_from_triple(triple: &LayerTriple, draw: &PatchDraw, id: String) -> Result<LayerTriple> {
    let cut = |img: &LinearImage| -> Result<LinearImage> {
        crop(&resize(img, draw.resized.0, draw.resized.1)?, draw.top, draw.left, draw.side)
    };
    let reflection = triple.reflection.as_ref().map(cut).transpose()?;
    LayerTriple::loaded(id, cut(&triple.input)?, cut(&triple.transmission)?, reflection, triple.is_real)
}

/// Patches from in-memory samples. Patch `p` of image `i` depends only on
/// `(seed, i, p)`.
pub fn extract_patches_from(samples: &[LayerTriple], spec: &PatchSpec, seed: u64) -> Result<Vec<LayerTriple>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (i, triple) in samples.iter().enumerate() {
        let (h, w) = triple.dims();
        if h.min(w) < MIN_SOURCE_SIDE {
            log::warn!("skipping {}: {h}x{w} is below the {MIN_SOURCE_SIDE}px short-side minimum", triple.id);
            continue;
        }
        for p in 0..spec.count_for(i, samples.len()) {
            let mut rng = keyed_rng(seed, &[0x5041_5443, i as u64, p as u64]);
            let draw = draw_patch((h, w), spec, &mut rng);
            out.push(patch_from_triple(triple, &draw, format!("{}_p{p:03}", triple.id))?);
        }
    }
    Ok(out)
}

/// Loads a training split and extracts patches from it.
pub fn extract_patches(index: &DatasetIndex, spec: &PatchSpec, seed: u64) -> Result<Vec<LayerTriple>> {
    if index.split != Split::Train {
        return Err(Error::Dataset("patches are only extracted from the training split".into()));
    }
    extract_patches_from(&index.load_all()?, spec, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleRef {
    Synthetic(usize),
    Real(usize),
}

/// Flat shuffle of the union of two pools, reshuffled per epoch.
#[derive(Clone, Copy, Debug)]
pub struct MixedStream<'a> {
    pub synthetic: &'a [LayerTriple],
    pub real: &'a [LayerTriple],
    pub seed: u64,
}

impl<'a> MixedStream<'a> {
    pub fn new(synthetic: &'a [LayerTriple], real: &'a [LayerTriple], seed: u64) -> Result<Self> {
        if synthetic.is_empty() && real.is_empty() {
            return Err(Error::Dataset("both the synthetic and the real pool are empty".into()));
        }
        Ok(Self { synthetic, real, seed })
    }

    pub fn epoch_len(&self) -> usize {
        self.synthetic.len() + self.real.len()
    }

    pub fn order(&self, epoch: u64) -> Vec<SampleRef> {
        let mut refs: Vec<SampleRef> =
            (0..self.synthetic.len()).map(SampleRef::Synthetic).chain((0..self.real.len()).map(SampleRef::Real)).collect();
        refs.shuffle(&mut keyed_rng(self.seed, &[0x4550_4f43, epoch]));
        refs
    }

    pub fn get(&self, r: SampleRef) -> &'a LayerTriple {
        match r {
            SampleRef::Synthetic(i) => &self.synthetic[i],
            SampleRef::Real(i) => &self.real[i],
        }
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = &'a LayerTriple> + '_ {
        self.order(epoch).into_iter().map(move |r| self.get(r))
    }
}
