use refsep::compositor::{synth_dataset, write_synth_dataset, LayerTriple, SynthConfig};
use refsep::datapipe::{
    draw_patch, extract_patches, extract_patches_from, index_dataset, DatasetKind, PatchCount, PatchSpec, Split,
};
use refsep::imagecore::{write_png, LinearImage};
use refsep::rng::keyed_rng;
use refsep::Error;
use std::path::Path;

fn pattern(h: usize, w: usize, k: usize) -> LinearImage {
    LinearImage::from_fn(h, w, |c, y, x| ((x * 3 + y * 5 + c * 7 + k) % 29) as f64 / 28.0).unwrap()
}

fn write_real_pair(root: &Path, id: &str, h: usize, w: usize) {
    write_png(&root.join("blended").join(format!("{id}.png")), &pattern(h, w, 0), false).unwrap();
    write_png(&root.join("transmission").join(format!("{id}.png")), &pattern(h, w, 1), false).unwrap();
}

#[test]
fn real_layout_has_no_reflection() {
    let dir = tempfile::tempdir().unwrap();
    for id in ["0002", "0001", "0003"] {
        write_real_pair(dir.path(), id, 20, 24);
    }
    let index = index_dataset(dir.path(), DatasetKind::Real, Split::Train).unwrap();
    let ids: Vec<_> = index.entries.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["0001", "0002", "0003"]);
    assert!(index.entries.iter().all(|e| e.is_real && e.reflection.is_none() && e.dims == (20, 24)));
    let loaded = index.load_all().unwrap();
    assert!(loaded.iter().all(|t| t.reflection.is_none()));
}

#[test]
fn missing_transmission_names_the_id() {
    let dir = tempfile::tempdir().unwrap();
    write_real_pair(dir.path(), "0001", 16, 16);
    write_png(&dir.path().join("blended/0003.png"), &pattern(16, 16, 2), false).unwrap();
    let err = index_dataset(dir.path(), DatasetKind::Real, Split::Train).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
    assert!(err.to_string().contains("0003"), "{err}");
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("blended/a.png"), &pattern(16, 16, 0), false).unwrap();
    write_png(&dir.path().join("transmission/a.png"), &pattern(16, 18, 0), false).unwrap();
    assert!(index_dataset(dir.path(), DatasetKind::Real, Split::Test).is_err());
}

#[test]
fn split_files_select_ids() {
    let dir = tempfile::tempdir().unwrap();
    for id in ["a", "b", "c"] {
        write_real_pair(dir.path(), id, 16, 16);
    }
    std::fs::write(dir.path().join("train.txt"), "c\na\n").unwrap();
    std::fs::write(dir.path().join("test.txt"), "b\n").unwrap();
    let train = index_dataset(dir.path(), DatasetKind::Real, Split::Train).unwrap();
    assert_eq!(train.entries.iter().map(|e| e.id.clone()).collect::<Vec<_>>(), ["a", "c"]);
    let test = index_dataset(dir.path(), DatasetKind::Real, Split::Test).unwrap();
    assert_eq!(test.len(), 1);
    assert!(extract_patches(&test, &PatchSpec::default(), 0).is_err());
    std::fs::write(dir.path().join("test.txt"), "zzz\n").unwrap();
    assert!(index_dataset(dir.path(), DatasetKind::Real, Split::Test).unwrap_err().to_string().contains("zzz"));
}

#[test]
fn compositor_output_indexes_as_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { seed: 3, ..Default::default() };
    let samples = synth_dataset(&[pattern(20, 20, 0)], &[pattern(20, 20, 5)], 3, &cfg).unwrap();
    write_synth_dataset(dir.path(), &samples, &cfg).unwrap();
    let index = index_dataset(dir.path(), DatasetKind::Synthetic, Split::Train).unwrap();
    assert_eq!(index.len(), 3);
    assert!(index.entries.iter().all(|e| !e.is_real && e.reflection.is_some()));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 2 + 3);
    // Re-reading after 8-bit quantization keeps additivity to within a few levels.
    for t in index.load_all().unwrap() {
        assert!(t.reconstruction_error().unwrap() < 0.02);
    }
}

#[test]
fn large_source_resizes_then_crops_aligned() {
    let (h, w) = (1000, 2000);
    let ramp = LinearImage::from_fn(h, w, |c, y, x| (x as f64 / (w - 1) as f64) * 0.8 + y as f64 * 1e-5 + c as f64 * 0.01)
        .unwrap();
    let half = LinearImage::new(ramp.map(|v| v * 0.5)).unwrap();
    let triple = LayerTriple::real("big", ramp, half).unwrap();
    let spec = PatchSpec { short_side_range: (256, 256), count: PatchCount::PerImage(2) };
    let patches = extract_patches_from(std::slice::from_ref(&triple), &spec, 11).unwrap();
    assert_eq!(patches.len(), 2);
    for (p, patch) in patches.iter().enumerate() {
        assert_eq!(patch.dims(), (256, 256));
        assert!(patch.reflection.is_none());
        // Same window in both layers: the transmission is exactly half the input.
        for (i, t) in patch.input.data().iter().zip(patch.transmission.data()) {
            assert!((i * 0.5 - t).abs() < 1e-6);
        }
        let draw = draw_patch((h, w), &spec, &mut keyed_rng(11, &[0x5041_5443, 0, p as u64]));
        assert_eq!(draw.resized, (256, 512));
        assert_eq!(draw.top, 0);
        // Column j of the crop samples source x = (left + j + 0.5) * 2000 / 512 - 0.5.
        for j in [10usize, 128, 240] {
            let x = (draw.left + j) as f64 * 2000.0 / 512.0 + 0.5 * 2000.0 / 512.0 - 0.5;
            let expected = x / (w - 1) as f64 * 0.8 + 0.01;
            assert!((patch.input.get(1, 0, j) - expected).abs() < 2e-3, "column {j}");
        }
    }
}

#[test]
fn patches_are_deterministic_and_skip_small_sources() {
    let a = LayerTriple::real("a", pattern(70, 90, 0), pattern(70, 90, 1)).unwrap();
    let small = LayerTriple::real("s", pattern(40, 90, 0), pattern(40, 90, 1)).unwrap();
    let spec = PatchSpec { short_side_range: (64, 96), count: PatchCount::PerImage(3) };
    let one = extract_patches_from(&[a.clone(), small.clone()], &spec, 5).unwrap();
    let two = extract_patches_from(&[a, small], &spec, 5).unwrap();
    assert_eq!(one.len(), 3);
    assert_eq!(one, two);
    assert!(one.iter().all(|p| p.dims().0 == p.dims().1 && (64..=96).contains(&p.dims().0)));
}

#[test]
fn short_sides_are_uniform() {
    let spec = PatchSpec::default();
    let bins = 9;
    let draws = 4500;
    let mut hist = vec![0usize; bins];
    for i in 0..draws {
        let d = draw_patch((600, 800), &spec, &mut keyed_rng(2024, &[0x5041_5443, i, 0]));
        assert!((256..=480).contains(&d.short_side));
        hist[(d.short_side - 256) / 25] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of χ² with 8 degrees of freedom.
    assert!(chi2 < 26.12, "chi2 = {chi2}, histogram {hist:?}");
}
