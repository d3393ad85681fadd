mod common;

use refsep::harness::{evaluate, load_eval_items, report, score, EvalItem, Passthrough, Report, Separator, INPUT_ROW};
use refsep::imagecore::{write_png, LinearImage};
use refsep::trainer::{Model, TrainConfig, TrainState};
use refsep::Result;
use std::collections::HashMap;

/// Looks the answer up by input; scores perfectly.
struct Oracle(Vec<EvalItem>);

impl Separator for Oracle {
    fn separate(&self, img: &LinearImage) -> Result<(LinearImage, LinearImage)> {
        let item = self.0.iter().find(|i| &i.input == img).expect("known input");
        let t = item.transmission.clone().expect("ground truth");
        let (h, w) = t.dims();
        Ok((t, LinearImage::filled(h, w, 0.0)?))
    }
}

/// Halves the input.
struct Dimmer;

impl Separator for Dimmer {
    fn separate(&self, img: &LinearImage) -> Result<(LinearImage, LinearImage)> {
        let half = LinearImage::new(img.map(|v| v * 0.5))?;
        Ok((half.clone(), half))
    }
}

fn items(n: u64, seed: u64) -> Vec<EvalItem> {
    common::synthetic_samples(n as usize, 24, seed).iter().map(EvalItem::from).collect()
}

#[test]
fn identity_model_matches_the_input_row() {
    let data = items(3, 1);
    let run = evaluate(&Passthrough, "identity", "synthetic", None, &data).unwrap();
    assert_eq!(run.model, run.baseline);
    let rep = report(&[run], true).unwrap();
    let (a, b) = (rep.get(INPUT_ROW, "synthetic").unwrap(), rep.get("identity", "synthetic").unwrap());
    assert_eq!((a.psnr, a.ssim), (b.psnr, b.ssim));
}

#[test]
fn oracle_scores_perfectly() {
    let data = items(3, 2);
    let run = evaluate(&Oracle(data.clone()), "oracle", "synthetic", None, &data).unwrap();
    assert_eq!(run.model.mean_psnr, 99.0);
    assert!((run.model.mean_ssim - 1.0).abs() < 1e-12);
    assert!(run.baseline.mean_psnr < 99.0);
    assert_eq!(run.model.color_space, "gamma-encoded 8-bit");
}

#[test]
fn items_without_ground_truth_are_skipped_and_reported() {
    let mut data = items(3, 3);
    data[1].transmission = None;
    let run = evaluate(&Dimmer, "dim", "real", None, &data).unwrap();
    assert_eq!(run.skipped, vec![data[1].id.clone()]);
    assert_eq!(run.model.per_image.len(), 2);
    let rep = report(&[run], true).unwrap();
    assert!(rep.rows.iter().all(|r| r.skipped == 1 && r.images == 2));
}

#[test]
fn means_agree_with_per_image_scores() {
    let data = items(4, 4);
    let run = evaluate(&Dimmer, "dim", "synthetic", None, &data).unwrap();
    let mut psnr = 0.0;
    let mut ssim = 0.0;
    for (item, s) in data.iter().zip(&run.model.per_image) {
        let (t, _) = Dimmer.separate(&item.input).unwrap();
        let (p, q) = score(&t, item.transmission.as_ref().unwrap()).unwrap();
        assert_eq!((s.id.as_str(), s.psnr, s.ssim), (item.id.as_str(), p, q));
        psnr += p;
        ssim += q;
    }
    assert!((run.model.mean_psnr - psnr / 4.0).abs() < 1e-9);
    assert!((run.model.mean_ssim - ssim / 4.0).abs() < 1e-9);
}

#[test]
fn input_row_does_not_depend_on_the_model() {
    let data = items(3, 5);
    let a = evaluate(&Dimmer, "dim", "synthetic", None, &data).unwrap();
    let b = evaluate(&Passthrough, "identity", "synthetic", None, &data).unwrap();
    assert_eq!(a.baseline, b.baseline);
    let (ra, rb) = (report(&[a], true).unwrap(), report(&[b], true).unwrap());
    assert_eq!(ra.rows[0], rb.rows[0]);
    assert_eq!(ra.rows[0].method, INPUT_ROW);
}

#[test]
fn single_run_gives_a_two_row_table() {
    let vgg = common::standin_vgg();
    let state = TrainState::new(TrainConfig::default(), vgg.checksum()).unwrap();
    let model = Model::new(&state, vgg, "ours").unwrap();
    let before = model.generator.clone();
    let run = evaluate(&model, "ours", "synthetic", Some("final.ckpt"), &items(2, 6)).unwrap();
    assert_eq!(model.generator, before);
    let rep = report(&[run], true).unwrap();
    assert_eq!(rep.methods(), vec![INPUT_ROW.to_string(), "ours".to_string()]);
    let table = rep.to_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert!(lines[0].contains("synthetic") && lines[1].contains("SSIM") && lines[1].contains("PSNR"));
    assert!(lines[3].starts_with(INPUT_ROW) && lines[4].starts_with("ours"));
}

#[test]
fn ablation_table_has_one_row_per_variant() {
    let names = ["Ours w/o L_feat", "Ours w/o L_adv", "Ours w/o L_excl", "Ours L_adv only", "Ours complete"];
    let mut runs = Vec::new();
    for (dataset, seed) in [("synthetic", 7), ("real", 8)] {
        let data = items(2, seed);
        for (i, name) in names.iter().enumerate() {
            let sep: &dyn Separator = if i % 2 == 0 { &Dimmer } else { &Passthrough };
            runs.push(evaluate(sep, name, dataset, None, &data).unwrap());
        }
    }
    let rep = report(&runs, false).unwrap();
    assert_eq!(rep.methods(), names.map(String::from).to_vec());
    assert_eq!(rep.datasets(), vec!["synthetic".to_string(), "real".to_string()]);
    assert_eq!(rep.to_table().lines().count(), 3 + 5);
    assert!(rep.get(INPUT_ROW, "real").is_none());
}

#[test]
fn csv_round_trips() {
    let data = items(2, 9);
    let runs = [
        evaluate(&Dimmer, "dim", "a", None, &data).unwrap(),
        evaluate(&Passthrough, "id", "b", None, &data).unwrap(),
    ];
    let rep = report(&runs, true).unwrap();
    let text = rep.to_csv().unwrap();
    assert!(text.starts_with("method,dataset,ssim,psnr,images,skipped"));
    assert_eq!(Report::from_csv(&text).unwrap(), rep);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/report.csv");
    rep.write_csv(&path).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap(), text);
    assert!(report(&[], true).is_err());
}

#[test]
fn eval_items_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = items(3, 10);
    for (k, item) in data.iter().enumerate() {
        write_png(&dir.path().join("blended").join(format!("{}.png", item.id)), &item.input, false).unwrap();
        if k != 2 {
            let t = item.transmission.as_ref().unwrap();
            write_png(&dir.path().join("transmission").join(format!("{}.png", item.id)), t, false).unwrap();
        }
    }
    let loaded = load_eval_items(dir.path(), None, false).unwrap();
    let by_id: HashMap<_, _> = loaded.iter().map(|i| (i.id.clone(), i)).collect();
    assert_eq!(loaded.len(), 3);
    assert!(by_id[&data[2].id].transmission.is_none());
    assert!(by_id[&data[0].id].transmission.is_some());

    let split = dir.path().join("test.txt");
    std::fs::write(&split, format!("# ids\n{}\n", data[1].id)).unwrap();
    let subset = load_eval_items(dir.path(), Some(&split), false).unwrap();
    assert_eq!(subset.len(), 1);
    assert_eq!(subset[0].id, data[1].id);
    std::fs::write(&split, "missing\n").unwrap();
    assert!(load_eval_items(dir.path(), Some(&split), false).is_err());
}
