//! Evaluation over test sets and comparison tables.

use crate::compositor::LayerTriple;
use crate::error::{Error, Result};
use crate::imagecore::{psnr, quantized_display, read_png, ssim, Image, ImageScore, LinearImage, MetricReport};
use crate::trainer::Model;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Metrics are computed on what a viewer of the exported PNGs sees.
pub const EVAL_COLOR_SPACE: &str = "gamma-encoded 8-bit";
pub const INPUT_ROW: &str = "Input";

/// Anything that splits an image into `(transmission, reflection)`.
pub trait Separator {
    fn separate(&self, img: &LinearImage) -> Result<(LinearImage, LinearImage)>;
}

impl Separator for Model<'_> {
    fn separate(&self, img: &LinearImage) -> Result<(LinearImage, LinearImage)> {
        Model::separate(self, img)
    }
}

/// Returns the input unchanged as the transmission.
pub struct Passthrough;

impl Separator for Passthrough {
    fn separate(&self, img: &LinearImage) -> Result<(LinearImage, LinearImage)> {
        let (h, w) = img.dims();
        Ok((img.clone(), LinearImage::filled(h, w, 0.0)?))
    }
}

/// One test image; the ground truth may be missing.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub input: LinearImage,
    pub transmission: Option<LinearImage>,
}

impl From<&LayerTriple> for EvalItem {
    fn from(t: &LayerTriple) -> Self {
        Self { id: t.id.clone(), input: t.input.clone(), transmission: Some(t.transmission.clone()) }
    }
}

/// Loads `root/blended/*.png` with the matching `root/transmission/*.png`
/// where present. A split file, if given, lists the ids to keep.
pub fn load_eval_items(root: &Path, split_file: Option<&Path>, linear: bool) -> Result<Vec<EvalItem>> {
    let blended = root.join("blended");
    let mut stems = BTreeMap::new();
    for entry in std::fs::read_dir(&blended).map_err(|e| Error::io(&blended, e))? {
        let path = entry.map_err(|e| Error::io(&blended, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string(), path);
            }
        }
    }
    let ids: Vec<String> = match split_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let ids: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| l.strip_suffix(".png").unwrap_or(l).to_string())
                .collect();
            if let Some(id) = ids.iter().find(|id| !stems.contains_key(*id)) {
                return Err(Error::Dataset(format!("sample {id} listed in {} has no blended image", p.display())));
            }
            ids
        }
        None => stems.keys().cloned().collect(),
    };
    ids.into_iter()
        .map(|id| {
            let input = read_png(&stems[&id], linear)?;
            let t_path = root.join("transmission").join(format!("{id}.png"));
            let transmission = if t_path.is_file() { Some(read_png(&t_path, linear)?) } else { None };
            Ok(EvalItem { id, input, transmission })
        })
        .collect()
}

/// `(psnr, ssim)` between the 8-bit gamma-encoded renderings of two images.
pub fn score(pred: &Image, truth: &Image) -> Result<(f64, f64)> {
    let (p, t) = (quantized_display(pred), quantized_display(truth));
    Ok((psnr(&p, &t)?, ssim(&p, &t)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub method: String,
    pub dataset: String,
    pub checkpoint: Option<String>,
    pub model: MetricReport,
    /// The input itself scored as the transmission.
    pub baseline: MetricReport,
    /// Ids without ground truth, left out of both reports.
    pub skipped: Vec<String>,
}

pub fn evaluate(
    separator: &dyn Separator,
    method: &str,
    dataset: &str,
    checkpoint: Option<&str>,
    items: &[EvalItem],
) -> Result<EvalRun> {
    let mut model = Vec::new();
    let mut baseline = Vec::new();
    let mut skipped = Vec::new();
    for item in items {
        let Some(truth) = &item.transmission else {
            log::warn!("{}: no ground-truth transmission, skipped", item.id);
            skipped.push(item.id.clone());
            continue;
        };
        let (t, _) = separator.separate(&item.input)?;
        let (p, s) = score(&t, truth)?;
        model.push(ImageScore { id: item.id.clone(), psnr: p, ssim: s });
        let (p, s) = score(&item.input, truth)?;
        baseline.push(ImageScore { id: item.id.clone(), psnr: p, ssim: s });
    }
    Ok(EvalRun {
        method: method.to_string(),
        dataset: dataset.to_string(),
        checkpoint: checkpoint.map(str::to_string),
        model: MetricReport::from_scores(model, EVAL_COLOR_SPACE),
        baseline: MetricReport::from_scores(baseline, EVAL_COLOR_SPACE),
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub ssim: f64,
    pub psnr: f64,
    pub images: usize,
    pub skipped: usize,
}

/// Method × dataset means, stored long-form.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn first_seen<'a>(values: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values {
        if !out.contains(v) {
            out.push(v.clone());
        }
    }
    out
}

/// Collects runs into a report. With `input_row`, each dataset also gets the
/// model-independent Input baseline, placed first.
pub fn report(runs: &[EvalRun], input_row: bool) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Config("a report needs at least one run".into()));
    }
    let mut rows = Vec::new();
    if input_row {
        for dataset in first_seen(runs.iter().map(|r| &r.dataset)) {
            let run = runs.iter().find(|r| r.dataset == dataset).expect("dataset seen in runs");
            rows.push(ReportRow {
                method: INPUT_ROW.to_string(),
                dataset,
                ssim: run.baseline.mean_ssim,
                psnr: run.baseline.mean_psnr,
                images: run.baseline.per_image.len(),
                skipped: run.skipped.len(),
            });
        }
    }
    for run in runs {
        rows.push(ReportRow {
            method: run.method.clone(),
            dataset: run.dataset.clone(),
            ssim: run.model.mean_ssim,
            psnr: run.model.mean_psnr,
            images: run.model.per_image.len(),
            skipped: run.skipped.len(),
        });
    }
    Ok(Report { rows })
}

impl Report {
    pub fn methods(&self) -> Vec<String> {
        first_seen(self.rows.iter().map(|r| &r.method))
    }

    pub fn datasets(&self) -> Vec<String> {
        first_seen(self.rows.iter().map(|r| &r.dataset))
    }

    pub fn get(&self, method: &str, dataset: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.dataset == dataset)
    }

    /// Aligned text table: one row per method, SSIM and PSNR per dataset.
    pub fn to_table(&self) -> String {
        let datasets = self.datasets();
        let methods = self.methods();
        let mut cells: Vec<Vec<String>> = Vec::new();
        let mut head = vec![String::new()];
        let mut sub = vec!["Method".to_string()];
        for d in &datasets {
            head.extend([d.clone(), String::new()]);
            sub.extend(["SSIM".to_string(), "PSNR".to_string()]);
        }
        cells.push(head);
        cells.push(sub);
        for m in &methods {
            let mut line = vec![m.clone()];
            for d in &datasets {
                match self.get(m, d) {
                    Some(r) => line.extend([format!("{:.3}", r.ssim), format!("{:.2}", r.psnr)]),
                    None => line.extend(["-".to_string(), "-".to_string()]),
                }
            }
            cells.push(line);
        }
        let ncol = cells[0].len();
        let widths: Vec<usize> = (0..ncol).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, line) in cells.iter().enumerate() {
            let mut text = format!("{:<w$}", line[0], w = widths[0]);
            for (c, cell) in line.iter().enumerate().skip(1) {
                let _ = write!(text, "  {:>w$}", cell, w = widths[c]);
            }
            out.push_str(text.trim_end());
            out.push('\n');
            if i == 1 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol - 1)));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
