use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use refsep::compositor::{synth_dataset, write_synth_dataset, SynthConfig};
use refsep::datapipe::{extract_patches, index_dataset, DatasetKind, PatchSpec, Split};
use refsep::harness::{evaluate, load_eval_items, report};
use refsep::imagecore::{read_png, write_png, LinearImage};
use refsep::perception::{load_vgg, save_vgg, Vgg19, STANDIN_SEED};
use refsep::trainer::{self, Model, TrainConfig, TrainState};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "refsep", version, about = "Single-image reflection separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Composite synthetic (blended, transmission, reflection) triples.
    Synth(SynthArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Separate images with a trained checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint on a test set.
    Eval(EvalArgs),
    /// Write deterministic stand-in VGG-19 weights (for tests and demos only).
    StandinVgg {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct VggArgs {
    /// Converted VGG-19 weights (see tools/export_vgg19.py).
    #[arg(long)]
    vgg: PathBuf,
    /// Expected SHA-256 of the weights; defaults to the `.sha256` sidecar.
    #[arg(long)]
    vgg_sha256: Option<String>,
}

impl VggArgs {
    fn load(&self) -> Result<Vgg19<f32>> {
        load_vgg(&self.vgg, self.vgg_sha256.as_deref()).with_context(|| format!("loading {}", self.vgg.display()))
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of PNGs used as transmission layers.
    #[arg(long)]
    transmission_dir: PathBuf,
    /// Directory of PNGs used as reflection layers.
    #[arg(long)]
    reflection_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// TOML file with compositor settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with `[train]` and optional `[patches]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic dataset root (blended/, transmission/, reflection/).
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Real dataset root (blended/, transmission/).
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    vgg: VggArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_feat: bool,
    #[arg(long)]
    no_adv: bool,
    #[arg(long)]
    no_excl: bool,
    #[arg(long)]
    no_lr: bool,
    #[arg(long)]
    no_grad_norm: bool,
    /// Bitwise reproducible training. Training is always single-threaded and
    /// index-keyed, so this only records the request.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    vgg: VggArgs,
    #[arg(long)]
    out: PathBuf,
    /// Input PNGs.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    vgg: VggArgs,
    /// Dataset root with blended/ and transmission/.
    #[arg(long)]
    dataset: PathBuf,
    /// File listing the ids to evaluate.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    csv: PathBuf,
    /// Method name in the report; defaults to the checkpoint file stem.
    #[arg(long)]
    name: Option<String>,
    /// Print the aligned text table.
    #[arg(long)]
    table: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    train: TrainConfig,
    /// Train on patches; whole images are used when absent.
    patches: Option<PatchSpec>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_pool(dir: &Path) -> Result<Vec<LinearImage>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        bail!("no PNG files in {}", dir.display());
    }
    files.iter().map(|p| read_png(p, false).with_context(|| format!("reading {}", p.display()))).collect()
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let t_pool = load_pool(&args.transmission_dir)?;
    let r_pool = load_pool(&args.reflection_dir)?;
    let samples = synth_dataset(&t_pool, &r_pool, args.count, &cfg)?;
    write_synth_dataset(&args.out, &samples, &cfg)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let file: TrainFile = match &args.config {
        Some(p) => read_toml(p)?,
        None => TrainFile::default(),
    };
    let mut cfg = file.train;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let t = &mut cfg.toggles;
    t.feature &= !args.no_feat;
    t.adversarial &= !args.no_adv;
    t.exclusion &= !args.no_excl;
    t.reflection &= !args.no_lr;
    t.grad_norm &= !args.no_grad_norm;
    if args.deterministic {
        log::info!("deterministic mode (training is single-threaded with index-keyed randomness)");
    }
    cfg.validate()?;

    let vgg = args.vgg.load()?;
    let load = |root: &Option<PathBuf>, kind| -> Result<Vec<_>> {
        let Some(root) = root else { return Ok(Vec::new()) };
        let index = index_dataset(root, kind, Split::Train)?;
        Ok(match &file.patches {
            Some(spec) => extract_patches(&index, spec, cfg.seed)?,
            None => index.load_all()?,
        })
    };
    let synthetic = load(&args.synthetic, DatasetKind::Synthetic)?;
    let real = load(&args.real, DatasetKind::Real)?;
    if synthetic.is_empty() && real.is_empty() {
        bail!("no training data: pass --synthetic and/or --real");
    }
    log::info!("{} synthetic and {} real training samples", synthetic.len(), real.len());

    let outcome = match &args.resume {
        Some(p) => {
            let state = TrainState::load(p).with_context(|| format!("loading {}", p.display()))?;
            trainer::resume(state, &cfg, &vgg, &synthetic, &real, Some(&args.out))?
        }
        None => trainer::train(&cfg, &vgg, &synthetic, &real, Some(&args.out))?,
    };
    if let Some(last) = outcome.epochs.last() {
        println!("epoch {}: mean total loss {:.6}", last.epoch, last.total);
    }
    println!("checkpoint: {}", trainer::checkpoint_path(&args.out, None).display());
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let vgg = args.vgg.load()?;
    let model = Model::from_checkpoint(&args.checkpoint, &vgg)?;
    for path in &args.images {
        let img = read_png(path, false).with_context(|| format!("reading {}", path.display()))?;
        let (t, r) = model.separate(&img)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).context("input file has no stem")?;
        write_png(&args.out.join(format!("{stem}_T.png")), &t, false)?;
        write_png(&args.out.join(format!("{stem}_R.png")), &r, false)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let vgg = args.vgg.load()?;
    let model = Model::from_checkpoint(&args.checkpoint, &vgg)?;
    let items = load_eval_items(&args.dataset, args.split.as_deref(), false)?;
    let dataset = args.dataset.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = args.name.clone().unwrap_or_else(|| model.name.clone());
    let checkpoint = args.checkpoint.display().to_string();
    let run = evaluate(&model, &name, &dataset, Some(&checkpoint), &items)?;
    if !run.skipped.is_empty() {
        eprintln!("skipped (no ground truth): {}", run.skipped.join(", "));
    }
    let rep = report(std::slice::from_ref(&run), true)?;
    rep.write_csv(&args.csv)?;
    if args.table {
        print!("{}", rep.to_table());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::StandinVgg { out } => {
            let digest = save_vgg(&Vgg19::<f32>::standin(STANDIN_SEED), &out)?;
            println!("{digest}  {}", out.display());
            Ok(())
        }
    }
}
