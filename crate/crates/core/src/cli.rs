//! Command-line front end.
//!
//! Every command writes its resolved settings to `config.json` in its output
//! directory; passing that file back with `--config` reruns the command.
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::autonet::Fusion;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_atomic, write_json};
use crate::harmonize::{harmonize_case, HarmonizeOptions};
use crate::infer::{argmax_mask, plan_windows, sliding_infer, DEFAULT_OVERLAP};
use crate::masking::{expand_mask, impute_zero, make_grid, sample_mask_per_channel};
use crate::metrics::score;
use crate::nifti::{read_nifti_as, write_nifti};
use crate::phantom::{generate_corpus, load_corpus, read_corpus_manifest, CaseEntry, CorpusManifest, PhantomConfig, CORPUS_MANIFEST};
use crate::register::MiConfig;
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::trainer::{
    finetune, linear_probe, load_checkpoint, pretrain_with, save_checkpoint, validation_split, write_curve_csv,
    Checkpoint, FreezeSpec, Imputation, TrainConfig, TrainOutcome, DEFAULT_PROBE_K,
};
use crate::volume::{concat_channels, random_crop, spacing_from_xyz, ChannelLabel, Volume};

pub const SEED_ENV: &str = "PETMAE_SEED";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CURVE_FILE: &str = "curve.csv";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "petmae", version, about = "Masked-autoencoder pretraining for paired PET/CT volumes")]
pub struct Cli {
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic PET/CT phantom corpus.
    Phantom(PhantomArgs),
    /// Crop, resample, normalize and stack a corpus.
    Harmonize(HarmonizeArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(PretrainArgs),
    /// Segmentation fine-tuning on a fraction of the training split.
    Finetune(FinetuneArgs),
    /// K-shot linear probing of the output projection.
    Probe(ProbeArgs),
    /// Sliding-window segmentation of validation cases.
    Infer(InferArgs),
    /// Dice / HD95 of predicted masks.
    Eval(EvalArgs),
    /// Masked / reconstructed / original axial slices as PGM images.
    ReconDemo(ReconDemoArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 70)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `Z Y X` voxels.
    #[arg(long, num_args = 3)]
    pub shape: Option<Vec<usize>>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Target spacing `X Y Z` in mm.
    #[arg(long, num_args = 3, default_values_t = [2.0, 2.0, 3.0])]
    pub spacing: Vec<f64>,
    /// Rigidly register PET to CT first.
    #[arg(long)]
    pub register: bool,
    #[arg(long, default_value_t = crate::volume::DEFAULT_BLANK_THRESHOLD_HU, allow_hyphen_values = true)]
    pub threshold: f64,
    #[arg(long, default_value_t = crate::volume::DEFAULT_BLANK_MARGIN)]
    pub margin: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    EarlyConcat,
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImputationArg {
    Zero,
    Token,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `Z Y X` crop.
    #[arg(long, num_args = 3)]
    pub crop: Option<Vec<usize>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    pub imputation: Option<ImputationArg>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Resume from a checkpoint directory.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long)]
    pub freeze_all: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PROBE_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: f64,
    /// Case ids to segment; defaults to the checkpoint's validation cases, or all.
    #[arg(long, num_args = 1..)]
    pub cases: Option<Vec<usize>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with `pred_<id>.nii` files.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconDemoArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub case: usize,
    /// Masking ratios for CT and PET.
    #[arg(long, num_args = 2, default_values_t = [0.5, 0.5])]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Resolved settings of each command, as echoed to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRun {
    pub out: PathBuf,
    pub n: usize,
    pub seed: u64,
    pub phantom: PhantomConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizeRun {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub options: HarmonizeOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub mode: TrainMode,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub init: Option<PathBuf>,
    pub fraction: f64,
    pub k: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRun {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub overlap: f64,
    pub window: [usize; 3],
    pub cases: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub pred: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconDemoRun {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub case: usize,
    pub ratios: [f64; 2],
    pub seed: u64,
    pub crop: [usize; 3],
    pub patch: [usize; 3],
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::BadConfig(_) | Error::BadOverlap(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn required(p: Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| Failure::Usage(format!("missing --{flag}")))
}

fn default_seed() -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={s} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn triple<T: Copy>(v: &[T]) -> [T; 3] {
    [v[0], v[1], v[2]]
}

fn echo<T: Serialize>(dir: &Path, run: &T) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), run)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.kind() == clap::error::ErrorKind::InvalidSubcommand {
                let _ = Cli::command().print_help();
            }
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: thread pool already initialized: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Harmonize(a) => cmd_harmonize(a),
        Command::Pretrain(a) => cmd_train(resolve_pretrain(a)?),
        Command::Finetune(a) => cmd_train(resolve_finetune(a)?),
        Command::Probe(a) => cmd_train(resolve_probe(a)?),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ReconDemo(a) => cmd_recon_demo(a),
    }
}

fn cmd_phantom(a: PhantomArgs) -> CliResult<()> {
    let run = match a.config {
        Some(p) => PhantomRun {
            out: a.out,
            ..read_json(&p)?
        },
        None => {
            let mut phantom = PhantomConfig::default();
            if let Some(s) = a.shape {
                phantom.shape = triple(&s);
            }
            if let Some(r) = a.rho {
                phantom.rho = r;
            }
            PhantomRun {
                out: a.out,
                n: a.n,
                seed: a.seed.map_or_else(default_seed, Ok)?,
                phantom,
            }
        }
    };
    run.phantom.validate()?;
    if run.n == 0 {
        return usage("--n must be at least 1");
    }
    let manifest = generate_corpus(&run.phantom, run.n, run.seed, &run.out)?;
    echo(&run.out, &run)?;
    println!("wrote {} phantoms to {}", manifest.cases.len(), run.out.display());
    Ok(())
}

fn cmd_harmonize(a: HarmonizeArgs) -> CliResult<()> {
    let run = match a.config {
        Some(p) => {
            let r: HarmonizeRun = read_json(&p)?;
            HarmonizeRun {
                out: a.out.unwrap_or(r.out.clone()),
                ..r
            }
        }
        None => HarmonizeRun {
            corpus: required(a.corpus, "corpus")?,
            out: required(a.out, "out")?,
            options: HarmonizeOptions {
                spacing: spacing_from_xyz(triple(&a.spacing)),
                threshold_hu: a.threshold,
                margin_voxels: a.margin,
                register: a.register.then(MiConfig::default),
            },
        },
    };
    let (manifest, cases) = load_corpus(&run.corpus)?;
    if manifest.harmonized {
        return Err(Error::BadConfig(format!("{} is already harmonized", run.corpus.display())).into());
    }
    std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    let mut entries = Vec::with_capacity(cases.len());
    for (entry, case) in manifest.cases.iter().zip(&cases) {
        let h = harmonize_case(&case.ct, &case.pet, Some(&case.label), &run.options)?;
        write_nifti(&h.image.split_channel(0), run.out.join(&entry.ct))?;
        write_nifti(&h.image.split_channel(1), run.out.join(&entry.pet))?;
        if let Some(l) = &h.label {
            write_nifti(l, run.out.join(&entry.label))?;
        }
        entries.push(entry.clone());
    }
    let out_manifest = CorpusManifest {
        harmonized: true,
        cases: entries,
        ..manifest
    };
    write_json(&run.out.join(CORPUS_MANIFEST), &out_manifest)?;
    echo(&run.out, &run)?;
    println!("harmonized {} cases into {}", cases.len(), run.out.display());
    Ok(())
}

/// Two-channel images and labels of a corpus, harmonizing with default
/// options when the corpus is raw.
pub fn load_training_data(dir: &Path) -> Result<(CorpusManifest, Vec<Volume>, Vec<Volume>)> {
    let (manifest, cases) = load_corpus(dir)?;
    let mut images = Vec::with_capacity(cases.len());
    let mut labels = Vec::with_capacity(cases.len());
    for c in cases {
        if manifest.harmonized {
            images.push(concat_channels(&c.ct, &c.pet)?);
            labels.push(c.label);
        } else {
            let h = harmonize_case(&c.ct, &c.pet, Some(&c.label), &HarmonizeOptions::default())?;
            images.push(h.image);
            labels.push(h.label.expect("label was supplied"));
        }
    }
    Ok((manifest, images, labels))
}

fn apply_train_args(cfg: &mut TrainConfig, a: &TrainArgs) -> CliResult<()> {
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.seed = a.seed.map_or_else(default_seed, Ok)?;
    cfg.model.seed = cfg.seed;
    if let Some(c) = &a.crop {
        cfg.crop_shape = triple(c);
    }
    Ok(())
}

fn from_config(a: &TrainArgs) -> CliResult<Option<TrainRun>> {
    match &a.config {
        Some(p) => {
            let mut r: TrainRun = read_json(p)?;
            if let Some(o) = &a.out {
                r.out = o.clone();
            }
            Ok(Some(r))
        }
        None => Ok(None),
    }
}

fn resolve_pretrain(a: PretrainArgs) -> CliResult<TrainRun> {
    if let Some(r) = from_config(&a.train)? {
        return Ok(r);
    }
    let mut cfg = TrainConfig::pretrain();
    apply_train_args(&mut cfg, &a.train)?;
    if let Some(f) = a.fusion {
        cfg.model.fusion = match f {
            FusionArg::EarlyConcat => Fusion::EarlyConcat,
            FusionArg::Separate => Fusion::SeparateEncoders,
        };
    }
    if let Some(i) = a.imputation {
        cfg.imputation = match i {
            ImputationArg::Zero => Imputation::Zero,
            ImputationArg::Token => Imputation::Token,
        };
    }
    if let Some(r) = a.mask_ratio {
        cfg.mask_ratio = r;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    cfg.save_every = a.save_every;
    Ok(TrainRun {
        mode: TrainMode::Pretrain,
        corpus: required(a.train.corpus, "corpus")?,
        out: required(a.train.out, "out")?,
        init: a.init,
        fraction: 1.0,
        k: 0,
        train: cfg,
    })
}

/// Model settings come from the initializing checkpoint when there is one.
fn init_model(cfg: &mut TrainConfig, init: &Option<PathBuf>) -> CliResult<()> {
    if let Some(p) = init {
        let ck = load_checkpoint(p)?;
        cfg.model = ck.model.clone();
        if let Some(c) = ck.meta.config {
            cfg.crop_shape = c.crop_shape;
            cfg.patch_shape = c.patch_shape;
        }
    }
    Ok(())
}

fn resolve_finetune(a: FinetuneArgs) -> CliResult<TrainRun> {
    if let Some(r) = from_config(&a.train)? {
        return Ok(r);
    }
    let mut cfg = TrainConfig::finetune();
    init_model(&mut cfg, &a.init)?;
    apply_train_args(&mut cfg, &a.train)?;
    if a.freeze_all {
        cfg.freeze_spec = FreezeSpec::All;
    }
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        return usage(format!("--fraction {} not in (0, 1]", a.fraction));
    }
    Ok(TrainRun {
        mode: TrainMode::Finetune,
        corpus: required(a.train.corpus, "corpus")?,
        out: required(a.train.out, "out")?,
        init: a.init,
        fraction: a.fraction,
        k: 0,
        train: cfg,
    })
}

fn resolve_probe(a: ProbeArgs) -> CliResult<TrainRun> {
    if let Some(r) = from_config(&a.train)? {
        return Ok(r);
    }
    let mut cfg = TrainConfig::probe();
    init_model(&mut cfg, &a.init)?;
    apply_train_args(&mut cfg, &a.train)?;
    Ok(TrainRun {
        mode: TrainMode::Probe,
        corpus: required(a.train.corpus, "corpus")?,
        out: required(a.train.out, "out")?,
        init: a.init,
        fraction: 1.0,
        k: a.k,
        train: cfg,
    })
}

fn cmd_train(run: TrainRun) -> CliResult<()> {
    run.train.validate()?;
    let (_, images, labels) = load_training_data(&run.corpus)?;
    let init = run.init.as_ref().map(load_checkpoint).transpose()?;
    std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    let outcome: TrainOutcome = match run.mode {
        TrainMode::Pretrain => pretrain_with(&images, &run.train, init.as_ref(), Some(&run.out))?,
        TrainMode::Finetune | TrainMode::Probe => {
            let (train_ids, val_ids) = validation_split(images.len(), run.train.seed);
            let pick = |v: &[Volume]| train_ids.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            let (ti, tl) = (pick(&images), pick(&labels));
            let mut out = if run.mode == TrainMode::Finetune {
                finetune(&ti, &tl, &run.train, init.as_ref(), run.fraction)?
            } else {
                linear_probe(&ti, &tl, &run.train, run.k, init.as_ref())?
            };
            let meta = &mut out.checkpoint.meta;
            meta.training_cases = meta.training_cases.iter().map(|&i| train_ids[i]).collect();
            meta.validation_cases = val_ids;
            out
        }
    };
    let mut ck = outcome.checkpoint;
    if let Some(p) = &run.init {
        ck.meta.init = p.display().to_string();
    }
    save_checkpoint(&ck, run.out.join(CHECKPOINT_DIR))?;
    write_curve_csv(&outcome.curve, run.out.join(CURVE_FILE))?;
    echo(&run.out, &run)?;
    let last = outcome.curve.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{} steps on {} cases, final loss {last:.6}; checkpoint in {}",
        outcome.curve.len(),
        ck.meta.training_cases.len(),
        run.out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn case_index(manifest: &CorpusManifest, id: usize) -> CliResult<usize> {
    manifest
        .cases
        .iter()
        .position(|c| c.id == id)
        .ok_or_else(|| Failure::Usage(format!("no case {id} in corpus")))
}

fn window_of(ck: &Checkpoint) -> [usize; 3] {
    ck.meta.config.as_ref().map_or(crate::trainer::DESK_CROP, |c| c.crop_shape)
}

fn cmd_infer(a: InferArgs) -> CliResult<()> {
    let run = match a.config {
        Some(p) => {
            let r: InferRun = read_json(&p)?;
            InferRun {
                out: a.out.unwrap_or(r.out.clone()),
                ..r
            }
        }
        None => {
            let checkpoint = required(a.checkpoint, "checkpoint")?;
            let ck = load_checkpoint(&checkpoint)?;
            let corpus = required(a.corpus, "corpus")?;
            let n = read_corpus_manifest(&corpus)?.cases.len();
            let cases = match a.cases {
                Some(c) => c,
                None if !ck.meta.validation_cases.is_empty() => ck.meta.validation_cases.clone(),
                None => (0..n).collect(),
            };
            InferRun {
                window: window_of(&ck),
                checkpoint,
                corpus,
                out: required(a.out, "out")?,
                overlap: a.overlap,
                cases,
            }
        }
    };
    let ck = load_checkpoint(&run.checkpoint)?;
    let net = ck.network()?;
    if net.config().out_channels != 2 {
        return usage("infer needs a two-logit segmentation checkpoint");
    }
    let (manifest, images, _) = load_training_data(&run.corpus)?;
    std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    for &id in &run.cases {
        let i = case_index(&manifest, id)?;
        let plan = plan_windows(images[i].dims(), run.window, run.overlap)?;
        let mask = argmax_mask(&sliding_infer(&net, &images[i], &plan)?)?;
        write_nifti(&mask, run.out.join(format!("pred_{id}.nii")))?;
    }
    echo(&run.out, &run)?;
    println!("segmented {} cases into {}", run.cases.len(), run.out.display());
    Ok(())
}

fn reference_label(corpus: &Path, entry: &CaseEntry) -> Result<Volume> {
    read_nifti_as(corpus.join(&entry.label), ChannelLabel::Generic)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let run = match a.config {
        Some(p) => {
            let r: EvalRun = read_json(&p)?;
            EvalRun {
                out: a.out.unwrap_or(r.out.clone()),
                ..r
            }
        }
        None => EvalRun {
            pred: required(a.pred, "pred")?,
            corpus: required(a.corpus, "corpus")?,
            out: required(a.out, "out")?,
        },
    };
    let manifest = read_corpus_manifest(&run.corpus)?;
    let mut csv = String::from("case_id,dice,hd95_mm,n_pred,n_ref\n");
    let mut n = 0;
    for entry in &manifest.cases {
        let path = run.pred.join(format!("pred_{}.nii", entry.id));
        if !path.exists() {
            continue;
        }
        let pred = read_nifti_as(&path, ChannelLabel::Generic)?;
        let s = score(&pred, &reference_label(&run.corpus, entry)?)?;
        csv.push_str(&format!("{},{},{},{},{}\n", entry.id, s.dice, s.hd95_mm, s.n_pred, s.n_ref));
        n += 1;
    }
    if n == 0 {
        return Err(Failure::Data(Error::EmptyCorpus));
    }
    std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    write_atomic(&run.out.join(METRICS_FILE), csv.as_bytes())?;
    echo(&run.out, &run)?;
    println!("scored {n} cases into {}", run.out.join(METRICS_FILE).display());
    Ok(())
}

/// Binary (P5) 8-bit graymap.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Places the middle axial slice of each `[Z, Y, X]` panel side by side,
/// windowed to the range of the last panel.
pub fn triptych(panels: &[&[f64]], dims: [usize; 3]) -> (usize, usize, Vec<u8>) {
    let [nz, ny, nx] = dims;
    let z = nz / 2;
    let slice = |p: &[f64]| p[z * ny * nx..(z + 1) * ny * nx].to_vec();
    let reference = slice(panels[panels.len() - 1]);
    let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let width = nx * panels.len();
    let mut px = vec![0u8; width * ny];
    for (k, p) in panels.iter().enumerate() {
        let s = slice(p);
        for y in 0..ny {
            for x in 0..nx {
                px[y * width + k * nx + x] = ((s[y * nx + x] - lo) * scale).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (width, ny, px)
}

fn cmd_recon_demo(a: ReconDemoArgs) -> CliResult<()> {
    let run = match a.config {
        Some(p) => {
            let r: ReconDemoRun = read_json(&p)?;
            ReconDemoRun {
                out: a.out.unwrap_or(r.out.clone()),
                ..r
            }
        }
        None => {
            let checkpoint = required(a.checkpoint, "checkpoint")?;
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = ck.meta.config.clone().unwrap_or_else(TrainConfig::pretrain);
            ReconDemoRun {
                checkpoint,
                corpus: required(a.corpus, "corpus")?,
                out: required(a.out, "out")?,
                case: a.case,
                ratios: [a.ratios[0], a.ratios[1]],
                seed: a.seed.map_or_else(default_seed, Ok)?,
                crop: cfg.crop_shape,
                patch: cfg.patch_shape,
            }
        }
    };
    let ck = load_checkpoint(&run.checkpoint)?;
    let net = ck.network()?;
    if net.config().out_channels != 2 {
        return usage("recon-demo needs a two-channel reconstruction checkpoint");
    }
    let (manifest, images, _) = load_training_data(&run.corpus)?;
    let i = case_index(&manifest, run.case)?;
    let grid = make_grid(run.crop, run.patch)?;
    let crop = random_crop(&images[i], run.crop, &mut seeded(run.seed, crate::rng::stream::CROP))?;
    let x = Tensor::from_volume(&crop);
    let m = expand_mask(&sample_mask_per_channel(&grid, run.ratios, run.seed)?, &grid)?;
    let masked = impute_zero(&x, &m)?;
    let y = net.forward(&masked)?;
    std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    let v: usize = run.crop.iter().product();
    for (c, name) in [(0, "ct"), (1, "pet")] {
        let r = c * v..(c + 1) * v;
        let (w, h, px) = triptych(&[&masked.data()[r.clone()], &y.data()[r.clone()], &x.data()[r]], run.crop);
        write_atomic(&run.out.join(format!("{name}_triptych.pgm")), &encode_pgm(w, h, &px))?;
    }
    echo(&run.out, &run)?;
    println!("wrote CT and PET triptychs to {}", run.out.display());
    Ok(())
}
