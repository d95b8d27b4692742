//! `ts-mantis` command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mantis_core::adapters;
use mantis_core::calibration::{
    apply_temperature, ece, fit_isotonic_multiclass, fit_temperature, reliability_bins, ProbabilityMatrix, DEFAULT_BINS,
};
use mantis_core::checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint};
use mantis_core::data::{load_tsv, Dataset};
use mantis_core::finetune::{
    extract_embeddings_threaded, finetune, linear_probe_fit, EpochMetrics, FinetuneConfig, Regime, Split,
};
use mantis_core::pretrain::{pretrain, AugmentConfig, ContrastiveConfig};
use mantis_core::{AdapterKind, LrSchedule, MantisModel, ModelConfig, Tape, Tensor};

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "TS_MANTIS_LOG";

#[derive(Debug, Parser)]
#[command(name = "ts-mantis", version, about = "Time-series classification foundation model")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrastive pre-training on every channel of a dataset.
    Pretrain(PretrainArgs),
    /// Fits a classifier under one of the fine-tuning regimes.
    Finetune(FinetuneArgs),
    /// Writes frozen embeddings as a TSV file.
    Embed(EmbedArgs),
    /// Accuracy and calibration error on a labeled set.
    Evaluate(EvaluateArgs),
    /// Fits temperature and isotonic correctors and reports their effect.
    Calibrate(CalibrateArgs),
    /// Prints the parameter count and header of a checkpoint.
    Info(InfoArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Default,
    Desk,
    Tiny,
}

impl Arch {
    pub fn config(self) -> ModelConfig {
        match self {
            Arch::Default => ModelConfig::default(),
            Arch::Desk => ModelConfig::desk(),
            Arch::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Probe,
    Head,
    Scratch,
    Full,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Probe => Regime::Probe,
            RegimeArg::Head => Regime::Head,
            RegimeArg::Scratch => Regime::Scratch,
            RegimeArg::Full => Regime::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AdapterArg {
    None,
    Pca,
    Svd,
    Randproj,
    Varsel,
    Lcomb,
}

impl AdapterArg {
    fn kind(self) -> Option<AdapterKind> {
        match self {
            AdapterArg::None => None,
            AdapterArg::Pca => Some(AdapterKind::Pca),
            AdapterArg::Svd => Some(AdapterKind::Svd),
            AdapterArg::Randproj => Some(AdapterKind::RandProj),
            AdapterArg::Varsel => Some(AdapterKind::VarSelector),
            AdapterArg::Lcomb => Some(AdapterKind::LComb),
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for inference passes.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// File receiving one metric record per line.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to continue from instead of a fresh model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::Default)]
    pub arch: Arch,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.2)]
    pub crop_max: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set scored after every epoch.
    #[arg(long)]
    pub data_test: Option<PathBuf>,
    /// Pre-trained checkpoint; optional for the scratch regime.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = RegimeArg::Full)]
    pub regime: RegimeArg,
    /// Channel adapter; keeps the checkpoint's adapter when omitted.
    #[arg(long, value_enum)]
    pub adapter: Option<AdapterArg>,
    #[arg(long)]
    pub dnew: Option<usize>,
    #[arg(long, value_enum, default_value_t = Arch::Default)]
    pub arch: Arch,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data_test: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Args)]
pub struct CalibrateArgs {
    /// Held-out set the correctors are fitted on.
    #[arg(long)]
    pub data: PathBuf,
    /// Set the correctors are scored on.
    #[arg(long)]
    pub data_test: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// A command line that parsed but does not make sense.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let config = match RunConfig::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(&config, &mut stdout) {
        Ok(()) => 0,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Runs a parsed command, writing its summary to `out`.
pub fn execute(config: &RunConfig, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    match &config.command {
        Command::Pretrain(a) => cmd_pretrain(a, out),
        Command::Finetune(a) => cmd_finetune(a, out),
        Command::Embed(a) => cmd_embed(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Calibrate(a) => cmd_calibrate(a, out),
        Command::Info(a) => cmd_info(a, out),
    }
}

fn check_common(c: &Common) -> anyhow::Result<()> {
    if c.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    Ok(())
}

fn check_output(out: &Path, inputs: &[Option<&Path>]) -> anyhow::Result<()> {
    if inputs.iter().flatten().any(|p| *p == out) {
        return Err(usage(format!("--out {} would overwrite an input file", out.display())));
    }
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    load_tsv(path).with_context(|| format!("reading {}", path.display()))
}

fn load_ck(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn write_metrics(path: Option<&Path>, lines: &[String]) -> anyhow::Result<()> {
    if let Some(p) = path {
        let mut text = String::new();
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    check_common(&a.common)?;
    check_output(&a.out, &[Some(&a.data), a.checkpoint.as_deref()])?;
    if a.epochs == 0 || a.batch < 2 {
        return Err(usage("pre-training needs --epochs >= 1 and --batch >= 2"));
    }
    let cfg = ContrastiveConfig {
        temperature: a.temperature,
        batch_size: a.batch,
        augment: AugmentConfig {
            crop_min: 0.0,
            crop_max: a.crop_max,
        },
        seed: a.common.seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = load_data(&a.data)?;
    let mut ck = match &a.checkpoint {
        Some(p) => load_ck(p)?,
        None => Checkpoint {
            model: MantisModel::new(a.arch.config(), a.common.seed)?,
            adapter: None,
            probe: None,
            class_names: Vec::new(),
        },
    };
    let channels = data.model_channels(ck.model.config.input_length);
    let schedule = LrSchedule::new(a.lr, a.epochs, a.epochs / 10)?;
    let losses = pretrain(&mut ck.model, &channels, &cfg, &schedule, 0.05)?;
    save_checkpoint(&a.out, &ck).with_context(|| format!("writing {}", a.out.display()))?;
    let lines: Vec<String> = losses
        .iter()
        .enumerate()
        .map(|(e, l)| format!("epoch {e} split pretrain loss {l:.6}"))
        .collect();
    write_metrics(a.common.metrics_out.as_deref(), &lines)?;
    writeln!(
        out,
        "pretrain epochs {} final_loss {:.6} parameters {}",
        a.epochs,
        losses.last().copied().unwrap_or(f64::NAN),
        ck.model.count_parameters()
    )?;
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    check_common(&a.common)?;
    check_output(
        &a.out,
        &[Some(&a.data), a.data_test.as_deref(), a.checkpoint.as_deref()],
    )?;
    let regime = Regime::from(a.regime);
    if a.checkpoint.is_none() && regime != Regime::Scratch {
        return Err(usage(format!("--regime {regime} requires --checkpoint")));
    }
    if a.epochs == 0 || a.batch == 0 {
        return Err(usage("--epochs and --batch must be positive"));
    }
    if a.dnew.is_some() && a.adapter.is_none_or(|k| k == AdapterArg::None) {
        return Err(usage("--dnew needs --adapter"));
    }
    let train = load_data(&a.data)?;
    let val = match &a.data_test {
        Some(p) => Some(load_data(p)?.relabel(&train.class_names)?),
        None => None,
    };
    let mut ck = match &a.checkpoint {
        Some(p) => load_ck(p)?,
        None => Checkpoint {
            model: MantisModel::new(a.arch.config(), a.common.seed)?,
            adapter: None,
            probe: None,
            class_names: Vec::new(),
        },
    };
    if let Some(kind) = a.adapter {
        ck.adapter = match kind.kind() {
            None => None,
            Some(k) => Some(adapters::fit(k, &train.samples, a.dnew, a.common.seed)?),
        };
    }
    if let Some(ad) = &ck.adapter {
        if ad.d != train.channels() {
            bail!("adapter expects {} channels, data has {}", ad.d, train.channels());
        }
    }
    ck.class_names = train.class_names.clone();
    ck.probe = None;

    let mut lines = Vec::new();
    let summary;
    if regime == Regime::Probe {
        let z = extract_embeddings_threaded(&ck.model, &train, ck.adapter.as_ref(), a.batch, a.common.threads)?;
        let dim = z.len() / train.len();
        let probe = linear_probe_fit(
            &z,
            dim,
            &train.labels(),
            train.num_classes(),
            FinetuneConfig::default().probe_l2,
        )?;
        let mut record = |split: Split, data: &Dataset, z: &[f32]| -> anyhow::Result<EpochMetrics> {
            let pm = ProbabilityMatrix::from_logits(probe.num_classes, &probe.logits(z)?, data.labels())?;
            let m = EpochMetrics {
                epoch: 0,
                split,
                loss: pm.nll(),
                accuracy: pm.accuracy(),
            };
            lines.push(m.to_string());
            Ok(m)
        };
        let tm = record(Split::Train, &train, &z)?;
        let vm = match &val {
            Some(v) => {
                let zv = extract_embeddings_threaded(&ck.model, v, ck.adapter.as_ref(), a.batch, a.common.threads)?;
                Some(record(Split::Val, v, &zv)?)
            }
            None => None,
        };
        summary = finetune_summary(regime, 1, &tm, vm.as_ref(), 0, Some(probe.iterations));
        ck.probe = Some(probe);
    } else {
        let cfg = FinetuneConfig {
            regime,
            lr: a.lr,
            epochs: a.epochs,
            batch_size: a.batch,
            seed: a.common.seed,
            ..Default::default()
        };
        let report = finetune(&mut ck.model, &train, val.as_ref(), ck.adapter.as_mut(), &cfg)?;
        lines.extend(report.metrics.iter().map(|m| m.to_string()));
        let tm = report.last(Split::Train).context("no epochs ran")?;
        summary = finetune_summary(regime, a.epochs, tm, report.last(Split::Val), report.best_epoch, None);
    }
    save_checkpoint(&a.out, &ck).with_context(|| format!("writing {}", a.out.display()))?;
    write_metrics(a.common.metrics_out.as_deref(), &lines)?;
    writeln!(out, "{summary}")?;
    Ok(())
}

fn finetune_summary(
    regime: Regime,
    epochs: usize,
    train: &EpochMetrics,
    val: Option<&EpochMetrics>,
    best: usize,
    iterations: Option<usize>,
) -> String {
    let mut s = format!(
        "finetune regime {regime} epochs {epochs} train_loss {:.6} train_accuracy {:.6}",
        train.loss, train.accuracy
    );
    if let Some(v) = val {
        write!(s, " val_loss {:.6} val_accuracy {:.6}", v.loss, v.accuracy).expect("string write");
    }
    match iterations {
        Some(i) => write!(s, " iterations {i}"),
        None => write!(s, " best_epoch {best}"),
    }
    .expect("string write");
    s
}

/// Class logits `[n, k]` from the probe if the checkpoint has one, else the
/// head.
fn logits(ck: &Checkpoint, data: &Dataset, batch: usize, threads: usize) -> anyhow::Result<(Vec<f64>, usize)> {
    let z = extract_embeddings_threaded(&ck.model, data, ck.adapter.as_ref(), batch, threads)?;
    if let Some(p) = &ck.probe {
        return Ok((p.logits(&z)?, p.num_classes));
    }
    let head = ck
        .model
        .head
        .as_ref()
        .context("checkpoint has neither a head nor a probe")?;
    if z.len() != data.len() * head.input_dim {
        bail!(
            "head expects {} features per sample, the data gives {}",
            head.input_dim,
            z.len() / data.len()
        );
    }
    let mut out = Vec::with_capacity(data.len() * head.num_classes);
    for chunk in z.chunks(batch.max(1) * head.input_dim) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(
            &[chunk.len() / head.input_dim, head.input_dim],
            chunk.to_vec(),
        )?);
        let l = ck.model.classify(&mut tape, &ck.model.params, x)?;
        out.extend(tape.value(l).iter().map(|&v| v as f64));
    }
    Ok((out, head.num_classes))
}

fn labeled_for(ck: &Checkpoint, path: &Path) -> anyhow::Result<Dataset> {
    let data = load_data(path)?;
    if ck.class_names.is_empty() {
        return Ok(data);
    }
    Ok(data.relabel(&ck.class_names)?)
}

fn cmd_embed(a: &EmbedArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    check_common(&a.common)?;
    check_output(&a.out, &[Some(&a.data), Some(&a.checkpoint)])?;
    let ck = load_ck(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let z = extract_embeddings_threaded(&ck.model, &data, ck.adapter.as_ref(), a.batch, a.common.threads)?;
    let width = z.len() / data.len();
    let mut text = String::new();
    for (s, row) in data.samples.iter().zip(z.chunks(width)) {
        text.push_str(&data.class_names[s.label.expect("labeled")]);
        for v in row {
            write!(text, "\t{v}").expect("string write");
        }
        text.push('\n');
    }
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    write_metrics(
        a.common.metrics_out.as_deref(),
        &[format!("samples {}", data.len()), format!("width {width}")],
    )?;
    writeln!(out, "embed samples {} width {width}", data.len())?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    check_common(&a.common)?;
    if a.bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }
    let ck = load_ck(&a.checkpoint)?;
    let data = labeled_for(&ck, &a.data_test)?;
    let (l, k) = logits(&ck, &data, a.batch, a.common.threads)?;
    let pm = ProbabilityMatrix::from_logits(k, &l, data.labels())?;
    let (acc, e) = (pm.accuracy(), ece(&pm, a.bins));
    write_metrics(
        a.common.metrics_out.as_deref(),
        &[
            format!("accuracy {acc:.6}"),
            format!("ece {e:.6}"),
            format!("nll {:.6}", pm.nll()),
        ],
    )?;
    writeln!(out, "accuracy {acc:.6} ece {e:.6}")?;
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    check_common(&a.common)?;
    if a.bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }
    let ck = load_ck(&a.checkpoint)?;
    let fit_data = labeled_for(&ck, &a.data)?;
    let test = labeled_for(&ck, &a.data_test)?;
    let (fit_logits, k) = logits(&ck, &fit_data, a.batch, a.common.threads)?;
    let (test_logits, _) = logits(&ck, &test, a.batch, a.common.threads)?;

    let temp = fit_temperature(&fit_logits, k, &fit_data.labels())?;
    let iso = fit_isotonic_multiclass(&ProbabilityMatrix::from_logits(k, &fit_logits, fit_data.labels())?)?;
    let before = ProbabilityMatrix::from_logits(k, &test_logits, test.labels())?;
    let scaled = apply_temperature(&temp, &test_logits, k, test.labels())?;
    let isotonic = iso.apply(&before)?;
    let (e0, e1, e2) = (ece(&before, a.bins), ece(&scaled, a.bins), ece(&isotonic, a.bins));

    out.write_all(reliability_bins(&before, a.bins).to_tsv().as_bytes())?;
    let summary = format!(
        "temperature {:.6} ece_before {e0:.6} ece_after_temp {e1:.6} ece_after_isotonic {e2:.6}",
        temp.temperature
    );
    write_metrics(
        a.common.metrics_out.as_deref(),
        &[
            format!("temperature {:.6}", temp.temperature),
            format!("ece_before {e0:.6}"),
            format!("ece_after_temp {e1:.6}"),
            format!("ece_after_isotonic {e2:.6}"),
            format!("nll_before {:.6}", before.nll()),
            format!("nll_after_temp {:.6}", scaled.nll()),
        ],
    )?;
    writeln!(out, "{summary}")?;
    Ok(())
}

fn cmd_info(a: &InfoArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    let bytes = fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let header = read_header(&bytes)?;
    let ck = mantis_core::checkpoint::from_bytes(&bytes)?;
    writeln!(out, "parameters {}", ck.model.count_parameters())?;
    let mut tensors = 0;
    for line in header.lines() {
        if line.starts_with("tensor ") {
            tensors += 1;
        } else {
            writeln!(out, "{line}")?;
        }
    }
    writeln!(out, "tensors {tensors}")?;
    Ok(())
}
