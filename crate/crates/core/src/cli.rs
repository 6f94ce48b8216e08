//! Command-line front end. Every subcommand reads a [`RunConfig`], writes
//! its artifacts under `--out`, and records a `run_meta.json` there.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::adapter::{kshot_protocol, loso_cv, train_adapter};
use crate::checkpoint::{AdapterState, EncoderState, ModelState, FORMAT_VERSION};
use crate::classifier::{predict_ensemble, train_one, ClassifierModel, ForwardOptions, RawInput};
use crate::config::{split_subjects, RunConfig};
use crate::error::{Error, Result};
use crate::interpret::{
    aggregate_channel_attention, model_channel_weights, run_ablation, select_top_attention, subtask_average,
    subtask_std, write_ablation_csv, write_profiles_csv, AblationCondition, SubtaskProfile,
};
use crate::io::write_atomic;
use crate::metrics::{evaluate, labels_of, EvalReport};
use crate::pretrain::{pretrain_run, write_history};
use crate::signal::{load_dataset, normalize, preprocess, NormalizationSpec, Trial};
use crate::synth::{generate, SynthConfig};

pub const RUN_META_FILE: &str = "run_meta.json";

#[derive(Debug, Parser)]
#[command(name = "fnirsfm", version, about = "Masked-pretrained transformer for multichannel fNIRS trial classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured base seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Checkpoint glob, e.g. "models/model_seed*.fnfm".
    #[arg(long)]
    pub models: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted structure.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generate the out-of-distribution montage variant.
        #[arg(long)]
        ood: bool,
    },
    /// Masked-segment pretraining of one encoder per configured seed.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train channel attention and decoder on top of each pretrained encoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Evaluate the ensemble on the held-out subjects.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Train an adapter for a new montage and evaluate it on held-out subjects.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Few-shot adaptation protocol over repeated class-balanced draws.
    Kshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        /// Shot count; defaults to every configured value.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Leave-one-subject-out adaptation.
    Loso {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Channel ablation of the ensemble on held-out subjects.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        /// One of top70_dropped, remaining_dropped, no_attention,
        /// none_with_channel_attention; defaults to all four.
        #[arg(long)]
        condition: Option<String>,
        /// Attention mass of the top-channel set.
        #[arg(long)]
        mass: Option<f64>,
    },
    /// Channel attention, subtask temporal attention and subtask variability.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        /// Attention mass of the top-channel set.
        #[arg(long)]
        mass: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Adapt { .. } => "adapt",
            Command::Kshot { .. } => "kshot",
            Command::Loso { .. } => "loso",
            Command::Ablate { .. } => "ablate",
            Command::Explain { .. } => "explain",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Adapt { common, .. }
            | Command::Kshot { common, .. }
            | Command::Loso { common, .. }
            | Command::Ablate { common, .. }
            | Command::Explain { common, .. } => common,
        }
    }
}

/// Short machine-readable name of an error's kind.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::DegenerateRow { .. } => "degenerate_row",
        Error::Contract(_) => "contract",
        Error::Domain(_) => "domain",
        Error::Config(_) => "config",
        Error::Length { .. } => "length",
        Error::InsufficientData(_) => "insufficient_data",
        Error::NotFound(_) => "not_found",
        Error::Format(_) => "format",
        Error::Parse { .. } => "parse",
        Error::Spec(_) => "spec",
        Error::UndefinedLoss => "undefined_loss",
        Error::Training { .. } => "training",
        Error::DegenerateClass(_) => "degenerate_class",
        Error::Protocol(_) => "protocol",
        Error::Corruption(_) => "corruption",
        Error::Version { .. } => "version",
        Error::ManifestType { .. } => "manifest_type",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Toml(_) => "config",
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            let msg = json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{msg}");
            1
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.pretrain.seeds = (s..s + cfg.pretrain.n_seeds as u64).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    argv: &'a [String],
    crate_version: &'a str,
    checkpoint_format_version: u32,
    seed: u64,
    pretrain_seeds: &'a [u64],
    config: &'a RunConfig,
}

/// Runs one parsed command.
pub fn run(command: &Command, argv: &[String]) -> Result<()> {
    let common = command.common();
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&common.out)?;
    write_json(
        &common.out.join(RUN_META_FILE),
        &RunMeta {
            command: command.name(),
            argv,
            crate_version: env!("CARGO_PKG_VERSION"),
            checkpoint_format_version: FORMAT_VERSION,
            seed: cfg.seed,
            pretrain_seeds: &cfg.pretrain.seeds,
            config: &cfg,
        },
    )?;
    let out = common.out.as_path();
    match command {
        Command::Synth { ood, .. } => synth(&cfg, *ood, out),
        Command::Pretrain { data, .. } => pretrain(&cfg, &data.data, out),
        Command::Train { data, models, .. } => train(&cfg, &data.data, &models.models, out),
        Command::Evaluate { data, models, .. } => evaluate_cmd(&cfg, &data.data, &models.models, out),
        Command::Adapt { data, models, .. } => adapt(&cfg, &data.data, &models.models, out),
        Command::Kshot { data, models, k, .. } => kshot(&cfg, &data.data, &models.models, *k, out),
        Command::Loso { data, models, .. } => loso(&cfg, &data.data, &models.models, out),
        Command::Ablate {
            data,
            models,
            condition,
            mass,
            ..
        } => ablate(&cfg, &data.data, &models.models, condition.as_deref(), *mass, out),
        Command::Explain { data, models, mass, .. } => explain(&cfg, &data.data, &models.models, *mass, out),
    }
}

fn synth(cfg: &RunConfig, ood: bool, out: &Path) -> Result<()> {
    let sc: SynthConfig = if ood { cfg.synth.ood() } else { cfg.synth.clone() };
    let gt = generate(&sc, out)?;
    log::info!("wrote {} trials ({} positive) to {}", gt.trials.len(), gt.positives(), out.display());
    Ok(())
}

/// Dataset trials after optical density and band-pass, split by subject.
struct Prepared {
    trials: Vec<Trial>,
    train_subjects: BTreeSet<String>,
    test_subjects: BTreeSet<String>,
}

impl Prepared {
    fn load(cfg: &RunConfig, data: &Path) -> Result<Self> {
        let raw = load_dataset(data)?;
        let trials = raw
            .iter()
            .map(|t| preprocess(t, &cfg.preprocess))
            .collect::<Result<Vec<_>>>()?;
        let (train_subjects, test_subjects) = split_subjects(&trials, cfg.evaluation.test_fraction)?;
        Ok(Prepared {
            trials,
            train_subjects,
            test_subjects,
        })
    }

    fn part(&self, test: bool) -> Vec<Trial> {
        let set = if test { &self.test_subjects } else { &self.train_subjects };
        self.trials
            .iter()
            .filter(|t| set.contains(&t.subject_id))
            .cloned()
            .collect()
    }

    fn normalized(&self, test: bool, spec: &NormalizationSpec) -> Result<Vec<Trial>> {
        self.part(test).iter().map(|t| normalize(t, spec)).collect()
    }
}

fn checkpoint_paths(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::config(format!("bad --models pattern: {e}")))?
        .filter_map(|p| p.ok())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::NotFound(PathBuf::from(pattern)));
    }
    Ok(paths)
}

/// Loads the ensemble; all members must share one normalization spec.
fn load_models(pattern: &str) -> Result<(Vec<ClassifierModel>, NormalizationSpec)> {
    let states = checkpoint_paths(pattern)?
        .iter()
        .map(ModelState::load)
        .collect::<Result<Vec<_>>>()?;
    let spec = states[0].normalization.clone();
    if states.iter().any(|s| s.normalization != spec) {
        return Err(Error::Contract("ensemble members were trained under different normalizations".into()));
    }
    Ok((states.into_iter().map(|s| s.model).collect(), spec))
}

fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let prep = Prepared::load(cfg, data)?;
    let train_raw = prep.part(false);
    let spec = NormalizationSpec::fit(&train_raw)?;
    let train = prep.normalized(false, &spec)?;
    let mut encoder = cfg.encoder;
    encoder.input_channels = spec.len();
    let mut summary = Vec::new();
    for &seed in &cfg.pretrain.seeds {
        let outcome = pretrain_run(&train, encoder, &cfg.pretrain, seed)?;
        write_history(out.join(format!("loss_seed{seed}.csv")), &outcome.history)?;
        let state = EncoderState {
            encoder: outcome.encoder,
            head: outcome.head,
            normalization: spec.clone(),
            seed,
        };
        state.save(out.join(format!("encoder_seed{seed}.fnfm")))?;
        log::info!("seed {seed}: {} epochs, final loss {:.4}", outcome.history.len(), outcome.history.last().copied().unwrap_or(f64::NAN));
        summary.push(json!({
            "seed": seed,
            "epochs": outcome.history.len(),
            "final_loss": outcome.history.last(),
        }));
    }
    write_json(
        &out.join("pretrain_report.json"),
        &json!({ "train_subjects": prep.train_subjects, "runs": summary }),
    )
}

fn train(cfg: &RunConfig, data: &Path, pattern: &str, out: &Path) -> Result<()> {
    let prep = Prepared::load(cfg, data)?;
    for path in checkpoint_paths(pattern)? {
        let enc = EncoderState::load(&path)?;
        let train = prep.normalized(false, &enc.normalization)?;
        let model = train_one(&train, &enc.encoder, &cfg.classifier, &cfg.supervised, enc.seed)?;
        let state = ModelState {
            model,
            classifier: cfg.classifier,
            normalization: enc.normalization,
        };
        state.save(out.join(format!("model_seed{}.fnfm", enc.seed)))?;
        log::info!("trained classifier for {}", path.display());
    }
    Ok(())
}

fn report(cfg: &RunConfig, probs: &[f64], per_model: &[Vec<f64>], trials: &[Trial], seeds: &[u64]) -> Result<EvalReport> {
    let e = &cfg.evaluation;
    evaluate(probs, &labels_of(trials), Some(per_model), seeds, e.bootstrap_n, e.bootstrap_seed)
}

fn write_predictions(path: &Path, trials: &[Trial], probs: &[f64]) -> Result<()> {
    let mut out = String::from("trial_id,subject_id,label,probability\n");
    for (t, p) in trials.iter().zip(probs) {
        out.push_str(&format!("{},{},{},{}\n", t.trial_id, t.subject_id, u8::from(t.label), p));
    }
    write_atomic(path, out.as_bytes())
}

fn evaluate_cmd(cfg: &RunConfig, data: &Path, pattern: &str, out: &Path) -> Result<()> {
    let prep = Prepared::load(cfg, data)?;
    let (models, spec) = load_models(pattern)?;
    let test = prep.normalized(true, &spec)?;
    let pred = predict_ensemble(&models, &test, &RawInput, ForwardOptions::default())?;
    let seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
    let mut rep = report(cfg, &pred.probs, &pred.per_model, &test, &seeds)?;
    rep.protocol = json!({ "split": "subject", "test_subjects": prep.test_subjects });
    log::info!("held-out ROC AUC {:.3}", rep.roc.auc);
    write_json(&out.join("eval_report.json"), &rep)?;
    write_predictions(&out.join("predictions.csv"), &test, &pred.probs)?;
    crate::classifier::write_attention_maps(out.join("attention_maps.json"), &pred.maps)
}

fn adapt(cfg: &RunConfig, data: &Path, pattern: &str, out: &Path) -> Result<()> {
    let prep = Prepared::load(cfg, data)?;
    let (models, _) = load_models(pattern)?;
    let spec = NormalizationSpec::fit(&prep.part(false))?;
    let train = prep.normalized(false, &spec)?;
    let test = prep.normalized(true, &spec)?;
    let adapter = train_adapter(&train, &models, &cfg.adapter, cfg.seed)?;
    let members = cfg.adapter.members(&models);
    let pred = predict_ensemble(members, &test, &adapter, ForwardOptions::default())?;
    let seeds: Vec<u64> = members.iter().map(|m| m.seed).collect();
    let mut rep = report(cfg, &pred.probs, &pred.per_model, &test, &seeds)?;
    rep.protocol = json!({
        "split": "subject",
        "train_subjects": prep.train_subjects,
        "test_subjects": prep.test_subjects,
        "adapter_parameters": adapter.param_count(),
    });
    log::info!("adapted held-out ROC AUC {:.3}", rep.roc.auc);
    AdapterState {
        adapter,
        normalization: spec,
        seed: cfg.seed,
    }
    .save(out.join("adapter.fnfm"))?;
    write_json(&out.join("adapt_report.json"), &rep)?;
    write_predictions(&out.join("predictions.csv"), &test, &pred.probs)
}

fn kshot(cfg: &RunConfig, data: &Path, pattern: &str, k: Option<usize>, out: &Path) -> Result<()> {
    let prep = Prepared::load(cfg, data)?;
    let (models, _) = load_models(pattern)?;
    let shots = match k {
        Some(k) => vec![k],
        None => cfg.kshot.shots.clone(),
    };
    let mut csv = String::from("k,draw,fold,n_test,accuracy,sensitivity,specificity,roc_auc\n");
    for k in shots {
        let rep = kshot_protocol(&prep.trials, &models, k, &cfg.kshot, &cfg.adapter, cfg.seed)?;
        log::info!("{k}-shot median ROC AUC {:.3}", rep.median_roc_auc);
        for e in &rep.evaluations {
            csv.push_str(&format!(
                "{k},{},{},{},{},{},{},{}\n",
                e.draw, e.fold, e.n_test, e.accuracy, e.sensitivity, e.specificity, e.roc_auc
            ));
        }
        write_json(&out.join(format!("kshot_k{k}.json")), &rep)?;
    }
    write_atomic(&out.join("kshot.csv"), csv.as_bytes())
}

fn loso(cfg: &RunConfig, data: &Path, pattern: &str, out: &Path) -> Result<()> {
    let prep = Prepared::load(cfg, data)?;
    let (models, _) = load_models(pattern)?;
    let rep = loso_cv(&prep.trials, &models, &cfg.adapter, cfg.evaluation.threshold, cfg.seed)?;
    log::info!("LOSO mean accuracy {:.3}", rep.mean_accuracy);
    let mut csv = String::from("subject,n_test,accuracy\n");
    for f in &rep.folds {
        csv.push_str(&format!("{},{},{}\n", f.subject, f.n_test, f.accuracy));
    }
    write_atomic(&out.join("loso.csv"), csv.as_bytes())?;
    write_json(&out.join("loso_report.json"), &rep)
}

/// Aggregated channel weights of the ensemble over `trials`, and the
/// top-mass channel set.
fn channel_attention(models: &[ClassifierModel], trials: &[Trial], mass: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    let per_model = models
        .iter()
        .map(|m| model_channel_weights(m, trials))
        .collect::<Result<Vec<_>>>()?;
    let weights = aggregate_channel_attention(&per_model)?;
    let top = select_top_attention(&weights, mass)?;
    Ok((weights, top))
}

fn ablate(
    cfg: &RunConfig,
    data: &Path,
    pattern: &str,
    condition: Option<&str>,
    mass: Option<f64>,
    out: &Path,
) -> Result<()> {
    let conditions = match condition {
        Some(c) => vec![c.parse::<AblationCondition>()?],
        None => AblationCondition::ALL.to_vec(),
    };
    let mass = mass.unwrap_or(cfg.ablation.mass);
    let prep = Prepared::load(cfg, data)?;
    let (models, spec) = load_models(pattern)?;
    let (weights, top) = channel_attention(&models, &prep.normalized(false, &spec)?, mass)?;
    let test = prep.normalized(true, &spec)?;
    let e = &cfg.evaluation;
    let results = conditions
        .iter()
        .map(|&c| run_ablation(&test, &models, c, &top, e.bootstrap_n, e.bootstrap_seed))
        .collect::<Result<Vec<_>>>()?;
    for r in &results {
        log::info!("{}: ROC AUC {:.3}", r.condition.label(), r.roc_auc);
    }
    write_ablation_csv(out.join("ablation.csv"), &results)?;
    write_json(
        &out.join("ablation.json"),
        &json!({ "mass": mass, "channel_weights": weights, "top_channels": top, "results": results }),
    )
}

fn explain(cfg: &RunConfig, data: &Path, pattern: &str, mass: Option<f64>, out: &Path) -> Result<()> {
    let mass = mass.unwrap_or(cfg.ablation.mass);
    let prep = Prepared::load(cfg, data)?;
    let (models, spec) = load_models(pattern)?;
    let test = prep.normalized(true, &spec)?;
    let (weights, top) = channel_attention(&models, &test, mass)?;
    let mut csv = String::from("channel,weight,top\n");
    for (c, w) in weights.iter().enumerate() {
        csv.push_str(&format!("{c},{w},{}\n", top.contains(&c)));
    }
    write_atomic(&out.join("channel_attention.csv"), csv.as_bytes())?;

    let pred = predict_ensemble(&models, &test, &RawInput, ForwardOptions::default())?;
    let mut heatmap = Vec::new();
    for (t, m) in test.iter().zip(&pred.maps) {
        if let Some(bounds) = &t.subtask_bounds {
            heatmap.push(SubtaskProfile {
                id: t.trial_id.clone(),
                values: subtask_average(&m.temporal_weights, bounds)?,
            });
        }
    }
    write_profiles_csv(out.join("subtask_attention.csv"), &heatmap)?;

    let std = subtask_std(&prep.trials, &top)?;
    let mut rows = std.subjects.clone();
    rows.push(SubtaskProfile {
        id: "population_median".into(),
        values: std.population_median.clone(),
    });
    write_profiles_csv(out.join("subtask_std.csv"), &rows)?;
    write_json(
        &out.join("explain.json"),
        &json!({
            "mass": mass,
            "channel_weights": weights,
            "top_channels": top,
            "subtask_attention": heatmap,
            "subtask_std": std,
            "lowest_variability_subtask": std.argmin(),
        }),
    )
}
