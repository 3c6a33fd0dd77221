//! Command-line front end: `prepare`, `train`, `eval`, `grid`, `gradcheck`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{ConstraintTarget, GateAblation, Variant};
use crate::checkpoint::Checkpoint;
use crate::data::{
    build_corpus, clean, load_checkins_report, synth_corpus, Corpus, DatasetStats, InputFormat, IntervalScaling,
    SynthConfig, SynthPattern, TransitionTriple,
};
use crate::error::Error;
use crate::eval::{
    evaluate, format_jsonl, format_kv, format_rank_dump, Cohort, EvalConfig, MetricsRecord, ModelRecommender, KS,
};
use crate::model::{loss_and_grads, predict_topk, sequence_loss, ModelConfig, ModelParams};
use crate::optim::{fd_check, AdamConfig, FdConfig, FdReport};
use crate::train::{train, EarlyStop, TrainConfig, TrainState};

#[derive(Debug, Parser)]
#[command(name = "stlstm", version, about = "Spatio-temporal LSTM next-POI recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, clean and split check-ins (or synthesize a corpus) into a corpus cache.
    Prepare(PrepareArgs),
    /// Train a model on a corpus cache and evaluate it.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus cache.
    Eval(EvalArgs),
    /// Train and evaluate a cross-product of configurations.
    Grid(GridArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternArg {
    Periodic,
    IntervalSwitch,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Check-in file to ingest.
    #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "snap")]
    pub format: InputFormat,
    /// Generate a synthetic corpus instead of reading a file.
    #[arg(long)]
    pub synth: bool,
    #[arg(long, default_value_t = 50)]
    pub users: usize,
    #[arg(long, default_value_t = 40)]
    pub pois: usize,
    #[arg(long, default_value_t = 30)]
    pub checkins: usize,
    #[arg(long, value_enum, default_value = "periodic")]
    pub pattern: PatternArg,
    #[arg(long, default_value_t = 3)]
    pub cycle_len: usize,
    #[arg(long, default_value_t = 0.0)]
    pub jump_prob: f64,
    #[arg(long, default_value_t = 0.3)]
    pub switch_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub min_user_checkins: usize,
    #[arg(long, default_value_t = 10)]
    pub min_poi_users: usize,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    /// Directory receiving `corpus.bin` and `stats.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "st-clstm")]
    pub variant: Variant,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_CELL)]
    pub cell_size: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_EMBED)]
    pub embed_size: usize,
    /// Hold the short-term time gate T1 at one.
    #[arg(long)]
    pub fix_t1: bool,
    #[arg(long)]
    pub fix_t2: bool,
    #[arg(long)]
    pub fix_d1: bool,
    #[arg(long)]
    pub fix_d2: bool,
    #[arg(long, default_value = "interval")]
    pub constraint_target: ConstraintTarget,
    /// Truncate backpropagation to this many steps.
    #[arg(long)]
    pub bptt_cap: Option<usize>,
    /// Feed ln(1+x) of the intervals to the gates.
    #[arg(long)]
    pub log1p: bool,
    /// Clip Δt at 720 h and Δd at 100 km.
    #[arg(long)]
    pub clip_intervals: bool,
}

impl ModelArgs {
    pub fn ablation(&self) -> GateAblation {
        GateAblation {
            fix_t1: self.fix_t1,
            fix_t2: self.fix_t2,
            fix_d1: self.fix_d1,
            fix_d2: self.fix_d2,
        }
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.variant, vocab).with_sizes(self.embed_size, self.cell_size);
        cfg.ablation = self.ablation();
        cfg.constraint_target = self.constraint_target;
        cfg.bptt_cap = self.bptt_cap;
        cfg.scaling = IntervalScaling {
            clip_dt: self.clip_intervals.then_some(IntervalScaling::DEFAULT_CLIP_DT),
            clip_dd: self.clip_intervals.then_some(IntervalScaling::DEFAULT_CLIP_DD),
            log1p: self.log1p,
        };
        cfg
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Compute per-sequence gradients on all cores.
    #[arg(long)]
    pub parallel: bool,
    /// Stop once the epoch loss plateaus.
    #[arg(long)]
    pub early_stop: bool,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
}

impl OptimArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            clip_norm: (!self.no_clip).then_some(self.clip_norm),
            seed: self.seed,
            parallel: self.parallel,
            early_stop: self.early_stop.then_some(EarlyStop {
                patience: self.patience,
                ..EarlyStop::default()
            }),
            frozen: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalOpts {
    #[arg(long, default_value_t = 5)]
    pub cold_threshold: usize,
    /// Remove POIs the user already visited from the candidate ranking.
    #[arg(long)]
    pub exclude_visited: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub eval: EvalOpts,
    /// Continue from a checkpoint with optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CohortArg {
    All,
    Cold,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// `both` skips an empty cold cohort with a warning; `cold` fails on it.
    #[arg(long, value_enum, default_value = "both")]
    pub cohort: CohortArg,
    #[command(flatten)]
    pub eval: EvalOpts,
    /// Also write each user's top-K next POIs after their full history.
    #[arg(long)]
    pub topk: Option<usize>,
    /// Also write the rank of every test instance.
    #[arg(long)]
    pub rank_dump: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "lstm,st-lstm,st-clstm")]
    pub variants: Vec<Variant>,
    /// Named gate ablations applied to the interval variants.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    pub ablations: Vec<GateAblation>,
    #[arg(long, value_delimiter = ',', default_value = "128")]
    pub cell_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_EMBED)]
    pub embed_size: usize,
    #[arg(long, default_value = "interval")]
    pub constraint_target: ConstraintTarget,
    #[arg(long)]
    pub bptt_cap: Option<usize>,
    #[arg(long)]
    pub log1p: bool,
    #[arg(long)]
    pub clip_intervals: bool,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[command(flatten)]
    pub eval: EvalOpts,
    /// Legs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the per-tensor report as JSON here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses arguments and runs the chosen command.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Grid(a) => cmd_grid(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Debug, Serialize)]
struct PrepareReport {
    source: serde_json::Value,
    raw: Option<DatasetStats>,
    cleaned: Option<DatasetStats>,
    malformed_lines: Option<usize>,
    corpus_users: usize,
    corpus_pois: usize,
    corpus_checkins: usize,
    train_transitions: usize,
    test_instances: usize,
    corpus_hash: String,
}

pub fn cmd_prepare(a: &PrepareArgs) -> anyhow::Result<()> {
    let (corpus, source, raw, cleaned, malformed) = if a.synth {
        let pattern = match a.pattern {
            PatternArg::Periodic => SynthPattern::Periodic {
                cycle_len: a.cycle_len,
                jump_prob: a.jump_prob,
            },
            PatternArg::IntervalSwitch => SynthPattern::IntervalSwitch {
                cluster_size: a.cycle_len,
                switch_prob: a.switch_prob,
            },
        };
        if a.users == 0 || a.pois == 0 || a.checkins < 2 {
            bail!("synthetic corpus needs at least 1 user, 1 POI and 2 check-ins per user");
        }
        let cfg = SynthConfig {
            seed: a.seed,
            n_users: a.users,
            n_pois: a.pois,
            checkins_per_user: a.checkins,
            train_frac: a.train_frac,
            pattern,
        };
        (
            synth_corpus(&cfg),
            serde_json::json!({ "synth": cfg }),
            None,
            None,
            None,
        )
    } else {
        let input = a.input.as_ref().expect("clap requires --input without --synth");
        let report = load_checkins_report(input, a.format)?;
        let raw = DatasetStats::of(&report.checkins);
        let kept = clean(&report.checkins, a.min_user_checkins, a.min_poi_users);
        let cleaned = DatasetStats::of(&kept);
        let source = serde_json::json!({
            "input": input,
            "format": a.format,
            "min_user_checkins": a.min_user_checkins,
            "min_poi_users": a.min_poi_users,
            "train_frac": a.train_frac,
        });
        (
            build_corpus(&kept, a.train_frac),
            source,
            Some(raw),
            Some(cleaned),
            Some(report.malformed),
        )
    };
    ensure_dir(&a.out_dir)?;
    let stats = PrepareReport {
        source,
        raw,
        cleaned,
        malformed_lines: malformed,
        corpus_users: corpus.users.len(),
        corpus_pois: corpus.n_pois(),
        corpus_checkins: corpus.n_checkins(),
        train_transitions: corpus.users.iter().map(|u| u.train_triples().len()).sum(),
        test_instances: corpus.users.iter().map(|u| u.n_test()).sum(),
        corpus_hash: corpus.content_hash(),
    };
    write_atomic(&a.out_dir.join("corpus.bin"), &corpus.to_bytes())?;
    write_json(&a.out_dir.join("stats.json"), &stats)?;
    if let (Some(r), Some(c)) = (raw, cleaned) {
        println!(
            "raw: {} users, {} POIs, {} check-ins (density {:.3e})",
            r.users, r.pois, r.checkins, r.density
        );
        println!(
            "cleaned: {} users, {} POIs, {} check-ins (density {:.3e})",
            c.users, c.pois, c.checkins, c.density
        );
    }
    println!(
        "corpus: {} users, {} POIs, {} train transitions, {} test instances, hash {}",
        stats.corpus_users,
        stats.corpus_pois,
        stats.train_transitions,
        stats.test_instances,
        &stats.corpus_hash[..16]
    );
    Ok(())
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub corpus_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOpts,
    pub resume: Option<PathBuf>,
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    Ok(Corpus::load(path)?)
}

fn metrics_for(
    params: &ModelParams,
    model: &ModelConfig,
    corpus: &Corpus,
    opts: &EvalOpts,
    cohorts: &[(Cohort, bool)],
) -> anyhow::Result<(Vec<MetricsRecord>, Vec<crate::eval::RankingResult>)> {
    let rec = ModelRecommender { params, config: model };
    let cfg = EvalConfig {
        cold_threshold: opts.cold_threshold,
        exclude_visited: opts.exclude_visited,
        parallel: false,
    };
    let mut records = Vec::new();
    let mut all_ranks = Vec::new();
    for &(cohort, required) in cohorts {
        match evaluate(&rec, corpus, cohort, &cfg) {
            Ok((report, ranks)) => {
                if cohort == Cohort::All {
                    all_ranks = ranks;
                }
                records.push(MetricsRecord {
                    model: model.variant.name().to_string(),
                    ablation: model.ablation.label(),
                    exclude_visited: opts.exclude_visited,
                    metrics: report,
                });
            }
            Err(Error::UndefinedMetric(msg)) if !required => log::warn!("skipping cohort: {msg}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((records, all_ranks))
}

fn write_metrics(dir: &Path, records: &[MetricsRecord]) -> anyhow::Result<()> {
    write_atomic(&dir.join("metrics.txt"), format_kv(records).as_bytes())?;
    write_atomic(&dir.join("metrics.jsonl"), format_jsonl(records).as_bytes())
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<Vec<MetricsRecord>> {
    let corpus = load_corpus(&a.corpus)?;
    let mut model = a.model.model_config(corpus.n_pois());
    model.exclude_visited = a.eval.exclude_visited;
    model.validate()?;
    let tcfg = a.optim.train_config();
    tcfg.validate()?;
    let records = train_run(
        &a.corpus,
        &corpus,
        &model,
        &tcfg,
        &a.eval,
        a.resume.as_deref(),
        &a.out_dir,
    )?;
    print!("{}", format_kv(&records));
    Ok(records)
}

fn train_run(
    corpus_path: &Path,
    corpus: &Corpus,
    model: &ModelConfig,
    tcfg: &TrainConfig,
    opts: &EvalOpts,
    resume: Option<&Path>,
    out_dir: &Path,
) -> anyhow::Result<Vec<MetricsRecord>> {
    ensure_dir(out_dir)?;
    let run = RunConfig {
        corpus: corpus_path.to_path_buf(),
        corpus_hash: corpus.content_hash(),
        seed: tcfg.seed,
        model: *model,
        train: tcfg.clone(),
        eval: opts.clone(),
        resume: resume.map(Path::to_path_buf),
    };
    write_json(&out_dir.join("config.json"), &run)?;

    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != *model {
                bail!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                );
            }
            TrainState::from_checkpoint(ck)?
        }
        None => TrainState::new(model, tcfg)?,
    };

    let log_path = out_dir.join("train_log.jsonl");
    let mut log_text = if resume.is_some() {
        fs::read_to_string(&log_path).unwrap_or_default()
    } else {
        String::new()
    };
    let ckpt_path = out_dir.join("last.ckpt");
    let outcome = train(&mut state, model, tcfg, corpus, |st, log| {
        log_text.push_str(&serde_json::to_string(log).expect("epoch log serializes"));
        log_text.push('\n');
        fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
        st.checkpoint(model, tcfg.seed).save(&ckpt_path)
    });
    let outcome = match outcome {
        Err(Error::Diverged(report)) => {
            write_json(&out_dir.join("nan_dump.json"), &report)?;
            bail!(
                "training diverged in epoch {} batch {}; diagnostics in {}",
                report.epoch,
                report.batch,
                out_dir.join("nan_dump.json").display()
            );
        }
        other => other?,
    };
    state.checkpoint(model, tcfg.seed).save(&out_dir.join("final.ckpt"))?;
    if let Some(last) = outcome.logs.last() {
        log::info!(
            "{}: trained {} epochs{}; final loss {:.6}",
            out_dir.display(),
            state.epochs_completed,
            if outcome.stopped_early { " (early stop)" } else { "" },
            last.mean_loss
        );
    }

    let (records, _) = metrics_for(
        &state.params,
        model,
        corpus,
        opts,
        &[(Cohort::All, false), (Cohort::Cold, false)],
    )?;
    write_metrics(out_dir, &records)?;
    Ok(records)
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<Vec<MetricsRecord>> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    if ck.config.vocab != corpus.n_pois() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary {} does not match corpus vocabulary {}",
            ck.config.vocab,
            corpus.n_pois()
        ))
        .into());
    }
    let mut model = ck.config;
    model.exclude_visited = a.eval.exclude_visited;
    let cohorts: &[(Cohort, bool)] = match a.cohort {
        CohortArg::All => &[(Cohort::All, true)],
        CohortArg::Cold => &[(Cohort::Cold, true)],
        CohortArg::Both => &[(Cohort::All, true), (Cohort::Cold, false)],
    };
    let (records, ranks) = metrics_for(&ck.params, &model, &corpus, &a.eval, cohorts)?;
    ensure_dir(&a.out_dir)?;
    write_metrics(&a.out_dir, &records)?;
    if a.rank_dump {
        write_atomic(&a.out_dir.join("ranks.tsv"), format_rank_dump(&ranks).as_bytes())?;
    }
    if let Some(k) = a.topk {
        let mut out = String::from("user\trank\tpoi\n");
        for u in &corpus.users {
            // the final check-in has no outgoing interval yet; use zero gaps
            let mut history = u.triples.clone();
            history.push(TransitionTriple {
                poi: *u.pois.last().expect("users have check-ins"),
                dt: 0.0,
                dd: 0.0,
            });
            for (r, id) in predict_topk(&ck.params, &history, k.min(corpus.n_pois()), &model)?
                .into_iter()
                .enumerate()
            {
                out.push_str(&format!("{}\t{}\t{}\n", u.user, r + 1, corpus.vocab[id]));
            }
        }
        write_atomic(&a.out_dir.join("recommendations.tsv"), out.as_bytes())?;
    }
    print!("{}", format_kv(&records));
    Ok(records)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub leg: String,
    pub variant: Variant,
    pub ablation: String,
    pub cell_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub metrics: Option<MetricsRecord>,
    pub error: Option<String>,
}

/// Cross-product of the requested settings. LSTM legs ignore ablations.
pub fn grid_legs(a: &GridArgs) -> Vec<(String, ModelArgs, OptimArgs)> {
    let mut legs = Vec::new();
    for &variant in &a.variants {
        let ablations: Vec<GateAblation> = if variant.has_intervals() {
            a.ablations.clone()
        } else {
            vec![GateAblation::NONE]
        };
        for abl in ablations {
            for &cell in &a.cell_sizes {
                for &batch in &a.batch_sizes {
                    for &seed in &a.seeds {
                        let name = format!("{}-{}-c{cell}-b{batch}-s{seed}", variant.name(), abl.label());
                        let model = ModelArgs {
                            variant,
                            cell_size: cell,
                            embed_size: a.embed_size,
                            fix_t1: abl.fix_t1,
                            fix_t2: abl.fix_t2,
                            fix_d1: abl.fix_d1,
                            fix_d2: abl.fix_d2,
                            constraint_target: a.constraint_target,
                            bptt_cap: a.bptt_cap,
                            log1p: a.log1p,
                            clip_intervals: a.clip_intervals,
                        };
                        let optim = OptimArgs {
                            batch_size: batch,
                            epochs: a.epochs,
                            lr: a.lr,
                            beta1: 0.9,
                            beta2: 0.999,
                            adam_eps: 1e-8,
                            clip_norm: a.clip_norm,
                            no_clip: false,
                            seed,
                            parallel: false,
                            early_stop: false,
                            patience: 10,
                        };
                        legs.push((name, model, optim));
                    }
                }
            }
        }
    }
    legs
}

pub fn format_grid_table(rows: &[GridRow]) -> String {
    let mut out = String::from("rank\tleg\tvariant\tablation\tcell\tbatch\tseed");
    for k in KS {
        out.push_str(&format!("\tacc@{k}"));
    }
    out.push_str("\tmap\tstatus\n");
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            i + 1,
            r.leg,
            r.variant,
            r.ablation,
            r.cell_size,
            r.batch_size,
            r.seed
        ));
        match &r.metrics {
            Some(m) => {
                for (_, a) in &m.metrics.acc {
                    out.push_str(&format!("\t{a:.4}"));
                }
                out.push_str(&format!("\t{:.4}\tok\n", m.metrics.map));
            }
            None => {
                out.push_str(&"\t-".repeat(KS.len() + 1));
                out.push_str(&format!("\tfailed: {}\n", r.error.as_deref().unwrap_or("unknown")));
            }
        }
    }
    out
}

pub fn cmd_grid(a: &GridArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    ensure_dir(&a.out_dir)?;
    let legs = grid_legs(a);
    let run_leg = |(name, margs, oargs): &(String, ModelArgs, OptimArgs)| -> GridRow {
        let mut model = margs.model_config(corpus.n_pois());
        model.exclude_visited = a.eval.exclude_visited;
        let tcfg = oargs.train_config();
        let dir = a.out_dir.join("legs").join(name);
        let result = model
            .validate()
            .map_err(anyhow::Error::from)
            .and_then(|_| train_run(&a.corpus, &corpus, &model, &tcfg, &a.eval, None, &dir));
        let (metrics, error) = match result {
            Ok(records) => (records.into_iter().find(|r| r.metrics.cohort == Cohort::All), None),
            Err(e) => (None, Some(format!("{e:#}"))),
        };
        let error = error.or_else(|| metrics.is_none().then(|| "no metrics for the all cohort".to_string()));
        GridRow {
            leg: name.clone(),
            variant: margs.variant,
            ablation: margs.ablation().label(),
            cell_size: margs.cell_size,
            batch_size: oargs.batch_size,
            seed: oargs.seed,
            metrics,
            error,
        }
    };
    let mut rows: Vec<GridRow> = if a.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build()?;
        pool.install(|| legs.par_iter().map(run_leg).collect())
    } else {
        legs.iter().map(run_leg).collect()
    };
    // best Acc@1 first, failures last, ties by leg name
    rows.sort_by(|x, y| {
        let key = |r: &GridRow| r.metrics.as_ref().map(|m| m.metrics.acc[0].1);
        match (key(x), key(y)) {
            (Some(a), Some(b)) => b.total_cmp(&a),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then_with(|| x.leg.cmp(&y.leg))
    });
    let table = format_grid_table(&rows);
    write_atomic(&a.out_dir.join("grid.tsv"), table.as_bytes())?;
    let jsonl: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("grid row serializes") + "\n")
        .collect();
    write_atomic(&a.out_dir.join("grid.jsonl"), jsonl.as_bytes())?;
    print!("{table}");
    let failed = rows.iter().filter(|r| r.metrics.is_none()).count();
    if failed > 0 {
        bail!("{failed} of {} grid legs failed", rows.len());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckCase {
    variant: Variant,
    ablation: String,
    report: FdReport,
}

/// Full-model gradient checks at N=6, n_i=3, n_c=4 over a 5-step sequence.
pub fn gradcheck_suite(eps: f64, tol: f64, seed: u64) -> crate::error::Result<Vec<(Variant, GateAblation, FdReport)>> {
    use rand::{Rng, SeedableRng};
    let mut cases = Vec::new();
    let mut plan: Vec<(Variant, GateAblation)> = Variant::ALL.iter().map(|&v| (v, GateAblation::NONE)).collect();
    for (_, abl) in GateAblation::NAMED.iter().skip(1) {
        plan.push((Variant::StClstm, *abl));
        plan.push((Variant::StLstm, *abl));
    }
    for (k, (variant, ablation)) in plan.into_iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut cfg = ModelConfig::new(variant, 6).with_sizes(3, 4);
        cfg.ablation = ablation;
        let mut p = ModelParams::init(&cfg, &mut rng);
        for v in p.b_out.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let pois: Vec<usize> = (0..6).map(|_| rng.gen_range(0..6)).collect();
        let seq: Vec<TransitionTriple> = (0..5)
            .map(|j| TransitionTriple {
                poi: pois[j],
                dt: rng.gen_range(0.0..3.0),
                dd: rng.gen_range(0.0..3.0),
            })
            .collect();
        let targets = &pois[1..];
        let (_, grads) = loss_and_grads(&p, &seq, targets, &cfg)?;
        let report = fd_check(
            |q: &ModelParams| sequence_loss(q, &seq, targets, &cfg).unwrap_or(f64::NAN),
            &p,
            &grads,
            FdConfig {
                eps,
                tol,
                max_per_tensor: None,
                seed,
            },
        )?;
        cases.push((variant, ablation, report));
    }
    Ok(cases)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let cases = gradcheck_suite(a.eps, a.tol, a.seed)?;
    let mut failed = 0;
    for (variant, abl, r) in &cases {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += (!r.passed()) as usize;
        println!(
            "{status} {:<8} {:<16} max rel err {:.3e} over {} coordinates{}",
            variant.name(),
            abl.label(),
            r.max_rel_error,
            r.checked,
            r.worst
                .as_ref()
                .filter(|_| !r.passed())
                .map(|(n, i)| format!(" (worst {n}[{i}])"))
                .unwrap_or_default()
        );
    }
    if let Some(dir) = &a.out_dir {
        ensure_dir(dir)?;
        let out: Vec<GradcheckCase> = cases
            .into_iter()
            .map(|(variant, abl, report)| GradcheckCase {
                variant,
                ablation: abl.label(),
                report,
            })
            .collect();
        write_json(&dir.join("gradcheck.json"), &out)?;
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
