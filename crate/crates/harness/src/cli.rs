//! The `rico` command line. Every subcommand reads an optional JSON config
//! file, applies `--set key=value` overrides, then runs.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rico_core::metrics::{evaluate_ranking, mean_by_metric, MetricRow, RelevanceJudgments};
use rico_core::ssm::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use rico_core::store::{load_index, precompute_states, save_index, StateIndex};
use rico_core::RankedList;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{gen_corpus, write_json, write_jsonl, Corpus, CorpusSpec, ScenarioKind};
use crate::experiments::{
    random_baseline, retrieve, run_landscape, run_ordering_experiment, run_rerank_experiment, support_max_share,
    write_csv, ExperimentConfig,
};
use crate::train::{train_lm_with, TrainConfig};

/// A bad invocation: unreadable config, bad override, missing input. Exits 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(
    name = "rico",
    version,
    about = "Retrieval by optimizing mixtures of document states"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file; missing fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set optimizer.steps=5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model on a corpus
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path; the loss curve goes next to it as `.curve.jsonl`
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute document states
    Index {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k documents of the whole index for one question
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Rerank each query's judged candidates and write metrics
    Rerank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run file against judgments
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSONL of `{"query_id", "ranking"}` records, as written by `rerank`
        #[arg(long)]
        run: PathBuf,
        /// JSONL judgments; defaults to `<corpus>/judgments.jsonl`
        #[arg(long)]
        judgments: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also report the random-permutation baseline (needs `--corpus`)
        #[arg(long)]
        random_baseline: bool,
    },
    /// Loss over a two-document weight grid for each landscape scenario
    Landscape {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only this scenario id
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Answer loss with the relevant document last versus first
    Ordering {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Model shape and training schedule for `rico train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Layer keep-set for `rico index`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexJob {
    pub layer_keep: Option<Vec<usize>>,
}

/// Parse `value` as JSON, falling back to a bare string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

/// Apply `a.b.c=value` to a JSON object tree.
pub fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return usage(format!("override {assignment:?} is not KEY=VALUE"));
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return usage(format!("override {key:?}: {part:?} is not inside an object"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), override_value(raw));
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Defaults, then the config file, then overrides.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(args: &ConfigArgs) -> anyhow::Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = &args.config {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return usage(format!("cannot read config {}: {e}", path.display())),
        };
        let file: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return usage(format!("config {} is not valid JSON: {e}", path.display())),
        };
        merge(&mut value, file);
    }
    for o in &args.overrides {
        apply_override(&mut value, o)?;
    }
    match serde_json::from_value(value) {
        Ok(cfg) => Ok(cfg),
        Err(e) => usage(format!("invalid config: {e}")),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return usage(format!("{what} {} does not exist", path.display()));
    }
    Ok(())
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    require(path, "corpus directory")?;
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<ModelParams<f64>> {
    require(path, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_states(path: &Path, params: &ModelParams<f64>) -> anyhow::Result<StateIndex> {
    require(path, "index")?;
    load_index(path, Some(&params.fingerprint())).with_context(|| format!("loading index {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// A run-file line.
#[derive(Debug, Deserialize)]
struct RunRecord {
    query_id: String,
    ranking: RankedList,
}

#[derive(Serialize)]
struct MeanRow<'a> {
    source: &'a str,
    metric: &'a str,
    k: usize,
    value: f64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus { cfg, out } => {
            let spec: CorpusSpec = load_config(&cfg)?;
            let corpus = gen_corpus(&spec)?;
            corpus.save(&out)?;
            let audit = corpus.audit()?;
            println!("{}", serde_json::to_string(&audit)?);
        }
        Command::Train { cfg, corpus, out } => {
            let job: TrainJob = load_config(&cfg)?;
            let corpus = load_corpus(&corpus)?;
            let outcome = train_lm_with(&job.model, &corpus, &job.train, |s| {
                eprintln!("epoch {} loss {:.4}", s.epoch, s.mean_loss);
            })?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            save_checkpoint(&outcome.params, &out)?;
            write_jsonl(&out.with_extension("curve.jsonl"), &outcome.curve)?;
            println!(
                "{}",
                serde_json::json!({ "initial": outcome.initial, "final": outcome.final_eval, "checkpoint": out })
            );
        }
        Command::Index {
            cfg,
            corpus,
            checkpoint,
            out,
        } => {
            let job: IndexJob = load_config(&cfg)?;
            let corpus = load_corpus(&corpus)?;
            let params = load_model(&checkpoint)?;
            let mut index = precompute_states(&params, &corpus.document_records()?)?;
            if let Some(keep) = &job.layer_keep {
                index = rico_core::store::layer_subsample(&index, keep)?;
            }
            save_index(&index, &out)?;
            println!(
                "{}",
                serde_json::json!({ "documents": index.len(), "bytes": index.serialized_len() })
            );
        }
        Command::Retrieve {
            cfg,
            corpus,
            checkpoint,
            index,
            query,
            k,
        } => {
            let exp: ExperimentConfig = load_config(&cfg)?;
            exp.validate()?;
            let corpus = load_corpus(&corpus)?;
            let params = load_model(&checkpoint)?;
            let index = exp.effective_index(&load_states(&index, &params)?)?;
            let run = retrieve(&params, &index, &corpus, &query, exp.method, k, &exp.optimizer)?;
            for d in run.ranking.entries() {
                println!("{}", serde_json::to_string(d)?);
            }
            eprintln!("calls {}", serde_json::to_string(&run.calls)?);
        }
        Command::Rerank {
            cfg,
            corpus,
            checkpoint,
            index,
            out,
        } => {
            let exp: ExperimentConfig = load_config(&cfg)?;
            let corpus = load_corpus(&corpus)?;
            let params = load_model(&checkpoint)?;
            let index = load_states(&index, &params)?;
            let report = run_rerank_experiment(&params, &index, &corpus, &exp)?;
            create_dir(&out)?;
            let name = exp.method.name();
            write_csv(&out.join(format!("metrics_{name}.csv")), &report.rows)?;
            write_jsonl(&out.join(format!("run_{name}.jsonl")), &report.runs)?;
            let traces: Vec<Value> = report
                .runs
                .iter()
                .filter_map(|r| {
                    r.trace
                        .as_ref()
                        .map(|t| serde_json::json!({ "query_id": r.query_id, "trace": t }))
                })
                .collect();
            if !traces.is_empty() {
                write_jsonl(&out.join(format!("trace_{name}.jsonl")), &traces)?;
            }
            let mut summary = serde_json::json!({
                "method": name,
                "calls": report.calls,
                "means": report.means().into_iter().map(|((m, k), v)| (format!("{m}@{k}"), v)).collect::<std::collections::BTreeMap<_, _>>(),
            });
            if report.runs.iter().any(|r| r.weights.is_some()) {
                let (tied, strict) = support_max_share(&corpus, &report);
                summary["support_max_alpha"] = serde_json::json!({ "with_ties": tied, "strict": strict });
            }
            write_json(&out.join(format!("summary_{name}.json")), &summary)?;
            println!("{summary}");
        }
        Command::Eval {
            cfg,
            run,
            judgments,
            corpus,
            out,
            random_baseline: with_random,
        } => {
            let exp: ExperimentConfig = load_config(&cfg)?;
            exp.validate()?;
            let corpus = corpus.as_deref().map(load_corpus).transpose()?;
            let judg = match (&judgments, &corpus) {
                (Some(path), _) => {
                    require(path, "judgments file")?;
                    RelevanceJudgments::read_jsonl(BufReader::new(File::open(path)?))?
                }
                (None, Some(c)) => c.relevance(),
                (None, None) => return usage("eval needs --judgments or --corpus"),
            };
            require(&run, "run file")?;
            let mut rows: Vec<MetricRow> = Vec::new();
            for (n, line) in BufReader::new(File::open(&run)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RunRecord =
                    serde_json::from_str(&line).with_context(|| format!("{} line {}", run.display(), n + 1))?;
                rows.extend(evaluate_ranking(&rec.ranking, &judg, &rec.query_id, &exp.ks)?);
            }
            write_csv(&out, &rows)?;
            let mut means: Vec<(String, String, usize, f64)> = mean_by_metric(&rows)
                .into_iter()
                .map(|((m, k), v)| ("run".to_owned(), m, k, v))
                .collect();
            if with_random {
                let Some(c) = &corpus else {
                    return usage("--random-baseline needs --corpus");
                };
                means.extend(
                    random_baseline(c, &exp.ks, exp.random_seeds, exp.seed)?
                        .into_iter()
                        .map(|((m, k), v)| ("random".to_owned(), m, k, v)),
                );
            }
            let mean_rows: Vec<MeanRow> = means
                .iter()
                .map(|(s, m, k, v)| MeanRow {
                    source: s,
                    metric: m,
                    k: *k,
                    value: *v,
                })
                .collect();
            write_csv(&out.with_extension("means.csv"), &mean_rows)?;
            for r in &mean_rows {
                println!("{} {}@{} {:.4}", r.source, r.metric, r.k, r.value);
            }
        }
        Command::Landscape {
            cfg,
            corpus,
            checkpoint,
            index,
            out,
            scenario,
        } => {
            let exp: ExperimentConfig = load_config(&cfg)?;
            exp.validate()?;
            let corpus = load_corpus(&corpus)?;
            let params = load_model(&checkpoint)?;
            let index = exp.effective_index(&load_states(&index, &params)?)?;
            create_dir(&out)?;
            let pairs: Vec<_> = corpus
                .scenarios
                .iter()
                .filter(|s| s.kind == ScenarioKind::LandscapePair)
                .filter(|s| scenario.as_ref().is_none_or(|id| &s.scenario_id == id))
                .collect();
            if pairs.is_empty() {
                bail!("no landscape scenarios selected");
            }
            for s in pairs {
                let l = run_landscape(
                    &params,
                    &index,
                    &corpus.encode(&s.question)?,
                    &corpus.encode(&s.answer)?,
                    [&s.doc_ids[0], &s.doc_ids[1]],
                    exp.grid_resolution,
                    &exp.optimizer,
                    [0.5, 0.5],
                )?;
                write_csv(&out.join(format!("grid_{}.csv", s.scenario_id)), &l.cells)?;
                std::fs::write(
                    out.join(format!("trajectory_{}.jsonl", s.scenario_id)),
                    l.trajectory.to_jsonl(),
                )?;
            }
        }
        Command::Ordering {
            cfg,
            corpus,
            checkpoint,
            out,
        } => {
            let exp: ExperimentConfig = load_config(&cfg)?;
            let corpus = load_corpus(&corpus)?;
            let params = load_model(&checkpoint)?;
            let report = run_ordering_experiment(&params, &corpus, &exp)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_csv(&out, &report.rows)?;
            println!(
                "{}",
                serde_json::json!({ "queries": report.rows.len(), "mean_delta_last": report.mean_last, "mean_delta_first": report.mean_first })
            );
        }
    }
    Ok(())
}
