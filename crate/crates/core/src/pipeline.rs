//! End-to-end runs: training over shuffled domain orders, per-domain
//! snapshots, warmup, prototypes and the final evaluation, plus the on-disk
//! layout the command line tool reads back.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, load_adapter, save_adapter, AdapterRole, LoraAdapter, Projection};
use crate::error::{Error, Result};
use crate::eval::{absc_metrics, joint_f1, span_f1, ResultMatrix};
use crate::io;
use crate::model::{generation_prefix, BaseModel, ModelConfig, Tokenizer, BOS};
use crate::positioning::{load_prototypes, save_prototypes, DomainPrototypeSet, DEFAULT_EPS_SCALE};
use crate::tasks::{
    build_instruction, expand_for_task, parse_output, parse_terms, target_text, Corpus, Instance, Polarity, Task,
};
use crate::trainer::{
    load_run, pretrain_base, save_run, train_domain, train_sequential, warmup, AdamState, DomainSequenceState,
    LossReport, PretrainConfig, TrainConfig,
};

/// Seeds of "Order 1", "Order 2" and "Order 3".
pub const DEFAULT_ORDER_SEEDS: [u64; 3] = [11, 22, 33];
pub const DEFAULT_VOCAB_CAP: usize = 2000;

/// Which adapters answer a test sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Route by nearest prototype, then use that domain's adapters.
    Positioned,
    /// Use the gold domain's adapters.
    OracleDomain,
    /// Invariant adapter alone.
    InvariantOnly,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Positioned => "positioned",
            EvalMode::OracleDomain => "oracle-domain",
            EvalMode::InvariantOnly => "invariant-only",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "positioned" => Ok(EvalMode::Positioned),
            "oracle-domain" | "oracle" => Ok(EvalMode::OracleDomain),
            "invariant-only" | "invariant" => Ok(EvalMode::InvariantOnly),
            _ => Err(Error::usage(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

/// Everything a run needs besides data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub train: TrainConfig,
    pub task: Task,
    pub order_seeds: Vec<u64>,
    pub eval_mode: EvalMode,
    /// Train one adapter sequentially instead of the decoupled pipeline.
    pub sequence_baseline: bool,
    pub model_seed: u64,
    pub vocab_cap: usize,
    pub eps_scale: f64,
    pub pooled_covariance: bool,
    /// Generation budget; the task default when `None`.
    pub max_new: Option<usize>,
    /// Continue from checkpoints found in the output directory.
    pub resume: bool,
    pub pretrain: PretrainConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            task: Task::Joint,
            order_seeds: DEFAULT_ORDER_SEEDS.to_vec(),
            eval_mode: EvalMode::Positioned,
            sequence_baseline: false,
            model_seed: 1,
            vocab_cap: DEFAULT_VOCAB_CAP,
            eps_scale: DEFAULT_EPS_SCALE,
            pooled_covariance: false,
            max_new: None,
            resume: false,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunOptions {
    /// Applies one `key=value` override: a run-level key, a `pretrain_*` key
    /// or any [`TrainConfig`] key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::usage(format!("invalid value `{value}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "task" => self.task = v.parse()?,
            "order_seeds" | "orders" => {
                self.order_seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "eval_mode" => self.eval_mode = v.parse()?,
            "baseline" => {
                self.sequence_baseline = match v {
                    "sequence" => true,
                    "none" | "" => false,
                    _ => return Err(Error::usage(format!("unknown baseline `{v}`"))),
                }
            }
            "model_seed" => self.model_seed = num(key, v)?,
            "vocab_cap" => self.vocab_cap = num(key, v)?,
            "eps_scale" => self.eps_scale = num(key, v)?,
            "pooled_covariance" => self.pooled_covariance = num(key, v)?,
            "max_new" => self.max_new = Some(num(key, v)?),
            "resume" => self.resume = num(key, v)?,
            "pretrain_epochs" => self.pretrain.epochs = num(key, v)?,
            "pretrain_rank" => self.pretrain.rank = num(key, v)?,
            "pretrain_lr" => self.pretrain.lr = num(key, v)?,
            "pretrain_batch_size" => self.pretrain.batch_size = num(key, v)?,
            "pretrain_seed" => self.pretrain.seed = num(key, v)?,
            other => self.train.set(other, v)?,
        }
        Ok(())
    }

    /// Applies every `key=value` line; blank lines and `#` comments are
    /// skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }
}

/// The desk-scale recipe for the synthetic benchmark: a pretrained base,
/// adapters on every projection, a faster learning rate and a slowly moving
/// invariant adapter.
pub fn desk_options(task: Task) -> RunOptions {
    let mut opts = RunOptions {
        task,
        ..RunOptions::default()
    };
    opts.train.lr = 5e-3;
    opts.train.epochs = 20;
    opts.train.invariant_lr_scale = 0.01;
    opts.train.seed = 1;
    opts.train.projections = Projection::ALL.to_vec();
    opts.pretrain = PretrainConfig {
        epochs: 30,
        lr: 2e-3,
        ..PretrainConfig::default()
    };
    opts
}

pub fn default_max_new(task: Task) -> usize {
    match task {
        Task::Absc => 4,
        Task::Ae | Task::Joint => 24,
    }
}

/// A corpus re-targeted at one task. The tokenizer covers the training side
/// of every task and the general split, so one base serves all tasks.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub task: Task,
    pub domains: Vec<String>,
    /// Sentence-level training data, used for prototypes.
    pub sentences: Vec<Vec<Instance>>,
    pub train: Vec<Vec<Instance>>,
    pub test: Vec<Vec<Instance>>,
    /// General split expanded for every task, for base pretraining.
    pub general: Vec<Instance>,
    pub tokenizer: Tokenizer,
}

impl Prepared {
    pub fn new(corpus: &Corpus, task: Task, vocab_cap: usize) -> Result<Prepared> {
        if corpus.domains.is_empty() {
            return Err(Error::degenerate("corpus has no domains"));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut sentences = Vec::new();
        let mut text = Vec::new();
        let mut add_text = |items: &[Instance]| -> Result<()> {
            for i in items {
                text.push(build_instruction(i.task, i)?);
                text.push(target_text(i)?);
            }
            Ok(())
        };
        for d in &corpus.domains {
            let tagged: Vec<Instance> = d
                .train
                .iter()
                .map(|i| Instance {
                    domain: Some(d.name.clone()),
                    ..i.clone()
                })
                .collect();
            let tr = expand_for_task(&tagged, task)?;
            if tr.is_empty() {
                return Err(Error::degenerate(format!("domain `{}` has no training examples", d.name)));
            }
            for t in Task::ALL {
                add_text(&expand_for_task(&tagged, t)?)?;
            }
            let tagged_test: Vec<Instance> = d
                .test
                .iter()
                .map(|i| Instance {
                    domain: Some(d.name.clone()),
                    ..i.clone()
                })
                .collect();
            test.push(expand_for_task(&tagged_test, task)?);
            sentences.push(tagged);
            train.push(tr);
        }
        let mut general = Vec::new();
        for t in Task::ALL {
            general.extend(expand_for_task(&corpus.general, t)?);
        }
        add_text(&general)?;
        let tokenizer = Tokenizer::build(text.iter().map(String::as_str), vocab_cap);
        Ok(Prepared {
            task,
            domains: corpus.names(),
            sentences,
            train,
            test,
            general,
            tokenizer,
        })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| Error::usage(format!("unknown domain `{name}`")))
    }
}

/// The frozen model a run starts from: the seeded random transformer,
/// optionally with a pretraining adapter folded in.
#[derive(Clone, Debug)]
pub struct Base {
    pub model: BaseModel,
    pub pretraining: Option<LoraAdapter>,
    pub losses: Vec<LossReport>,
}

pub const PRETRAINING_ADAPTER: &str = "pretraining.json";

impl Base {
    pub fn build(prepared: &Prepared, model_seed: u64, pretrain: &PretrainConfig) -> Result<Base> {
        let model = BaseModel::new(ModelConfig::toy(prepared.tokenizer.len(), model_seed))?;
        if pretrain.epochs == 0 {
            return Ok(Base {
                model,
                pretraining: None,
                losses: Vec::new(),
            });
        }
        if prepared.general.is_empty() {
            return Err(Error::usage("pretraining requested but the corpus has no general split"));
        }
        let (adapter, losses) = pretrain_base(&model, &prepared.tokenizer, &prepared.general, pretrain)?;
        Ok(Base {
            model: model.merged(&adapter)?,
            pretraining: Some(adapter),
            losses,
        })
    }

    /// Rebuilds the frozen model from its config and saved adapter.
    pub fn restore(config: ModelConfig, pretraining: Option<LoraAdapter>) -> Result<Base> {
        let random = BaseModel::new(config)?;
        let model = match &pretraining {
            Some(a) => random.merged(a)?,
            None => random,
        };
        Ok(Base {
            model,
            pretraining,
            losses: Vec::new(),
        })
    }
}

/// Scores of one evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub mode: String,
    pub samples: usize,
    pub unparseable: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_accuracy: Option<f64>,
    /// The same metrics per gold domain, in run order.
    #[serde(default)]
    pub per_domain: Vec<DomainScores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    pub domain: String,
    pub samples: usize,
    pub metrics: Vec<(String, f64)>,
}

impl EvalReport {
    /// Accuracy for ABSC, F1 otherwise.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.f1).unwrap_or(0.0)
    }

    /// `(name, value)` of every task metric that was computed.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        [("accuracy", self.accuracy), ("macro_f1", self.macro_f1), ("f1", self.f1)]
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect()
    }

    pub fn domain_metric(&self, domain: &str, metric: &str) -> Option<f64> {
        self.per_domain
            .iter()
            .find(|d| d.domain == domain)
            .and_then(|d| d.metrics.iter().find(|(k, _)| k == metric).map(|(_, v)| *v))
    }
}

pub fn metric_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Absc => &["accuracy", "macro_f1"],
        Task::Ae | Task::Joint => &["f1"],
    }
}

/// One generated answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect: Option<String>,
    pub gold: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routed: Option<String>,
}

/// Greedy answers for every instance; `adapters(k)` picks the adapters of
/// the `k`-th instance.
pub fn generate_all<'a, F>(
    model: &BaseModel,
    tokenizer: &Tokenizer,
    instances: &[Instance],
    max_new: usize,
    adapters: F,
) -> Result<Vec<String>>
where
    F: Fn(usize) -> Vec<&'a LoraAdapter> + Sync,
{
    instances
        .par_iter()
        .enumerate()
        .map(|(k, inst)| {
            let prompt = tokenizer.encode(&build_instruction(inst.task, inst)?);
            model.generate(tokenizer, &adapters(k), &generation_prefix(&prompt), max_new)
        })
        .collect()
}

/// Scores generated outputs against gold instances of one task.
pub fn score(task: Task, instances: &[Instance], outputs: &[String]) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::degenerate("no test samples"));
    }
    if instances.len() != outputs.len() {
        return Err(Error::usage("one output per test sample is required"));
    }
    let mut report = EvalReport {
        task: task.to_string(),
        samples: instances.len(),
        ..Default::default()
    };
    match task {
        Task::Absc => {
            let gold = instances
                .iter()
                .map(|i| {
                    i.aspects
                        .first()
                        .map(|a| a.polarity)
                        .ok_or_else(|| Error::format("ABSC sample without an aspect"))
                })
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<Option<Polarity>> = outputs.iter().map(|o| Polarity::parse(o)).collect();
            report.unparseable = pred.iter().filter(|p| p.is_none()).count();
            let (acc, f1) = absc_metrics(&pred, &gold)?;
            report.accuracy = Some(acc);
            report.macro_f1 = Some(f1);
        }
        Task::Ae => {
            let gold: Vec<Vec<&str>> = instances
                .iter()
                .map(|i| i.aspects.iter().map(|a| a.term.as_str()).collect())
                .collect();
            let pred: Vec<Vec<String>> = outputs.iter().map(|o| parse_terms(o)).collect();
            let pred: Vec<Vec<&str>> = pred.iter().map(|v| v.iter().map(String::as_str).collect()).collect();
            report.f1 = Some(span_f1(&pred, &gold)?.f1);
        }
        Task::Joint => {
            let gold: Vec<Vec<(&str, Polarity)>> = instances
                .iter()
                .map(|i| i.aspects.iter().map(|a| (a.term.as_str(), a.polarity)).collect())
                .collect();
            let parsed: Vec<_> = outputs.iter().map(|o| parse_output(o)).collect();
            report.unparseable = parsed.iter().filter(|p| !p.parseable).count();
            let pred: Vec<Vec<(&str, Polarity)>> = parsed
                .iter()
                .map(|p| p.pairs.iter().map(|(t, pol)| (t.as_str(), *pol)).collect())
                .collect();
            report.f1 = Some(joint_f1(&pred, &gold)?.f1);
        }
    }
    Ok(report)
}

/// Scores `outputs` overall and per gold domain (listed in `order`).
fn score_by_domain(task: Task, order: &[String], instances: &[Instance], outputs: &[String]) -> Result<EvalReport> {
    let mut report = score(task, instances, outputs)?;
    for name in order {
        let idx: Vec<usize> = (0..instances.len())
            .filter(|&k| instances[k].domain.as_deref() == Some(name.as_str()))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let inst: Vec<Instance> = idx.iter().map(|&k| instances[k].clone()).collect();
        let outs: Vec<String> = idx.iter().map(|&k| outputs[k].clone()).collect();
        report.per_domain.push(DomainScores {
            domain: name.clone(),
            samples: idx.len(),
            metrics: score(task, &inst, &outs)?.metrics(),
        });
    }
    Ok(report)
}

/// Representation used for positioning: the frozen base over `<bos> text`.
pub fn sentence_repr(model: &BaseModel, tokenizer: &Tokenizer, text: &str) -> Result<Vec<f64>> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer.encode(text));
    ids.truncate(model.config().max_len);
    model.hidden_repr(&ids)
}

/// Prototypes from each domain's training sentences, listed in run order.
pub fn build_prototypes(
    model: &BaseModel,
    tokenizer: &Tokenizer,
    sentences_by_domain: &[Vec<Instance>],
    eps_scale: f64,
    pooled: bool,
) -> Result<DomainPrototypeSet> {
    let reps = sentences_by_domain
        .iter()
        .map(|dom| {
            dom.par_iter()
                .map(|i| sentence_repr(model, tokenizer, &i.text))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    DomainPrototypeSet::compute(&reps, eps_scale, pooled)?.quantized()
}

/// Descriptor written as `run.json` in each order directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderHeader {
    pub format: String,
    pub version: u32,
    pub order_id: usize,
    pub order_seed: u64,
    pub task: Task,
    pub order: Vec<String>,
    pub model: ModelConfig,
    pub sequence_baseline: bool,
    pub eval_mode: EvalMode,
    pub eps_scale: f64,
    pub pooled_covariance: bool,
    pub max_new: usize,
    /// Whether `pretraining.json` is folded into the base.
    #[serde(default)]
    pub pretrained: bool,
}

const ORDER_FORMAT: &str = "abscl-order";
pub const STATE_DIR: &str = "state";
pub const SEQUENTIAL_ADAPTER: &str = "sequential.json";
pub const PROTOTYPES: &str = "prototypes.json";

pub enum RunKind {
    Decoupled(Box<DomainSequenceState>),
    Sequence(LoraAdapter),
}

/// A trained (or partially trained) order, ready for evaluation.
pub struct TrainedRun {
    pub header: OrderHeader,
    pub tokenizer: Tokenizer,
    pub model: BaseModel,
    pub kind: RunKind,
    pub prototypes: Option<DomainPrototypeSet>,
}

impl TrainedRun {
    /// Loads an order directory written by [`run_order`].
    pub fn load(dir: &Path) -> Result<TrainedRun> {
        let header_path = dir.join("run.json");
        if !header_path.is_file() {
            return Err(Error::usage(format!("{} is not an order directory (no run.json)", dir.display())));
        }
        let header: OrderHeader = io::read_json(&header_path)?;
        if header.format != ORDER_FORMAT || header.version != 1 {
            return Err(Error::format(format!("{}: unsupported run format", header_path.display())));
        }
        let tokenizer = Tokenizer::load(&dir.join("vocab.txt"))?;
        let pretraining = if header.pretrained {
            Some(load_adapter(&dir.join(PRETRAINING_ADAPTER))?)
        } else {
            None
        };
        let model = Base::restore(header.model.clone(), pretraining)?.model;
        let state_dir = dir.join(STATE_DIR);
        let kind = if header.sequence_baseline {
            RunKind::Sequence(load_adapter(&state_dir.join(SEQUENTIAL_ADAPTER))?)
        } else {
            RunKind::Decoupled(Box::new(load_run(&state_dir)?.0))
        };
        let proto_path = dir.join(PROTOTYPES);
        let prototypes = if proto_path.is_file() {
            Some(load_prototypes(&proto_path)?)
        } else {
            None
        };
        Ok(TrainedRun {
            header,
            tokenizer,
            model,
            kind,
            prototypes,
        })
    }

    pub fn order(&self) -> &[String] {
        &self.header.order
    }

    pub fn state(&self) -> Option<&DomainSequenceState> {
        match &self.kind {
            RunKind::Decoupled(s) => Some(s),
            RunKind::Sequence(_) => None,
        }
    }

    fn generate<'s>(&'s self, items: &[Instance], pick: &(dyn Fn(usize) -> Vec<&'s LoraAdapter> + Sync)) -> Result<Vec<String>> {
        generate_all(&self.model, &self.tokenizer, items, self.header.max_new, pick)
    }

    /// Evaluates task-level `test` instances. With `warmed = false` the raw
    /// invariant adapter stands in for the warmed clones. Positioned mode
    /// strips domain labels before routing; the labels are only used
    /// afterwards, for routing accuracy and per-domain scores.
    pub fn evaluate(&self, test: &[Instance], mode: EvalMode, warmed: bool, seed: u64) -> Result<(EvalReport, Vec<Prediction>)> {
        if test.is_empty() {
            return Err(Error::degenerate("no test samples"));
        }
        let mut items: Vec<Instance> = test.to_vec();
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let order = self.order();

        let (outputs, routes, mode_name) = match &self.kind {
            RunKind::Sequence(adapter) => (self.generate(&items, &|_| vec![adapter])?, None, "sequence".to_string()),
            RunKind::Decoupled(state) => {
                let shared: Vec<&LoraAdapter> = if warmed {
                    if !state.is_warmed() {
                        return Err(Error::usage("run has no warmed adapters; run warmup first"));
                    }
                    state.warmed.iter().collect()
                } else {
                    vec![&state.invariant; state.variants.len()]
                };
                match mode {
                    EvalMode::InvariantOnly => (self.generate(&items, &|_| vec![&state.invariant])?, None, mode.to_string()),
                    EvalMode::OracleDomain => {
                        let idx = items
                            .iter()
                            .map(|i| {
                                i.domain
                                    .as_ref()
                                    .and_then(|d| order.iter().position(|o| o == d))
                                    .filter(|&k| k < state.variants.len())
                                    .ok_or_else(|| {
                                        Error::usage(format!(
                                            "no trained variant for gold domain `{}`",
                                            i.domain.as_deref().unwrap_or("<none>")
                                        ))
                                    })
                            })
                            .collect::<Result<Vec<usize>>>()?;
                        let outputs = self.generate(&items, &|k| vec![shared[idx[k]], &state.variants[idx[k]]])?;
                        (outputs, None, mode.to_string())
                    }
                    EvalMode::Positioned => {
                        let protos = self
                            .prototypes
                            .as_ref()
                            .ok_or_else(|| Error::usage("positioned evaluation needs prototypes"))?;
                        if protos.len() != state.variants.len() {
                            return Err(Error::usage(format!(
                                "{} prototypes for {} variant adapters",
                                protos.len(),
                                state.variants.len()
                            )));
                        }
                        let stripped: Vec<Instance> = items.iter().map(Instance::without_domain).collect();
                        let routes: Vec<usize> = stripped
                            .par_iter()
                            .map(|i| protos.nearest(&sentence_repr(&self.model, &self.tokenizer, &i.text)?))
                            .collect::<Result<_>>()?;
                        let outputs = self.generate(&stripped, &|k| vec![shared[routes[k]], &state.variants[routes[k]]])?;
                        (outputs, Some(routes), mode.to_string())
                    }
                }
            }
        };

        let mut report = score_by_domain(self.header.task, order, &items, &outputs)?;
        report.mode = mode_name;
        if let Some(routes) = &routes {
            let hits: Vec<bool> = items
                .iter()
                .zip(routes)
                .filter_map(|(i, &r)| i.domain.as_ref().map(|d| *d == order[r]))
                .collect();
            if !hits.is_empty() {
                report.routing_accuracy = Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64);
            }
        }
        let preds = items
            .iter()
            .zip(&outputs)
            .enumerate()
            .map(|(k, (i, o))| {
                Ok(Prediction {
                    text: i.text.clone(),
                    aspect: (i.task == Task::Absc).then(|| i.aspects[0].term.clone()),
                    gold: target_text(i)?,
                    output: o.clone(),
                    routed: routes.as_ref().map(|r| order[r[k]].clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((report, preds))
    }
}

/// Results of one domain order.
#[derive(Clone, Debug)]
pub struct OrderResult {
    pub order_id: usize,
    pub order: Vec<String>,
    /// One grid per task metric. Row `t < N−1` is the snapshot after domain
    /// `t`; the last row is the final evaluation.
    pub matrices: Vec<ResultMatrix>,
    /// Snapshot rows before the final evaluation replaced the last one.
    pub last_snapshot: Vec<Vec<Option<f64>>>,
    pub final_report: EvalReport,
    /// Final evaluation with the raw invariant adapter instead of the warmed
    /// clones; absent for the sequence baseline.
    pub no_warmup: Option<EvalReport>,
}

impl OrderResult {
    pub fn primary_matrix(&self) -> &ResultMatrix {
        &self.matrices[0]
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub r#final: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_warmup: Option<EvalReport>,
}

pub fn shuffled_order(domains: &[String], seed: u64) -> Vec<String> {
    let mut order = domains.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn order_dir(out: &Path, order_id: usize) -> PathBuf {
    out.join(format!("order_{order_id}"))
}

pub fn matrix_file(metric: &str) -> String {
    format!("forgetting_{metric}.csv")
}

fn record_row(matrices: &mut [ResultMatrix], t: usize, order: &[String], report: &EvalReport) -> Result<()> {
    for ds in &report.per_domain {
        let e = order
            .iter()
            .position(|o| *o == ds.domain)
            .ok_or_else(|| Error::usage(format!("unknown domain `{}`", ds.domain)))?;
        for m in matrices.iter_mut() {
            if let Some((_, v)) = ds.metrics.iter().find(|(k, _)| *k == m.metric) {
                m.set(t, e, *v)?;
            }
        }
    }
    Ok(())
}

fn save_matrices(dir: &Path, matrices: &[ResultMatrix]) -> Result<()> {
    for m in matrices {
        io::write_text(&dir.join(matrix_file(&m.metric)), &m.to_csv())?;
    }
    io::write_text(&dir.join("forgetting.csv"), &matrices[0].to_csv())
}

fn write_losses(path: &Path, rows: &[(usize, usize, LossReport)]) -> Result<()> {
    let mut text = String::from("domain,epoch,L_S,L_D,L_O,total\n");
    for (d, e, r) in rows {
        text.push_str(&format!("{d},{e},{:?},{:?},{:?},{:?}\n", r.l_s, r.l_d, r.l_o, r.total));
    }
    io::write_text(path, &text)
}

/// Trains and evaluates one order into `dir`: `run.json`, `vocab.txt`,
/// `state/`, `prototypes.json`, `forgetting*.csv`, `metrics.json` and
/// `predictions.jsonl`.
pub fn run_order(
    prepared: &Prepared,
    opts: &RunOptions,
    base: &Base,
    order_id: usize,
    seed: u64,
    dir: &Path,
) -> Result<OrderResult> {
    opts.train.validate()?;
    if base.model.config().vocab_size != prepared.tokenizer.len() {
        return Err(Error::usage("base model and tokenizer disagree on the vocabulary"));
    }
    io::create_dir_all(dir)?;
    let order = shuffled_order(&prepared.domains, seed);
    let idx: Vec<usize> = order.iter().map(|n| prepared.index(n)).collect::<Result<_>>()?;
    let model = base.model.clone();
    let max_new = opts.max_new.unwrap_or_else(|| default_max_new(prepared.task));
    if max_new == 0 {
        return Err(Error::usage("max_new must be at least 1"));
    }
    let header = OrderHeader {
        format: ORDER_FORMAT.into(),
        version: 1,
        order_id,
        order_seed: seed,
        task: prepared.task,
        order: order.clone(),
        model: model.config().clone(),
        sequence_baseline: opts.sequence_baseline,
        eval_mode: opts.eval_mode,
        eps_scale: opts.eps_scale,
        pooled_covariance: opts.pooled_covariance,
        max_new,
        pretrained: base.pretraining.is_some(),
    };
    io::write_json(&dir.join("run.json"), &header)?;
    if let Some(a) = &base.pretraining {
        save_adapter(a, &dir.join(PRETRAINING_ADAPTER))?;
    }
    prepared.tokenizer.save(&dir.join("vocab.txt"))?;

    let n = order.len();
    let mut matrices: Vec<ResultMatrix> = metric_names(prepared.task)
        .iter()
        .map(|m| ResultMatrix::new(*m, order.clone()))
        .collect();
    let seen_test = |t: usize| -> Vec<Instance> { idx[..=t].iter().flat_map(|&k| prepared.test[k].iter().cloned()).collect() };
    let eval_seed = seed ^ 0x5eed;
    let state_dir = dir.join(STATE_DIR);
    io::create_dir_all(&state_dir)?;

    let points = model.injection_points(&opts.train.projections);
    let d_model = model.config().d_model;
    let mut run = TrainedRun {
        header,
        tokenizer: prepared.tokenizer.clone(),
        model,
        kind: RunKind::Sequence(init_adapter(opts.train.rank, d_model, &points, opts.train.seed, AdapterRole::Sequential)?),
        prototypes: None,
    };

    if opts.sequence_baseline {
        let mut adapter = match &run.kind {
            RunKind::Sequence(a) => a.clone(),
            RunKind::Decoupled(_) => unreachable!(),
        };
        let mut losses = Vec::new();
        io::write_text(&state_dir.join("config.txt"), &opts.train.to_kv())?;
        for (t, &k) in idx.iter().enumerate() {
            let mut opt = AdamState::for_adapter(&adapter);
            let reports = train_sequential(&run.model, &prepared.tokenizer, &mut adapter, &mut opt, t, &prepared.train[k], &opts.train)?;
            losses.extend(reports.into_iter().enumerate().map(|(e, r)| (t, e, r)));
            run.kind = RunKind::Sequence(adapter.clone());
            let test = seen_test(t);
            if !test.is_empty() {
                let (r, _) = run.evaluate(&test, opts.eval_mode, false, eval_seed)?;
                record_row(&mut matrices, t, &order, &r)?;
            }
        }
        save_adapter(&adapter, &state_dir.join(SEQUENTIAL_ADAPTER))?;
        write_losses(&state_dir.join("losses.csv"), &losses)?;
        let (report, preds) = run.evaluate(&seen_test(n - 1), opts.eval_mode, false, eval_seed)?;
        return finish_order(dir, order_id, order, matrices, report, None, &preds);
    }

    let mut state = DomainSequenceState::new(&run.model, order.clone(), &opts.train)?;
    if opts.resume && state_dir.join("state.json").is_file() {
        let (saved, cfg) = load_run(&state_dir)?;
        if cfg != opts.train || saved.order != order {
            return Err(Error::usage(format!(
                "checkpoint in {} was written with a different configuration",
                state_dir.display()
            )));
        }
        state = saved;
        let p = dir.join(matrix_file(&matrices[0].metric));
        if state.completed() > 0 && p.is_file() {
            for m in matrices.iter_mut() {
                *m = ResultMatrix::from_csv(&io::read_text(&dir.join(matrix_file(&m.metric)))?)?;
            }
        }
    }

    for t in state.completed()..n {
        let k = idx[t];
        state.begin_domain(&prepared.train[k], &opts.train)?;
        train_domain(&run.model, &prepared.tokenizer, &mut state, &prepared.train[k], &opts.train)?;
        save_run(&state, &opts.train, &state_dir)?;
        run.kind = RunKind::Decoupled(Box::new(state.clone()));
        let test = seen_test(t);
        if !test.is_empty() {
            let (r, _) = run.evaluate(&test, EvalMode::OracleDomain, false, eval_seed)?;
            record_row(&mut matrices, t, &order, &r)?;
        }
        save_matrices(dir, &matrices)?;
    }

    if !state.is_warmed() {
        warmup(&run.model, &prepared.tokenizer, &mut state, &opts.train)?;
        save_run(&state, &opts.train, &state_dir)?;
    }
    run.kind = RunKind::Decoupled(Box::new(state));

    let sentences: Vec<Vec<Instance>> = idx.iter().map(|&k| prepared.sentences[k].clone()).collect();
    let protos = build_prototypes(&run.model, &prepared.tokenizer, &sentences, opts.eps_scale, opts.pooled_covariance)?;
    save_prototypes(&protos, &dir.join(PROTOTYPES))?;
    run.prototypes = Some(protos);

    let all_test = seen_test(n - 1);
    let (report, preds) = run.evaluate(&all_test, opts.eval_mode, true, eval_seed)?;
    let (no_warmup, _) = run.evaluate(&all_test, opts.eval_mode, false, eval_seed)?;
    finish_order(dir, order_id, order, matrices, report, Some(no_warmup), &preds)
}

fn finish_order(
    dir: &Path,
    order_id: usize,
    order: Vec<String>,
    mut matrices: Vec<ResultMatrix>,
    final_report: EvalReport,
    no_warmup: Option<EvalReport>,
    preds: &[Prediction],
) -> Result<OrderResult> {
    let n = order.len();
    let last_snapshot = (0..n).map(|t| matrices[0].row(t).to_vec()).collect();
    record_row(&mut matrices, n - 1, &order, &final_report)?;
    save_matrices(dir, &matrices)?;
    let finals = FinalMetrics {
        r#final: final_report,
        no_warmup,
    };
    io::write_json(&dir.join("metrics.json"), &finals)?;
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p).map_err(|e| Error::format(e.to_string()))?);
        text.push('\n');
    }
    io::write_text(&dir.join("predictions.jsonl"), &text)?;
    Ok(OrderResult {
        order_id,
        order,
        matrices,
        last_snapshot,
        final_report: finals.r#final,
        no_warmup: finals.no_warmup,
    })
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    /// `1`, `2`, ... or `Average`.
    pub order_id: String,
    pub task: Task,
    pub metric: String,
    pub value: f64,
}

/// Per order: the average performance of every task metric (mean of the
/// final row of its grid) and routing accuracy when positioned. Then one
/// `Average` row per metric over the orders.
pub fn summarize(task: Task, results: &[OrderResult]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut push = |rows: &mut Vec<SummaryRow>, id: usize, metric: &str, value: f64| {
        rows.push(SummaryRow {
            order_id: id.to_string(),
            task,
            metric: metric.to_string(),
            value,
        });
        if !names.iter().any(|n| n == metric) {
            names.push(metric.to_string());
        }
    };
    for r in results {
        for m in &r.matrices {
            push(&mut rows, r.order_id, &m.metric, m.average_performance()?);
        }
        if let Some(acc) = r.final_report.routing_accuracy {
            push(&mut rows, r.order_id, "routing_accuracy", acc);
        }
    }
    for name in names {
        let vals: Vec<f64> = rows.iter().filter(|r| r.metric == name).map(|r| r.value).collect();
        rows.push(SummaryRow {
            order_id: "Average".into(),
            task,
            metric: name,
            value: vals.iter().sum::<f64>() / vals.len() as f64,
        });
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("order_id,task,metric,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:?}\n", r.order_id, r.task, r.metric, r.value));
    }
    s
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("order_id,task,metric,value") {
        return Err(Error::format("summary CSV header must be `order_id,task,metric,value`"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format(format!("summary line {}: expected 4 fields", i + 2)));
            }
            Ok(SummaryRow {
                order_id: f[0].to_string(),
                task: f[1].parse()?,
                metric: f[2].to_string(),
                value: f[3]
                    .parse()
                    .map_err(|_| Error::format(format!("summary line {}: bad value `{}`", i + 2, f[3])))?,
            })
        })
        .collect()
}

/// Every file under `dir`, as sorted `/`-separated relative paths.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub files: Vec<String>,
}

/// (Re)writes `manifest.json` listing every file under `out`.
pub fn write_manifest(out: &Path) -> Result<Manifest> {
    let mut files = list_files(out)?;
    if !files.iter().any(|f| f == "manifest.json") {
        files.push("manifest.json".into());
        files.sort();
    }
    let manifest = Manifest {
        format: "abscl-manifest".into(),
        files,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Runs every order into `out/order_{k}` and writes `summary.csv` and
/// `manifest.json`.
pub fn run_sequence(
    prepared: &Prepared,
    opts: &RunOptions,
    base: &Base,
    out: &Path,
) -> Result<(Vec<OrderResult>, Vec<SummaryRow>)> {
    if opts.order_seeds.is_empty() {
        return Err(Error::usage("at least one order seed is required"));
    }
    if prepared.task != opts.task {
        return Err(Error::usage("data was prepared for a different task"));
    }
    io::create_dir_all(out)?;
    let mut results = Vec::new();
    for (k, &seed) in opts.order_seeds.iter().enumerate() {
        let id = k + 1;
        results.push(run_order(prepared, opts, base, id, seed, &order_dir(out, id))?);
    }
    let rows = summarize(prepared.task, &results)?;
    io::write_text(&out.join("summary.csv"), &summary_csv(&rows))?;
    write_manifest(out)?;
    Ok((results, rows))
}
