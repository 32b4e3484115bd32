//! Tasks × rounds × clients driver.
//!
//! Each round every client starts from the server's state (pending residual
//! folded into its base, aggregated factors adopted), trains locally, and
//! uploads. The server aggregates in fixed client order and computes the
//! next residual, which clients apply at the start of the following round.
//! Classifier heads stay on their clients; the server only averages them to
//! evaluate.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::aggregate::{self, aggregate_head, fedavg_weights, weighted_sum, BaseUpdate, ClientUpdate, Strategy};
use crate::config::{DataSource, EvalClassifier, ExperimentConfig};
use crate::datagen::{self, CsvSchema, LabeledDataset};
use crate::error::{Error, Result};
use crate::lora::{count_trainable, MatrixId, TrainableCount};
use crate::metrics::{self, Accuracy, AccuracyMatrix};
use crate::model::{self, init_backbone, Head, LocalOutcome, LocalTrainParams, ModelState, Objective, TrainSpec};
use crate::numkit::Tensor;
use crate::partition::{self, TaskSequence};
use crate::rng::{stream, Purpose};

/// Data of one seed: datasets, task order and per-task client shards.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub tasks: TaskSequence,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// `shards[t][k]`: training indices of client `k` in task `t`.
    pub shards: Vec<Vec<Vec<usize>>>,
    /// Held-out validation indices per task.
    pub val: Vec<Vec<usize>>,
}

/// Loads or generates the dataset, orders the classes into tasks and
/// partitions each task's training part among clients.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<TaskData> {
    let (train, test) = match cfg.dataset.source {
        DataSource::Blobs => datagen::make_blob_splits(&cfg.dataset.blob_spec(), seed)?,
        DataSource::Csv => {
            let schema = CsvSchema {
                num_classes: cfg.dataset.num_classes,
                has_header: cfg.dataset.has_header,
            };
            let load = |p: &Option<std::path::PathBuf>| {
                let p = p.as_ref().expect("validated");
                datagen::load_csv(p, schema)
            };
            (load(&cfg.dataset.train_csv)?, load(&cfg.dataset.test_csv)?)
        }
    };
    for d in [&train, &test] {
        if d.input_dim() != cfg.dataset.input_dim {
            return Err(Error::Config(format!(
                "dataset has {} feature columns but dataset.input_dim = {}",
                d.input_dim(),
                cfg.dataset.input_dim
            )));
        }
    }
    let tasks = partition::split_tasks(
        cfg.dataset.num_classes,
        cfg.tasks.count,
        &mut stream(seed, Purpose::TaskOrder, &[]),
    )?;
    let scheme = cfg.clients.scheme();
    let mut shards = Vec::with_capacity(tasks.num_tasks());
    let mut val = Vec::with_capacity(tasks.num_tasks());
    for (t, classes) in tasks.tasks.iter().enumerate() {
        let idx = train.indices_of(classes);
        let (tr, va) = partition::train_val_split(&idx, &train.labels, &mut stream(seed, Purpose::TrainValSplit, &[t as u64]))?;
        shards.push(partition::partition_task(
            scheme,
            &tr,
            &train.labels,
            cfg.clients.count,
            &mut stream(seed, Purpose::Partition, &[t as u64]),
        )?);
        val.push(va);
        if test.indices_of(classes).is_empty() {
            return Err(Error::Validation(format!("task {} has no test samples", t + 1)));
        }
    }
    Ok(TaskData {
        tasks,
        train,
        test,
        shards,
        val,
    })
}

/// Everything a round needs besides the state.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundParams {
    pub seed: u64,
    pub strategy: Strategy,
    pub local: LocalTrainParams,
    pub eval_classifier: EvalClassifier,
    pub track_grad_norm: bool,
    /// Restrict cross-entropy to the current task's classes.
    pub mask_logits: bool,
}

impl RoundParams {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        RoundParams {
            seed,
            strategy: cfg.strategy,
            local: LocalTrainParams {
                epochs: cfg.train.local_epochs,
                batch_size: cfg.train.batch_size,
                lr_representation: cfg.train.lr_lora,
                lr_head: cfg.train.lr_head,
                objective: Objective::plain(cfg.train.loss),
                spec: train_spec(cfg.strategy),
            },
            eval_classifier: cfg.eval_classifier,
            track_grad_norm: cfg.train.track_grad_norm,
            mask_logits: cfg.train.mask_logits,
        }
    }
}

/// Trainable parameter families for each strategy.
pub fn train_spec(strategy: Strategy) -> TrainSpec {
    match strategy {
        Strategy::Reswu | Strategy::Naive | Strategy::Dense => TrainSpec::LORA_AND_HEAD,
        Strategy::Ffa => TrainSpec {
            lora_a: false,
            ..TrainSpec::LORA_AND_HEAD
        },
        Strategy::HeadOnly => TrainSpec {
            lora_a: false,
            lora_b: false,
            ..TrainSpec::LORA_AND_HEAD
        },
        Strategy::Full => TrainSpec {
            backbone: true,
            ..TrainSpec::LORA_AND_HEAD
        },
    }
}

/// Server view plus the heads that live on the clients.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Base with all applied residuals, aggregated factors, averaged head.
    pub global: ModelState,
    /// Base changes computed last round, applied when the next round starts.
    pub pending: BTreeMap<MatrixId, BaseUpdate>,
    pub client_heads: Vec<Option<Head>>,
    /// Sample counts of the last round, used to average heads.
    pub last_weights: Vec<f64>,
}

impl ServerState {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let model_cfg = cfg.model_config();
        let mut global = init_backbone(&model_cfg, seed)?;
        if cfg.strategy.uses_adapters() {
            let ids = cfg.placement().resolve(&model_cfg)?;
            global.attach_adapters(&ids, cfg.lora.rank, cfg.lora.init_sigma, seed)?;
        }
        let k = cfg.clients.count;
        Ok(ServerState {
            client_heads: vec![global.head.clone(); k],
            last_weights: vec![1.0 / k as f64; k],
            global,
            pending: BTreeMap::new(),
        })
    }

    /// Folds pending base changes into the global model.
    pub fn apply_pending(&mut self) -> Result<()> {
        for (id, update) in std::mem::take(&mut self.pending) {
            let base = self
                .global
                .backbone
                .matrices
                .get_mut(&id)
                .ok_or_else(|| Error::Protocol(format!("pending update for unknown matrix {id}")))?;
            match update {
                BaseUpdate::Keep => {}
                BaseUpdate::AddResidual(w_res) => base.apply_reswu(&w_res)?,
                BaseUpdate::DenseDelta(delta) => {
                    let ad = self
                        .global
                        .adapters
                        .get(&id)
                        .ok_or_else(|| Error::Protocol(format!("no adapter on {id}")))?;
                    let target = base.corrected().add(&delta)?.sub(&ad.delta())?;
                    base.set_corrected(&target)?;
                }
            }
        }
        Ok(())
    }

    /// The model used for evaluation: pending changes applied, averaged head.
    pub fn evaluation_model(&self) -> Result<ModelState> {
        let mut s = self.clone();
        s.apply_pending()?;
        Ok(s.global)
    }

    /// Dense effective weight of every adapted matrix in the evaluation model.
    pub fn dense_weights(&self) -> Result<BTreeMap<MatrixId, Tensor>> {
        let m = self.evaluation_model()?;
        m.backbone
            .matrices
            .keys()
            .map(|&id| Ok((id, m.effective_weight(id)?)))
            .collect()
    }

    /// SHA-256 over every adapter factor, in matrix order.
    pub fn adapter_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (id, ad) in &self.global.adapters {
            h.update(id.to_string().as_bytes());
            h.update(ad.b.to_le_bytes());
            h.update(ad.a.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line of the run trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTrace {
    /// 1-based task index.
    pub task: usize,
    /// 1-based round index within the task.
    pub round: usize,
    /// Mean loss of each client's last local epoch; `None` for skipped clients.
    pub client_losses: Vec<Option<f64>>,
    /// `‖W_res‖_F` per adapted matrix, computed under every strategy.
    pub residual_norms: BTreeMap<String, f64>,
    /// Accuracy of the evaluation model on all seen classes' test samples.
    pub accuracy_seen: Accuracy,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Squared gradient norm of the global objective at the round's start.
    pub grad_norm_sq: Option<f64>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RoundTrace {
    pub fn residual_norm_total(&self) -> f64 {
        self.residual_norms.values().sum()
    }
}

/// Output of [`run_round`].
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub trace: RoundTrace,
    /// Client uploads in client order.
    pub updates: Vec<ClientUpdate>,
    pub weights: Vec<f64>,
}

struct ClientResult {
    samples: u64,
    model: ModelState,
    outcome: LocalOutcome,
}

const F64_BYTES: u64 = 8;

fn adapter_bytes(state: &ModelState, spec: &TrainSpec) -> u64 {
    state
        .adapters
        .values()
        .map(|ad| {
            let b = if spec.lora_b { ad.b.len() } else { 0 };
            let a = if spec.lora_a { ad.a.len() } else { 0 };
            (a + b) as u64 * F64_BYTES
        })
        .sum()
}

fn head_bytes(state: &ModelState) -> u64 {
    state
        .head
        .as_ref()
        .map_or(0, |h| (h.weight.len() + h.bias.len()) as u64 * F64_BYTES)
}

fn backbone_bytes(state: &ModelState) -> u64 {
    let m: usize = state.backbone.matrices.values().map(|b| b.w0().len()).sum();
    let o: usize = state.backbone.others.values().map(Tensor::len).sum();
    (m + o) as u64 * F64_BYTES
}

fn gather_task(data: &TaskData, task: usize) -> Result<(Tensor, Vec<usize>)> {
    let idx: Vec<usize> = data.shards[task].iter().flatten().copied().collect();
    data.train.gather(&idx)
}

/// Accuracy of `model` on test samples of `classes`, or of each client's
/// head pooled over clients.
fn evaluate_classes(
    state: &ServerState,
    eval: &ModelState,
    data: &TaskData,
    classes: &[usize],
    mode: EvalClassifier,
) -> Result<Accuracy> {
    let idx = data.test.indices_of(classes);
    let (x, y) = data.test.gather(&idx)?;
    match (mode, eval.head.is_some()) {
        (EvalClassifier::PerClientLocal, true) => {
            let mut correct = 0;
            let mut total = 0;
            for head in &state.client_heads {
                let mut m = eval.clone();
                m.head = head.clone();
                let a = metrics::evaluate_task(&m.forward(&x)?, &y)?;
                correct += a.correct;
                total += a.total;
            }
            Accuracy::new(correct, total)
        }
        _ => metrics::evaluate_task(&eval.forward(&x)?, &y),
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))
}

/// One communication round of task `task` (0-based); `round` is 0-based too.
pub fn run_round(
    state: &mut ServerState,
    data: &TaskData,
    task: usize,
    round: usize,
    params: &RoundParams,
    pool: &rayon::ThreadPool,
) -> Result<RoundReport> {
    let started = Instant::now();
    let shards = &data.shards[task];
    let k = shards.len();
    if k != state.client_heads.len() {
        return Err(Error::Protocol(format!("{k} shards for {} clients", state.client_heads.len())));
    }

    // Clients apply the pending residual and adopt the aggregated factors.
    let down_residual: u64 = state
        .pending
        .values()
        .map(|u| match u {
            BaseUpdate::Keep => 0,
            BaseUpdate::AddResidual(t) | BaseUpdate::DenseDelta(t) => t.len() as u64 * F64_BYTES,
        })
        .sum();
    state.apply_pending()?;

    let mut local_params = params.local.clone();
    if params.mask_logits {
        local_params.objective.active_classes = Some(data.tasks.tasks[task].clone());
    }
    let local_params = &local_params;

    let grad_norm_sq = if params.track_grad_norm {
        let (x, y) = gather_task(data, task)?;
        let mut probe = state.global.clone();
        probe.head = averaged_head(state)?;
        let (_, grads) = probe.gradient(&x, &y, &local_params.spec, &local_params.objective)?;
        Some(grads.values().map(Tensor::sum_squares).sum())
    } else {
        None
    };

    let global = &state.global;
    let heads = &state.client_heads;
    let results: Vec<Result<ClientResult>> = pool.install(|| {
        (0..k)
            .into_par_iter()
            .map(|c| {
                let mut local = global.clone();
                local.head = heads[c].clone();
                let outcome = if shards[c].is_empty() {
                    LocalOutcome::Skipped
                } else {
                    let (x, y) = data.train.gather(&shards[c])?;
                    let mut rng = stream(params.seed, Purpose::LocalTrain, &[task as u64, round as u64, c as u64]);
                    model::local_train(&mut local, &x, &y, local_params, &mut rng)?
                };
                Ok(ClientResult {
                    samples: shards[c].len() as u64,
                    model: local,
                    outcome,
                })
            })
            .collect()
    });
    let results: Vec<ClientResult> = results.into_iter().collect::<Result<_>>()?;

    let counts: Vec<u64> = results.iter().map(|r| r.samples).collect();
    let weights = fedavg_weights(&counts)?;
    let active = counts.iter().filter(|&&n| n > 0).count() as u64;

    let updates: Vec<ClientUpdate> = results
        .iter()
        .enumerate()
        .map(|(c, r)| ClientUpdate {
            client: c,
            samples: r.samples,
            factors: r.model.adapters.clone(),
            head: r.model.head.clone(),
        })
        .collect();

    let spec = &params.local.spec;
    let mut bytes_up = 0;
    let mut bytes_down = down_residual;
    let mut residual_norms = BTreeMap::new();
    match params.strategy {
        s if s.uses_adapters() => {
            let agg = aggregate::aggregate(s, &updates, &weights)?;
            let factor_bytes = adapter_bytes(global, spec);
            bytes_up += active * factor_bytes;
            bytes_down += k as u64 * factor_bytes;
            let mut pending = BTreeMap::new();
            for (id, m) in agg.matrices {
                residual_norms.insert(id.to_string(), m.residual.frobenius_norm());
                state.global.adapters.insert(id, m.factors);
                pending.insert(id, m.base_update);
            }
            state.pending = pending;
        }
        Strategy::Full => {
            let dense = backbone_bytes(global);
            bytes_up += active * dense;
            bytes_down += k as u64 * dense;
            let names: Vec<String> = state
                .global
                .trainable_names(spec)
                .into_iter()
                .filter(|n| n.starts_with("backbone."))
                .collect();
            for name in &names {
                let values: Vec<Tensor> = results
                    .iter()
                    .map(|r| r.model.get_param(name).expect("trainable names resolve"))
                    .collect();
                let refs: Vec<&Tensor> = values.iter().collect();
                state.global.set_param(name, weighted_sum(&refs, &weights)?)?;
            }
        }
        _ => {}
    }

    for (c, r) in results.iter().enumerate() {
        state.client_heads[c] = r.model.head.clone();
    }
    state.last_weights = weights.clone();
    state.global.head = averaged_head(state)?;
    if params.eval_classifier == EvalClassifier::Average {
        bytes_up += active * head_bytes(&state.global);
    }

    let eval = state.evaluation_model()?;
    let seen = data.tasks.seen_classes(task);
    let accuracy_seen = evaluate_classes(state, &eval, data, &seen, params.eval_classifier)?;

    let client_losses = results
        .iter()
        .map(|r| match &r.outcome {
            LocalOutcome::Trained { epoch_losses } => epoch_losses.last().copied(),
            LocalOutcome::Skipped => None,
        })
        .collect();

    Ok(RoundReport {
        trace: RoundTrace {
            task: task + 1,
            round: round + 1,
            client_losses,
            residual_norms,
            accuracy_seen,
            bytes_up,
            bytes_down,
            grad_norm_sq,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
        updates,
        weights,
    })
}

fn averaged_head(state: &ServerState) -> Result<Option<Head>> {
    let heads: Vec<&Head> = state.client_heads.iter().flatten().collect();
    if heads.is_empty() {
        return Ok(None);
    }
    aggregate_head(&heads, &state.last_weights).map(Some)
}

/// Adapter fingerprints around one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskFingerprint {
    pub task: usize,
    pub start: String,
    pub end: String,
}

/// Options that do not change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    /// Keep the dense effective weights after every round.
    pub record_weights: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            record_weights: false,
        }
    }
}

/// Result of one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub traces: Vec<RoundTrace>,
    pub fingerprints: Vec<TaskFingerprint>,
    /// Dense effective weights after each round, when requested.
    pub weight_log: Vec<BTreeMap<MatrixId, Tensor>>,
}

/// Runs every task of one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<SeedOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg, seed)?;
    let mut state = ServerState::new(cfg, seed)?;
    let params = RoundParams::from_config(cfg, seed);
    let pool = build_pool(opts.workers)?;
    let mut accuracy = AccuracyMatrix::new();
    let mut traces = Vec::new();
    let mut fingerprints = Vec::new();
    let mut weight_log = Vec::new();
    for t in 0..data.tasks.num_tasks() {
        let start = state.adapter_fingerprint();
        for r in 0..cfg.train.rounds {
            let report = run_round(&mut state, &data, t, r, &params, &pool)?;
            traces.push(report.trace);
            if opts.record_weights {
                weight_log.push(state.dense_weights()?);
            }
        }
        fingerprints.push(TaskFingerprint {
            task: t + 1,
            start,
            end: state.adapter_fingerprint(),
        });
        let eval = state.evaluation_model()?;
        let row = (0..=t)
            .map(|tau| evaluate_classes(&state, &eval, &data, &data.tasks.tasks[tau], cfg.eval_classifier))
            .collect::<Result<Vec<_>>>()?;
        accuracy.push_row(row)?;
    }
    Ok(SeedOutcome {
        seed,
        accuracy,
        traces,
        fingerprints,
        weight_log,
    })
}

/// Results over all configured seeds.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub strategy: Strategy,
    pub seeds: Vec<SeedOutcome>,
    pub trainable: TrainableCount,
}

impl ExperimentOutcome {
    pub fn mean_faa(&self) -> Result<f64> {
        let mut s = 0.0;
        for o in &self.seeds {
            s += metrics::to_f64(&metrics::faa(&o.accuracy)?);
        }
        Ok(s / self.seeds.len() as f64)
    }

    pub fn mean_aia(&self) -> Result<f64> {
        let mut s = 0.0;
        for o in &self.seeds {
            s += metrics::to_f64(&metrics::aia(&o.accuracy)?);
        }
        Ok(s / self.seeds.len() as f64)
    }
}

/// Trainable parameter counts under the configured strategy.
pub fn trainable_params(cfg: &ExperimentConfig) -> Result<TrainableCount> {
    let model = cfg.model_config();
    match cfg.strategy {
        Strategy::HeadOnly => count_trainable(None, &model, cfg.lora.rank),
        Strategy::Full => Ok(TrainableCount {
            lora: model.backbone_params(),
            head: model.head_params(),
        }),
        Strategy::Ffa => {
            // Only B trains: r·d per matrix.
            let mut lora = 0;
            for id in cfg.placement().resolve(&model)? {
                let (d, _) = model.matrix_shape(id).expect("resolved");
                lora += cfg.lora.rank * d;
            }
            Ok(TrainableCount {
                lora,
                head: model.head_params(),
            })
        }
        _ => count_trainable(Some(&cfg.placement()), &model, cfg.lora.rank),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutcome {
        strategy: cfg.strategy,
        seeds,
        trainable: trainable_params(cfg)?,
    })
}

/// Variants compared by [`ablation_suite`], in report order.
pub const ABLATION_VARIANTS: [Strategy; 6] = [
    Strategy::Reswu,
    Strategy::Dense,
    Strategy::Naive,
    Strategy::Ffa,
    Strategy::HeadOnly,
    Strategy::Full,
];

/// Runs every variant with the config's seeds.
pub fn ablation_suite(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<ExperimentOutcome>> {
    ABLATION_VARIANTS
        .iter()
        .map(|&s| {
            let mut v = cfg.clone();
            v.strategy = s;
            run_experiment(&v, opts)
        })
        .collect()
}
