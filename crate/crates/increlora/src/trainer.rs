//! The end-to-end training loop plus the synthetic tasks it trains on.
//!
//! A run composes every other module: a frozen random backbone, adapters
//! (incrementally allocated or fixed-rank), the importance scores, the
//! allocator, and the per-group optimizer. Tasks are planted: a teacher
//! network equal to the backbone plus known low-rank deltas with chosen
//! ranks per layer. Because the true rank demand of every layer is known by
//! construction, allocation quality is directly measurable.
//!
//! Determinism contract: every random draw comes from a substream keyed by
//! (config seed, purpose), and batch data is keyed by (seed, step). Two
//! runs with the same config produce bitwise-identical metrics and logs.

use serde::{Deserialize, Serialize};

use crate::adapter::{Component, SvdAdapter};
use crate::allocator::{AllocEvent, AllocatorState, EventWiring, Phase};
use crate::netgraph::{
    accuracy, argmax, backward, forward, forward_with_deltas, task_loss_and_grad, Activation,
    Backbone, LinearLayer, LossKind, Targets,
};
use crate::numkernel::{gaussian_fill, outer_product, DenseMatrix, Rng};
use crate::optimsched::{AdamHyper, GradStore, Optimizer, ParamField, ParamKey, ScheduleSpec};
use crate::scoring::{raw_score, ImportanceState};

pub const STREAM_BACKBONE: u64 = 0;
pub const STREAM_PLANTED: u64 = 1;
pub const STREAM_ADAPTER: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
/// Batch data for step t draws from stream STREAM_BATCH_BASE + t.
pub const STREAM_BATCH_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Increlora,
    FixedLora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PlantedRegression,
    PlantedClassification,
}

impl TaskKind {
    pub fn loss(self) -> LossKind {
        match self {
            TaskKind::PlantedRegression => LossKind::Mse,
            TaskKind::PlantedClassification => LossKind::SoftmaxCrossEntropy,
        }
    }

    /// True when `a` is a strictly better eval value than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            TaskKind::PlantedRegression => a < b,
            TaskKind::PlantedClassification => a > b,
        }
    }

    pub fn worst(self) -> f64 {
        match self {
            TaskKind::PlantedRegression => f64::INFINITY,
            TaskKind::PlantedClassification => f64::NEG_INFINITY,
        }
    }
}

/// Synthetic task description: the backbone shape and the planted update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Dim chain d0 -> d1 -> ... -> dL; layer k maps d_k to d_{k+1}.
    pub layer_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// True rank of the planted delta on each layer.
    pub planted_ranks: Vec<usize>,
    #[serde(default = "default_magnitude")]
    pub planted_magnitude: f64,
    /// Target noise; zero makes every capable method perfect.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Backbone weight std; when absent each layer uses 1/sqrt(fan_in).
    #[serde(default)]
    pub w0_std: Option<f64>,
    #[serde(default)]
    pub with_bias: bool,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_magnitude() -> f64 {
    0.5
}
fn default_noise_std() -> f64 {
    0.01
}
fn default_eval_batches() -> usize {
    4
}

impl TaskSpec {
    pub fn num_modules(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }
}

/// Full run configuration. Unknown keys are rejected at parse time; every
/// applied default is serialized back out in the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub total_steps: u64,
    pub warmup: u64,
    pub base_lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Modules granted rank per allocation event (incremental mode only).
    #[serde(default)]
    pub h: Option<usize>,
    /// Allocation event interval and eval cadence; defaults to warmup.
    #[serde(default)]
    pub nu: Option<u64>,
    /// Total rank budget, initial reserves included (incremental mode only).
    #[serde(default)]
    pub r_final: Option<u64>,
    #[serde(default = "default_score_beta")]
    pub beta1: f64,
    #[serde(default = "default_score_beta")]
    pub beta2: f64,
    #[serde(default = "default_regu_weight")]
    pub regu_weight: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_adapter_scale")]
    pub adapter_scale: f64,
    #[serde(default = "default_true")]
    pub advance_learning: bool,
    /// Uniform per-module rank (fixed mode only).
    #[serde(default)]
    pub fixed_rank: Option<u32>,
    /// Per-module ranks, e.g. a rank distribution found by a previous
    /// incremental run (fixed mode only).
    #[serde(default)]
    pub fixed_ranks: Option<Vec<u32>>,
    #[serde(default)]
    pub optimizer: AdamHyper,
    pub task: TaskSpec,
}

fn default_batch_size() -> usize {
    32
}
fn default_score_beta() -> f64 {
    0.85
}
fn default_regu_weight() -> f64 {
    0.1
}
fn default_init_std() -> f64 {
    0.02
}
fn default_adapter_scale() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Event interval / eval cadence with the default applied.
    pub fn nu_resolved(&self) -> u64 {
        self.nu.unwrap_or(self.warmup)
    }

    /// Fills in every defaulted field so the archived config is explicit.
    pub fn resolve(&mut self) {
        self.nu = Some(self.nu_resolved());
        if self.task.w0_std.is_none() {
            // Per-layer 1/sqrt(fan_in) cannot collapse into one number; the
            // sentinel 0 keeps that meaning while making the field explicit.
            self.task.w0_std = None;
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(
        "training diverged at step {step}: loss is not finite; last allocation events: {recent_events:?}"
    )]
    Diverged { step: u64, recent_events: Vec<String> },
}

/// Validates cross-field constraints that serde cannot express. Returns the
/// first problem found, phrased for a human fixing the file.
pub fn validate(cfg: &TrainConfig) -> Result<(), TrainError> {
    let err = |msg: String| Err(TrainError::Config(msg));
    let t = &cfg.task;
    if t.layer_dims.len() < 2 {
        return err(format!("task.layer_dims needs at least 2 entries, got {:?}", t.layer_dims));
    }
    if t.layer_dims.iter().any(|&d| d == 0) {
        return err(format!("task.layer_dims entries must be positive, got {:?}", t.layer_dims));
    }
    let n = t.num_modules();
    if t.planted_ranks.len() != n {
        return err(format!(
            "task.planted_ranks has {} entries but there are {n} layers",
            t.planted_ranks.len()
        ));
    }
    for (k, &rho) in t.planted_ranks.iter().enumerate() {
        let cap = t.layer_dims[k].min(t.layer_dims[k + 1]);
        if rho > cap {
            return err(format!(
                "task.planted_ranks[{k}] = {rho} exceeds min(in, out) = {cap} for that layer"
            ));
        }
    }
    if t.planted_magnitude < 0.0 || !t.planted_magnitude.is_finite() {
        return err(format!("task.planted_magnitude must be non-negative, got {}", t.planted_magnitude));
    }
    if t.noise_std < 0.0 || !t.noise_std.is_finite() {
        return err(format!("task.noise_std must be non-negative, got {}", t.noise_std));
    }
    if let Some(std) = t.w0_std {
        if std <= 0.0 || !std.is_finite() {
            return err(format!("task.w0_std must be positive when given, got {std}"));
        }
    }
    if t.eval_batches == 0 {
        return err("task.eval_batches must be at least 1".into());
    }
    if t.kind == TaskKind::PlantedClassification && *t.layer_dims.last().unwrap() < 2 {
        return err("classification needs an output dim of at least 2".into());
    }

    if cfg.total_steps == 0 {
        return err("total_steps must be positive".into());
    }
    if cfg.warmup == 0 {
        return err("warmup must be positive".into());
    }
    if cfg.total_steps <= cfg.warmup {
        return err(format!(
            "total_steps ({}) must exceed warmup ({}) or nothing ever trains",
            cfg.total_steps, cfg.warmup
        ));
    }
    if !(cfg.base_lr > 0.0 && cfg.base_lr.is_finite()) {
        return err(format!("base_lr must be positive, got {}", cfg.base_lr));
    }
    if cfg.batch_size == 0 {
        return err("batch_size must be at least 1".into());
    }
    for (name, b) in [("beta1", cfg.beta1), ("beta2", cfg.beta2)] {
        if !(b > 0.0 && b < 1.0) {
            return err(format!("{name} must lie in (0,1), got {b}"));
        }
    }
    if cfg.regu_weight < 0.0 || !cfg.regu_weight.is_finite() {
        return err(format!("regu_weight must be non-negative, got {}", cfg.regu_weight));
    }
    if !(cfg.init_std > 0.0 && cfg.init_std.is_finite()) {
        return err(format!("init_std must be positive, got {}", cfg.init_std));
    }
    if !(cfg.adapter_scale > 0.0 && cfg.adapter_scale.is_finite()) {
        return err(format!("adapter_scale must be positive, got {}", cfg.adapter_scale));
    }
    let nu = cfg.nu_resolved();
    if nu == 0 {
        return err("nu must be positive".into());
    }

    match cfg.mode {
        Mode::Increlora => {
            if cfg.fixed_rank.is_some() || cfg.fixed_ranks.is_some() {
                return err("fixed_rank/fixed_ranks only apply to fixed_lora mode".into());
            }
            let Some(h) = cfg.h else {
                return err("incremental mode requires h".into());
            };
            if h == 0 || h > n {
                return err(format!("h must lie in 1..={n}, got {h}"));
            }
            let Some(r_final) = cfg.r_final else {
                return err("incremental mode requires r_final".into());
            };
            if r_final < n as u64 {
                return err(format!(
                    "r_final ({r_final}) cannot be below the module count ({n}); each module starts at rank 1"
                ));
            }
            let span = r_final - n as u64;
            if span % h as u64 != 0 {
                let lower = r_final - span % h as u64;
                return err(format!(
                    "r_final - n must be divisible by h: got r_final={r_final}, n={n}, h={h}; \
                     nearest valid budgets are {lower} and {}",
                    lower + h as u64
                ));
            }
            let events = span / h as u64;
            let last_birth = events * nu;
            if events > 0 && cfg.total_steps <= last_birth + cfg.warmup {
                return err(format!(
                    "last allocation event at step {last_birth} plus warmup {} does not fit \
                     before total_steps {}; its group would be born too late to train",
                    cfg.warmup, cfg.total_steps
                ));
            }
        }
        Mode::FixedLora => {
            if cfg.r_final.is_some() || cfg.h.is_some() {
                return err("r_final/h only apply to increlora mode".into());
            }
            match (&cfg.fixed_rank, &cfg.fixed_ranks) {
                (Some(_), Some(_)) => {
                    return err("give fixed_rank or fixed_ranks, not both".into());
                }
                (None, None) => {
                    return err("fixed_lora mode requires fixed_rank or fixed_ranks".into());
                }
                (None, Some(ranks)) => {
                    if ranks.len() != n {
                        return err(format!(
                            "fixed_ranks has {} entries but there are {n} layers",
                            ranks.len()
                        ));
                    }
                }
                (Some(_), None) => {}
            }
        }
    }
    Ok(())
}

/// A teacher with known low-rank structure: the frozen backbone plus
/// planted per-layer deltas of exactly the configured ranks.
pub struct PlantedTask {
    pub backbone: Backbone,
    pub deltas: Vec<DenseMatrix>,
    kind: TaskKind,
    noise_std: f64,
    seed: u64,
    batch_size: usize,
    eval_x: DenseMatrix,
    eval_targets: Targets,
}

/// Draws `count` orthonormal vectors of dim `dim` by repeated projection.
fn orthonormal_set(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot fit {count} orthonormal vectors in dim {dim}");
    let mut set: Vec<Vec<f64>> = Vec::with_capacity(count);
    while set.len() < count {
        let mut v = rng.normal_vec(dim, 1.0);
        for u in &set {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially never at these dims; redraw
        }
        for vi in &mut v {
            *vi /= norm;
        }
        set.push(v);
    }
    set
}

impl PlantedTask {
    pub fn build(cfg: &TrainConfig) -> PlantedTask {
        let t = &cfg.task;
        let mut backbone_rng = Rng::substream(cfg.seed, STREAM_BACKBONE);
        let layers: Vec<LinearLayer> = t
            .layer_dims
            .windows(2)
            .map(|w| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let std = t.w0_std.unwrap_or(1.0 / (in_dim as f64).sqrt());
                LinearLayer {
                    w0: gaussian_fill(&mut backbone_rng, out_dim, in_dim, std),
                    bias: t.with_bias.then(|| backbone_rng.normal_vec(out_dim, std)),
                }
            })
            .collect();
        let backbone = Backbone { layers, activation: t.activation };

        let mut planted_rng = Rng::substream(cfg.seed, STREAM_PLANTED);
        let deltas: Vec<DenseMatrix> = t
            .layer_dims
            .windows(2)
            .zip(&t.planted_ranks)
            .map(|(w, &rho)| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let mut delta = DenseMatrix::zeros(out_dim, in_dim);
                let us = orthonormal_set(&mut planted_rng, rho, out_dim);
                let vs = orthonormal_set(&mut planted_rng, rho, in_dim);
                for (u, v) in us.iter().zip(&vs) {
                    let col = DenseMatrix::from_vec(out_dim, 1, u.clone());
                    let row = DenseMatrix::from_vec(1, in_dim, v.clone());
                    delta.add_assign(&outer_product(&col, &row).scale(t.planted_magnitude));
                }
                delta
            })
            .collect();

        let mut task = PlantedTask {
            backbone,
            deltas,
            kind: t.kind,
            noise_std: t.noise_std,
            seed: cfg.seed,
            batch_size: cfg.batch_size,
            eval_x: DenseMatrix::zeros(1, 1),
            eval_targets: Targets::Values(DenseMatrix::zeros(1, 1)),
        };
        let mut eval_rng = Rng::substream(cfg.seed, STREAM_EVAL);
        let rows = t.eval_batches * cfg.batch_size;
        let (x, targets) = task.draw(&mut eval_rng, rows);
        task.eval_x = x;
        task.eval_targets = targets;
        task
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    fn draw(&self, rng: &mut Rng, rows: usize) -> (DenseMatrix, Targets) {
        let x = gaussian_fill(rng, rows, self.backbone.in_dim(), 1.0);
        let mut y = forward_with_deltas(&self.backbone, &self.deltas, &x);
        for v in y.as_mut_slice() {
            *v += rng.normal(self.noise_std);
        }
        let targets = match self.kind {
            TaskKind::PlantedRegression => Targets::Values(y),
            TaskKind::PlantedClassification => {
                Targets::Labels((0..rows).map(|r| argmax(y.row(r))).collect())
            }
        };
        (x, targets)
    }

    /// Training batch for step t; a pure function of (seed, t).
    pub fn sample_batch(&self, t: u64) -> (DenseMatrix, Targets) {
        let mut rng = Rng::substream(self.seed, STREAM_BATCH_BASE + t);
        self.draw(&mut rng, self.batch_size)
    }

    /// Eval metric on the fixed held-out set: MSE for regression (lower is
    /// better), accuracy for classification (higher is better).
    pub fn evaluate(&self, adapters: &[SvdAdapter]) -> f64 {
        let (out, _) = forward(&self.backbone, adapters, &self.eval_x);
        match (&self.eval_targets, self.kind) {
            (Targets::Values(y), TaskKind::PlantedRegression) => {
                crate::netgraph::mse_loss_and_grad(&out, y).0
            }
            (Targets::Labels(labels), TaskKind::PlantedClassification) => accuracy(&out, labels),
            _ => unreachable!("targets always match the task kind"),
        }
    }
}

/// One metrics line. `ranks` and `lrs` are populated on allocation events
/// only; `eval` on eval steps only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub task_loss: f64,
    pub regu_loss: f64,
    pub total_loss: f64,
    pub r_total: u64,
    pub ranks: Option<Vec<u64>>,
    pub lrs: Option<Vec<f64>>,
    pub eval: Option<f64>,
}

/// Everything a finished run hands to the caller.
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<AllocEvent>,
    pub final_eval: f64,
    pub best_eval: f64,
    pub best_step: u64,
    pub best_adapters: Vec<SvdAdapter>,
    pub best_phase: Phase,
    pub final_adapters: Vec<SvdAdapter>,
    pub final_phase: Phase,
    pub deployed_ranks: Vec<u64>,
    /// Deployed rank plus the reserve each module paid for while the budget
    /// was open (equal to deployed for the fixed baseline).
    pub budget_ranks: Vec<u64>,
}

fn build_adapters(cfg: &TrainConfig) -> Vec<SvdAdapter> {
    let t = &cfg.task;
    let mut rng = Rng::substream(cfg.seed, STREAM_ADAPTER);
    t.layer_dims
        .windows(2)
        .enumerate()
        .map(|(k, w)| match cfg.mode {
            Mode::Increlora => {
                SvdAdapter::with_reserve(k, w[0], w[1], cfg.adapter_scale, &mut rng, cfg.init_std)
            }
            Mode::FixedLora => {
                let rank = match (&cfg.fixed_rank, &cfg.fixed_ranks) {
                    (Some(r), None) => *r,
                    (None, Some(rs)) => rs[k],
                    _ => unreachable!("validated"),
                };
                SvdAdapter::fixed_rank(k, w[0], w[1], cfg.adapter_scale, rank, &mut rng, cfg.init_std)
            }
        })
        .collect()
}

/// Runs the full loop. The config must already be validated; `train`
/// revalidates cheaply and returns config errors rather than panicking.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    validate(cfg)?;
    let task = PlantedTask::build(cfg);
    let mut adapters = build_adapters(cfg);
    let n = adapters.len();
    let nu = cfg.nu_resolved();
    let schedule = ScheduleSpec { warmup: cfg.warmup, total: cfg.total_steps };
    let loss_kind = cfg.task.kind.loss();

    let mut optimizer = Optimizer::new(cfg.optimizer);
    match cfg.mode {
        Mode::Increlora => {
            if cfg.advance_learning {
                // All initial reserves' vectors train from step 0.
                let params: Vec<(ParamKey, usize)> = adapters
                    .iter()
                    .flat_map(|ad| {
                        let id = ad.reserve().expect("fresh incremental adapter").id;
                        [
                            (ParamKey::new(ad.module(), id, ParamField::VecA), ad.in_dim()),
                            (ParamKey::new(ad.module(), id, ParamField::VecB), ad.out_dim()),
                        ]
                    })
                    .collect();
                optimizer.register_group(params, 0, schedule, cfg.base_lr);
            }
        }
        Mode::FixedLora => {
            let params: Vec<(ParamKey, usize)> = adapters
                .iter()
                .flat_map(|ad| {
                    ad.active().iter().flat_map(|c| {
                        [
                            (ParamKey::new(ad.module(), c.id, ParamField::Lambda), 1),
                            (ParamKey::new(ad.module(), c.id, ParamField::VecA), ad.in_dim()),
                            (ParamKey::new(ad.module(), c.id, ParamField::VecB), ad.out_dim()),
                        ]
                    })
                    .collect::<Vec<_>>()
                })
                .collect();
            if !params.is_empty() {
                optimizer.register_group(params, 0, schedule, cfg.base_lr);
            }
        }
    }

    let mut allocator = match cfg.mode {
        Mode::Increlora => Some(AllocatorState::new(n, cfg.h.unwrap(), nu, cfg.r_final.unwrap())),
        Mode::FixedLora => None,
    };
    let mut event_rng = Rng::substream(cfg.seed, STREAM_ADAPTER + 1000);
    let mut scores = ImportanceState::new(n, cfg.beta1, cfg.beta2);
    // Reserves join the orthogonality penalty only while they train.
    let include_reserve = cfg.advance_learning;
    let gamma = cfg.regu_weight;

    let mut metrics: Vec<MetricsRecord> = Vec::with_capacity(cfg.total_steps as usize);
    let kind = cfg.task.kind;
    let mut best_eval = kind.worst();
    let mut best_step = 0u64;
    let mut best_adapters = adapters.clone();
    let mut best_phase = current_phase(&allocator);

    for t in 1..=cfg.total_steps {
        let (x, targets) = task.sample_batch(t);
        let (out, cache) = forward(&task.backbone, &adapters, &x);
        let (task_loss, grad_out) = task_loss_and_grad(loss_kind, &out, &targets);
        let layer_grads = backward(&task.backbone, &adapters, cache, &grad_out);

        let mut regu_loss = 0.0;
        let mut regu_grads = Vec::with_capacity(n);
        for ad in &adapters {
            let (loss, grads) = ad.regularizer_grads(include_reserve);
            regu_loss += loss;
            regu_grads.push(grads);
        }
        let total_loss = task_loss + gamma * regu_loss;
        if !total_loss.is_finite() {
            let recent_events = allocator
                .as_ref()
                .map(|a| {
                    a.event_log()
                        .iter()
                        .rev()
                        .take(5)
                        .map(|e| serde_json::to_string(e).unwrap())
                        .collect()
                })
                .unwrap_or_default();
            return Err(TrainError::Diverged { step: t, recent_events });
        }

        let mut event: Option<AllocEvent> = None;
        if let Some(alloc) = allocator.as_mut() {
            if alloc.phase() == Phase::Allocating {
                let raws: Vec<f64> = adapters
                    .iter()
                    .zip(&layer_grads)
                    .map(|(ad, lg)| raw_score(&ad.delta_w(), &lg.dw_eff))
                    .collect();
                scores.update_all(&raws);
            }
            let mut wiring = EventWiring {
                adapters: &mut adapters,
                rng: &mut event_rng,
                init_std: cfg.init_std,
                optimizer: &mut optimizer,
                schedule,
                base_lr: cfg.base_lr,
                advance_learning: cfg.advance_learning,
            };
            event = alloc.step(t, &scores, &mut wiring).cloned();
        }

        // Assemble this step's gradients for every parameter that is still
        // present and trainable. Components masked at a close are skipped;
        // a reserve born this step has no gradients yet, which the
        // optimizer accepts only for groups born at t.
        let mut store = GradStore::new();
        for (l, lg) in layer_grads.iter().enumerate() {
            let ad = &adapters[l];
            for cg in &lg.comps {
                let Some(comp) = ad.components().find(|c| c.id == cg.id) else {
                    continue;
                };
                if comp.frozen {
                    if cfg.advance_learning {
                        store.accumulate(
                            ParamKey::new(l, cg.id, ParamField::VecA),
                            cg.da.as_slice().to_vec(),
                        );
                        store.accumulate(
                            ParamKey::new(l, cg.id, ParamField::VecB),
                            cg.db.as_slice().to_vec(),
                        );
                    }
                } else {
                    store.accumulate(ParamKey::new(l, cg.id, ParamField::Lambda), vec![cg.dlambda]);
                    store.accumulate(ParamKey::new(l, cg.id, ParamField::VecA), cg.da.as_slice().to_vec());
                    store.accumulate(ParamKey::new(l, cg.id, ParamField::VecB), cg.db.as_slice().to_vec());
                }
            }
            if gamma > 0.0 {
                for rg in &regu_grads[l] {
                    let Some(comp) = ad.components().find(|c| c.id == rg.id) else {
                        continue;
                    };
                    if comp.frozen && !cfg.advance_learning {
                        continue;
                    }
                    store.accumulate(
                        ParamKey::new(l, rg.id, ParamField::VecA),
                        rg.da.scale(gamma).as_slice().to_vec(),
                    );
                    store.accumulate(
                        ParamKey::new(l, rg.id, ParamField::VecB),
                        rg.db.scale(gamma).as_slice().to_vec(),
                    );
                }
            }
        }
        if let Some(limit) = cfg.optimizer.grad_clip {
            let norm = store.global_norm();
            if norm > limit {
                store.scale_all(limit / norm);
            }
        }
        optimizer.apply_step(&mut adapters, &store, t);

        let eval = if t % nu == 0 || t == cfg.total_steps {
            let value = task.evaluate(&adapters);
            if kind.better(value, best_eval) {
                best_eval = value;
                best_step = t;
                best_adapters = adapters.clone();
                best_phase = current_phase(&allocator);
            }
            Some(value)
        } else {
            None
        };

        let r_total: u64 = adapters.iter().map(|a| a.rank() as u64).sum();
        metrics.push(MetricsRecord {
            step: t,
            task_loss,
            regu_loss,
            total_loss,
            r_total,
            ranks: event.as_ref().map(|e| e.ranks.clone()),
            lrs: event
                .as_ref()
                .map(|_| optimizer.groups().iter().map(|g| g.lr_at(t)).collect()),
            eval,
        });
    }

    let final_eval = metrics
        .last()
        .and_then(|m| m.eval)
        .expect("the final step always evaluates");
    let events = allocator
        .as_ref()
        .map(|a| a.event_log().to_vec())
        .unwrap_or_default();
    let final_phase = current_phase(&allocator);
    let deployed_ranks: Vec<u64> = adapters.iter().map(|a| a.deployed_rank() as u64).collect();
    let budget_ranks: Vec<u64> = adapters
        .iter()
        .map(|a| a.deployed_rank() as u64 + u64::from(cfg.mode == Mode::Increlora))
        .collect();
    Ok(TrainOutcome {
        metrics,
        events,
        final_eval,
        best_eval,
        best_step,
        best_adapters,
        best_phase,
        final_adapters: adapters,
        final_phase,
        deployed_ranks,
        budget_ranks,
    })
}

fn current_phase(allocator: &Option<AllocatorState>) -> Phase {
    allocator.as_ref().map(|a| a.phase()).unwrap_or(Phase::Closed)
}

/// Rebuilds the task from a config and scores a checkpointed adapter set.
pub fn evaluate_adapters(cfg: &TrainConfig, adapters: &[SvdAdapter]) -> f64 {
    let task = PlantedTask::build(cfg);
    let shapes: Vec<(usize, usize)> = task.backbone.layer_shapes();
    assert_eq!(adapters.len(), shapes.len(), "checkpoint module count does not match the task");
    for (ad, (in_dim, out_dim)) in adapters.iter().zip(shapes) {
        assert_eq!(
            (ad.in_dim(), ad.out_dim()),
            (in_dim, out_dim),
            "checkpoint module {} shape does not match the task",
            ad.module()
        );
    }
    task.evaluate(adapters)
}

/// Spearman rank correlation with average ranks on ties. Returns 0 when
/// either side is constant (no ordering information).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs equal-length slices");
    assert!(x.len() >= 2, "spearman needs at least 2 points");
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn average_ranks(vals: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("finite values"));
    let mut ranks = vec![0.0; vals.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Histogram of active-component |lambda| by decade, with a dedicated zero
/// bin. Returns (label, count) pairs, zero bin first.
pub fn lambda_histogram(adapters: &[SvdAdapter]) -> Vec<(String, usize)> {
    let mut zero = 0usize;
    let mut decades: std::collections::BTreeMap<i32, usize> = std::collections::BTreeMap::new();
    for ad in adapters {
        for c in ad.active() {
            if c.lambda == 0.0 {
                zero += 1;
            } else {
                let exp = c.lambda.abs().log10().floor() as i32;
                *decades.entry(exp).or_insert(0) += 1;
            }
        }
    }
    let mut out = vec![("zero".to_string(), zero)];
    for (exp, count) in decades {
        out.push((format!("1e{exp}"), count));
    }
    out
}

/// Per-module deployed and budget ranks for the final report grid.
pub fn rank_grid(outcome: &TrainOutcome) -> Vec<(usize, u64, u64)> {
    outcome
        .deployed_ranks
        .iter()
        .zip(&outcome.budget_ranks)
        .enumerate()
        .map(|(k, (d, b))| (k, *d, *b))
        .collect()
}

/// Restores adapters from checkpointed component lists.
pub fn adapters_from_parts(
    cfg: &TrainConfig,
    parts: Vec<(Vec<Component>, Option<Component>)>,
) -> Vec<SvdAdapter> {
    let dims = &cfg.task.layer_dims;
    assert_eq!(parts.len(), dims.len() - 1, "checkpoint module count mismatch");
    parts
        .into_iter()
        .enumerate()
        .map(|(k, (active, reserve))| {
            let mut ad = SvdAdapter::new(k, dims[k], dims[k + 1], cfg.adapter_scale);
            ad.restore(active, reserve);
            ad
        })
        .collect()
}
