//! Training loop, optimizer, evaluation, ablations and run directories.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::gradients::{backward, LossSettings};
use crate::hetgraph::{default_relation_groups, GroupSpec, HeterogeneousGraph, RelationGroup, Split};
use crate::model::{forward, ForwardSettings, ModelParams, ModelShape};
use crate::numerics::DenseMatrix;
use crate::objective::evaluate;
use crate::rng::{self, tag};
use crate::sampling::{build_epoch_views, EpochViews, FanoutConfig, GroupAdjacency};

pub const HIDDEN_GRID: [usize; 3] = [32, 64, 128];
pub const LAYER_GRID: [usize; 2] = [2, 3];
pub const DROPOUT_GRID: [f64; 3] = [0.0, 0.1, 0.2];
pub const FANOUT_GRID: [usize; 3] = [10, 15, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Minmax,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Attention,
    Naive,
}

/// Flat training configuration. Every key can be set in a JSON file and
/// overridden with `key=value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub attention_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub fanout: usize,
    pub batch_sizes: Vec<usize>,
    /// Names resolved against the dataset's group registry; empty means all.
    pub groups: Vec<String>,
    /// Extra group definitions, added to or replacing the dataset's.
    pub group_defs: Vec<GroupSpec>,
    pub lambda: f64,
    pub regularizer: bool,
    pub exclude_diagonal: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    pub fusion_mode: FusionKind,
    /// Skip the check of hidden, layers, dropout and fanout against the
    /// search grid.
    pub unsafe_hparams: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            attention_dim: 16,
            layers: 2,
            dropout: 0.1,
            fanout: 10,
            batch_sizes: vec![128, 512],
            groups: Vec::new(),
            group_defs: Vec::new(),
            lambda: 1e-3,
            regularizer: true,
            exclude_diagonal: false,
            learning_rate: 5e-3,
            weight_decay: 5e-4,
            max_epochs: 300,
            patience: 30,
            seed: 0,
            attention_mode: AttentionMode::Minmax,
            fusion_mode: FusionKind::Attention,
            unsafe_hparams: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets one key; see [`set_field`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_field(self, key, value)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.unsafe_hparams {
            if !HIDDEN_GRID.contains(&self.hidden) {
                return bad(format!("hidden {} not in {HIDDEN_GRID:?} (set unsafe_hparams to allow)", self.hidden));
            }
            if !LAYER_GRID.contains(&self.layers) {
                return bad(format!("layers {} not in {LAYER_GRID:?} (set unsafe_hparams to allow)", self.layers));
            }
            if !DROPOUT_GRID.contains(&self.dropout) {
                return bad(format!("dropout {} not in {DROPOUT_GRID:?} (set unsafe_hparams to allow)", self.dropout));
            }
            if !FANOUT_GRID.contains(&self.fanout) {
                return bad(format!("fanout {} not in {FANOUT_GRID:?} (set unsafe_hparams to allow)", self.fanout));
            }
        }
        if self.hidden == 0 || self.attention_dim == 0 || self.layers == 0 || self.fanout == 0 {
            return bad("hidden, attention_dim, layers and fanout must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("batch_sizes must be a non-empty list of positive sizes".into());
        }
        let mut sorted = self.batch_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.batch_sizes.len() {
            return bad("batch_sizes contains duplicates".into());
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive".into());
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionMode {
        match (self.fusion_mode, self.attention_mode) {
            (FusionKind::Naive, _) => FusionMode::Naive,
            (FusionKind::Attention, AttentionMode::Minmax) => FusionMode::MinMax,
            (FusionKind::Attention, AttentionMode::Softmax) => FusionMode::Softmax,
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            lambda: if self.regularizer { self.lambda } else { 0.0 },
            exclude_diagonal: self.exclude_diagonal,
        }
    }

    /// The group registry: the dataset's groups (or the defaults derived from
    /// its edge types), overridden by name with `group_defs`.
    pub fn registry(&self, graph: &HeterogeneousGraph) -> Vec<GroupSpec> {
        let mut reg = if graph.relation_groups.is_empty() {
            default_relation_groups(graph)
        } else {
            graph.relation_groups.clone()
        };
        for def in &self.group_defs {
            match reg.iter_mut().find(|g| g.name == def.name) {
                Some(g) => *g = def.clone(),
                None => reg.push(def.clone()),
            }
        }
        reg
    }

    pub fn resolve_groups(&self, graph: &HeterogeneousGraph) -> Result<Vec<RelationGroup>> {
        let reg = self.registry(graph);
        if reg.is_empty() {
            return Err(Error::Config(
                "no relation groups: no edge type touches the target type; add `group_defs` to the config".into(),
            ));
        }
        let specs: Vec<&GroupSpec> = if self.groups.is_empty() {
            reg.iter().collect()
        } else {
            self.groups
                .iter()
                .map(|n| {
                    reg.iter().find(|g| &g.name == n).ok_or_else(|| {
                        let known: Vec<&str> = reg.iter().map(|g| g.name.as_str()).collect();
                        Error::Config(format!("unknown relation group `{n}` (known: {known:?})"))
                    })
                })
                .collect::<Result<_>>()?
        };
        specs.into_iter().map(|s| RelationGroup::from_spec(graph, s)).collect()
    }
}

/// Sets one field of a flat serde struct. The value is parsed as JSON,
/// falling back to a plain string; comma-separated values fill list fields.
pub fn set_field<T: Serialize + DeserializeOwned>(target: &mut T, key: &str, value: &str) -> Result<()> {
    let mut obj = serde_json::to_value(&*target)?;
    let map = obj
        .as_object_mut()
        .ok_or_else(|| Error::Config("configuration is not a flat object".into()))?;
    let current = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    let scalar = |s: &str| serde_json::from_str(s.trim()).unwrap_or_else(|_| serde_json::Value::String(s.trim().into()));
    let parsed = match serde_json::from_str::<serde_json::Value>(value) {
        Ok(v) if v.is_array() || !current.is_array() => v,
        _ if current.is_array() => serde_json::Value::Array(value.split(',').filter(|s| !s.is_empty()).map(scalar).collect()),
        _ => serde_json::Value::String(value.into()),
    };
    map.insert(key.to_string(), parsed);
    *target = serde_json::from_value(obj).map_err(|e| Error::Config(format!("{key}: {e}")))?;
    Ok(())
}

/// Every point of the search grid, as overrides of `base`.
pub fn grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for &hidden in &HIDDEN_GRID {
        for &layers in &LAYER_GRID {
            for &dropout in &DROPOUT_GRID {
                for &fanout in &FANOUT_GRID {
                    out.push(TrainConfig {
                        hidden,
                        layers,
                        dropout,
                        fanout,
                        ..base.clone()
                    });
                }
            }
        }
    }
    out
}

/// Twelve grid points: every hidden size and depth, dropout 0.1 or 0.2, the
/// base fanout.
pub fn small_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    grid(base)
        .into_iter()
        .filter(|c| c.dropout > 0.0 && c.fanout == base.fanout)
        .collect()
}

/// First and second moments of every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay:
/// `w ← w − lr · (m̂ / (√v̂ + ε) + wd · w)`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let shapes = |p: &ModelParams| p.tensors().iter().map(|t| t.shape()).collect::<Vec<_>>();
    if shapes(params) != shapes(grads) || shapes(params) != shapes(&state.m) {
        return Err(Error::shape("adam_step", "parameters, gradients and moments differ"));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let grads = grads.tensors();
    for (((w, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        let w = w.as_mut_slice();
        let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
        for i in 0..w.len() {
            let gi = g.as_slice()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            w[i] -= lr * (update + weight_decay * w[i]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub diversity: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub group_names: Vec<String>,
    pub best_params: ModelParams,
    /// Zero-based epoch of the restored snapshot.
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Wall time of each training epoch, evaluation excluded.
    pub epoch_seconds: Vec<f64>,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Graph-dependent state shared by training and evaluation.
pub struct Prepared {
    pub groups: Vec<GroupAdjacency>,
    pub shape: ModelShape,
    pub fanout: FanoutConfig,
    /// Views used for every evaluation, drawn once from a fixed seed.
    pub eval_views: EpochViews,
}

impl Prepared {
    pub fn new(config: &TrainConfig, graph: &HeterogeneousGraph) -> Result<Self> {
        config.validate()?;
        let groups = config.resolve_groups(graph)?;
        let shape = ModelShape::new(
            graph,
            &groups,
            config.hidden,
            config.attention_dim,
            config.layers,
            config.batch_sizes.len(),
        )?;
        let groups = groups
            .into_iter()
            .map(|g| GroupAdjacency::build(graph, g))
            .collect::<Result<Vec<_>>>()?;
        let fanout = FanoutConfig::new(config.fanout, config.layers)?;
        let eval_views = build_epoch_views(
            graph,
            &groups,
            &config.batch_sizes,
            fanout,
            rng::derive_seed(config.seed, &[tag::EVAL]),
        )?;
        Ok(Self {
            groups,
            shape,
            fanout,
            eval_views,
        })
    }

    /// Dropout-free forward over the evaluation views.
    pub fn eval_logits(&self, graph: &HeterogeneousGraph, params: &ModelParams, fusion: FusionMode) -> Result<DenseMatrix> {
        let tape = forward(graph, &self.eval_views, params, ForwardSettings::eval(fusion))?;
        Ok(tape.mlp.logits)
    }
}

fn split_accuracy(graph: &HeterogeneousGraph, logits: &DenseMatrix, split: Split) -> Result<f64> {
    let mask = graph.split_mask(split);
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument(format!("the dataset has no {split} nodes")));
    }
    evaluate(logits, &graph.labels, &mask)
}

/// Trains with early stopping on validation accuracy and restores the best
/// snapshot; ties keep the earliest epoch.
pub fn train(config: &TrainConfig, graph: &HeterogeneousGraph) -> Result<RunArtifacts> {
    let prep = Prepared::new(config, graph)?;
    let fusion = config.fusion();
    let ls = config.loss_settings();
    let train_mask = graph.split_mask(Split::Train);
    if !train_mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("the dataset has no train nodes".into()));
    }

    let mut params = ModelParams::init(&prep.shape, rng::derive_seed(config.seed, &[tag::INIT]));
    let mut adam = AdamState::new(&params);
    let mut metrics = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let views = build_epoch_views(
            graph,
            &prep.groups,
            &config.batch_sizes,
            prep.fanout,
            rng::derive_seed(config.seed, &[tag::EPOCH, epoch as u64]),
        )?;
        let settings = ForwardSettings {
            dropout: config.dropout,
            dropout_seed: rng::derive_seed(config.seed, &[tag::DROPOUT, epoch as u64]),
            fusion,
            activation: Activation::Relu,
        };
        let tape = forward(graph, &views, &params, settings)?;
        let (lb, grads) = backward(graph, &params, &tape, &train_mask, ls)?;
        if !lb.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                epoch,
                ce: lb.cross_entropy,
                diversity: lb.diversity,
                total: lb.total,
            });
        }
        drop(tape);
        drop(views);
        adam_step(&mut params, &grads, &mut adam, config.learning_rate, config.weight_decay)?;
        epoch_seconds.push(start.elapsed().as_secs_f64());

        let logits = prep.eval_logits(graph, &params, fusion)?;
        let val_acc = split_accuracy(graph, &logits, Split::Val)?;
        let test_acc = split_accuracy(graph, &logits, Split::Test)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: lb.total,
            ce: lb.cross_entropy,
            diversity: lb.diversity,
            val_acc,
            test_acc,
        });

        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    let logits = prep.eval_logits(graph, &best_params, fusion)?;
    Ok(RunArtifacts {
        config: config.clone(),
        group_names: prep.groups.iter().map(|g| g.group.name.clone()).collect(),
        best_epoch,
        metrics,
        epoch_seconds,
        train_acc: split_accuracy(graph, &logits, Split::Train)?,
        val_acc: split_accuracy(graph, &logits, Split::Val)?,
        test_acc: split_accuracy(graph, &logits, Split::Test)?,
        best_params,
    })
}

/// Accuracy of the restored snapshot on `split`, with dropout off and the
/// fixed evaluation views.
pub fn evaluate_run(artifacts: &RunArtifacts, graph: &HeterogeneousGraph, split: Split) -> Result<f64> {
    evaluate_params(&artifacts.config, &artifacts.best_params, graph, split)
}

pub fn evaluate_params(config: &TrainConfig, params: &ModelParams, graph: &HeterogeneousGraph, split: Split) -> Result<f64> {
    let prep = Prepared::new(config, graph)?;
    let logits = prep.eval_logits(graph, params, config.fusion())?;
    split_accuracy(graph, &logits, split)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Softmax,
    MinmaxNoreg,
    NaiveWeighting,
    /// Only the named relation group.
    SingleGroup(String),
    /// Only the given batch size.
    SingleBatchsize(usize),
}

impl FromStr for AblationMode {
    type Err = Error;

    /// `softmax`, `minmax_noreg`, `naive_weighting`, `single_group:<name>`,
    /// `single_batchsize:<b>`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        match (head, arg) {
            ("softmax", None) => Ok(Self::Softmax),
            ("minmax_noreg", None) => Ok(Self::MinmaxNoreg),
            ("naive_weighting", None) => Ok(Self::NaiveWeighting),
            ("single_group", Some(g)) if !g.is_empty() => Ok(Self::SingleGroup(g.into())),
            ("single_batchsize", Some(b)) => b
                .parse()
                .map(Self::SingleBatchsize)
                .map_err(|_| Error::Config(format!("invalid batch size `{b}`"))),
            _ => Err(Error::Config(format!(
                "unknown ablation `{s}` (expected softmax, minmax_noreg, naive_weighting, single_group:<name> or single_batchsize:<b>)"
            ))),
        }
    }
}

impl AblationMode {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::Softmax => c.attention_mode = AttentionMode::Softmax,
            Self::MinmaxNoreg => c.regularizer = false,
            Self::NaiveWeighting => c.fusion_mode = FusionKind::Naive,
            Self::SingleGroup(g) => c.groups = vec![g.clone()],
            Self::SingleBatchsize(b) => c.batch_sizes = vec![*b],
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub seeds: Vec<u64>,
    /// Test accuracy of the unmodified configuration per seed.
    pub baseline: Vec<f64>,
    pub variant: Vec<f64>,
}

impl AblationReport {
    pub fn baseline_mean(&self) -> f64 {
        mean(&self.baseline)
    }

    pub fn variant_mean(&self) -> f64 {
        mean(&self.variant)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Trains the base configuration and the variant for every seed.
pub fn run_ablation(
    mode: &AblationMode,
    config: &TrainConfig,
    graph: &HeterogeneousGraph,
    seeds: &[u64],
) -> Result<AblationReport> {
    let variant_cfg = mode.apply(config);
    variant_cfg.validate()?;
    variant_cfg.resolve_groups(graph)?;
    let mut baseline = Vec::new();
    let mut variant = Vec::new();
    for &seed in seeds {
        baseline.push(train(&TrainConfig { seed, ..config.clone() }, graph)?.test_acc);
        variant.push(train(&TrainConfig { seed, ..variant_cfg.clone() }, graph)?.test_acc);
    }
    Ok(AblationReport {
        mode: mode.clone(),
        seeds: seeds.to_vec(),
        baseline,
        variant,
    })
}

const MAGIC: &[u8; 4] = b"LHGE";
const VERSION: u32 = 1;

/// Little-endian dump: magic, version, matrix count, then per matrix its
/// name length, name, rows, cols and row-major `f64` data.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let named = params.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, m) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, DenseMatrix)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let version = u32_at(take(4)?);
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let data = take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, DenseMatrix::new(rows, cols, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into parameters shaped by `config` and `graph`.
pub fn load_checkpoint(path: impl AsRef<Path>, config: &TrainConfig, graph: &HeterogeneousGraph) -> Result<ModelParams> {
    let prep = Prepared::new(config, graph)?;
    let mut params = ModelParams::init(&prep.shape, 0);
    let entries = read_checkpoint(path)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if entries.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "{} matrices stored, the configuration needs {}",
            entries.len(),
            names.len()
        )));
    }
    for ((name, slot), (stored, m)) in names.iter().zip(params.tensors_mut()).zip(entries) {
        if *name != stored || slot.shape() != m.shape() {
            return Err(Error::Checkpoint(format!(
                "expected `{name}` {:?}, found `{stored}` {:?}",
                slot.shape(),
                m.shape()
            )));
        }
        *slot = m;
    }
    Ok(params)
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,ce,diversity,val_acc,test_acc\n");
    for m in metrics {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            m.epoch, m.train_loss, m.ce, m.diversity, m.val_acc, m.test_acc
        )
        .expect("write to string");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub groups: Vec<String>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub num_parameters: usize,
    pub mean_epoch_seconds: f64,
}

impl RunArtifacts {
    pub fn report(&self) -> RunReport {
        RunReport {
            seed: self.config.seed,
            groups: self.group_names.clone(),
            epochs_run: self.metrics.len(),
            best_epoch: self.best_epoch,
            train_acc: self.train_acc,
            val_acc: self.val_acc,
            test_acc: self.test_acc,
            num_parameters: self.best_params.num_scalars(),
            mean_epoch_seconds: mean(&self.epoch_seconds),
        }
    }

    /// Writes `config.json`, `metrics.csv`, `best_model.bin` and
    /// `report.json`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&self.metrics))?;
        save_checkpoint(&self.best_params, dir.join("best_model.bin"))?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report())? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn small_graph() -> HeterogeneousGraph {
        generate(&SynthConfig {
            num_targets: 90,
            num_b: 24,
            num_c: 24,
            feature_dim: 6,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden: 8,
            attention_dim: 4,
            batch_sizes: vec![30, 90],
            fanout: 5,
            max_epochs: 6,
            learning_rate: 1e-2,
            unsafe_hparams: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overrides_parse_values_and_lists() {
        let mut c = TrainConfig::default();
        c.set("hidden", "32").unwrap();
        c.set("batch_sizes", "16,64").unwrap();
        c.set("attention_mode", "softmax").unwrap();
        c.set("groups", "ab").unwrap();
        c.set("regularizer", "false").unwrap();
        assert_eq!((c.hidden, c.batch_sizes.clone()), (32, vec![16, 64]));
        assert_eq!(c.attention_mode, AttentionMode::Softmax);
        assert_eq!(c.groups, vec!["ab".to_string()]);
        assert!(!c.regularizer);
        assert!(c.set("nope", "1").unwrap_err().is_validation());
        assert!(c.set("hidden", "abc").is_err());
    }

    #[test]
    fn grid_is_enforced_unless_unsafe() {
        let c = TrainConfig {
            hidden: 16,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig { unsafe_hparams: true, ..c }.validate().is_ok());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(grid(&TrainConfig::default()).len(), 54);
        assert_eq!(small_grid(&TrainConfig::default()).len(), 12);
    }

    #[test]
    fn adam_closed_form_cases() {
        let g = generate(&SynthConfig::default()).unwrap();
        let groups = TrainConfig::default().resolve_groups(&g).unwrap();
        let shape = ModelShape::new(&g, &groups, 4, 2, 1, 1).unwrap();
        let start = ModelParams::init(&shape, 1);

        let mut p = start.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &start.zeros_like(), &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p, start);

        let mut p = start.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &start.zeros_like(), &mut st, 0.1, 0.5).unwrap();
        for (a, b) in p.tensors().iter().zip(start.tensors()) {
            assert!(a.max_abs_diff(&b.scale(0.95)) < 1e-15);
        }

        let mut p = start.clone();
        let mut st = AdamState::new(&p);
        let mut grads = start.zeros_like();
        grads.tensors_mut().into_iter().for_each(|t| *t = t.map(|_| -0.3));
        for _ in 0..200 {
            let before = p.clone();
            adam_step(&mut p, &grads, &mut st, 1e-3, 0.0).unwrap();
            for (a, b) in p.tensors().iter().zip(before.tensors()) {
                assert!(a.sub(b).unwrap().as_slice().iter().all(|d| (d - 1e-3).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn full_batch_single_group_loss_decreases() {
        let g = small_graph();
        let c = TrainConfig {
            groups: vec!["ab".into()],
            batch_sizes: vec![90],
            lambda: 0.0,
            dropout: 0.0,
            max_epochs: 5,
            ..small_config()
        };
        let run = train(&c, &g).unwrap();
        let losses: Vec<f64> = run.metrics.iter().map(|m| m.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn runs_are_reproducible_and_consistent() {
        let g = small_graph();
        let a = train(&small_config(), &g).unwrap();
        let b = train(&small_config(), &g).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        for m in &a.metrics {
            assert!((m.train_loss - (m.ce + a.config.lambda * m.diversity)).abs() <= 1e-15 * m.train_loss.abs());
        }
        let best = a.metrics.iter().map(|m| m.val_acc).fold(0.0, f64::max);
        let first_best = a.metrics.iter().position(|m| m.val_acc == best).unwrap();
        assert_eq!(a.best_epoch, first_best);
        assert_eq!(a.val_acc, best);
        assert_eq!(evaluate_run(&a, &g, Split::Test).unwrap(), a.test_acc);
        assert_eq!(evaluate_run(&a, &g, Split::Test).unwrap(), evaluate_run(&a, &g, Split::Test).unwrap());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let g = generate(&SynthConfig {
            num_targets: 900,
            ..SynthConfig::default()
        })
        .unwrap();
        let c = TrainConfig {
            hidden: 32,
            ..TrainConfig::default()
        };
        let prep = Prepared::new(&c, &g).unwrap();
        let mut accs = Vec::new();
        for seed in 0..5 {
            let params = ModelParams::init(&prep.shape, seed);
            let logits = prep.eval_logits(&g, &params, c.fusion()).unwrap();
            accs.push(split_accuracy(&g, &logits, Split::Test).unwrap());
        }
        assert!((mean(&accs) - 1.0 / 3.0).abs() < 0.1, "{accs:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = small_graph();
        let run = train(&TrainConfig { max_epochs: 2, ..small_config() }, &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.write_dir(dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path().join("best_model.bin"), &run.config, &g).unwrap();
        assert_eq!(loaded, run.best_params);
        for f in ["config.json", "metrics.csv", "report.json"] {
            assert!(dir.path().join(f).exists());
        }
        let bytes = fs::read(dir.path().join("best_model.bin")).unwrap();
        assert_eq!(&bytes[..4], b"LHGE");
        fs::write(dir.path().join("bad.bin"), &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_checkpoint(dir.path().join("bad.bin")).is_err());
        let other = TrainConfig { hidden: 6, ..run.config.clone() };
        assert!(load_checkpoint(dir.path().join("best_model.bin"), &other, &g).is_err());
    }

    #[test]
    fn ablation_modes_parse_and_apply() {
        let base = TrainConfig::default();
        assert_eq!("softmax".parse::<AblationMode>().unwrap().apply(&base).fusion(), FusionMode::Softmax);
        assert_eq!("naive_weighting".parse::<AblationMode>().unwrap().apply(&base).fusion(), FusionMode::Naive);
        assert!(!"minmax_noreg".parse::<AblationMode>().unwrap().apply(&base).regularizer);
        assert_eq!("single_group:ac".parse::<AblationMode>().unwrap().apply(&base).groups, vec!["ac"]);
        assert_eq!("single_batchsize:64".parse::<AblationMode>().unwrap().apply(&base).batch_sizes, vec![64]);
        assert!("bogus".parse::<AblationMode>().is_err());
        assert!("single_group:".parse::<AblationMode>().is_err());
        let g = small_graph();
        assert!(run_ablation(&AblationMode::SingleGroup("zz".into()), &small_config(), &g, &[0]).is_err());
    }

    #[test]
    fn unknown_group_is_a_config_error() {
        let g = small_graph();
        let c = TrainConfig {
            groups: vec!["zz".into()],
            ..small_config()
        };
        assert!(train(&c, &g).unwrap_err().is_validation());
    }
}
