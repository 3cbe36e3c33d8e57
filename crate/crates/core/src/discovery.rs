//! Mask training over a frozen model, the magnitude baseline, subnetwork
//! probing and ablation evaluation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{
    AnnealState, FixedMasks, Granularity, MaskConfig, MaskContext, MaskError, MaskSet, Mode, Strategy,
};
use crate::model::{LayerId, LinearHook, Model, ModelError, NoHook, INIT_STD};
use crate::seed::{self, Rng};
use crate::subnetwork::{SubnetError, SubnetMetadata, Subnetwork};
use crate::tasks::{Batch, TaskDataset, TaskKind};
use crate::tensor::{Adam, AdamConfig, Param, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Subnet(#[from] SubnetError),
    #[error("discovery needs a frozen model; call Model::freeze first")]
    NotFrozen,
    #[error("strategy {strategy} is not valid here: {reason}")]
    Strategy {
        strategy: &'static str,
        reason: &'static str,
    },
    #[error("invalid discovery config: {0}")]
    InvalidConfig(String),
    #[error("no examples to train or evaluate on")]
    EmptyData,
    #[error("{mode:?} evaluation needs a subnetwork")]
    MissingSubnetwork { mode: EvalMode },
    #[error("non-finite loss at epoch {epoch} step {step}: task loss {task_loss}, normalized L0 {l0}")]
    NonFinite {
        epoch: usize,
        step: usize,
        task_loss: f64,
        l0: f64,
    },
}

pub type Result<T, E = DiscoveryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryConfig {
    /// Data slice defining the target behaviour; `None` uses every example.
    pub task: Option<TaskKind>,
    pub mask: MaskConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate for the mask parameters.
    pub learning_rate: f64,
    /// Adam learning rate for the probe head.
    pub probe_learning_rate: f64,
    pub seed: u64,
    pub probe_mode: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            task: None,
            mask: MaskConfig::default(),
            epochs: 500,
            batch_size: 32,
            learning_rate: 0.05,
            probe_learning_rate: 1e-2,
            seed: 0,
            probe_mode: false,
        }
    }
}

impl DiscoveryConfig {
    pub fn l0_lambda(&self) -> f64 {
        self.mask.l0_lambda
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        let bad = |m: &str| Err(DiscoveryError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.probe_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Epoch mean of the answer cross-entropy.
    pub task_loss: f64,
    /// Epoch mean of the normalized L0 surrogate.
    pub l0_value: f64,
    /// Mean deterministic soft-mask value at the end of the epoch (kept fraction).
    pub soft_sparsity: f64,
    /// Epoch mean of the full objective.
    pub total_loss: f64,
}

/// Linear read-out trained jointly with the mask in probe mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    /// `[vocab, width]`.
    pub weight: Tensor,
    /// `[vocab]`.
    pub bias: Tensor,
}

impl ProbeHead {
    pub fn init(width: usize, classes: usize, seed: u64) -> Self {
        let mut rng = seed::stream(seed, "probe-init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Self {
            weight: Tensor::from_fn([classes, width], |_| normal.sample(&mut rng)),
            bias: Tensor::zeros([classes]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Full,
    Subnet,
    Complement,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(EvalMode::Full),
            "subnet" => Ok(EvalMode::Subnet),
            "complement" => Ok(EvalMode::Complement),
            other => Err(format!("unknown mode `{other}` (expected full, subnet or complement)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub full_accuracy: f64,
    pub subnet_accuracy: f64,
    pub subnet_loss: f64,
    pub kept: usize,
    pub total: usize,
    pub kept_fraction: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone)]
pub struct DiscoveryResult {
    pub subnetwork: Subnetwork,
    pub curve: Vec<CurvePoint>,
    pub metrics: FinalMetrics,
    pub probe: Option<ProbeHead>,
    /// Final mask parameters, in eval mode.
    pub masks: MaskSet,
}

impl DiscoveryResult {
    pub fn curve_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.curve {
            w.serialize(p).expect("in-memory csv");
        }
        if self.curve.is_empty() {
            w.write_record(["epoch", "task_loss", "l0_value", "soft_sparsity", "total_loss"])
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }

    pub fn write_curve(&self, path: &Path) -> std::io::Result<()> {
        std::fs::File::create(path)?.write_all(self.curve_csv().as_bytes())
    }
}

const EVAL_CHUNK: usize = 256;

/// Masks applied for scoring: `None` uses the unmasked model.
type MaskView<'a> = Option<(&'a BTreeMap<LayerId, Tensor>, Granularity)>;

fn logits<'t>(
    model: &Model,
    tape: &'t Tape,
    batch: &Batch,
    hook: &mut dyn LinearHook<'t>,
    probe: Option<(Var<'t>, Var<'t>)>,
) -> Result<Var<'t>> {
    let bound = model.bind(tape);
    Ok(match probe {
        Some((w, b)) => model
            .features(&bound, &batch.tokens, &batch.positions, hook)?
            .matmul_t(w)?
            .add_row(b)?,
        None => model.answer_logits(&bound, &batch.tokens, &batch.positions, hook)?,
    })
}

fn score(model: &Model, masks: MaskView<'_>, probe: Option<&ProbeHead>, data: &TaskDataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(DiscoveryError::EmptyData);
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let index: Vec<usize> = (0..data.len()).collect();
    for chunk in index.chunks(EVAL_CHUNK) {
        let batch = data.subset(chunk);
        let tape = Tape::new();
        let probe = probe.map(|p| (tape.constant(p.weight.clone()), tape.constant(p.bias.clone())));
        let out = match masks {
            Some((m, granularity)) => {
                let mut hook = FixedMasks { masks: m, granularity };
                logits(model, &tape, &batch, &mut hook, probe)?
            }
            None => logits(model, &tape, &batch, &mut NoHook, probe)?,
        };
        loss += out.softmax_cross_entropy(&batch.targets)?.value().item() * chunk.len() as f64;
        let values = out.value();
        for (row, &t) in batch.targets.iter().enumerate() {
            if argmax(values.row(row)) == t {
                correct += 1;
            }
        }
    }
    let n = data.len();
    Ok(EvalMetrics {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
        examples: n,
    })
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Answer accuracy and mean cross-entropy of the model under an ablation.
///
/// `Subnet` keeps only the subnetwork's entries; `Complement` keeps exactly
/// the entries the subnetwork drops.
pub fn evaluate(
    model: &Model,
    subnetwork: Option<&Subnetwork>,
    data: &TaskDataset,
    mode: EvalMode,
) -> Result<EvalMetrics> {
    evaluate_probe(model, subnetwork, data, mode, None)
}

/// [`evaluate`] reading answers through a probe head instead of the unembedding.
pub fn evaluate_probe(
    model: &Model,
    subnetwork: Option<&Subnetwork>,
    data: &TaskDataset,
    mode: EvalMode,
    probe: Option<&ProbeHead>,
) -> Result<EvalMetrics> {
    let masks = match (mode, subnetwork) {
        (EvalMode::Full, _) => None,
        (_, None) => return Err(DiscoveryError::MissingSubnetwork { mode }),
        (EvalMode::Subnet, Some(s)) => {
            s.validate_for(model)?;
            Some((s.to_tensors(), s.granularity))
        }
        (EvalMode::Complement, Some(s)) => {
            s.validate_for(model)?;
            Some((s.complement().to_tensors(), s.granularity))
        }
    };
    score(model, masks.as_ref().map(|(m, g)| (m, *g)), probe, data)
}

fn check_model(model: &Model) -> Result<()> {
    if model.is_frozen() {
        Ok(())
    } else {
        Err(DiscoveryError::NotFrozen)
    }
}

fn metadata(config: &DiscoveryConfig) -> SubnetMetadata {
    SubnetMetadata {
        strategy: Some(config.mask.strategy.name().into()),
        task: Some(config.task.map_or_else(|| "all".into(), |t| t.to_string())),
        seed: Some(config.seed),
        config: Some(serde_json::to_value(config).expect("config serializes")),
        provenance: None,
    }
}

fn finish(
    model: &Model,
    data: &TaskDataset,
    config: &DiscoveryConfig,
    set: MaskSet,
    curve: Vec<CurvePoint>,
    probe: Option<ProbeHead>,
) -> Result<DiscoveryResult> {
    let subnetwork = Subnetwork::from_tensors(model, config.mask.granularity, &set.binary_masks(), metadata(config))?;
    let full = evaluate_probe(model, None, data, EvalMode::Full, probe.as_ref())?;
    let sub = evaluate_probe(model, Some(&subnetwork), data, EvalMode::Subnet, probe.as_ref())?;
    let metrics = FinalMetrics {
        full_accuracy: full.accuracy,
        subnet_accuracy: sub.accuracy,
        subnet_loss: sub.loss,
        kept: subnetwork.kept(),
        total: subnetwork.total(),
        kept_fraction: subnetwork.sparsity().kept_fraction,
        epochs_run: curve.len(),
    };
    info!(
        "discovery done: subnet accuracy {:.4} (full {:.4}), kept {}/{} ({:.4})",
        metrics.subnet_accuracy, metrics.full_accuracy, metrics.kept, metrics.total, metrics.kept_fraction
    );
    Ok(DiscoveryResult {
        subnetwork,
        curve,
        metrics,
        probe,
        masks: set,
    })
}

/// Optimizes hard-concrete or continuous-sparsification masks over the
/// frozen model's maskable layers against answer cross-entropy plus
/// `l0_lambda · normalized L0`.
pub fn discover(model: &Model, data: &TaskDataset, config: &DiscoveryConfig) -> Result<DiscoveryResult> {
    if config.probe_mode {
        return Err(DiscoveryError::InvalidConfig(
            "probe_mode is set; use probe_discover".into(),
        ));
    }
    if config.mask.strategy == Strategy::Magnitude {
        return Err(DiscoveryError::Strategy {
            strategy: Strategy::Magnitude.name(),
            reason: "magnitude pruning is not trained; use baseline_discover",
        });
    }
    run(model, data, config, false)
}

/// Magnitude pruning of every maskable layer; no training.
pub fn baseline_discover(model: &Model, data: &TaskDataset, config: &DiscoveryConfig) -> Result<DiscoveryResult> {
    check_model(model)?;
    if config.mask.strategy != Strategy::Magnitude {
        return Err(DiscoveryError::Strategy {
            strategy: config.mask.strategy.name(),
            reason: "baseline_discover only computes magnitude masks",
        });
    }
    config.validate()?;
    let data = data.select(config.task);
    let mut set = MaskSet::new(model, &config.mask)?;
    set.set_mode(Mode::Eval);
    finish(model, &data, config, set, Vec::new(), None)
}

/// Trains masks jointly with a fresh linear head on the final representation
/// at the answer position. With the magnitude strategy the mask is fixed and
/// only the head trains.
pub fn probe_discover(model: &Model, data: &TaskDataset, config: &DiscoveryConfig) -> Result<DiscoveryResult> {
    if !config.probe_mode {
        return Err(DiscoveryError::InvalidConfig("probe_discover needs probe_mode".into()));
    }
    run(model, data, config, true)
}

fn run(model: &Model, data: &TaskDataset, config: &DiscoveryConfig, probe_mode: bool) -> Result<DiscoveryResult> {
    check_model(model)?;
    config.validate()?;
    let data = data.select(config.task);
    if data.is_empty() {
        return Err(DiscoveryError::EmptyData);
    }
    let mut set = MaskSet::new(model, &config.mask)?;
    let trainable_masks = config.mask.strategy != Strategy::Magnitude;
    let mut rng: Rng = seed::stream(config.seed, "discovery");
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let mut anneal = (config.mask.strategy == Strategy::ContinuousSparsification)
        .then(|| AnnealState::new(config.mask.cs_beta_final, (config.epochs * steps_per_epoch) as u64));

    let mut probe =
        probe_mode.then(|| ProbeHead::init(model.config().feature_width(), model.config().vocab_size(), config.seed));
    let mut mask_params = set.params();
    let mut probe_params: Vec<Param> = probe
        .iter()
        .flat_map(|p| {
            [
                Param::new("probe.weight", p.weight.clone()),
                Param::new("probe.bias", p.bias.clone()),
            ]
        })
        .collect();
    let mut mask_opt = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut probe_opt = Adam::new(AdamConfig::with_lr(config.probe_learning_rate));
    let lambda = config.l0_lambda();

    let mut index: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        index.shuffle(&mut rng);
        let (mut task_sum, mut l0_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (step, chunk) in index.chunks(config.batch_size).enumerate() {
            let batch = data.subset(chunk);
            let tape = Tape::new();
            let probe_vars: Vec<Var> = probe_params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
            let ctx = MaskContext {
                anneal,
                rng: Some(&mut rng),
            };
            let mut masks = set.bind(&tape, ctx);
            let head = (!probe_vars.is_empty()).then(|| (probe_vars[0], probe_vars[1]));
            let out = logits(model, &tape, &batch, &mut masks, head)?;
            let task = out.softmax_cross_entropy(&batch.targets)?;
            let l0 = masks.normalized_l0(&tape)?;
            let loss = task.add(l0.scale(lambda))?;
            let mask_vars = masks.params.clone();
            drop(masks);

            let (t, l, total) = (task.value().item(), l0.value().item(), loss.value().item());
            if !total.is_finite() {
                return Err(DiscoveryError::NonFinite {
                    epoch,
                    step,
                    task_loss: t,
                    l0: l,
                });
            }
            task_sum += t;
            l0_sum += l;
            total_sum += total;

            let grads = tape.backward(loss)?;
            if trainable_masks {
                for (p, v) in mask_params.iter_mut().zip(&mask_vars) {
                    p.grad = grads.get(*v).cloned();
                }
                mask_opt.step(&mut mask_params)?;
                set.assign_params(&mask_params);
            }
            if !probe_params.is_empty() {
                for (p, v) in probe_params.iter_mut().zip(&probe_vars) {
                    p.grad = grads.get(*v).cloned();
                }
                probe_opt.step(&mut probe_params)?;
            }
            if let Some(a) = anneal.as_mut() {
                a.advance();
            }
        }
        let steps = steps_per_epoch as f64;
        let soft: f64 = set
            .layers
            .iter()
            .map(|(_, l)| l.soft_mask(anneal.as_ref()).data().iter().sum::<f64>())
            .sum::<f64>()
            / set.total_entries().max(1) as f64;
        let point = CurvePoint {
            epoch,
            task_loss: task_sum / steps,
            l0_value: l0_sum / steps,
            soft_sparsity: soft,
            total_loss: total_sum / steps,
        };
        debug!(
            "epoch {epoch}: task {:.5} l0 {:.5} soft kept {:.4}",
            point.task_loss, point.l0_value, point.soft_sparsity
        );
        curve.push(point);
    }
    if let Some(a) = anneal.as_mut() {
        a.finish();
    }
    if let Some(p) = probe.as_mut() {
        p.weight = probe_params[0].value.clone();
        p.bias = probe_params[1].value.clone();
    }
    set.set_mode(Mode::Eval);
    finish(model, &data, config, set, curve, probe)
}
