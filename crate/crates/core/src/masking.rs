//! Mask strategies over frozen weights.
//!
//! * **Hard-concrete**: stochastic gates `z = clamp(sigmoid((log u − log(1−u)
//!   + log α)/β)·(ζ−γ) + γ, 0, 1)` with a closed-form expected-L0 penalty.
//! * **Continuous sparsification**: deterministic `sigmoid(β_t·s)`, with
//!   `β_t = β_final^(t/T)` annealed upward until the mask is binary.
//! * **Magnitude**: non-learned baseline that drops the smallest weights.
//!
//! Masks act on a weight matrix `[out, in]` either entry-wise ([`Granularity::Weight`])
//! or per output neuron ([`Granularity::Neuron`], which also gates the bias).

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerId, LinearHook, Model, ModelError};
use crate::seed::Rng;
use crate::tensor::{Param, Tape, Tensor, TensorError, Var};

/// Uniform draws are kept inside `(U_EPS, 1 − U_EPS)` so both logs stay finite.
pub const U_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid mask config: {0}")]
    InvalidConfig(String),
    #[error("layer {id}: mask shape {mask:?} does not fit weight {weight:?} at {granularity:?} granularity")]
    ShapeMismatch {
        id: String,
        mask: Vec<usize>,
        weight: Vec<usize>,
        granularity: Granularity,
    },
    #[error("hard-concrete sampling in train mode needs a random generator")]
    MissingRng,
    #[error("continuous sparsification in train mode needs an anneal state")]
    MissingAnneal,
}

impl From<MaskError> for ModelError {
    fn from(e: MaskError) -> Self {
        match e {
            MaskError::Tensor(t) => ModelError::Tensor(t),
            other => ModelError::InvalidConfig(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    HardConcrete,
    ContinuousSparsification,
    Magnitude,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::HardConcrete => "hard_concrete",
            Strategy::ContinuousSparsification => "continuous_sparsification",
            Strategy::Magnitude => "magnitude",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Weight,
    Neuron,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub strategy: Strategy,
    pub granularity: Granularity,
    /// Hard-concrete stretch interval lower end.
    pub hc_gamma: f64,
    /// Hard-concrete stretch interval upper end.
    pub hc_zeta: f64,
    /// Hard-concrete temperature.
    pub hc_beta: f64,
    pub hc_init_logalpha: f64,
    pub cs_beta_final: f64,
    pub cs_init_s: f64,
    pub prune_fraction: Option<f64>,
    pub l0_lambda: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::HardConcrete,
            granularity: Granularity::Weight,
            hc_gamma: -0.1,
            hc_zeta: 1.1,
            hc_beta: 2.0 / 3.0,
            hc_init_logalpha: 3.0,
            cs_beta_final: 200.0,
            cs_init_s: 2.0,
            prune_fraction: None,
            l0_lambda: 0.1,
        }
    }
}

impl MaskConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let bad = |m: &str| Err(MaskError::InvalidConfig(m.into()));
        if !(self.hc_gamma < 0.0 && self.hc_zeta > 1.0) {
            return bad("need hc_gamma < 0 < 1 < hc_zeta");
        }
        if !(self.hc_beta > 0.0) {
            return bad("hc_beta must be positive");
        }
        if !(self.cs_beta_final >= 1.0) {
            return bad("cs_beta_final must be at least 1");
        }
        if let Some(f) = self.prune_fraction {
            if !(0.0..=1.0).contains(&f) {
                return bad("prune_fraction must lie in [0, 1]");
            }
        }
        if self.strategy == Strategy::Magnitude && self.prune_fraction.is_none() {
            return bad("magnitude strategy requires prune_fraction");
        }
        if !(self.l0_lambda >= 0.0) || !self.l0_lambda.is_finite() {
            return bad("l0_lambda must be a finite non-negative number");
        }
        Ok(())
    }
}

/// Inverse temperature of continuous sparsification at step `t` of `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealState {
    pub beta_final: f64,
    pub step: u64,
    pub total_steps: u64,
}

impl AnnealState {
    pub fn new(beta_final: f64, total_steps: u64) -> Self {
        Self {
            beta_final,
            step: 0,
            total_steps: total_steps.max(1),
        }
    }

    /// `β_final^(t/T)`, rising from 1 at `t = 0` to `β_final` at `t = T`.
    pub fn current_beta(&self) -> f64 {
        let frac = (self.step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.beta_final.powf(frac)
    }

    pub fn advance(&mut self) {
        self.step = (self.step + 1).min(self.total_steps);
    }

    pub fn finish(&mut self) {
        self.step = self.total_steps;
    }
}

/// `log u − log(1 − u)` for `u ~ Uniform(U_EPS, 1 − U_EPS)`, one per entry.
pub fn logistic_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u: f64 = rng.gen::<f64>().clamp(U_EPS, 1.0 - U_EPS);
        u.ln() - (1.0 - u).ln()
    })
}

/// Hard-concrete gate for fixed logistic noise; differentiable in `log_alpha`.
pub fn hc_gate<'t>(log_alpha: Var<'t>, noise: Var<'t>, config: &MaskConfig) -> Result<Var<'t>, MaskError> {
    let (g, z) = (config.hc_gamma, config.hc_zeta);
    Ok(log_alpha
        .add(noise)?
        .scale(1.0 / config.hc_beta)
        .sigmoid()
        .affine(z - g, g)
        .clamp(0.0, 1.0))
}

/// Draws a reparameterized hard-concrete mask in `[0, 1]`.
pub fn hc_sample_mask<'t>(
    tape: &'t Tape,
    log_alpha: Var<'t>,
    config: &MaskConfig,
    rng: &mut Rng,
) -> Result<Var<'t>, MaskError> {
    let noise = tape.constant(logistic_noise(&log_alpha.shape(), rng));
    hc_gate(log_alpha, noise, config)
}

/// Offset `−β·log(−γ/ζ)` inside the expected-L0 sigmoid.
pub fn hc_l0_shift(config: &MaskConfig) -> f64 {
    -config.hc_beta * (-config.hc_gamma / config.hc_zeta).ln()
}

/// `Σ sigmoid(log α − β·log(−γ/ζ))`: the expected number of non-zero gates.
pub fn hc_expected_l0<'t>(log_alpha: Var<'t>, config: &MaskConfig) -> Var<'t> {
    log_alpha.affine(1.0, hc_l0_shift(config)).sigmoid().sum()
}

/// Deterministic gate `clamp(sigmoid(log α)·(ζ−γ) + γ, 0, 1)`.
pub fn hc_deterministic(log_alpha: &Tensor, config: &MaskConfig) -> Tensor {
    let (g, z) = (config.hc_gamma, config.hc_zeta);
    log_alpha.map(|a| (sigmoid(a) * (z - g) + g).clamp(0.0, 1.0))
}

/// Binary evaluation mask: keep where the deterministic gate is ≥ 0.5.
pub fn hc_eval_mask(log_alpha: &Tensor, config: &MaskConfig) -> Tensor {
    hc_deterministic(log_alpha, config).map(|z| if z >= 0.5 { 1.0 } else { 0.0 })
}

/// `sigmoid(β_t·s)`; also the continuous L0 proxy when summed.
pub fn cs_soft_mask<'t>(scores: Var<'t>, anneal: &AnnealState) -> Var<'t> {
    scores.scale(anneal.current_beta()).sigmoid()
}

/// Keep exactly the strictly positive scores.
pub fn cs_final_mask(scores: &Tensor) -> Tensor {
    scores.map(|s| if s > 0.0 { 1.0 } else { 0.0 })
}

/// Zeros `floor(fraction·n)` units with the smallest magnitude: entries by
/// `|w|` at weight granularity, rows by L2 norm at neuron granularity. Ties
/// prune the lowest flat index first.
pub fn magnitude_mask(weights: &Tensor, fraction: f64, granularity: Granularity) -> Tensor {
    let scores: Vec<f64> = match granularity {
        Granularity::Weight => weights.data().iter().map(|w| w.abs()).collect(),
        Granularity::Neuron => {
            let cols = weights.shape().get(1).copied().unwrap_or(1);
            weights
                .data()
                .chunks(cols.max(1))
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        }
    };
    let n = scores.len();
    let prune = prune_count(fraction, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut mask = vec![1.0; n];
    for &i in &order[..prune] {
        mask[i] = 0.0;
    }
    let shape = match granularity {
        Granularity::Weight => weights.shape().to_vec(),
        Granularity::Neuron => vec![n],
    };
    Tensor::new(shape, mask).expect("mask shape")
}

/// `floor(fraction·n)`, robust to the representation error of `fraction`.
pub fn prune_count(fraction: f64, n: usize) -> usize {
    ((fraction.clamp(0.0, 1.0) * n as f64 + 1e-9).floor() as usize).min(n)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-call inputs needed by the train-mode strategies.
#[derive(Default)]
pub struct MaskContext<'r> {
    pub anneal: Option<AnnealState>,
    pub rng: Option<&'r mut Rng>,
}

/// A frozen linear layer plus the parameters of its mask.
#[derive(Debug, Clone)]
pub struct MaskedLayer {
    pub base_weights: Tensor,
    pub base_bias: Tensor,
    /// `log α` (hard-concrete), `s` (continuous sparsification) or the fixed
    /// binary mask (magnitude).
    pub mask_params: Tensor,
    pub config: MaskConfig,
    pub mode: Mode,
}

impl MaskedLayer {
    pub fn new(base_weights: Tensor, base_bias: Tensor, config: MaskConfig) -> Result<Self, MaskError> {
        config.validate()?;
        let shape = mask_shape(&base_weights, config.granularity);
        let mask_params = match config.strategy {
            Strategy::HardConcrete => Tensor::full(shape, config.hc_init_logalpha),
            Strategy::ContinuousSparsification => Tensor::full(shape, config.cs_init_s),
            Strategy::Magnitude => magnitude_mask(
                &base_weights,
                config.prune_fraction.expect("validated"),
                config.granularity,
            ),
        };
        Ok(Self {
            base_weights,
            base_bias,
            mask_params,
            config,
            mode: Mode::Train,
        })
    }

    pub fn is_trainable(&self) -> bool {
        self.config.strategy != Strategy::Magnitude
    }

    /// Final binary mask for this layer.
    pub fn binary_mask(&self) -> Tensor {
        match self.config.strategy {
            Strategy::HardConcrete => hc_eval_mask(&self.mask_params, &self.config),
            Strategy::ContinuousSparsification => cs_final_mask(&self.mask_params),
            Strategy::Magnitude => self.mask_params.clone(),
        }
    }

    /// Deterministic soft mask (HC gate mean proxy / CS sigmoid at `beta`).
    pub fn soft_mask(&self, anneal: Option<&AnnealState>) -> Tensor {
        match self.config.strategy {
            Strategy::HardConcrete => hc_deterministic(&self.mask_params, &self.config),
            Strategy::ContinuousSparsification => {
                let beta = anneal.map_or(self.config.cs_beta_final, AnnealState::current_beta);
                self.mask_params.map(|s| sigmoid(beta * s))
            }
            Strategy::Magnitude => self.mask_params.clone(),
        }
    }

    /// Registers the mask parameters on `tape` (trainable unless magnitude).
    pub fn bind_params<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.leaf(
            self.mask_params.clone(),
            self.is_trainable() && self.mode == Mode::Train,
        )
    }

    /// The mask value used in the forward pass for the current mode.
    pub fn mask<'t>(&self, tape: &'t Tape, params: Var<'t>, ctx: &mut MaskContext<'_>) -> Result<Var<'t>, MaskError> {
        match (self.mode, self.config.strategy) {
            (Mode::Train, Strategy::HardConcrete) => {
                let rng = ctx.rng.as_deref_mut().ok_or(MaskError::MissingRng)?;
                hc_sample_mask(tape, params, &self.config, rng)
            }
            (Mode::Train, Strategy::ContinuousSparsification) => {
                let anneal = ctx.anneal.as_ref().ok_or(MaskError::MissingAnneal)?;
                Ok(cs_soft_mask(params, anneal))
            }
            (Mode::Eval, _) | (_, Strategy::Magnitude) => Ok(tape.constant(self.binary_mask())),
        }
    }

    /// L0 surrogate summed over this layer's entries.
    pub fn penalty<'t>(&self, params: Var<'t>, anneal: Option<&AnnealState>) -> Var<'t> {
        match self.config.strategy {
            Strategy::HardConcrete => hc_expected_l0(params, &self.config),
            Strategy::ContinuousSparsification => {
                let beta = anneal.map_or(1.0, AnnealState::current_beta);
                params.scale(beta).sigmoid().sum()
            }
            Strategy::Magnitude => params.sum(),
        }
    }

    pub fn base_vars<'t>(&self, tape: &'t Tape) -> (Var<'t>, Var<'t>) {
        (
            tape.constant(self.base_weights.clone()),
            tape.constant(self.base_bias.clone()),
        )
    }

    /// `W ⊙ mask` (or row-scaled `W` and `b ⊙ mask` at neuron granularity).
    pub fn effective<'t>(
        &self,
        weight: Var<'t>,
        bias: Var<'t>,
        mask: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), MaskError> {
        apply_mask(weight, bias, mask, self.config.granularity)
    }

    /// `y = x·W_effᵀ + b_eff`; masked-out units contribute exactly zero.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: Var<'t>,
        x: Var<'t>,
        ctx: &mut MaskContext<'_>,
    ) -> Result<Var<'t>, MaskError> {
        let (w, b) = self.base_vars(tape);
        let mask = self.mask(tape, params, ctx)?;
        let (w, b) = self.effective(w, b, mask)?;
        Ok(x.matmul_t(w)?.add_row(b)?)
    }
}

fn mask_shape(weights: &Tensor, granularity: Granularity) -> Vec<usize> {
    match granularity {
        Granularity::Weight => weights.shape().to_vec(),
        Granularity::Neuron => vec![weights.shape()[0]],
    }
}

/// Applies a (soft or binary) mask to a weight/bias pair.
pub fn apply_mask<'t>(
    weight: Var<'t>,
    bias: Var<'t>,
    mask: Var<'t>,
    granularity: Granularity,
) -> Result<(Var<'t>, Var<'t>), MaskError> {
    let (ws, ms) = (weight.shape(), mask.shape());
    let fits = match granularity {
        Granularity::Weight => ws == ms,
        Granularity::Neuron => ws.len() == 2 && ms == [ws[0]],
    };
    if !fits {
        return Err(MaskError::ShapeMismatch {
            id: String::new(),
            mask: ms,
            weight: ws,
            granularity,
        });
    }
    match granularity {
        Granularity::Weight => Ok((weight.mul(mask)?, bias)),
        Granularity::Neuron => Ok((weight.scale_rows(mask)?, bias.mul(mask)?)),
    }
}

/// Mask layers for every maskable sublayer of a model, in model order.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub config: MaskConfig,
    pub layers: Vec<(LayerId, MaskedLayer)>,
}

impl MaskSet {
    pub fn new(model: &Model, config: &MaskConfig) -> Result<Self, ModelError> {
        let layers = model
            .maskable_layers()
            .iter()
            .map(|id| {
                let w = model.weight(&id.weight_name())?.clone();
                let b = model.weight(&id.bias_name())?.clone();
                Ok((id.clone(), MaskedLayer::new(w, b, config.clone())?))
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for (_, l) in &mut self.layers {
            l.mode = mode;
        }
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(|(_, l)| l.mask_params.len()).sum()
    }

    pub fn binary_masks(&self) -> BTreeMap<LayerId, Tensor> {
        self.layers
            .iter()
            .map(|(id, l)| (id.clone(), l.binary_mask()))
            .collect()
    }

    /// Mask parameters as optimizer parameters, named by layer.
    pub fn params(&self) -> Vec<Param> {
        self.layers
            .iter()
            .map(|(id, l)| Param::new(id.to_string(), l.mask_params.clone()))
            .collect()
    }

    pub fn assign_params(&mut self, params: &[Param]) {
        for ((_, l), p) in self.layers.iter_mut().zip(params) {
            l.mask_params = p.value.clone();
        }
    }

    /// Registers every layer's parameters on `tape` for one forward pass.
    pub fn bind<'s, 't, 'r>(&'s self, tape: &'t Tape, ctx: MaskContext<'r>) -> BoundMasks<'s, 't, 'r> {
        let params = self.layers.iter().map(|(_, l)| l.bind_params(tape)).collect();
        BoundMasks { set: self, params, ctx }
    }
}

/// Mask parameters registered on one tape; applies the masks as a
/// [`LinearHook`] and builds the normalized L0 penalty.
pub struct BoundMasks<'s, 't, 'r> {
    set: &'s MaskSet,
    pub params: Vec<Var<'t>>,
    ctx: MaskContext<'r>,
}

impl<'s, 't, 'r> BoundMasks<'s, 't, 'r> {
    /// `(Σ per-entry penalties) / (total mask entries)`, in `[0, 1]`.
    pub fn normalized_l0(&self, tape: &'t Tape) -> Result<Var<'t>, TensorError> {
        let mut total = tape.constant(Tensor::scalar(0.0));
        for ((_, layer), &p) in self.set.layers.iter().zip(&self.params) {
            total = total.add(layer.penalty(p, self.ctx.anneal.as_ref()))?;
        }
        Ok(total.scale(1.0 / self.set.total_entries().max(1) as f64))
    }
}

impl<'s, 't, 'r> LinearHook<'t> for BoundMasks<'s, 't, 'r> {
    fn linear(
        &mut self,
        tape: &'t Tape,
        id: &LayerId,
        weight: Var<'t>,
        bias: Var<'t>,
    ) -> crate::model::Result<(Var<'t>, Var<'t>)> {
        let Some(pos) = self.set.layers.iter().position(|(lid, _)| lid == id) else {
            return Ok((weight, bias));
        };
        let layer = &self.set.layers[pos].1;
        let (w, b) = layer.base_vars(tape);
        let mask = layer.mask(tape, self.params[pos], &mut self.ctx)?;
        let (w, b) = layer.effective(w, b, mask).map_err(|e| match e {
            MaskError::ShapeMismatch {
                mask,
                weight,
                granularity,
                ..
            } => MaskError::ShapeMismatch {
                id: id.to_string(),
                mask,
                weight,
                granularity,
            },
            other => other,
        })?;
        Ok((w, b))
    }
}

/// Applies fixed binary masks to the named layers, leaving others intact.
pub struct FixedMasks<'m> {
    pub masks: &'m BTreeMap<LayerId, Tensor>,
    pub granularity: Granularity,
}

impl<'t> LinearHook<'t> for FixedMasks<'_> {
    fn linear(
        &mut self,
        tape: &'t Tape,
        id: &LayerId,
        weight: Var<'t>,
        bias: Var<'t>,
    ) -> crate::model::Result<(Var<'t>, Var<'t>)> {
        match self.masks.get(id) {
            Some(m) => Ok(apply_mask(weight, bias, tape.constant(m.clone()), self.granularity)?),
            None => Ok((weight, bias)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn cfg() -> MaskConfig {
        MaskConfig::default()
    }

    /// Gate for a given uniform draw, straight from the formula.
    fn gate_at(u: f64, log_alpha: f64, c: &MaskConfig) -> f64 {
        let s = sigmoid(((u / (1.0 - u)).ln() + log_alpha) / c.hc_beta);
        (s * (c.hc_zeta - c.hc_gamma) + c.hc_gamma).clamp(0.0, 1.0)
    }

    fn gate_via_tape(u: f64, log_alpha: f64) -> f64 {
        let tape = Tape::new();
        let la = tape.leaf(Tensor::scalar(log_alpha), true);
        let noise = tape.constant(Tensor::scalar((u / (1.0 - u)).ln()));
        hc_gate(la, noise, &cfg()).unwrap().value().item()
    }

    #[test]
    fn hc_gate_examples() {
        assert!((gate_via_tape(0.5, 0.0) - 0.5).abs() < 1e-12);
        let z = gate_via_tape(0.5, 1.0);
        let s = sigmoid(1.5);
        assert!((s - 0.8176).abs() < 1e-4);
        assert!((z - (s * 1.2 - 0.1)).abs() < 1e-12);
        assert!((z - 0.8811).abs() < 1e-4, "{z}");
    }

    #[test]
    fn hc_very_negative_logalpha_is_closed() {
        let mut rng = seed::stream(0, "test");
        let noise = logistic_noise(&[100_000], &mut rng);
        let tape = Tape::new();
        let la = tape.constant(Tensor::full([100_000], -20.0));
        let z = hc_gate(la, tape.constant(noise), &cfg()).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hc_expected_l0_closed_form() {
        let tape = Tape::new();
        let la = tape.leaf(Tensor::scalar(0.0), true);
        let v = hc_expected_l0(la, &cfg()).value().item();
        assert!((hc_l0_shift(&cfg()) - 1.5986).abs() < 1e-4);
        assert!((v - 0.8318).abs() < 1e-4, "{v}");
        let lo = hc_expected_l0(tape.constant(Tensor::scalar(-60.0)), &cfg())
            .value()
            .item();
        let hi = hc_expected_l0(tape.constant(Tensor::scalar(60.0)), &cfg())
            .value()
            .item();
        assert!(lo < 1e-20 && (1.0 - hi) < 1e-15);
    }

    #[test]
    fn hc_expected_l0_matches_monte_carlo() {
        let mut rng = seed::stream(1, "mc");
        let c = cfg();
        for la in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let n = 100_000;
            let open = (0..n)
                .filter(|_| {
                    let u = rng.gen::<f64>().clamp(U_EPS, 1.0 - U_EPS);
                    gate_at(u, la, &c) > 0.0
                })
                .count() as f64
                / n as f64;
            let tape = Tape::new();
            let closed = hc_expected_l0(tape.constant(Tensor::scalar(la)), &c).value().item();
            assert!((open - closed).abs() < 1e-2, "logα={la}: {open} vs {closed}");
        }
    }

    #[test]
    fn hc_eval_examples() {
        let c = cfg();
        let la = Tensor::new([3], vec![0.0, 3.0, -3.0]).unwrap();
        let z = hc_deterministic(&la, &c);
        assert!((z.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(z.data()[1], 1.0);
        assert_eq!(z.data()[2], 0.0);
        assert_eq!(hc_eval_mask(&la, &c).data(), &[1.0, 1.0, 0.0]);
    }

    /// The sampled-gradient average matches the derivative of the expected
    /// loss, computed by midpoint quadrature over u and central differences.
    #[test]
    fn hc_reparameterized_gradient_is_unbiased() {
        let c = cfg();
        let target = 0.3;
        let loss = |z: f64| (z - target) * (z - target);
        let expected = |la: f64| {
            let n = 200_000;
            (0..n)
                .map(|i| loss(gate_at((i as f64 + 0.5) / n as f64, la, &c)))
                .sum::<f64>()
                / n as f64
        };
        let la0 = 0.4;
        let h = 1e-3;
        let fd = (expected(la0 + h) - expected(la0 - h)) / (2.0 * h);

        let mut rng = seed::stream(2, "grad");
        let samples = 10_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let tape = Tape::new();
            let la = tape.leaf(Tensor::scalar(la0), true);
            let z = hc_sample_mask(&tape, la, &c, &mut rng).unwrap();
            let d = z.affine(1.0, -target);
            let l = d.mul(d).unwrap();
            acc += tape.backward(l).unwrap().get(la).unwrap().item();
        }
        let mc = acc / samples as f64;
        assert!((mc - fd).abs() < 0.05 * fd.abs(), "mc {mc} vs fd {fd}");
    }

    #[test]
    fn cs_soft_mask_examples() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::new([2], vec![0.0, 2.0]).unwrap(), true);
        let start = AnnealState::new(200.0, 100);
        let m = cs_soft_mask(s, &start).value();
        assert_eq!(m.data()[0], 0.5);
        assert!((m.data()[1] - 0.8808).abs() < 1e-4);

        let mut end = AnnealState::new(200.0, 100);
        end.finish();
        assert_eq!(end.current_beta(), 200.0);
        let s = tape.leaf(Tensor::scalar(0.1), true);
        let v = cs_soft_mask(s, &end).value().item();
        assert!(1.0 - v < 1e-8 && v < 1.0);
        let z = tape.leaf(Tensor::scalar(0.0), true);
        assert_eq!(cs_soft_mask(z, &end).value().item(), 0.5);
    }

    #[test]
    fn anneal_schedule_is_monotone() {
        let mut a = AnnealState::new(200.0, 50);
        assert_eq!(a.current_beta(), 1.0);
        let mut last = 1.0;
        for _ in 0..60 {
            a.advance();
            let b = a.current_beta();
            assert!(b >= last);
            last = b;
        }
        assert!((last - 200.0).abs() < 1e-9);
    }

    #[test]
    fn cs_final_mask_examples() {
        let s = Tensor::new([3], vec![2.0, -0.3, 0.0]).unwrap();
        assert_eq!(cs_final_mask(&s).data(), &[1.0, 0.0, 0.0]);
        assert!(cs_final_mask(&Tensor::full([5], 0.2)).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn magnitude_examples() {
        let w = Tensor::new([4], vec![0.5, -0.1, 0.3, -0.9]).unwrap();
        assert_eq!(
            magnitude_mask(&w, 0.5, Granularity::Weight).data(),
            &[1.0, 0.0, 0.0, 1.0]
        );
        assert!(magnitude_mask(&w, 0.0, Granularity::Weight)
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(magnitude_mask(&w, 1.0, Granularity::Weight)
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let tie = Tensor::full([2, 3], 0.7);
        assert_eq!(
            magnitude_mask(&tie, 0.5, Granularity::Weight).data(),
            &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
        let rows = Tensor::new([3, 2], vec![3.0, 4.0, 0.1, 0.1, -1.0, 0.0]).unwrap();
        assert_eq!(
            magnitude_mask(&rows, 0.34, Granularity::Neuron).data(),
            &[1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn magnitude_count_random_16x16() {
        let mut rng = seed::stream(5, "w");
        let w = Tensor::from_fn([16, 16], |_| rng.gen_range(-1.0..1.0));
        let zeros = magnitude_mask(&w, 0.3, Granularity::Weight)
            .data()
            .iter()
            .filter(|&&v| v == 0.0)
            .count();
        assert_eq!(zeros, 76);
    }

    fn layer_2x3() -> MaskedLayer {
        let w = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let b = Tensor::new([2], vec![0.25, -0.75]).unwrap();
        MaskedLayer::new(w, b, cfg()).unwrap()
    }

    #[test]
    fn masked_forward_identity_and_zero() {
        let layer = layer_2x3();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 3], vec![0.3, -0.2, 1.0]).unwrap());
        let (w, b) = layer.base_vars(&tape);
        let plain = x.matmul_t(w).unwrap().add_row(b).unwrap().value();
        let ones = tape.constant(Tensor::ones([2, 3]));
        let (we, be) = layer.effective(w, b, ones).unwrap();
        let masked = x.matmul_t(we).unwrap().add_row(be).unwrap().value();
        assert!(plain.bit_eq(&masked));

        let zero_bias = MaskedLayer::new(layer.base_weights.clone(), Tensor::zeros([2]), cfg()).unwrap();
        let (w, b) = zero_bias.base_vars(&tape);
        let (we, be) = zero_bias.effective(w, b, tape.constant(Tensor::zeros([2, 3]))).unwrap();
        let y = x.matmul_t(we).unwrap().add_row(be).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neuron_mask_ablates_row_and_bias() {
        let mut layer = layer_2x3();
        layer.config.granularity = Granularity::Neuron;
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 3], vec![0.3, -0.2, 1.0, 1.0, 1.0, 1.0]).unwrap());
        let (w, b) = layer.base_vars(&tape);
        let mask = tape.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let (we, be) = layer.effective(w, b, mask).unwrap();
        let y = x.matmul_t(we).unwrap().add_row(be).unwrap().value();
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[3], 0.0);
        assert!(y.data()[0] != 0.0);

        // same output as a weight mask replicating the pattern along rows
        let (w, b) = layer.base_vars(&tape);
        let wmask = tape.constant(Tensor::new([2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let (we, _) = apply_mask(w, b, wmask, Granularity::Weight).unwrap();
        let y2 = x.matmul_t(we).unwrap().add_row(be).unwrap().value();
        assert!(y.bit_eq(&y2));
    }

    #[test]
    fn mask_shape_mismatch_is_reported() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2]));
        let m = tape.constant(Tensor::zeros([3]));
        assert!(matches!(
            apply_mask(w, b, m, Granularity::Neuron),
            Err(MaskError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn only_mask_params_receive_gradients() {
        let layer = layer_2x3();
        let tape = Tape::new();
        let params = layer.bind_params(&tape);
        let x = tape.constant(Tensor::new([1, 3], vec![0.3, -0.2, 1.0]).unwrap());
        let mut rng = seed::stream(0, "t");
        let mut ctx = MaskContext {
            anneal: None,
            rng: Some(&mut rng),
        };
        let y = layer.forward(&tape, params, x, &mut ctx).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert!(g.get(params).is_some());
        let (w, _) = layer.base_vars(&tape);
        assert!(!w.requires_grad());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut layer = layer_2x3();
        layer.mask_params = Tensor::new([2, 3], vec![1.0, -1.0, 0.2, -0.1, 4.0, -4.0]).unwrap();
        layer.mode = Mode::Eval;
        let run = || {
            let tape = Tape::new();
            let p = layer.bind_params(&tape);
            let x = tape.constant(Tensor::new([1, 3], vec![0.3, -0.2, 1.0]).unwrap());
            layer.forward(&tape, p, x, &mut MaskContext::default()).unwrap().value()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn config_validation() {
        assert!(MaskConfig::default().validate().is_ok());
        let bad = MaskConfig {
            hc_gamma: 0.1,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
        let missing = MaskConfig::with_strategy(Strategy::Magnitude);
        assert!(missing.validate().is_err());
        let frac = MaskConfig {
            prune_fraction: Some(1.5),
            ..MaskConfig::with_strategy(Strategy::Magnitude)
        };
        assert!(frac.validate().is_err());
    }
}
