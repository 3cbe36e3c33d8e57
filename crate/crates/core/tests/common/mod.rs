//! Shared oracles for the integration tests.

#![allow(dead_code)]

use masklab::masking::{apply_mask, cs_soft_mask, hc_expected_l0, hc_gate, AnnealState, Granularity, MaskConfig};
use masklab::model::{Model, ModelConfig, NoHook, TransformerConfig};
use masklab::seed;
use masklab::tensor::{Tape, Tensor, Var};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss from leaf variables, one per input tensor.
pub type LossFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    seed::stream(seed, "test-oracle")
}

pub fn randn(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    // sum of uniforms: cheap, bounded and good enough for test inputs
    Tensor::from_fn(shape.to_vec(), |_| {
        let s: f64 = (0..4).map(|_| rng.gen::<f64>() - 0.5).sum();
        s * scale * 1.7
    })
}

/// Weighted sum `Σ y ⊙ r` with a fixed random `r`, turning any output into
/// a scalar with generic gradients.
pub fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let mut r = rng(seed ^ 0x9e37);
    let w = randn(&y.shape(), 1.0, &mut r);
    y.mul(tape.constant(w)).unwrap().sum()
}

fn eval(f: &LossFn, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    f(&tape, &vars).value().item()
}

/// Denominator floor of the relative error. Gradients that are exactly zero
/// by symmetry (a key bias under softmax) come out of central differences
/// as pure rounding noise, about `eps·|f| / h` ≈ 1e-10; below the floor the
/// check is absolute at `1e-4 · floor`.
pub const REL_FLOOR: f64 = 1e-4;

/// Largest elementwise relative error between reverse-mode gradients and
/// central differences, `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn max_rel_error(f: &LossFn, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(f, &plus) - eval(f, &minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub loss: Box<LossFn>,
}

impl GradCase {
    pub fn params(&self) -> usize {
        self.inputs.iter().map(Tensor::len).sum()
    }
}

fn tiny_transformer() -> Model {
    let cfg = TransformerConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 2,
        d_mlp: 8,
        vocab_size: 7,
        max_seq_len: 3,
        ..TransformerConfig::default()
    };
    let mut m = Model::build(ModelConfig::Transformer(cfg), 5).unwrap();
    // larger weights than the default init so every path carries signal
    let mut r = rng(77);
    for name in m.weight_names().to_vec() {
        let w = m.weight(&name).unwrap();
        let noise = randn(w.shape(), 0.4, &mut r);
        let v = Tensor::new(
            w.shape().to_vec(),
            w.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        m.set_weight(&name, v).unwrap();
    }
    m
}

/// Fixed logistic noise keeping every hard-concrete gate strictly inside
/// `(0, 1)`, away from the clamp kinks.
fn safe_noise(log_alpha: &Tensor, cfg: &MaskConfig, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(log_alpha.shape().to_vec(), |i| loop {
        let u: f64 = r.gen_range(0.05..0.95);
        let n = (u / (1.0 - u)).ln();
        let s = 1.0 / (1.0 + (-(n + log_alpha.data()[i]) / cfg.hc_beta).exp());
        let z = s * (cfg.hc_zeta - cfg.hc_gamma) + cfg.hc_gamma;
        if (0.05..0.95).contains(&z) {
            return n;
        }
    })
}

/// Every layer type on small random instances (each ≤ 1000 parameters).
pub fn gradient_cases() -> Vec<GradCase> {
    let mut r = rng(1);
    let mut cases = Vec::new();

    cases.push(GradCase {
        name: "linear",
        inputs: vec![
            randn(&[4, 6], 1.0, &mut r),
            randn(&[5, 6], 0.5, &mut r),
            randn(&[5], 0.5, &mut r),
        ],
        loss: Box::new(|t, v| {
            let y = v[0].matmul_t(v[1]).unwrap().add_row(v[2]).unwrap().tanh();
            project(t, y, 1)
        }),
    });

    cases.push(GradCase {
        name: "layernorm",
        inputs: vec![
            randn(&[3, 6], 1.0, &mut r),
            randn(&[6], 1.0, &mut r),
            randn(&[6], 1.0, &mut r),
        ],
        loss: Box::new(|t, v| {
            let y = v[0].layer_norm(1e-12).mul_row(v[1]).unwrap().add_row(v[2]).unwrap();
            project(t, y, 2)
        }),
    });

    // one causal multi-head attention block: batch 2, seq 3, d 8, 2 heads
    let mut attn_inputs = vec![randn(&[6, 8], 1.0, &mut r)];
    for _ in 0..4 {
        attn_inputs.push(randn(&[8, 8], 0.5, &mut r));
        attn_inputs.push(randn(&[8], 0.2, &mut r));
    }
    cases.push(GradCase {
        name: "attention",
        inputs: attn_inputs,
        loss: Box::new(|t, v| {
            let proj = |i: usize| v[0].matmul_t(v[i]).unwrap().add_row(v[i + 1]).unwrap();
            let q = proj(1).split_heads(2, 3, 2).unwrap();
            let k = proj(3).split_heads(2, 3, 2).unwrap();
            let val = proj(5).split_heads(2, 3, 2).unwrap();
            let p = q.matmul_t(k).unwrap().scale(0.5).softmax(true).unwrap();
            let h = p.matmul(val).unwrap().merge_heads(2, 3, 2).unwrap();
            let y = h.matmul_t(v[7]).unwrap().add_row(v[8]).unwrap();
            project(t, y, 3)
        }),
    });

    cases.push(GradCase {
        name: "softmax_cross_entropy",
        inputs: vec![randn(&[4, 7], 2.0, &mut r)],
        loss: Box::new(|_, v| v[0].softmax_cross_entropy(&[0, 3, 6, 2]).unwrap()),
    });

    cases.push(GradCase {
        name: "mlp_2layer",
        inputs: vec![
            randn(&[5, 3], 1.0, &mut r),
            randn(&[6, 6], 0.5, &mut r),
            randn(&[6], 0.5, &mut r),
            randn(&[4, 6], 0.5, &mut r),
            randn(&[4], 0.5, &mut r),
        ],
        loss: Box::new(|_, v| {
            let x = v[0].gather_rows(&[1, 4, 0, 2, 2, 3]).unwrap().reshape(&[3, 6]).unwrap();
            let h = x.matmul_t(v[1]).unwrap().add_row(v[2]).unwrap().gelu();
            let y = h.matmul_t(v[3]).unwrap().add_row(v[4]).unwrap();
            y.softmax_cross_entropy(&[1, 0, 3]).unwrap()
        }),
    });

    let model = tiny_transformer();
    let weights = model.weights().to_vec();
    cases.push(GradCase {
        name: "transformer_model",
        inputs: weights,
        loss: Box::new(move |t, v| {
            let bound = masklab::model::Bound {
                tape: t,
                vars: v.to_vec(),
            };
            let tokens = vec![vec![6, 1, 4], vec![6, 2, 5]];
            let logits = model.answer_logits(&bound, &tokens, &[2, 1], &mut NoHook).unwrap();
            logits.softmax_cross_entropy(&[3, 0]).unwrap()
        }),
    });

    for granularity in [Granularity::Weight, Granularity::Neuron] {
        let cfg = MaskConfig {
            granularity,
            ..MaskConfig::default()
        };
        let shape: Vec<usize> = match granularity {
            Granularity::Weight => vec![5, 6],
            Granularity::Neuron => vec![5],
        };
        let log_alpha = randn(&shape, 1.0, &mut r);
        let noise = safe_noise(&log_alpha, &cfg, &mut r);
        let hc_cfg = cfg.clone();
        cases.push(GradCase {
            name: match granularity {
                Granularity::Weight => "masked_hard_concrete_weight",
                Granularity::Neuron => "masked_hard_concrete_neuron",
            },
            inputs: vec![
                randn(&[4, 6], 1.0, &mut r),
                randn(&[5, 6], 0.5, &mut r),
                randn(&[5], 0.5, &mut r),
                log_alpha,
            ],
            loss: Box::new(move |t, v| {
                let z = hc_gate(v[3], t.constant(noise.clone()), &hc_cfg).unwrap();
                let (w, b) = apply_mask(v[1], v[2], z, hc_cfg.granularity).unwrap();
                let y = v[0].matmul_t(w).unwrap().add_row(b).unwrap().tanh();
                let task = project(t, y, 4);
                task.add(hc_expected_l0(v[3], &hc_cfg).scale(0.3)).unwrap()
            }),
        });

        let anneal = AnnealState {
            beta_final: 200.0,
            step: 30,
            total_steps: 100,
        };
        let cs_gran = granularity;
        cases.push(GradCase {
            name: match granularity {
                Granularity::Weight => "masked_continuous_sparsification_weight",
                Granularity::Neuron => "masked_continuous_sparsification_neuron",
            },
            inputs: vec![
                randn(&[4, 6], 1.0, &mut r),
                randn(&[5, 6], 0.5, &mut r),
                randn(&[5], 0.5, &mut r),
                randn(&shape, 0.3, &mut r),
            ],
            loss: Box::new(move |t, v| {
                let m = cs_soft_mask(v[3], &anneal);
                let (w, b) = apply_mask(v[1], v[2], m, cs_gran).unwrap();
                let y = v[0].matmul_t(w).unwrap().add_row(b).unwrap().tanh();
                let task = project(t, y, 5);
                task.add(m.sum().scale(0.1)).unwrap()
            }),
        });
    }
    cases
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn small_layout() -> masklab::model::ModelLayout {
    masklab::model::ModelLayout::from_config(&ModelConfig::Transformer(TransformerConfig {
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        ..TransformerConfig::default()
    }))
}

/// Random subnetwork over `layout` with per-entry keep probability `density`.
pub fn random_subnet(
    layout: &masklab::model::ModelLayout,
    granularity: Granularity,
    seed: u64,
    density: f64,
) -> masklab::subnetwork::Subnetwork {
    use masklab::subnetwork::{BinaryMask, SubnetMetadata, Subnetwork};
    let mut rng = self::rng(seed);
    Subnetwork {
        fingerprint: 0xfeed,
        granularity,
        masks: layout
            .layers
            .iter()
            .map(|l| {
                let shape = l.mask_shape(granularity);
                let n = shape.iter().product();
                let bits = (0..n).map(|_| rng.gen_bool(density)).collect();
                (l.id.clone(), BinaryMask::new(shape, bits).unwrap())
            })
            .collect(),
        metadata: SubnetMetadata {
            task: Some(format!("t{seed}")),
            seed: Some(seed),
            ..SubnetMetadata::default()
        },
    }
}
