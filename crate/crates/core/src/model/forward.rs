use super::{LayerId, Model, ModelConfig, ModelError, Result, LAYER_NORM_EPS};
use crate::model::Activation;
use crate::tensor::{Tape, Tensor, Var};

/// Substitutes the effective weight and bias of a maskable linear sublayer.
///
/// The model computes `x·W_effᵀ + b_eff` with whatever the hook returns.
pub trait LinearHook<'t> {
    fn linear(&mut self, tape: &'t Tape, id: &LayerId, weight: Var<'t>, bias: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;
}

/// Uses the base weights unchanged.
pub struct NoHook;

impl<'t> LinearHook<'t> for NoHook {
    fn linear(&mut self, _tape: &'t Tape, _id: &LayerId, weight: Var<'t>, bias: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((weight, bias))
    }
}

/// A model's weights registered on one tape.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    pub vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, model: &Model, name: &str) -> Result<Var<'t>> {
        model
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::UnknownWeight(name.to_string()))
    }
}

impl Model {
    /// Registers every weight as a leaf; base weights require gradients only
    /// when the model is not frozen.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .weights
            .iter()
            .map(|w| tape.leaf(w.clone(), !self.frozen))
            .collect();
        Bound { tape, vars }
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<usize> {
        let seq = tokens.first().map_or(0, Vec::len);
        let max = match &self.config {
            ModelConfig::Transformer(c) => c.max_seq_len,
            ModelConfig::Mlp(c) => c.seq_len,
        };
        let exact = matches!(self.config, ModelConfig::Mlp(_));
        if tokens.iter().any(|t| t.len() != seq) || seq == 0 || seq > max || (exact && seq != max) {
            let len = tokens
                .iter()
                .map(Vec::len)
                .find(|&l| l != seq || l > max)
                .unwrap_or(seq);
            return Err(ModelError::SeqLen { len, max });
        }
        let vocab = self.config.vocab_size();
        if let Some(&token) = tokens.iter().flatten().find(|&&t| t >= vocab) {
            return Err(ModelError::Token { token, vocab });
        }
        Ok(seq)
    }

    fn linear<'t>(
        &self,
        bound: &Bound<'t>,
        id: &LayerId,
        x: Var<'t>,
        hook: &mut dyn LinearHook<'t>,
    ) -> Result<Var<'t>> {
        let w = bound.var(self, &id.weight_name())?;
        let b = bound.var(self, &id.bias_name())?;
        let (w, b) = hook.linear(bound.tape, id, w, b)?;
        Ok(x.matmul_t(w)?.add_row(b)?)
    }

    fn layer_norm<'t>(&self, bound: &Bound<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let g = bound.var(self, &format!("{prefix}.gain"))?;
        let b = bound.var(self, &format!("{prefix}.bias"))?;
        Ok(x.layer_norm(LAYER_NORM_EPS).mul_row(g)?.add_row(b)?)
    }

    /// Final representation of every position, `[batch·seq, d_model]` for a
    /// transformer; `[batch, hidden]` for an MLP.
    pub fn hidden<'t>(
        &self,
        bound: &Bound<'t>,
        tokens: &[Vec<usize>],
        hook: &mut dyn LinearHook<'t>,
    ) -> Result<Var<'t>> {
        let seq = self.check_tokens(tokens)?;
        let batch = tokens.len();
        let flat: Vec<usize> = tokens.concat();
        match &self.config {
            ModelConfig::Transformer(c) => {
                let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
                let tok = bound.var(self, "embed.tok")?.gather_rows(&flat)?;
                let pos = bound.var(self, "embed.pos")?.gather_rows(&positions)?;
                let mut x = tok.add(pos)?;
                let scale = 1.0 / (c.d_head() as f64).sqrt();
                for l in 0..c.n_layers {
                    let h = self.layer_norm(bound, &format!("layer{l}.ln1"), x)?;
                    let proj = |name: &str, hook: &mut dyn LinearHook<'t>| -> Result<Var<'t>> {
                        let id = LayerId::new(format!("layer{l}.attn.{name}"));
                        self.linear(bound, &id, h, hook)?
                            .split_heads(batch, seq, c.n_heads)
                            .map_err(Into::into)
                    };
                    let q = proj("q", hook)?;
                    let k = proj("k", hook)?;
                    let v = proj("v", hook)?;
                    let probs = q.matmul_t(k)?.scale(scale).softmax(c.causal)?;
                    let heads = probs.matmul(v)?.merge_heads(batch, seq, c.n_heads)?;
                    let attn = self.linear(bound, &LayerId::new(format!("layer{l}.attn.o")), heads, hook)?;
                    x = x.add(attn)?;

                    let h = self.layer_norm(bound, &format!("layer{l}.ln2"), x)?;
                    let f = self.linear(bound, &LayerId::new(format!("layer{l}.mlp.fc1")), h, hook)?;
                    let f = match c.activation {
                        Activation::Gelu => f.gelu(),
                        Activation::Relu => f.relu(),
                    };
                    let f = self.linear(bound, &LayerId::new(format!("layer{l}.mlp.fc2")), f, hook)?;
                    x = x.add(f)?;
                }
                self.layer_norm(bound, "ln_f", x)
            }
            ModelConfig::Mlp(c) => {
                let emb = bound.var(self, "embed.tok")?.gather_rows(&flat)?;
                let mut x = emb.reshape(&[batch, seq * c.d_embed])?;
                for i in 0..c.hidden.len() {
                    x = self.linear(bound, &LayerId::new(format!("mlp.fc{i}")), x, hook)?.relu();
                }
                Ok(x)
            }
        }
    }

    /// Representation read at one position per example, `[batch, width]`.
    pub fn features<'t>(
        &self,
        bound: &Bound<'t>,
        tokens: &[Vec<usize>],
        positions: &[usize],
        hook: &mut dyn LinearHook<'t>,
    ) -> Result<Var<'t>> {
        let hidden = self.hidden(bound, tokens, hook)?;
        match &self.config {
            ModelConfig::Transformer(_) => {
                let seq = tokens.first().map_or(0, Vec::len);
                if let Some(&p) = positions.iter().find(|&&p| p >= seq) {
                    return Err(ModelError::SeqLen { len: p + 1, max: seq });
                }
                let rows: Vec<usize> = positions.iter().enumerate().map(|(b, &p)| b * seq + p).collect();
                Ok(hidden.gather_rows(&rows)?)
            }
            ModelConfig::Mlp(_) => Ok(hidden),
        }
    }

    /// Maps `[rows, width]` features to vocabulary logits.
    pub fn unembed<'t>(&self, bound: &Bound<'t>, features: Var<'t>, hook: &mut dyn LinearHook<'t>) -> Result<Var<'t>> {
        match &self.config {
            ModelConfig::Transformer(_) => Ok(features.matmul_t(bound.var(self, "unembed.weight")?)?),
            ModelConfig::Mlp(_) => self.linear(bound, &LayerId::new("mlp.out"), features, hook),
        }
    }

    /// Logits at the given answer positions, `[batch, vocab]`.
    pub fn answer_logits<'t>(
        &self,
        bound: &Bound<'t>,
        tokens: &[Vec<usize>],
        positions: &[usize],
        hook: &mut dyn LinearHook<'t>,
    ) -> Result<Var<'t>> {
        let f = self.features(bound, tokens, positions, hook)?;
        self.unembed(bound, f, hook)
    }

    /// Logits for every position, `[batch, seq, vocab]`. An MLP produces a
    /// single prediction per sequence, so its output is `[batch, 1, vocab]`.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        self.forward_with(tokens, &mut NoHook)
    }

    /// [`Model::forward`] with substituted linear sublayers, evaluated on a
    /// private tape.
    pub fn forward_with(&self, tokens: &[Vec<usize>], hook: &mut dyn for<'t> LinearHook<'t>) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let hidden = self.hidden(&bound, tokens, hook)?;
        let logits = self.unembed(&bound, hidden, hook)?.value();
        let batch = tokens.len();
        let vocab = self.config.vocab_size();
        let seq = logits.len() / (batch * vocab).max(1);
        Ok(logits.reshape([batch, seq, vocab])?)
    }
}
