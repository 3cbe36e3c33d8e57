use serde::{Deserialize, Serialize};

use super::{LayerId, Model, ModelConfig};
use crate::masking::Granularity;

/// Shape of one maskable linear sublayer's weight, `[out, in]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: LayerId,
    pub out_features: usize,
    pub in_features: usize,
}

impl LayerInfo {
    /// Mask shape at the given granularity.
    pub fn mask_shape(&self, granularity: Granularity) -> Vec<usize> {
        match granularity {
            Granularity::Weight => vec![self.out_features, self.in_features],
            Granularity::Neuron => vec![self.out_features],
        }
    }
}

/// The mask entries that belong to one attention head across q, k, v and o.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadGroup {
    pub name: String,
    pub block: usize,
    pub head: usize,
    /// Flat mask indices per member layer, ascending.
    pub members: Vec<(LayerId, Vec<usize>)>,
}

impl HeadGroup {
    pub fn len(&self) -> usize {
        self.members.iter().map(|(_, idx)| idx.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Architecture summary needed to group mask entries: maskable layers in
/// forward order plus attention geometry. Derivable from the config alone,
/// so it can be rebuilt from a checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    pub layers: Vec<LayerInfo>,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_head: usize,
}

impl ModelLayout {
    pub fn new(model: &Model) -> Self {
        Self::from_config(model.config())
    }

    pub fn from_config(config: &ModelConfig) -> Self {
        let mut layers = Vec::new();
        let mut push = |id: String, out_features, in_features| {
            layers.push(LayerInfo {
                id: LayerId::new(id),
                out_features,
                in_features,
            })
        };
        match config {
            ModelConfig::Transformer(c) => {
                for l in 0..c.n_layers {
                    for p in ["q", "k", "v", "o"] {
                        push(format!("layer{l}.attn.{p}"), c.d_model, c.d_model);
                    }
                    push(format!("layer{l}.mlp.fc1"), c.d_mlp, c.d_model);
                    push(format!("layer{l}.mlp.fc2"), c.d_model, c.d_mlp);
                }
                Self {
                    layers,
                    n_blocks: c.n_layers,
                    n_heads: c.n_heads,
                    d_head: c.d_head(),
                }
            }
            ModelConfig::Mlp(c) => {
                let mut width = c.d_embed * c.seq_len;
                for (i, &h) in c.hidden.iter().enumerate() {
                    push(format!("mlp.fc{i}"), h, width);
                    width = h;
                }
                push("mlp.out".into(), c.vocab_size, width);
                Self {
                    layers,
                    n_blocks: 0,
                    n_heads: 0,
                    d_head: 0,
                }
            }
        }
    }

    pub fn layer(&self, id: &LayerId) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| &l.id == id)
    }

    /// One group per (block, head). At neuron granularity the o projection's
    /// mask runs over its output features, which no single head owns, so o
    /// only joins the groups at weight granularity.
    pub fn head_groups(&self, granularity: Granularity) -> Vec<HeadGroup> {
        let mut groups = Vec::new();
        for block in 0..self.n_blocks {
            for head in 0..self.n_heads {
                let range = head * self.d_head..(head + 1) * self.d_head;
                let mut members = Vec::new();
                for p in ["q", "k", "v", "o"] {
                    let id = LayerId::new(format!("layer{block}.attn.{p}"));
                    let Some(info) = self.layer(&id) else { continue };
                    let cols = info.in_features;
                    let idx: Vec<usize> = match (granularity, p) {
                        (Granularity::Neuron, "o") => continue,
                        (Granularity::Neuron, _) => range.clone().collect(),
                        (Granularity::Weight, "o") => (0..info.out_features)
                            .flat_map(|r| range.clone().map(move |c| r * cols + c))
                            .collect(),
                        (Granularity::Weight, _) => (range.start * cols..range.end * cols).collect(),
                    };
                    members.push((id, idx));
                }
                groups.push(HeadGroup {
                    name: format!("layer{block}.attn.head{head}"),
                    block,
                    head,
                    members,
                });
            }
        }
        groups
    }
}
