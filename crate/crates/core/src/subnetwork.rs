//! Binary mask bundles, their overlap statistics and the `.subnet.json` file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::Granularity;
use crate::model::{LayerId, Model, ModelLayout};
use crate::tensor::Tensor;

pub const SUBNET_FORMAT: &str = "masklab.subnet/1";

#[derive(Debug, Error)]
pub enum SubnetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("model fingerprint mismatch: subnetwork has {found:016x}, model has {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("granularity mismatch: {a:?} vs {b:?}")]
    Granularity { a: Granularity, b: Granularity },
    #[error("layer sets differ: {0}")]
    Layers(String),
    #[error("layer {layer}: mask shape {found:?}, expected {expected:?}")]
    Shape {
        layer: LayerId,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer {layer}: mask entry {index} is {value}, not 0 or 1")]
    NotBinary { layer: LayerId, index: usize, value: f64 },
}

pub type Result<T, E = SubnetError> = std::result::Result<T, E>;

/// A dense binary mask with its shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Option<Self> {
        (shape.iter().product::<usize>() == bits.len()).then_some(Self { shape, bits })
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            bits: vec![true; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            bits: vec![false; n],
        }
    }

    /// Entries must be exactly 0 or 1.
    pub fn from_tensor(layer: &LayerId, t: &Tensor) -> Result<Self> {
        let bits = t
            .data()
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                if v == 1.0 {
                    Ok(true)
                } else if v == 0.0 {
                    Ok(false)
                } else {
                    Err(SubnetError::NotBinary {
                        layer: layer.clone(),
                        index,
                        value: v,
                    })
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            shape: t.shape().to_vec(),
            bits,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("shape matches bits")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// LSB-first bit packing.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn unpack(shape: Vec<usize>, bytes: &[u8]) -> std::result::Result<Self, String> {
        let n: usize = shape.iter().product();
        if bytes.len() != n.div_ceil(8) {
            return Err(format!("{} bytes cannot hold exactly {n} entries", bytes.len()));
        }
        let bits: Vec<bool> = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        if n % 8 != 0 && bytes[n / 8] >> (n % 8) != 0 {
            return Err("padding bits are set".into());
        }
        Ok(Self { shape, bits })
    }
}

/// Free-form description of how a subnetwork was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

/// Binary masks over the maskable layers of one specific model.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnetwork {
    pub fingerprint: u64,
    pub granularity: Granularity,
    pub masks: BTreeMap<LayerId, BinaryMask>,
    pub metadata: SubnetMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineOp {
    Intersect,
    Union,
    Difference,
}

impl Subnetwork {
    pub fn from_tensors(
        model: &Model,
        granularity: Granularity,
        masks: &BTreeMap<LayerId, Tensor>,
        metadata: SubnetMetadata,
    ) -> Result<Self> {
        let masks = masks
            .iter()
            .map(|(id, t)| Ok((id.clone(), BinaryMask::from_tensor(id, t)?)))
            .collect::<Result<_>>()?;
        let s = Self {
            fingerprint: model.fingerprint(),
            granularity,
            masks,
            metadata,
        };
        s.validate_for(model)?;
        Ok(s)
    }

    /// Every maskable layer of `model` kept in full.
    pub fn full(model: &Model, granularity: Granularity) -> Self {
        let layout = model.layout();
        Self {
            fingerprint: model.fingerprint(),
            granularity,
            masks: layout
                .layers
                .iter()
                .map(|l| (l.id.clone(), BinaryMask::ones(l.mask_shape(granularity))))
                .collect(),
            metadata: SubnetMetadata::default(),
        }
    }

    pub fn validate_for(&self, model: &Model) -> Result<()> {
        let expected = model.fingerprint();
        if self.fingerprint != expected {
            return Err(SubnetError::Fingerprint {
                expected,
                found: self.fingerprint,
            });
        }
        self.validate_layout(&model.layout())
    }

    /// Checks layer names and mask shapes against an architecture.
    pub fn validate_layout(&self, layout: &ModelLayout) -> Result<()> {
        let missing: Vec<_> = layout
            .layers
            .iter()
            .filter(|l| !self.masks.contains_key(&l.id))
            .map(|l| l.id.to_string())
            .collect();
        let extra: Vec<_> = self
            .masks
            .keys()
            .filter(|id| layout.layer(id).is_none())
            .map(|id| id.to_string())
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(SubnetError::Layers(format!(
                "missing [{}], unexpected [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for info in &layout.layers {
            let expected = info.mask_shape(self.granularity);
            let found = self.masks[&info.id].shape();
            if found != expected {
                return Err(SubnetError::Shape {
                    layer: info.id.clone(),
                    expected,
                    found: found.to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> BTreeMap<LayerId, Tensor> {
        self.masks.iter().map(|(id, m)| (id.clone(), m.to_tensor())).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            masks: self.masks.iter().map(|(id, m)| (id.clone(), m.complement())).collect(),
            metadata: SubnetMetadata {
                provenance: Some(format!("complement({})", self.label())),
                ..SubnetMetadata::default()
            },
            ..self.clone()
        }
    }

    pub fn kept(&self) -> usize {
        self.masks.values().map(BinaryMask::kept).sum()
    }

    pub fn total(&self) -> usize {
        self.masks.values().map(BinaryMask::len).sum()
    }

    fn label(&self) -> String {
        self.metadata
            .task
            .clone()
            .or_else(|| self.metadata.provenance.clone())
            .unwrap_or_else(|| "subnet".into())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(SubnetError::Fingerprint {
                expected: self.fingerprint,
                found: other.fingerprint,
            });
        }
        if self.granularity != other.granularity {
            return Err(SubnetError::Granularity {
                a: self.granularity,
                b: other.granularity,
            });
        }
        if !self.masks.keys().eq(other.masks.keys()) {
            return Err(SubnetError::Layers("the two subnetworks cover different layers".into()));
        }
        for (id, m) in &self.masks {
            if m.shape() != other.masks[id].shape() {
                return Err(SubnetError::Shape {
                    layer: id.clone(),
                    expected: m.shape().to_vec(),
                    found: other.masks[id].shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Element-wise boolean combination.
    pub fn combine(&self, other: &Self, op: CombineOp) -> Result<Self> {
        self.check_compatible(other)?;
        let f: fn(bool, bool) -> bool = match op {
            CombineOp::Intersect => |a, b| a && b,
            CombineOp::Union => |a, b| a || b,
            CombineOp::Difference => |a, b| a && !b,
        };
        let masks = self
            .masks
            .iter()
            .map(|(id, m)| {
                let o = &other.masks[id];
                let bits = m.bits.iter().zip(&o.bits).map(|(&a, &b)| f(a, b)).collect();
                (
                    id.clone(),
                    BinaryMask {
                        shape: m.shape.clone(),
                        bits,
                    },
                )
            })
            .collect();
        let name = match op {
            CombineOp::Intersect => "intersect",
            CombineOp::Union => "union",
            CombineOp::Difference => "difference",
        };
        Ok(Self {
            fingerprint: self.fingerprint,
            granularity: self.granularity,
            masks,
            metadata: SubnetMetadata {
                provenance: Some(format!("{name}({}, {})", self.label(), other.label())),
                ..SubnetMetadata::default()
            },
        })
    }

    /// Kept fraction per layer and overall.
    pub fn sparsity(&self) -> SparsityReport {
        let layers = self
            .masks
            .iter()
            .map(|(id, m)| LayerSparsity {
                layer: id.clone(),
                kept: m.kept(),
                total: m.len(),
                kept_fraction: ratio(m.kept(), m.len()),
            })
            .collect();
        SparsityReport {
            layers,
            kept: self.kept(),
            total: self.total(),
            kept_fraction: ratio(self.kept(), self.total()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SubnetFile {
            format: SUBNET_FORMAT.into(),
            fingerprint: format!("{:016x}", self.fingerprint),
            granularity: self.granularity,
            metadata: self.metadata.clone(),
            masks: self
                .masks
                .iter()
                .map(|(id, m)| {
                    (
                        id.to_string(),
                        MaskEntry {
                            shape: m.shape.clone(),
                            kept: m.kept(),
                            bits: B64.encode(m.pack()),
                        },
                    )
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&file).expect("subnetwork serializes");
        fs::write(path, json + "\n").map_err(|source| SubnetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| SubnetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            SubnetError::Parse { message, .. } => SubnetError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SubnetFile = serde_json::from_str(text).map_err(|e| SubnetError::Parse {
            path: "<json>".into(),
            message: e.to_string(),
        })?;
        if file.format != SUBNET_FORMAT {
            return Err(SubnetError::Field {
                field: "format".into(),
                message: format!("unsupported `{}`", file.format),
            });
        }
        let fingerprint = u64::from_str_radix(&file.fingerprint, 16).map_err(|e| SubnetError::Field {
            field: "fingerprint".into(),
            message: e.to_string(),
        })?;
        let mut masks = BTreeMap::new();
        for (name, entry) in file.masks {
            let field = |what: &str, message: String| SubnetError::Field {
                field: format!("masks.{name}.{what}"),
                message,
            };
            let bytes = B64.decode(&entry.bits).map_err(|e| field("bits", e.to_string()))?;
            let mask = BinaryMask::unpack(entry.shape, &bytes).map_err(|m| field("bits", m))?;
            if mask.kept() != entry.kept {
                return Err(field(
                    "kept",
                    format!("says {} but bits hold {}", entry.kept, mask.kept()),
                ));
            }
            masks.insert(LayerId::new(name), mask);
        }
        Ok(Self {
            fingerprint,
            granularity: file.granularity,
            masks,
            metadata: file.metadata,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubnetFile {
    format: String,
    fingerprint: String,
    granularity: Granularity,
    #[serde(default)]
    metadata: SubnetMetadata,
    masks: BTreeMap<String, MaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    shape: Vec<usize>,
    kept: usize,
    bits: String,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: LayerId,
    pub kept: usize,
    pub total: usize,
    pub kept_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub kept: usize,
    pub total: usize,
    /// Kept entries over all entries; pruned fraction is `1 − kept_fraction`.
    pub kept_fraction: f64,
}

/// Set statistics of two masks over one group of entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub name: String,
    pub kind: String,
    pub total: usize,
    pub kept_a: usize,
    pub kept_b: usize,
    pub intersection: usize,
    pub union: usize,
    /// `intersection / union`, 0 when the union is empty.
    pub jaccard: f64,
    /// Kept fractions.
    pub sparsity_a: f64,
    pub sparsity_b: f64,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    total: usize,
    a: usize,
    b: usize,
    both: usize,
    either: usize,
}

impl Counts {
    fn add(&mut self, a: bool, b: bool) {
        self.total += 1;
        self.a += a as usize;
        self.b += b as usize;
        self.both += (a && b) as usize;
        self.either += (a || b) as usize;
    }

    fn merge(&mut self, o: Counts) {
        self.total += o.total;
        self.a += o.a;
        self.b += o.b;
        self.both += o.both;
        self.either += o.either;
    }

    fn stats(self, name: String, kind: &str) -> OverlapStats {
        OverlapStats {
            name,
            kind: kind.into(),
            total: self.total,
            kept_a: self.a,
            kept_b: self.b,
            intersection: self.both,
            union: self.either,
            jaccard: ratio(self.both, self.either),
            sparsity_a: ratio(self.a, self.total),
            sparsity_b: ratio(self.b, self.total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub fingerprint: String,
    pub granularity: Granularity,
    pub layers: Vec<OverlapStats>,
    pub heads: Vec<OverlapStats>,
    /// Aggregates per transformer block (all maskable layers of the block).
    pub blocks: Vec<OverlapStats>,
    pub total: OverlapStats,
}

/// Overlap of two subnetworks. With a layout, layers follow model order and
/// per-head groups are included; otherwise layers are in name order.
pub fn overlap(a: &Subnetwork, b: &Subnetwork, layout: Option<&ModelLayout>) -> Result<OverlapReport> {
    a.check_compatible(b)?;
    let order: Vec<LayerId> = match layout {
        Some(layout) => {
            a.validate_layout(layout)?;
            layout.layers.iter().map(|l| l.id.clone()).collect()
        }
        None => a.masks.keys().cloned().collect(),
    };
    let mut total = Counts::default();
    let mut blocks: BTreeMap<usize, Counts> = BTreeMap::new();
    let mut layers = Vec::new();
    for id in &order {
        let (ma, mb) = (&a.masks[id], &b.masks[id]);
        let mut c = Counts::default();
        for (&x, &y) in ma.bits.iter().zip(&mb.bits) {
            c.add(x, y);
        }
        total.merge(c);
        if let Some(block) = id.block() {
            blocks.entry(block).or_default().merge(c);
        }
        layers.push(c.stats(id.to_string(), "layer"));
    }
    let heads = layout
        .map(|layout| {
            layout
                .head_groups(a.granularity)
                .into_iter()
                .map(|g| {
                    let mut c = Counts::default();
                    for (id, idx) in &g.members {
                        let (ma, mb) = (&a.masks[id], &b.masks[id]);
                        for &i in idx {
                            c.add(ma.bits[i], mb.bits[i]);
                        }
                    }
                    c.stats(g.name, "head")
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(OverlapReport {
        fingerprint: format!("{:016x}", a.fingerprint),
        granularity: a.granularity,
        layers,
        heads,
        blocks: blocks
            .into_iter()
            .map(|(k, c)| c.stats(format!("layer{k}"), "block"))
            .collect(),
        total: total.stats("total".into(), "total"),
    })
}

impl OverlapReport {
    /// Rows for the CSV export: layers, then head groups, then the total.
    pub fn rows(&self) -> impl Iterator<Item = &OverlapStats> {
        self.layers
            .iter()
            .chain(&self.heads)
            .chain(std::iter::once(&self.total))
    }

    pub fn block(&self, block: usize) -> Option<&OverlapStats> {
        let name = format!("layer{block}");
        self.blocks.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }

    /// Human-readable per-layer table.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "group", "total", "kept_a", "kept_b", "inter", "union", "jaccard"
        );
        for s in self
            .layers
            .iter()
            .chain(&self.blocks)
            .chain(std::iter::once(&self.total))
        {
            let _ = writeln!(
                out,
                "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8.4}",
                s.name, s.total, s.kept_a, s.kept_b, s.intersection, s.union, s.jaccard
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(bits: &[u8]) -> Subnetwork {
        let mask = BinaryMask::new(vec![bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap();
        Subnetwork {
            fingerprint: 7,
            granularity: Granularity::Neuron,
            masks: [(LayerId::new("layer0.mlp.fc1"), mask)].into_iter().collect(),
            metadata: SubnetMetadata::default(),
        }
    }

    #[test]
    fn hand_counted_overlap() {
        let r = overlap(&one_layer(&[1, 1, 0, 0]), &one_layer(&[1, 0, 1, 0]), None).unwrap();
        assert_eq!(r.total.intersection, 1);
        assert_eq!(r.total.union, 3);
        assert!((r.total.jaccard - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.blocks.len(), 1);
    }

    #[test]
    fn empty_union_has_zero_jaccard() {
        let z = one_layer(&[0, 0]);
        assert_eq!(overlap(&z, &z, None).unwrap().total.jaccard, 0.0);
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(one_layer(&[1, 0, 0, 0]).sparsity().kept_fraction, 0.25);
        assert_eq!(one_layer(&[1, 1]).sparsity().kept_fraction, 1.0);
    }

    #[test]
    fn pack_is_lsb_first() {
        let m = BinaryMask::new(vec![10], [1, 0, 0, 0, 0, 0, 0, 1, 0, 1].map(|b| b == 1).to_vec()).unwrap();
        assert_eq!(m.pack(), vec![0b1000_0001, 0b10]);
        assert_eq!(BinaryMask::unpack(vec![10], &m.pack()).unwrap(), m);
        assert!(BinaryMask::unpack(vec![10], &[0, 0b100]).is_err());
        assert!(BinaryMask::unpack(vec![10], &[0]).is_err());
    }

    #[test]
    fn load_errors_name_the_field() {
        let s = one_layer(&[1, 0, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.subnet.json");
        s.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(Subnetwork::from_json(&text).unwrap(), s);

        let no_fp: serde_json::Value = {
            let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
            v.as_object_mut().unwrap().remove("fingerprint");
            v
        };
        let err = Subnetwork::from_json(&no_fp.to_string()).unwrap_err().to_string();
        assert!(err.contains("fingerprint"), "{err}");

        let bad_kept = text.replace("\"kept\": 2", "\"kept\": 3");
        let err = Subnetwork::from_json(&bad_kept).unwrap_err().to_string();
        assert!(err.contains("masks.layer0.mlp.fc1.kept"), "{err}");

        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            Subnetwork::from_json(truncated),
            Err(SubnetError::Parse { .. })
        ));
    }

    #[test]
    fn incompatible_subnetworks_refuse_to_combine() {
        let a = one_layer(&[1, 0]);
        let mut b = a.clone();
        b.fingerprint = 8;
        assert!(matches!(
            a.combine(&b, CombineOp::Union),
            Err(SubnetError::Fingerprint { .. })
        ));
        let mut c = a.clone();
        c.granularity = Granularity::Weight;
        assert!(matches!(overlap(&a, &c, None), Err(SubnetError::Granularity { .. })));
    }
}
