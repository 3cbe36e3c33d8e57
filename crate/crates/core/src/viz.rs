//! SVG figures of one or two subnetworks laid out over a model's blocks.
//!
//! Each mask entry is one `<rect>` carrying `data-class` (membership) and
//! `data-layer`; panels larger than [`MAX_CELLS`] per side are block-averaged
//! and the covered entry count is kept in `data-n`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::Granularity;
use crate::model::{LayerId, ModelLayout};
use crate::subnetwork::{OverlapReport, SubnetError, Subnetwork};

pub const MAX_CELLS: usize = 128;
/// Neuron masks without head structure are wrapped to this many cells per row.
const NEURON_WRAP: usize = 32;
const MARGIN: f64 = 12.0;
const TITLE_H: f64 = 30.0;

#[derive(Debug, Error)]
pub enum VizError {
    #[error(transparent)]
    Subnet(#[from] SubnetError),
    #[error("palette colors must be pairwise distinct")]
    Palette,
    #[error("cell size must be positive")]
    CellSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    AOnly,
    BOnly,
    Both,
    Pruned,
}

impl Class {
    pub fn name(self) -> &'static str {
        match self {
            Class::AOnly => "a_only",
            Class::BOnly => "b_only",
            Class::Both => "both",
            Class::Pruned => "pruned",
        }
    }

    pub fn of(a: bool, b: bool) -> Self {
        match (a, b) {
            (true, true) => Class::Both,
            (true, false) => Class::AOnly,
            (false, true) => Class::BOnly,
            (false, false) => Class::Pruned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub a_only: String,
    pub b_only: String,
    pub both: String,
    pub pruned: String,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            a_only: "#0072b2".into(),
            b_only: "#e69f00".into(),
            both: "#7b3294".into(),
            pruned: "#dddddd".into(),
        }
    }
}

impl Palette {
    fn color(&self, c: Class) -> &str {
        match c {
            Class::AOnly => &self.a_only,
            Class::BOnly => &self.b_only,
            Class::Both => &self.both,
            Class::Pruned => &self.pruned,
        }
    }

    fn distinct(&self) -> bool {
        let c = [&self.a_only, &self.b_only, &self.both, &self.pruned];
        (0..4).all(|i| (i + 1..4).all(|j| !c[i].eq_ignore_ascii_case(c[j])))
    }
}

pub struct VizSpec<'a> {
    pub a: &'a Subnetwork,
    pub b: Option<&'a Subnetwork>,
    pub palette: Palette,
    pub cell_size: f64,
}

impl<'a> VizSpec<'a> {
    pub fn new(a: &'a Subnetwork, b: Option<&'a Subnetwork>) -> Self {
        Self {
            a,
            b,
            palette: Palette::default(),
            cell_size: 4.0,
        }
    }
}

/// Caption data of one panel, mirrored into the sidecar JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelCaption {
    pub name: String,
    pub layers: Vec<LayerId>,
    pub head: Option<usize>,
    pub entries: usize,
    pub cells: usize,
    pub kept_a: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kept_b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intersection: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub union: Option<usize>,
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizSidecar {
    pub fingerprint: String,
    pub granularity: Granularity,
    pub legend: Vec<String>,
    pub panels: Vec<PanelCaption>,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub svg: String,
    pub sidecar: VizSidecar,
}

/// One panel before rendering: a ragged grid of `(layer, flat index)` refs.
struct Panel {
    name: String,
    head: Option<usize>,
    rows: Vec<Vec<(usize, usize)>>,
}

fn layer_index(layout: &ModelLayout, id: &LayerId) -> usize {
    layout.layers.iter().position(|l| &l.id == id).expect("layer in layout")
}

fn panels(layout: &ModelLayout, granularity: Granularity) -> Vec<Panel> {
    let mut out = Vec::new();
    let groups = layout.head_groups(granularity);
    let in_groups = |id: &LayerId| groups.iter().any(|g| g.members.iter().any(|(m, _)| m == id));
    let mut done = vec![false; layout.layers.len()];
    for (li, info) in layout.layers.iter().enumerate() {
        if done[li] {
            continue;
        }
        let block = info.id.block();
        let block_groups: Vec<_> = groups.iter().filter(|g| Some(g.block) == block).collect();
        if in_groups(&info.id) && !block_groups.is_empty() {
            for g in block_groups {
                let mut rows = Vec::new();
                for (id, idx) in &g.members {
                    let lx = layer_index(layout, id);
                    done[lx] = true;
                    let linfo = &layout.layers[lx];
                    let is_o = id.as_str().ends_with(".o");
                    match granularity {
                        Granularity::Neuron => rows.push(idx.iter().map(|&i| (lx, i)).collect()),
                        Granularity::Weight if is_o => {
                            // transposed: one row per head dimension
                            let cols = linfo.in_features;
                            let d = layout.d_head;
                            for c in 0..d {
                                let col = g.head * d + c;
                                rows.push((0..linfo.out_features).map(|r| (lx, r * cols + col)).collect());
                            }
                        }
                        Granularity::Weight => {
                            for chunk in idx.chunks(linfo.in_features) {
                                rows.push(chunk.iter().map(|&i| (lx, i)).collect());
                            }
                        }
                    }
                }
                out.push(Panel {
                    name: g.name.clone(),
                    head: Some(g.head),
                    rows,
                });
            }
            continue;
        }
        done[li] = true;
        let rows = match granularity {
            Granularity::Weight => (0..info.out_features)
                .map(|r| (0..info.in_features).map(|c| (li, r * info.in_features + c)).collect())
                .collect(),
            Granularity::Neuron => (0..info.out_features)
                .collect::<Vec<_>>()
                .chunks(NEURON_WRAP)
                .map(|c| c.iter().map(|&i| (li, i)).collect())
                .collect(),
        };
        out.push(Panel {
            name: info.id.to_string(),
            head: None,
            rows,
        });
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Draws one panel per attention head (q, k, v rows then o columns) and one
/// per remaining maskable layer, grouped by block.
pub fn render(spec: &VizSpec<'_>, layout: &ModelLayout) -> Result<Rendered, VizError> {
    if !spec.palette.distinct() {
        return Err(VizError::Palette);
    }
    if !(spec.cell_size > 0.0) {
        return Err(VizError::CellSize);
    }
    spec.a.validate_layout(layout)?;
    if let Some(b) = spec.b {
        if b.fingerprint != spec.a.fingerprint {
            return Err(SubnetError::Fingerprint {
                expected: spec.a.fingerprint,
                found: b.fingerprint,
            }
            .into());
        }
        if b.granularity != spec.a.granularity {
            return Err(SubnetError::Granularity {
                a: spec.a.granularity,
                b: b.granularity,
            }
            .into());
        }
        b.validate_layout(layout)?;
    }
    let granularity = spec.a.granularity;
    let bits_a: Vec<&[bool]> = layout.layers.iter().map(|l| spec.a.masks[&l.id].bits()).collect();
    let bits_b: Option<Vec<&[bool]>> = spec
        .b
        .map(|b| layout.layers.iter().map(|l| b.masks[&l.id].bits()).collect());
    let get_b = |l: usize, i: usize| bits_b.as_ref().is_some_and(|bb| bb[l][i]);

    let legend: Vec<Class> = if spec.b.is_some() {
        vec![Class::AOnly, Class::BOnly, Class::Both, Class::Pruned]
    } else {
        vec![Class::AOnly, Class::Pruned]
    };
    let cs = spec.cell_size;
    let mut body = String::new();
    let mut captions = Vec::new();
    let mut y = MARGIN + 24.0;
    let mut width: f64 = 400.0;

    let all = panels(layout, granularity);
    let mut by_block: Vec<(Option<usize>, Vec<&Panel>)> = Vec::new();
    for p in &all {
        let block = p
            .rows
            .first()
            .and_then(|r| r.first())
            .and_then(|&(l, _)| layout.layers[l].id.block());
        match by_block.last_mut() {
            Some((b, v)) if *b == block => v.push(p),
            _ => by_block.push((block, vec![p])),
        }
    }

    for (block, group) in &by_block {
        let label = block.map_or_else(|| "layers".to_string(), |b| format!("layer{b}"));
        let _ = writeln!(
            body,
            r#"<text class="block-title" x="{MARGIN}" y="{:.1}" font-size="14" font-weight="bold">{}</text>"#,
            y + 12.0,
            esc(&label)
        );
        y += 20.0;
        let mut x = MARGIN;
        let mut row_h: f64 = 0.0;
        for p in group {
            let n_rows = p.rows.len();
            let n_cols = p.rows.iter().map(Vec::len).max().unwrap_or(0);
            let fr = n_rows.div_ceil(MAX_CELLS).max(1);
            let fc = n_cols.div_ceil(MAX_CELLS).max(1);
            let grid_rows = n_rows.div_ceil(fr);
            let grid_cols = n_cols.div_ceil(fc);
            let (mut ka, mut kb, mut both, mut either, mut entries, mut cells) = (0, 0, 0, 0, 0, 0);
            let mut layers: Vec<LayerId> = Vec::new();
            let mut rects = String::new();
            for gr in 0..grid_rows {
                for gc in 0..grid_cols {
                    let (mut n, mut na, mut nb) = (0usize, 0usize, 0usize);
                    let mut first_layer = None;
                    for r in gr * fr..((gr + 1) * fr).min(n_rows) {
                        let row = &p.rows[r];
                        for &(l, i) in row.iter().take(((gc + 1) * fc).min(row.len())).skip(gc * fc) {
                            let (a, b) = (bits_a[l][i], get_b(l, i));
                            n += 1;
                            na += a as usize;
                            nb += b as usize;
                            ka += a as usize;
                            kb += b as usize;
                            both += (a && b) as usize;
                            either += (a || b) as usize;
                            first_layer.get_or_insert(l);
                            if !layers.contains(&layout.layers[l].id) {
                                layers.push(layout.layers[l].id.clone());
                            }
                        }
                    }
                    let Some(l) = first_layer else { continue };
                    entries += n;
                    cells += 1;
                    let class = Class::of(2 * na >= n, 2 * nb >= n && bits_b.is_some());
                    let _ = write!(
                        rects,
                        r#"<rect x="{:.1}" y="{:.1}" width="{cs:.1}" height="{cs:.1}" fill="{}" data-class="{}" data-layer="{}""#,
                        gc as f64 * cs,
                        gr as f64 * cs,
                        spec.palette.color(class),
                        class.name(),
                        esc(layout.layers[l].id.as_str())
                    );
                    if n > 1 {
                        let _ = write!(rects, r#" data-n="{n}""#);
                    }
                    rects.push_str("/>\n");
                }
            }
            let pruned = entries - either;
            let caption = if spec.b.is_some() {
                format!("kept a {ka} | kept b {kb} | both {both} | pruned {pruned} / {entries}")
            } else {
                format!("kept {ka} | pruned {pruned} / {entries}")
            };
            let title = match p.head {
                Some(h) => format!("{} (head {h})", p.name),
                None => p.name.clone(),
            };
            let pw = (grid_cols as f64 * cs).max(150.0);
            let ph = grid_rows as f64 * cs + TITLE_H;
            let _ = writeln!(
                body,
                r#"<g class="panel" data-panel="{}" transform="translate({x:.1},{y:.1})">"#,
                esc(&p.name)
            );
            let _ = writeln!(
                body,
                r#"<text class="panel-title" x="0" y="11" font-size="11">{}</text>"#,
                esc(&title)
            );
            let _ = writeln!(
                body,
                r#"<text class="panel-caption" x="0" y="24" font-size="9">{}</text>"#,
                esc(&caption)
            );
            let _ = writeln!(body, r#"<g transform="translate(0,{TITLE_H:.1})">"#);
            body.push_str(&rects);
            body.push_str("</g>\n</g>\n");
            captions.push(PanelCaption {
                name: p.name.clone(),
                layers,
                head: p.head,
                entries,
                cells,
                kept_a: ka,
                kept_b: spec.b.map(|_| kb),
                intersection: spec.b.map(|_| both),
                union: spec.b.map(|_| either),
                pruned,
            });
            x += pw + MARGIN;
            row_h = row_h.max(ph);
        }
        width = width.max(x);
        y += row_h + MARGIN;
    }

    let mut legend_svg = String::new();
    let mut lx = MARGIN;
    for c in &legend {
        let _ = writeln!(
            legend_svg,
            r#"<g class="legend-entry" data-class="{0}"><rect x="{lx:.1}" y="{MARGIN:.1}" width="10" height="10" fill="{1}"/><text x="{2:.1}" y="{3:.1}" font-size="11">{0}</text></g>"#,
            c.name(),
            spec.palette.color(*c),
            lx + 14.0,
            MARGIN + 9.0
        );
        lx += 80.0;
    }
    let height = y + MARGIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, "<title>subnetwork masks ({:?} granularity)</title>", granularity);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<g class="legend">"#);
    svg.push_str(&legend_svg);
    svg.push_str("</g>\n");
    svg.push_str(&body);
    svg.push_str("</svg>\n");
    Ok(Rendered {
        svg,
        sidecar: VizSidecar {
            fingerprint: format!("{:016x}", spec.a.fingerprint),
            granularity,
            legend: legend.iter().map(|c| c.name().to_string()).collect(),
            panels: captions,
        },
    })
}

/// Grouped bar chart of kept fraction a, kept fraction b and Jaccard per
/// maskable layer and per block.
pub fn render_summary(report: &OverlapReport) -> String {
    const PLOT_H: f64 = 200.0;
    const BAR_W: f64 = 12.0;
    const GAP: f64 = 16.0;
    const LEFT: f64 = 50.0;
    const TOP: f64 = 40.0;
    let metrics: [(&str, &str); 3] = [
        ("sparsity_a", "#0072b2"),
        ("sparsity_b", "#e69f00"),
        ("jaccard", "#7b3294"),
    ];
    let groups: Vec<_> = report.layers.iter().chain(&report.blocks).collect();
    let group_w = 3.0 * BAR_W + GAP;
    let width = LEFT + groups.len() as f64 * group_w + 20.0;
    let height = TOP + PLOT_H + 130.0;
    let base = TOP + PLOT_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, "<title>subnetwork overlap summary</title>");
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (m, color)) in metrics.iter().enumerate() {
        let x = LEFT + i as f64 * 110.0;
        let _ = writeln!(
            s,
            r#"<g class="legend-entry" data-metric="{m}"><rect x="{x:.1}" y="10" width="10" height="10" fill="{color}"/><text x="{:.1}" y="19" font-size="11">{m}</text></g>"#,
            x + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{LEFT}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#,
        width - 10.0
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let ty = base - tick * PLOT_H;
        let _ = writeln!(
            s,
            r#"<text class="tick" x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{tick:.2}</text>"#,
            LEFT - 4.0,
            ty + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="axis-label" x="12" y="{:.1}" font-size="11" transform="rotate(-90 12 {:.1})" text-anchor="middle">fraction</text>"#,
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    );
    for (gi, g) in groups.iter().enumerate() {
        let gx = LEFT + 8.0 + gi as f64 * group_w;
        let _ = writeln!(
            s,
            r#"<g class="bar-group" data-group="{}" data-kind="{}">"#,
            esc(&g.name),
            esc(&g.kind)
        );
        for (mi, (m, color)) in metrics.iter().enumerate() {
            let v = match *m {
                "sparsity_a" => g.sparsity_a,
                "sparsity_b" => g.sparsity_b,
                _ => g.jaccard,
            };
            let h = v * PLOT_H;
            let x = gx + mi as f64 * BAR_W;
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{x:.3}" y="{:.6}" width="{BAR_W}" height="{h:.6}" fill="{color}" data-metric="{m}" data-value="{v}"/>"#,
                base - h
            );
            let _ = writeln!(
                s,
                r#"<text class="value" x="{:.3}" y="{:.3}" font-size="7" text-anchor="middle" data-group="{}" data-metric="{m}">{v:.4}</text>"#,
                x + BAR_W / 2.0,
                base - h - 2.0,
                esc(&g.name)
            );
        }
        let lx = gx + 1.5 * BAR_W;
        let _ = writeln!(
            s,
            r#"<text class="group-label" x="{lx:.3}" y="{:.1}" font-size="9" text-anchor="end" transform="rotate(-60 {lx:.3} {:.1})">{}</text>"#,
            base + 12.0,
            base + 12.0,
            esc(&g.name)
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
