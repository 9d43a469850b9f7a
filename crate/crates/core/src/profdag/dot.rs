use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{DagError, ProfDag};
use crate::event::{Addr, OpType};

/// Node shape and rotation for an op type.
pub fn shape_for(op_type: OpType) -> (&'static str, Option<u32>) {
    match op_type {
        OpType::MulMat => ("circle", None),
        OpType::MulMatId => ("doublecircle", None),
        OpType::Add => ("triangle", None),
        OpType::SoftMax => ("square", None),
        OpType::RmsNorm => ("hexagon", None),
        OpType::Unary => ("hexagon", Some(90)),
        OpType::Mul => ("octagon", None),
        _ => ("ellipse", None),
    }
}

/// Min-max normalized ordinal bucket in `0..palette_size`.
pub fn bucket(value: f64, min: f64, max: f64, palette_size: usize) -> usize {
    if palette_size == 0 || max <= min || !value.is_finite() {
        return 0;
    }
    let scaled = ((value - min) / (max - min) * palette_size as f64).floor();
    (scaled.max(0.0) as usize).min(palette_size - 1)
}

/// Sequential light-yellow to dark-red ramp.
pub fn palette_color(bucket: usize, palette_size: usize) -> String {
    const LO: [f64; 3] = [255.0, 255.0, 204.0];
    const HI: [f64; 3] = [189.0, 0.0, 38.0];
    let t = if palette_size <= 1 { 0.0 } else { bucket as f64 / (palette_size - 1) as f64 };
    let c: Vec<u8> = LO.iter().zip(HI).map(|(a, b)| (a + (b - a) * t).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn buckets(dag: &ProfDag, metric: &str, palette_size: usize) -> Result<BTreeMap<Addr, (f64, usize)>, DagError> {
    if palette_size == 0 {
        return Err(DagError::EmptyPalette);
    }
    let values = dag.metric_values(metric)?;
    let min = values.values().copied().fold(f64::INFINITY, f64::min);
    let max = values.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(values.into_iter().map(|(a, v)| (a, (v, bucket(v, min, max, palette_size)))).collect())
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn export_dot(dag: &ProfDag, metric: &str, palette_size: usize) -> Result<String, DagError> {
    let colors = buckets(dag, metric, palette_size)?;
    let mut out = String::new();
    writeln!(out, "digraph profdag {{").unwrap();
    writeln!(out, "  graph [label={}, rankdir=TB];", quote(&format!("iteration {} / {metric}", dag.iteration)))
        .unwrap();
    writeln!(out, "  node [fontsize=10];").unwrap();
    for node in dag.ordered() {
        let (shape, orientation) = shape_for(node.op_type);
        let mut attrs = vec![format!("label={}", quote(&node.label())), format!("shape={shape}")];
        if let Some(o) = orientation {
            attrs.push(format!("orientation={o}"));
        }
        match colors.get(&node.addr) {
            Some((value, b)) => {
                attrs.push("style=filled".into());
                attrs.push(format!("fillcolor={}", quote(&palette_color(*b, palette_size))));
                attrs.push(format!("tooltip={}", quote(&format!("{metric}={value} bucket={b}"))));
            }
            None => attrs.push("style=solid".into()),
        }
        writeln!(out, "  {} [{}];", quote(&node.addr.to_string()), attrs.join(", ")).unwrap();
    }
    for node in dag.nodes.values().filter(|n| n.is_constant) {
        writeln!(out, "  {} [label={}, shape=box, style=dashed];", quote(&node.addr.to_string()), quote(&node.label()))
            .unwrap();
    }
    for ((src, dst), multiplicity) in &dag.edges {
        let (s, d) = (quote(&src.to_string()), quote(&dst.to_string()));
        if *multiplicity > 1 {
            writeln!(out, "  {s} -> {d} [multiplicity={multiplicity}, label=\"x{multiplicity}\"];").unwrap();
        } else {
            writeln!(out, "  {s} -> {d};").unwrap();
        }
    }
    out.push_str("}\n");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagDocument {
    pub iteration: usize,
    pub reference_tid: u32,
    pub metric: String,
    pub pmc_names: Vec<String>,
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<EdgeDoc>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub addr: Addr,
    pub label: String,
    pub op_type: OpType,
    pub op_name: String,
    pub is_constant: bool,
    pub order: Option<usize>,
    pub dims: Option<[u64; 4]>,
    pub elapsed_ns: Option<u64>,
    pub pmc_totals: Option<Vec<u64>>,
    pub value: Option<f64>,
    pub bucket: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub src: Addr,
    pub dst: Addr,
    pub multiplicity: u32,
}

pub fn export_json(dag: &ProfDag, metric: &str, palette_size: usize) -> Result<DagDocument, DagError> {
    let colors = buckets(dag, metric, palette_size)?;
    let mut nodes: Vec<NodeDoc> = dag
        .nodes
        .values()
        .map(|n| NodeDoc {
            addr: n.addr,
            label: n.label(),
            op_type: n.op_type,
            op_name: n.op_name.clone(),
            is_constant: n.is_constant,
            order: n.order,
            dims: n.dims,
            elapsed_ns: n.elapsed_ns,
            pmc_totals: n.pmc_totals.clone(),
            value: colors.get(&n.addr).map(|c| c.0),
            bucket: colors.get(&n.addr).map(|c| c.1),
        })
        .collect();
    nodes.sort_by_key(|n| (n.is_constant, n.order, n.addr));
    Ok(DagDocument {
        iteration: dag.iteration,
        reference_tid: dag.reference_tid,
        metric: metric.to_string(),
        pmc_names: dag.pmc_specs.iter().map(|s| s.name.clone()).collect(),
        nodes,
        edges: dag.edges.iter().map(|((src, dst), m)| EdgeDoc { src: *src, dst: *dst, multiplicity: *m }).collect(),
        warnings: dag.warnings.clone(),
    })
}
