use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{
    linear_fit, memory_traffic, stalled_ratio, ExpertActivationMatrix, Fit, MatMulSample, OpAggregate, TokenSeries,
};
use crate::event::PmcSpec;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_tokens_csv<W: Write>(series: &TokenSeries, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iter".to_string(), "phase".into(), "duration_ns".into(), "op_sum_ns".into()];
    header.extend(series.patterns.iter().cloned());
    w.write_record(&header)?;
    for r in &series.rows {
        let mut rec =
            vec![r.iteration.to_string(), r.phase.to_string(), r.duration_ns.to_string(), r.op_sum_ns.to_string()];
        rec.extend(r.pattern_ns.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per op per iteration, in execution order.
pub fn write_ops_csv<W: Write>(iterations: &[(usize, Vec<OpAggregate>)], specs: &[PmcSpec], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "order", "op_type", "name", "elapsed_ns", "bandwidth", "stalled_ratio"])?;
    for (iter, ops) in iterations {
        for (order, op) in ops.iter().enumerate() {
            let pmc = op.pmc_totals.as_deref();
            let bw = pmc.and_then(|p| memory_traffic(p, specs, op.elapsed_ns).ok()).map(|t| t.bandwidth_bytes_per_s);
            let stalled = pmc.and_then(|p| stalled_ratio(p, specs).ok()).map(|s| s.ratio);
            w.write_record([
                iter.to_string(),
                order.to_string(),
                op.op_type.to_string(),
                op.op_name.clone(),
                op.elapsed_ns.to_string(),
                opt(bw),
                opt(stalled),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_matmuls_csv<W: Write>(samples: &[MatMulSample], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "name", "M", "N", "K", "H", "complexity", "elapsed_ns", "bandwidth", "stalled_ratio"])?;
    for s in samples {
        w.write_record([
            s.iteration.to_string(),
            s.op_name.clone(),
            s.m.to_string(),
            s.n.to_string(),
            s.k.to_string(),
            s.h.to_string(),
            s.complexity.to_string(),
            s.elapsed_ns.to_string(),
            opt(s.bandwidth_bytes_per_s),
            opt(s.stalled_ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_experts_csv<W: Write>(m: &ExpertActivationMatrix, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "expert_ids", "elapsed_ns", "avg_distance", "density"])?;
    for r in &m.rows {
        let ids: Vec<String> = r.expert_ids.iter().map(u32::to_string).collect();
        w.write_record([
            r.iteration.to_string(),
            ids.join(";"),
            r.elapsed_ns.to_string(),
            r.avg_distance.to_string(),
            m.row_density(r).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_expert_density_csv<W: Write>(m: &ExpertActivationMatrix, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["expert", "density"])?;
    for (e, d) in m.density.iter().enumerate() {
        w.write_record([e.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Data and labels for an external plotting tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<PlotSeries>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<Fit>,
}

pub fn tokens_plot(series: &TokenSeries) -> PlotSpec {
    let x: Vec<f64> = series.rows.iter().map(|r| r.iteration as f64).collect();
    let mut out = vec![PlotSeries {
        name: "iteration".into(),
        x: x.clone(),
        y: series.rows.iter().map(|r| r.duration_ns as f64 / 1e6).collect(),
    }];
    for (i, p) in series.patterns.iter().enumerate() {
        out.push(PlotSeries {
            name: p.clone(),
            x: x.clone(),
            y: series.rows.iter().map(|r| r.pattern_ns[i] as f64 / 1e6).collect(),
        });
    }
    PlotSpec {
        title: "time per iteration".into(),
        x_label: "iteration".into(),
        y_label: "time (ms)".into(),
        series: out,
        fit: None,
    }
}

pub fn matmul_plot(samples: &[MatMulSample]) -> PlotSpec {
    let x: Vec<f64> = samples.iter().map(|s| s.complexity as f64).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.elapsed_ns as f64).collect();
    PlotSpec {
        title: "matmul time vs complexity".into(),
        x_label: "M x N x K x H".into(),
        y_label: "elapsed (ns)".into(),
        fit: linear_fit(&x, &y).ok(),
        series: vec![PlotSeries { name: "MUL_MAT".into(), x, y }],
    }
}

pub fn experts_plot(m: &ExpertActivationMatrix) -> PlotSpec {
    let x: Vec<f64> = m.rows.iter().map(|r| r.iteration as f64).collect();
    PlotSpec {
        title: format!("{} expert reuse", m.op_name),
        x_label: "iteration".into(),
        y_label: "value".into(),
        series: vec![
            PlotSeries {
                name: "avg_distance".into(),
                x: x.clone(),
                y: m.rows.iter().map(|r| r.avg_distance).collect(),
            },
            PlotSeries { name: "elapsed_ns".into(), x, y: m.rows.iter().map(|r| r.elapsed_ns as f64).collect() },
        ],
        fit: None,
    }
}
