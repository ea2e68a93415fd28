//! Analytical FLOPs accounting for prefill, pruning overhead and decode.
//!
//! All formulas are evaluated in `u128` with overflow checks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::PruneSchedule;

fn positive(v: u64, name: &'static str) -> Result<u128> {
    if v == 0 {
        Err(Error::InvalidCostParam(name))
    } else {
        Ok(v as u128)
    }
}

fn checked_sum(terms: &[Option<u128>]) -> Result<u128> {
    terms
        .iter()
        .try_fold(0u128, |acc, t| t.and_then(|t| acc.checked_add(t)))
        .ok_or(Error::Overflow)
}

/// One prefill layer over `n` tokens: `4nd² + 2n²d + 3ndm`.
pub fn prefill_layer_flops(n: u64, d: u64, m: u64) -> Result<u128> {
    let (n, d, m) = (positive(n, "n")?, positive(d, "d")?, positive(m, "m")?);
    checked_sum(&[
        n.checked_mul(d)
            .and_then(|x| x.checked_mul(d))
            .and_then(|x| x.checked_mul(4)),
        n.checked_mul(n)
            .and_then(|x| x.checked_mul(d))
            .and_then(|x| x.checked_mul(2)),
        n.checked_mul(d)
            .and_then(|x| x.checked_mul(m))
            .and_then(|x| x.checked_mul(3)),
    ])
}

/// Scoring overhead at one pruning layer: `T² + 2TV`.
pub fn prune_overhead_flops(text: u64, vision: u64) -> Result<u128> {
    let t = positive(text, "T")?;
    let v = vision as u128;
    checked_sum(&[
        t.checked_mul(t),
        t.checked_mul(v).and_then(|x| x.checked_mul(2)),
    ])
}

/// One decode step of one layer at context length `n`: `4d² + 2nd + 3dm`.
pub fn decode_step_flops(n: u64, d: u64, m: u64) -> Result<u128> {
    let (n, d, m) = (positive(n, "n")?, positive(d, "d")?, positive(m, "m")?);
    checked_sum(&[
        d.checked_mul(d).and_then(|x| x.checked_mul(4)),
        n.checked_mul(d).and_then(|x| x.checked_mul(2)),
        d.checked_mul(m).and_then(|x| x.checked_mul(3)),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub hidden_dim: u64,
    pub ffn_dim: u64,
    pub num_layers: usize,
    pub text_len: u64,
    pub initial_vision: u64,
    pub schedule: PruneSchedule,
    pub decode_steps: u64,
}

impl CostParams {
    /// Same shape, no pruning.
    pub fn dense(&self) -> CostParams {
        CostParams {
            schedule: PruneSchedule::empty(self.num_layers),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub prefill_per_layer: Vec<u128>,
    pub prefill_total: u128,
    pub prune_per_stage: Vec<u128>,
    pub prune_total: u128,
    pub decode_per_step: Vec<u128>,
    pub decode_total: u128,
    pub grand_total: u128,
    /// Prefill only, relative to dense prefill.
    pub prefill_ratio_vs_dense: f64,
    /// Everything, relative to a dense run of the same shape.
    pub ratio_vs_dense: f64,
}

/// FLOPs in tera-FLOPs, rounded to three decimals.
pub fn tera(flops: u128) -> f64 {
    (flops as f64 / 1e12 * 1000.0).round() / 1000.0
}

fn totals(params: &CostParams) -> Result<CostReport> {
    if params.schedule.total_layers() != params.num_layers {
        return Err(Error::InvalidSchedule(format!(
            "schedule is for {} layers, model has {}",
            params.schedule.total_layers(),
            params.num_layers
        )));
    }
    if params.num_layers == 0 {
        return Err(Error::InvalidCostParam("num_layers"));
    }
    let (d, m, t) = (params.hidden_dim, params.ffn_dim, params.text_len);
    let timeline = params
        .schedule
        .vision_timeline(params.initial_vision as usize)?;

    let prefill_per_layer = timeline
        .iter()
        .map(|&v| prefill_layer_flops(t + v as u64, d, m))
        .collect::<Result<Vec<_>>>()?;
    let prune_per_stage = params
        .schedule
        .stages()
        .iter()
        .map(|s| prune_overhead_flops(t, timeline[s.prune_after_layer] as u64))
        .collect::<Result<Vec<_>>>()?;

    let final_vision = params
        .schedule
        .stages()
        .last()
        .map_or(params.initial_vision, |s| s.keep as u64);
    let base = t + final_vision;
    let layers = params.num_layers as u128;
    let decode_per_step = (0..params.decode_steps)
        .map(|s| {
            decode_step_flops(base + s + 1, d, m)?
                .checked_mul(layers)
                .ok_or(Error::Overflow)
        })
        .collect::<Result<Vec<_>>>()?;

    let sum = |v: &[u128]| checked_sum(&v.iter().map(|&x| Some(x)).collect::<Vec<_>>());
    let prefill_total = sum(&prefill_per_layer)?;
    let prune_total = sum(&prune_per_stage)?;
    let decode_total = sum(&decode_per_step)?;
    let grand_total = sum(&[prefill_total, prune_total, decode_total])?;
    Ok(CostReport {
        prefill_per_layer,
        prefill_total,
        prune_per_stage,
        prune_total,
        decode_per_step,
        decode_total,
        grand_total,
        prefill_ratio_vs_dense: 1.0,
        ratio_vs_dense: 1.0,
    })
}

/// Walks the layer timeline under the schedule and totals every term.
pub fn run_cost(params: &CostParams) -> Result<CostReport> {
    let mut report = totals(params)?;
    let dense = totals(&params.dense())?;
    report.prefill_ratio_vs_dense = report.prefill_total as f64 / dense.prefill_total as f64;
    report.ratio_vs_dense = report.grand_total as f64 / dense.grand_total as f64;
    Ok(report)
}

/// One row of a method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub tokens: f64,
    pub report: CostReport,
}

/// `method,tokens,flops_T,ratio` over prefill FLOPs.
pub fn cost_table_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("method,tokens,flops_T,ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.3},{:.3},{:.4}",
            r.method,
            r.tokens,
            tera(r.report.prefill_total),
            r.report.prefill_ratio_vs_dense
        );
    }
    out
}
