//! SRCC, PLCC and MSE.
//!
//! Correlations of a constant vector are undefined; they come back as `None`
//! and serialize as JSON `null` / an empty CSV cell.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub mse: f64,
}

impl MetricTriple {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self {
            srcc: srcc(pred, target)?,
            plcc: plcc(pred, target)?,
            mse: mse(pred, target)?,
        })
    }
}

fn check(pred: &[f64], target: &[f64], min: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(invalid(format!(
            "metric inputs differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < min {
        return Err(invalid(format!(
            "metric needs at least {min} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(invalid("metric inputs must be finite"));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn srcc(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    check(pred, target, 2)?;
    Ok(pearson(&average_ranks(pred), &average_ranks(target)))
}

pub fn plcc(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    check(pred, target, 2)?;
    Ok(pearson(pred, target))
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target, 1)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Formats an optional metric for CSV output.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
