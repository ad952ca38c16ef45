//! ROC curves, AUC with DeLong variance, and the equal-error rate.
//!
//! Convention: higher scores are more genuine-like; a threshold `t` accepts
//! every score `>= t`. Ties count half in the AUC and cross a threshold
//! together in the ROC sweep.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::write_hash_comment;

const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPopulation {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoredPopulation {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        Self { genuine, impostor }
    }

    fn check(&self, min: usize) -> Result<()> {
        if self.genuine.len() < min || self.impostor.len() < min {
            return Err(Error::InsufficientData(format!(
                "need at least {min} scores per class, got {} genuine and {} impostor",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self
            .genuine
            .iter()
            .chain(&self.impostor)
            .any(|s| s.is_nan())
        {
            return Err(Error::Range("NaN score in population".into()));
        }
        Ok(())
    }

    /// Roles of the two classes exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            genuine: self.impostor.clone(),
            impostor: self.genuine.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From `(0,0)` at threshold `+inf` to `(1,1)` at the lowest score.
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: Option<&str>) -> Result<()> {
        write_hash_comment(&mut w, config_hash)?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            csv.write_record([
                p.threshold.to_string(),
                p.fpr.to_string(),
                p.tpr.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// Threshold sweep over every distinct score, highest first.
pub fn roc_curve(pop: &ScoredPopulation) -> Result<RocCurve> {
    pop.check(1)?;
    let mut all: Vec<(f64, bool)> = pop
        .genuine
        .iter()
        .map(|s| (*s, true))
        .chain(pop.impostor.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_gen, n_imp) = (pop.genuine.len() as f64, pop.impostor.len() as f64);

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n_imp,
            tpr: tp as f64 / n_gen,
        });
    }
    Ok(RocCurve { points })
}

/// Mann-Whitney AUC: `P(g > i) + ½·P(g = i)`, by midranks in `O(n log n)`.
pub fn auc(pop: &ScoredPopulation) -> Result<f64> {
    pop.check(1)?;
    let mut all: Vec<(f64, bool)> = pop
        .genuine
        .iter()
        .map(|s| (*s, true))
        .chain(pop.impostor.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_genuine = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum_genuine += midrank * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n, m) = (pop.genuine.len() as f64, pop.impostor.len() as f64);
    Ok((rank_sum_genuine - n * (n + 1.0) / 2.0) / (n * m))
}

fn kernel(g: f64, i: f64) -> f64 {
    match g.partial_cmp(&i) {
        Some(Ordering::Greater) => 1.0,
        Some(Ordering::Equal) => 0.5,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucEstimate {
    pub auc: f64,
    pub variance: f64,
    /// `auc ± 1.96·sd`, clipped to `[0, 1]`.
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_low_unclipped: f64,
    pub ci_high_unclipped: f64,
}

/// DeLong structural-components estimate of the AUC and its variance.
pub fn delong_variance(pop: &ScoredPopulation) -> Result<AucEstimate> {
    pop.check(2)?;
    let (n, m) = (pop.genuine.len(), pop.impostor.len());
    let v10: Vec<f64> = pop
        .genuine
        .iter()
        .map(|g| pop.impostor.iter().map(|i| kernel(*g, *i)).sum::<f64>() / m as f64)
        .collect();
    let v01: Vec<f64> = pop
        .impostor
        .iter()
        .map(|i| pop.genuine.iter().map(|g| kernel(*g, *i)).sum::<f64>() / n as f64)
        .collect();
    let a = auc(pop)?;
    let sample_var = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let variance = sample_var(&v10) / n as f64 + sample_var(&v01) / m as f64;
    let half = Z_95 * variance.sqrt();
    Ok(AucEstimate {
        auc: a,
        variance,
        ci_low: (a - half).clamp(0.0, 1.0),
        ci_high: (a + half).clamp(0.0, 1.0),
        ci_low_unclipped: a - half,
        ci_high_unclipped: a + half,
    })
}

/// Equal-error rate: where `FAR = FRR` along the ROC sweep, interpolated
/// linearly between the bracketing sweep points.
pub fn eer(pop: &ScoredPopulation) -> Result<f64> {
    let roc = roc_curve(pop)?;
    let gap = |p: &RocPoint| (1.0 - p.tpr) - p.fpr;
    for w in roc.points.windows(2) {
        let (d0, d1) = (gap(&w[0]), gap(&w[1]));
        if d0 >= 0.0 && d1 <= 0.0 {
            if d0 == d1 {
                return Ok(w[0].fpr);
            }
            let t = d0 / (d0 - d1);
            return Ok(w[0].fpr + t * (w[1].fpr - w[0].fpr));
        }
    }
    unreachable!("FRR - FAR runs from 1 to -1 along the sweep")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub n_genuine: usize,
    pub n_impostor: usize,
    pub auc: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_low_unclipped: f64,
    pub ci_high_unclipped: f64,
    pub eer: f64,
}

pub fn summarize(pop: &ScoredPopulation) -> Result<RocSummary> {
    let est = delong_variance(pop)?;
    Ok(RocSummary {
        n_genuine: pop.genuine.len(),
        n_impostor: pop.impostor.len(),
        auc: est.auc,
        variance: est.variance,
        ci_low: est.ci_low,
        ci_high: est.ci_high,
        ci_low_unclipped: est.ci_low_unclipped,
        ci_high_unclipped: est.ci_high_unclipped,
        eer: eer(pop)?,
    })
}

/// False-accept rate at `threshold`.
pub fn far_at(pop: &ScoredPopulation, threshold: f64) -> f64 {
    pop.impostor.iter().filter(|s| **s >= threshold).count() as f64 / pop.impostor.len() as f64
}

/// False-reject rate at `threshold`.
pub fn frr_at(pop: &ScoredPopulation, threshold: f64) -> f64 {
    pop.genuine.iter().filter(|s| **s < threshold).count() as f64 / pop.genuine.len() as f64
}
