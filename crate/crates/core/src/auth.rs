//! Template enrollment and continuous verification.
//!
//! A template is a Gaussian model (mean, regularized covariance) fitted to
//! the first `k_reg` output vectors of a session. Each later vector is scored
//! by `-½·d²` where `d` is its Mahalanobis distance to the template, and the
//! per-step scores are accumulated SPRT-style against accept/reject thresholds.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::digitize::OutputVector;
use crate::error::{Error, Result};
use crate::provenance::write_hash_comment;

pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Anything that can score one output vector; higher is more genuine-like.
pub trait StepScorer {
    fn dimension(&self) -> usize;
    fn score(&self, y: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct Template {
    pub user_id: String,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub lambda: f64,
    pub k_reg: usize,
    /// Timestamp of the last registration vector.
    pub created_at: f64,
    cholesky: Cholesky<f64, Dyn>,
}

/// On-disk form of a template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub user_id: String,
    pub k_reg: usize,
    pub created_at: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub lambda: f64,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub params_hash: Option<String>,
    /// Per-step offset calibrated on the enrollment scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_offset: Option<f64>,
}

impl Template {
    pub fn new(
        user_id: impl Into<String>,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        lambda: f64,
        k_reg: usize,
        created_at: f64,
    ) -> Result<Self> {
        if k_reg < 1 {
            return Err(Error::InsufficientData("k_reg must be >= 1".into()));
        }
        let s = mean.len();
        if covariance.nrows() != s || covariance.ncols() != s {
            return Err(Error::Shape {
                expected: s,
                got: covariance.nrows(),
            });
        }
        if (&covariance - covariance.transpose()).abs().max()
            > 1e-12 * covariance.abs().max().max(1.0)
        {
            return Err(Error::NotPositiveDefinite);
        }
        let cholesky = Cholesky::new(covariance.clone()).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self {
            user_id: user_id.into(),
            mean,
            covariance,
            lambda,
            k_reg,
            created_at,
            cholesky,
        })
    }

    pub fn mahalanobis_sq(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.mean.len() {
            return Err(Error::Shape {
                expected: self.mean.len(),
                got: y.len(),
            });
        }
        let diff = DVector::from_column_slice(y) - &self.mean;
        let solved = self.cholesky.solve(&diff);
        Ok(diff.dot(&solved))
    }

    pub fn to_record(
        &self,
        config_hash: Option<&str>,
        params_hash: Option<&str>,
    ) -> TemplateRecord {
        TemplateRecord {
            user_id: self.user_id.clone(),
            k_reg: self.k_reg,
            created_at: self.created_at,
            mean: self.mean.iter().copied().collect(),
            covariance: self
                .covariance
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            lambda: self.lambda,
            config_hash: config_hash.map(str::to_string),
            params_hash: params_hash.map(str::to_string),
            drift_offset: None,
        }
    }

    pub fn from_record(rec: &TemplateRecord) -> Result<Self> {
        let s = rec.mean.len();
        if rec.covariance.len() != s || rec.covariance.iter().any(|r| r.len() != s) {
            return Err(Error::Shape {
                expected: s,
                got: rec.covariance.len(),
            });
        }
        let cov = DMatrix::from_fn(s, s, |i, j| rec.covariance[i][j]);
        Template::new(
            rec.user_id.clone(),
            DVector::from_vec(rec.mean.clone()),
            cov,
            rec.lambda,
            rec.k_reg,
            rec.created_at,
        )
    }
}

impl StepScorer for Template {
    fn dimension(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, y: &[f64]) -> Result<f64> {
        Ok(-0.5 * self.mahalanobis_sq(y)?)
    }
}

/// Fits a template to the first `k_reg` vectors: sample mean and unbiased
/// sample covariance (zero for a single vector) plus `lambda·I`.
pub fn enroll(
    user_id: &str,
    series: &[OutputVector],
    k_reg: usize,
    lambda: f64,
) -> Result<Template> {
    if k_reg < 1 {
        return Err(Error::InsufficientData("k_reg must be >= 1".into()));
    }
    if series.len() < k_reg {
        return Err(Error::InsufficientData(format!(
            "enrollment needs {k_reg} vectors, got {}",
            series.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
    }
    let reg = &series[..k_reg];
    let s = reg[0].values.len();
    if let Some(bad) = reg.iter().find(|v| v.values.len() != s) {
        return Err(Error::Shape {
            expected: s,
            got: bad.values.len(),
        });
    }
    let n = k_reg as f64;
    let mut mean = DVector::zeros(s);
    for v in reg {
        mean += DVector::from_column_slice(&v.values);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(s, s);
    if k_reg > 1 {
        for v in reg {
            let d = DVector::from_column_slice(&v.values) - &mean;
            cov += &d * d.transpose();
        }
        cov /= n - 1.0;
    }
    for i in 0..s {
        cov[(i, i)] += lambda;
    }
    Template::new(user_id, mean, cov, lambda, k_reg, reg[k_reg - 1].timestamp)
}

pub fn score_step<S: StepScorer + ?Sized>(scorer: &S, y: &OutputVector) -> Result<f64> {
    scorer.score(&y.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    /// `accumulated[k] = accumulated[k-1] + (scores[k] - drift_offset)`.
    pub accumulated: Vec<f64>,
}

impl ScoreSeries {
    pub fn total(&self) -> f64 {
        self.accumulated.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationPolicy {
    pub accept_thr: f64,
    pub reject_thr: f64,
    /// Subtracted from every per-step score before accumulation.
    pub drift_offset: f64,
}

impl VerificationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.accept_thr > self.reject_thr) {
            return Err(Error::config(format!(
                "accept threshold {} must exceed reject threshold {}",
                self.accept_thr, self.reject_thr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthDecision {
    pub verdict: Verdict,
    pub statistic: f64,
    pub accept_thr: f64,
    pub reject_thr: f64,
    /// Index of the step at which a threshold was first crossed.
    pub decision_step: Option<usize>,
    pub decision_time: Option<f64>,
}

/// Median genuine per-step score minus `margin`.
pub fn calibrate_drift_offset(genuine_scores: &[f64], margin: f64) -> Result<f64> {
    if genuine_scores.is_empty() {
        return Err(Error::InsufficientData(
            "no genuine scores to calibrate the drift offset".into(),
        ));
    }
    let mut s = genuine_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    let median = if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    };
    Ok(median - margin)
}

pub fn accumulate(scores: &[f64], drift_offset: f64) -> ScoreSeries {
    let mut acc = 0.0;
    let accumulated = scores
        .iter()
        .map(|s| {
            acc += s - drift_offset;
            acc
        })
        .collect();
    ScoreSeries {
        scores: scores.to_vec(),
        accumulated,
    }
}

/// Scores the whole stream and stops the decision at the first threshold
/// crossing. The statistic reported is the one at decision time, or the final
/// one when no threshold was crossed.
pub fn verify_series<S: StepScorer + ?Sized>(
    scorer: &S,
    stream: &[OutputVector],
    policy: &VerificationPolicy,
) -> Result<(AuthDecision, ScoreSeries)> {
    policy.validate()?;
    let scores: Vec<f64> = stream
        .iter()
        .map(|y| score_step(scorer, y))
        .collect::<Result<_>>()?;
    let series = accumulate(&scores, policy.drift_offset);
    let mut decision = AuthDecision {
        verdict: Verdict::Continue,
        statistic: series.total(),
        accept_thr: policy.accept_thr,
        reject_thr: policy.reject_thr,
        decision_step: None,
        decision_time: None,
    };
    for (k, stat) in series.accumulated.iter().enumerate() {
        let verdict = if *stat >= policy.accept_thr {
            Verdict::Accept
        } else if *stat <= policy.reject_thr {
            Verdict::Reject
        } else {
            continue;
        };
        decision.verdict = verdict;
        decision.statistic = *stat;
        decision.decision_step = Some(k);
        decision.decision_time = Some(stream[k].timestamp);
        break;
    }
    Ok((decision, series))
}

/// Appends one audit row per step: timestamp, statistic, running verdict and
/// the drift offset in force.
pub fn write_audit_csv<W: Write>(
    mut w: W,
    user_id: &str,
    stream: &[OutputVector],
    series: &ScoreSeries,
    policy: &VerificationPolicy,
    config_hash: Option<&str>,
    header: bool,
) -> Result<()> {
    if header {
        write_hash_comment(&mut w, config_hash)?;
    }
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        csv.write_record([
            "user_id",
            "timestamp",
            "statistic",
            "verdict",
            "drift_offset",
        ])?;
    }
    for (y, stat) in stream.iter().zip(&series.accumulated) {
        let verdict = if *stat >= policy.accept_thr {
            "accept"
        } else if *stat <= policy.reject_thr {
            "reject"
        } else {
            "continue"
        };
        csv.write_record([
            user_id.to_string(),
            y.timestamp.to_string(),
            stat.to_string(),
            verdict.to_string(),
            policy.drift_offset.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ov(t: f64, values: Vec<f64>) -> OutputVector {
        OutputVector {
            timestamp: t,
            values,
            bands: vec![],
        }
    }

    fn identity_template(mean: Vec<f64>) -> Template {
        let s = mean.len();
        Template::new(
            "u",
            DVector::from_vec(mean),
            DMatrix::identity(s, s),
            0.0,
            1,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn single_vector_enrollment_is_lambda_identity() {
        let t = enroll("u", &[ov(0.0, vec![0.3, 0.9])], 1, 1e-3).unwrap();
        assert_eq!(t.mean.as_slice(), &[0.3, 0.9]);
        assert_eq!(t.covariance, DMatrix::identity(2, 2) * 1e-3);
    }

    #[test]
    fn constant_series_enrollment() {
        let series: Vec<_> = (0..6).map(|k| ov(k as f64, vec![0.5, 0.1, 0.7])).collect();
        let t = enroll("u", &series, 5, 0.01).unwrap();
        assert_eq!(t.mean.as_slice(), &[0.5, 0.1, 0.7]);
        assert!(
            (t.covariance.clone() - DMatrix::identity(3, 3) * 0.01)
                .abs()
                .max()
                < 1e-15
        );
        assert_eq!(t.created_at, 4.0);
    }

    #[test]
    fn enrollment_mean_within_three_standard_errors() {
        let truth = [0.2, 0.6, 0.9];
        let sd = [0.05, 0.1, 0.02];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let series: Vec<_> = (0..200)
            .map(|k| {
                ov(
                    k as f64,
                    truth
                        .iter()
                        .zip(&sd)
                        .map(|(m, s)| Normal::new(*m, *s).unwrap().sample(&mut rng))
                        .collect(),
                )
            })
            .collect();
        let t = enroll("u", &series, 200, DEFAULT_LAMBDA).unwrap();
        for i in 0..3 {
            assert!((t.mean[i] - truth[i]).abs() < 3.0 * sd[i] / 200f64.sqrt());
        }
    }

    #[test]
    fn enrollment_errors() {
        let series = vec![ov(0.0, vec![1.0]), ov(1.0, vec![2.0])];
        assert!(matches!(
            enroll("u", &series, 3, 0.1),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            enroll("u", &series, 0, 0.1),
            Err(Error::InsufficientData(_))
        ));
        // Singular covariance without regularization.
        let flat = vec![ov(0.0, vec![1.0, 1.0]), ov(1.0, vec![1.0, 1.0])];
        assert!(matches!(
            enroll("u", &flat, 2, 0.0),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn score_closed_forms() {
        let t = identity_template(vec![0.1, 0.2, 0.3]);
        assert_eq!(t.score(&[0.1, 0.2, 0.3]).unwrap(), 0.0);
        let s = t.score(&[3.1, 0.2, 0.3]).unwrap();
        assert!((s + 4.5).abs() < 1e-12);
        assert!(matches!(t.score(&[0.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn score_decreases_radially() {
        let t = enroll(
            "u",
            &[
                ov(0.0, vec![0.0, 0.0]),
                ov(1.0, vec![1.0, 0.5]),
                ov(2.0, vec![0.2, 0.9]),
            ],
            3,
            0.01,
        )
        .unwrap();
        let dir = [0.6, -0.8];
        let mut last = f64::INFINITY;
        for r in 0..20 {
            let r = r as f64 * 0.1;
            let y: Vec<f64> = (0..2).map(|i| t.mean[i] + r * dir[i]).collect();
            let s = t.score(&y).unwrap();
            assert!(s < last || r == 0.0);
            last = s;
        }
    }

    #[test]
    fn genuine_stream_accepts() {
        let t = identity_template(vec![0.5, 0.5]);
        let stream: Vec<_> = (0..50).map(|k| ov(k as f64, vec![0.5, 0.5])).collect();
        let policy = VerificationPolicy {
            accept_thr: 5.0,
            reject_thr: -5.0,
            drift_offset: -0.5,
        };
        let (d, series) = verify_series(&t, &stream, &policy).unwrap();
        assert_eq!(d.verdict, Verdict::Accept);
        assert_eq!(d.decision_step, Some(9));
        assert_eq!(series.accumulated[3], 2.0);
    }

    #[test]
    fn distant_stream_rejects() {
        let t = identity_template(vec![0.0]);
        let stream: Vec<_> = (0..10).map(|k| ov(k as f64, vec![10.0])).collect();
        let policy = VerificationPolicy {
            accept_thr: 5.0,
            reject_thr: -5.0,
            drift_offset: 0.0,
        };
        let (d, series) = verify_series(&t, &stream, &policy).unwrap();
        assert_eq!(d.verdict, Verdict::Reject);
        assert_eq!(d.decision_step, Some(0));
        assert!(series.accumulated.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn empty_stream_continues() {
        let t = identity_template(vec![0.0]);
        let policy = VerificationPolicy {
            accept_thr: 1.0,
            reject_thr: -1.0,
            drift_offset: 0.0,
        };
        let (d, s) = verify_series(&t, &[], &policy).unwrap();
        assert_eq!(d.verdict, Verdict::Continue);
        assert_eq!(d.statistic, 0.0);
        assert!(s.scores.is_empty());
        let bad = VerificationPolicy {
            accept_thr: -1.0,
            reject_thr: 1.0,
            drift_offset: 0.0,
        };
        assert!(verify_series(&t, &[], &bad).is_err());
    }

    #[test]
    fn drift_offset_calibration() {
        assert_eq!(
            calibrate_drift_offset(&[-3.0, -1.0, -2.0], 0.5).unwrap(),
            -2.5
        );
        assert_eq!(
            calibrate_drift_offset(&[-4.0, -1.0, -2.0, -3.0], 0.0).unwrap(),
            -2.5
        );
        assert!(calibrate_drift_offset(&[], 0.0).is_err());
    }

    #[test]
    fn template_record_round_trip() {
        let t = enroll(
            "alice",
            &[
                ov(0.0, vec![0.1, 0.4]),
                ov(1.0, vec![0.3, 0.2]),
                ov(2.0, vec![0.2, 0.5]),
            ],
            3,
            1e-3,
        )
        .unwrap();
        let rec = t.to_record(Some("cfg"), None);
        let json = serde_json::to_string(&rec).unwrap();
        let back = Template::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.mean, t.mean);
        assert_eq!(back.covariance, t.covariance);
        assert_eq!(back.user_id, "alice");
    }

    fn arb_vectors(s: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, s), n)
    }

    proptest! {
        #[test]
        fn scores_invariant_under_channel_permutation(
            reg in arb_vectors(3, 6),
            probe in proptest::collection::vec(0.0f64..1.0, 3),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[perm_idx];
            let permute = |v: &[f64]| p.iter().map(|i| v[*i]).collect::<Vec<_>>();
            let series: Vec<_> = reg.iter().enumerate().map(|(k, v)| ov(k as f64, v.clone())).collect();
            let permuted: Vec<_> = reg.iter().enumerate().map(|(k, v)| ov(k as f64, permute(v))).collect();
            let a = enroll("u", &series, 6, 1e-3).unwrap().score(&probe).unwrap();
            let b = enroll("u", &permuted, 6, 1e-3).unwrap().score(&permute(&probe)).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
        }

        #[test]
        fn accumulation_is_additive_over_concatenation(
            a in proptest::collection::vec(-10.0f64..1.0, 0..20),
            b in proptest::collection::vec(-10.0f64..1.0, 0..20),
            offset in -1.0f64..1.0,
        ) {
            let mut ab = a.clone();
            ab.extend(&b);
            let whole = accumulate(&ab, offset).total();
            let parts = accumulate(&a, offset).total() + accumulate(&b, offset).total();
            prop_assert!((whole - parts).abs() < 1e-9);
            let s = accumulate(&ab, offset);
            for k in 1..s.accumulated.len() {
                prop_assert!((s.accumulated[k] - s.accumulated[k - 1] - (s.scores[k] - offset)).abs() < 1e-12);
            }
        }
    }
}
