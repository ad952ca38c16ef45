//! Consolidation of N analog features into S filtered outputs, and their
//! classification into output bands.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::write_hash_comment;
use crate::transduce::SignalTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// `|signal(t_g) - signal(0)|`
    Endpoint,
    /// Magnitude of the least-squares slope over `[0, t_g]`.
    Slope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Aggregator {
    Sum,
    WeightedSum {
        weights: Vec<f64>,
    },
    /// Realized chemically by a multi-input cascade when one matches the
    /// group's analytes; arithmetically it is a plain sum.
    CascadeEndpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// Zero-based channel indices. Groups may overlap.
    pub channels: Vec<usize>,
    pub aggregator: Aggregator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingSpec {
    pub groups: Vec<Group>,
}

impl GroupingSpec {
    pub fn identity(n: usize) -> Self {
        Self {
            groups: (0..n)
                .map(|i| Group {
                    channels: vec![i],
                    aggregator: Aggregator::Sum,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Checks structure against `n` channels: `1 <= S <= N`, non-empty groups,
    /// indices in range, every channel covered, weights sized to their group.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.groups.is_empty() || self.groups.len() > n {
            return Err(Error::config(format!(
                "grouping has {} outputs for {n} channels; need 1 <= S <= N",
                self.groups.len()
            )));
        }
        let mut covered = vec![false; n];
        for (g, group) in self.groups.iter().enumerate() {
            if group.channels.is_empty() {
                return Err(Error::config(format!("group {g} is empty")));
            }
            for &c in &group.channels {
                if c >= n {
                    return Err(Error::config(format!(
                        "group {g} references channel {c}, only {n} channels"
                    )));
                }
                covered[c] = true;
            }
            if let Aggregator::WeightedSum { weights } = &group.aggregator {
                if weights.len() != group.channels.len() {
                    return Err(Error::config(format!(
                        "group {g}: {} weights for {} channels",
                        weights.len(),
                        group.channels.len()
                    )));
                }
            }
        }
        if let Some(c) = covered.iter().position(|c| !c) {
            return Err(Error::config(format!("channel {c} is not in any group")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub k_half: f64,
    pub hill_n: f64,
    pub out_lo: f64,
    pub out_hi: f64,
}

impl FilterParams {
    pub fn new(k_half: f64, hill_n: f64, out_lo: f64, out_hi: f64) -> Result<Self> {
        let p = Self {
            k_half,
            hill_n,
            out_lo,
            out_hi,
        };
        p.validate()?;
        Ok(p)
    }

    /// Rails `[0, 1]`, Hill coefficient 8.
    pub fn with_midpoint(k_half: f64) -> Self {
        Self {
            k_half,
            hill_n: 8.0,
            out_lo: 0.0,
            out_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_half > 0.0) || !(self.hill_n >= 1.0) || !(self.out_lo < self.out_hi) {
            return Err(Error::config(format!(
                "filter needs k_half > 0, hill_n >= 1, out_lo < out_hi: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutputFilter {
    Hill(FilterParams),
    /// Linear pass-through; the aggregate is emitted unchanged.
    Passthrough,
}

impl OutputFilter {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            OutputFilter::Hill(p) => hill_filter(x, p),
            OutputFilter::Passthrough => x,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OutputFilter::Hill(p) => p.validate(),
            OutputFilter::Passthrough => Ok(()),
        }
    }
}

/// Thresholds partitioning the output rails into labeled bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub boundaries: Vec<f64>,
    pub labels: Vec<String>,
    pub out_lo: f64,
    pub out_hi: f64,
}

impl BandSpec {
    pub fn binary() -> Self {
        Self {
            boundaries: vec![0.5],
            labels: vec!["low".into(), "high".into()],
            out_lo: 0.0,
            out_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.boundaries.len() + 1 {
            return Err(Error::config("band labels must number boundaries + 1"));
        }
        if !self.boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("band boundaries must be strictly ascending"));
        }
        if self
            .boundaries
            .iter()
            .any(|b| !(*b > self.out_lo && *b < self.out_hi))
        {
            return Err(Error::config("band boundaries must lie inside the rails"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputVector {
    /// `t0 + k·tau + t_g`, s.
    pub timestamp: f64,
    pub values: Vec<f64>,
    pub bands: Vec<String>,
}

fn value_at(signal: &SignalTrace, t: f64) -> f64 {
    let times = &signal.times;
    let i = times.partition_point(|x| *x < t);
    if i < times.len() && times[i] == t {
        return signal.values[i];
    }
    let (t0, t1) = (times[i - 1], times[i]);
    let w = (t - t0) / (t1 - t0);
    signal.values[i - 1] * (1.0 - w) + signal.values[i] * w
}

/// Scalar feature of a signal over the gate window `[0, t_g]`.
pub fn endpoint_feature(signal: &SignalTrace, t_g: f64, mode: FeatureMode) -> Result<f64> {
    let (Some(&start), Some(&end)) = (signal.times.first(), signal.times.last()) else {
        return Err(Error::InsufficientData("empty signal".into()));
    };
    if !(t_g >= start && t_g <= end * (1.0 + 1e-12)) {
        return Err(Error::Range(format!(
            "gate time {t_g} s outside trace horizon [{start}, {end}] s"
        )));
    }
    let t_g = t_g.min(end);
    match mode {
        FeatureMode::Endpoint => Ok((value_at(signal, t_g) - signal.values[0]).abs()),
        FeatureMode::Slope => {
            let pts: Vec<(f64, f64)> = signal
                .times
                .iter()
                .zip(&signal.values)
                .take_while(|(t, _)| **t <= t_g)
                .map(|(t, v)| (*t, *v))
                .collect();
            if pts.len() < 2 {
                return Err(Error::InsufficientData(
                    "slope needs at least two samples inside the gate".into(),
                ));
            }
            let n = pts.len() as f64;
            let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let mv = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|(t, v)| (t - mt) * (v - mv)).sum();
            let sxx: f64 = pts.iter().map(|(t, _)| (t - mt).powi(2)).sum();
            Ok((sxy / sxx).abs())
        }
    }
}

/// `out_lo + (out_hi - out_lo) · xⁿ / (k_halfⁿ + xⁿ)`.
pub fn hill_filter(x: f64, p: &FilterParams) -> f64 {
    let x = x.max(0.0);
    // Written in terms of (k/x)^n so large x saturates without overflow.
    let frac = if x == 0.0 {
        0.0
    } else {
        1.0 / (1.0 + (p.k_half / x).powf(p.hill_n))
    };
    p.out_lo + (p.out_hi - p.out_lo) * frac
}

/// Arithmetic aggregate of one group's channel features.
pub fn aggregate(group: &Group, features: &[f64]) -> Result<f64> {
    let get = |c: usize| {
        features.get(c).copied().ok_or_else(|| {
            Error::config(format!(
                "channel {c} out of range for {} features",
                features.len()
            ))
        })
    };
    match &group.aggregator {
        Aggregator::Sum | Aggregator::CascadeEndpoint => {
            group.channels.iter().map(|c| get(*c)).sum()
        }
        Aggregator::WeightedSum { weights } => {
            if weights.len() != group.channels.len() {
                return Err(Error::config("weighted-sum weights do not match the group"));
            }
            group
                .channels
                .iter()
                .zip(weights)
                .map(|(c, w)| get(*c).map(|f| f * w))
                .sum()
        }
    }
}

/// Filters pre-computed group aggregates into an output vector.
pub fn filter_aggregates(
    timestamp: f64,
    aggregates: &[f64],
    filters: &[OutputFilter],
    bands: Option<&BandSpec>,
) -> Result<OutputVector> {
    if aggregates.len() != filters.len() {
        return Err(Error::Shape {
            expected: aggregates.len(),
            got: filters.len(),
        });
    }
    let values: Vec<f64> = aggregates
        .iter()
        .zip(filters)
        .map(|(a, f)| f.apply(*a))
        .collect();
    let bands = match bands {
        Some(b) => values
            .iter()
            .map(|y| classify_band(*y, b))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    Ok(OutputVector {
        timestamp,
        values,
        bands,
    })
}

/// Aggregates each group and passes it through that group's filter.
pub fn consolidate(
    grouping: &GroupingSpec,
    features: &[f64],
    filters: &[OutputFilter],
    timestamp: f64,
) -> Result<OutputVector> {
    if filters.len() != grouping.len() {
        return Err(Error::config(format!(
            "{} filters for {} groups",
            filters.len(),
            grouping.len()
        )));
    }
    let aggregates: Vec<f64> = grouping
        .groups
        .iter()
        .map(|g| aggregate(g, features))
        .collect::<Result<_>>()?;
    filter_aggregates(timestamp, &aggregates, filters, None)
}

/// Band containing `y`; a value on a boundary belongs to the upper band.
pub fn classify_band(y: f64, bands: &BandSpec) -> Result<String> {
    if !(y >= bands.out_lo && y <= bands.out_hi) {
        return Err(Error::Range(format!(
            "output {y} outside rails [{}, {}]",
            bands.out_lo, bands.out_hi
        )));
    }
    let i = bands.boundaries.partition_point(|b| *b <= y);
    Ok(bands.labels[i].clone())
}

/// Output stream CSV: timestamp, `y1..yS`, `band1..bandS`.
pub fn write_outputs_csv<W: Write>(
    mut w: W,
    outputs: &[OutputVector],
    s: usize,
    config_hash: Option<&str>,
) -> Result<()> {
    write_hash_comment(&mut w, config_hash)?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["timestamp".to_string()];
    header.extend((1..=s).map(|i| format!("y{i}")));
    header.extend((1..=s).map(|i| format!("band{i}")));
    csv.write_record(&header)?;
    for o in outputs {
        if o.values.len() != s {
            return Err(Error::Shape {
                expected: s,
                got: o.values.len(),
            });
        }
        let mut rec = vec![o.timestamp.to_string()];
        rec.extend(o.values.iter().map(|v| v.to_string()));
        rec.extend((0..s).map(|i| o.bands.get(i).cloned().unwrap_or_default()));
        csv.write_record(&rec)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_outputs_csv<R: std::io::Read>(r: R) -> Result<Vec<OutputVector>> {
    let mut csv = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = csv.headers()?.clone();
    let s = header.iter().filter(|h| h.starts_with('y')).count();
    let parse = |f: &str| {
        f.parse::<f64>()
            .map_err(|_| Error::config(format!("bad number {f:?} in output stream")))
    };
    let mut out = Vec::new();
    for rec in csv.records() {
        let rec = rec?;
        out.push(OutputVector {
            timestamp: parse(&rec[0])?,
            values: (1..=s).map(|i| parse(&rec[i])).collect::<Result<_>>()?,
            bands: (s + 1..=2 * s)
                .map(|i| rec.get(i).unwrap_or_default().to_string())
                .filter(|b| !b.is_empty())
                .collect(),
        });
    }
    Ok(out)
}
