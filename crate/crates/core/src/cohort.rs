//! Synthetic sweat amino-acid profiles, mimicked cohorts and noisy
//! concentration time series sampled from them.
//!
//! All concentrations are in µM. Every random draw goes through a
//! `ChaCha8Rng` seeded from an explicit `u64`, so each output is a pure
//! function of its inputs and seed.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::{derive_seed, write_hash_comment};

pub const AMINO_ACID_COUNT: usize = 23;

const ACID_CODES: [&str; AMINO_ACID_COUNT] = [
    "Ala", "Arg", "Asn", "Asp", "Cit", "Cys", "Gln", "Glu", "Gly", "His", "Ile", "Leu", "Lys",
    "Met", "Orn", "Phe", "Pro", "Ser", "Thr", "Trp", "Tyr", "Val", "Tau",
];

/// One of the 23 amino acids found in eccrine sweat, indexed `0..23`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AminoAcidId(u8);

impl AminoAcidId {
    pub const ALA: AminoAcidId = AminoAcidId(0);
    pub const ASP: AminoAcidId = AminoAcidId(3);
    pub const GLU: AminoAcidId = AminoAcidId(7);
    pub const PHE: AminoAcidId = AminoAcidId(15);

    pub fn from_index(index: usize) -> Option<Self> {
        (index < AMINO_ACID_COUNT).then_some(AminoAcidId(index as u8))
    }

    pub fn from_code(code: &str) -> Option<Self> {
        ACID_CODES
            .iter()
            .position(|c| *c == code)
            .map(|i| AminoAcidId(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn code(self) -> &'static str {
        ACID_CODES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = AminoAcidId> {
        (0..AMINO_ACID_COUNT as u8).map(AminoAcidId)
    }
}

impl fmt::Display for AminoAcidId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for AminoAcidId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AminoAcidId::from_code(s).ok_or_else(|| Error::Lookup(format!("unknown amino acid {s:?}")))
    }
}

impl TryFrom<String> for AminoAcidId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AminoAcidId> for String {
    fn from(a: AminoAcidId) -> String {
        a.code().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: Sex,
    pub age_group: String,
    pub ethnicity: String,
    pub physiological_state: String,
}

impl Demographics {
    fn field(&self, name: &str) -> Option<&str> {
        match name {
            "sex" => Some(self.sex.as_str()),
            "age_group" => Some(&self.age_group),
            "ethnicity" => Some(&self.ethnicity),
            "physiological_state" => Some(&self.physiological_state),
            _ => None,
        }
    }
}

/// Closed vocabularies for the free-text demographic fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicVocabulary {
    pub age_group: Vec<String>,
    pub ethnicity: Vec<String>,
    pub physiological_state: Vec<String>,
}

impl DemographicVocabulary {
    fn values(&self, field: &str) -> Option<Vec<&str>> {
        let list = match field {
            "sex" => return Some(vec!["female", "male"]),
            "age_group" => &self.age_group,
            "ethnicity" => &self.ethnicity,
            "physiological_state" => &self.physiological_state,
            _ => return None,
        };
        Some(list.iter().map(String::as_str).collect())
    }

    pub fn check(&self, demo: &Demographics) -> Result<()> {
        for field in ["age_group", "ethnicity", "physiological_state"] {
            let value = demo.field(field).unwrap_or_default();
            let allowed = self.values(field).unwrap_or_default();
            if !allowed.contains(&value) {
                return Err(Error::config(format!(
                    "{field} {value:?} is not in the configured vocabulary {allowed:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Concentration distribution of one amino acid across a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcidDistribution {
    /// Mean of the concentration distribution itself (µM), not of its log.
    pub mean_um: f64,
    /// Coefficient of variation of the concentration distribution.
    pub cv: f64,
    /// Multiplicative mean shifts keyed `"<field>:<value>"`, e.g. `"sex:female"`.
    #[serde(default)]
    pub shifts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistributionSpec {
    #[serde(default)]
    pub label: String,
    pub vocabulary: DemographicVocabulary,
    /// Keyed by amino-acid code; must cover all 23 acids.
    pub acids: BTreeMap<String, AcidDistribution>,
}

impl GroupDistributionSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: GroupDistributionSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for code in self.acids.keys() {
            AminoAcidId::from_code(code)
                .ok_or_else(|| Error::config(format!("unknown amino acid {code:?} in population")))?;
        }
        for acid in AminoAcidId::all() {
            let d = self
                .acids
                .get(acid.code())
                .ok_or_else(|| Error::config(format!("population is missing amino acid {acid}")))?;
            if !(d.mean_um > 0.0 && d.mean_um.is_finite()) {
                return Err(Error::config(format!("{acid}: mean must be > 0")));
            }
            if !(d.cv >= 0.0 && d.cv.is_finite()) {
                return Err(Error::config(format!("{acid}: cv must be >= 0")));
            }
            for (key, factor) in &d.shifts {
                let (field, value) = key.split_once(':').ok_or_else(|| {
                    Error::config(format!("{acid}: shift key {key:?} is not <field>:<value>"))
                })?;
                let allowed = self
                    .vocabulary
                    .values(field)
                    .ok_or_else(|| Error::config(format!("{acid}: unknown field {field:?}")))?;
                if !allowed.contains(&value) {
                    return Err(Error::config(format!(
                        "{acid}: shift value {value:?} not in vocabulary for {field}"
                    )));
                }
                if !(*factor > 0.0 && factor.is_finite()) {
                    return Err(Error::config(format!("{acid}: shift {key} must be > 0")));
                }
            }
        }
        Ok(())
    }

    fn distribution(&self, acid: AminoAcidId) -> Result<&AcidDistribution> {
        self.acids
            .get(acid.code())
            .ok_or_else(|| Error::config(format!("population is missing amino acid {acid}")))
    }

    /// Product of every shift whose `field:value` key matches `demo`.
    pub fn shift(&self, acid: AminoAcidId, demo: &Demographics) -> Result<f64> {
        let d = self.distribution(acid)?;
        Ok(d.shifts
            .iter()
            .filter(|(key, _)| {
                key.split_once(':')
                    .is_some_and(|(field, value)| demo.field(field) == Some(value))
            })
            .map(|(_, f)| *f)
            .product())
    }
}

/// Lognormal sampler parameterized by the mean and CV of the distribution
/// itself. With `m` the mean and `c` the CV, the underlying normal has
/// `sigma^2 = ln(1 + c^2)` and `mu = ln(m) - sigma^2 / 2`, which gives
/// `E[X] = m` and `sd(X) / E[X] = c`. A zero CV degenerates to the constant `m`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MeanCvLogNormal {
    mean: f64,
    inner: Option<LogNormal<f64>>,
}

impl MeanCvLogNormal {
    pub(crate) fn new(mean: f64, cv: f64) -> Result<Self> {
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::config(format!(
                "lognormal mean must be > 0, got {mean}"
            )));
        }
        if !(cv >= 0.0 && cv.is_finite()) {
            return Err(Error::config(format!(
                "coefficient of variation must be >= 0, got {cv}"
            )));
        }
        if cv == 0.0 {
            return Ok(Self { mean, inner: None });
        }
        let sigma2 = (1.0 + cv * cv).ln();
        let mu = mean.ln() - 0.5 * sigma2;
        let inner = LogNormal::new(mu, sigma2.sqrt())
            .map_err(|e| Error::config(format!("lognormal parameters: {e}")))?;
        Ok(Self {
            mean,
            inner: Some(inner),
        })
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.inner {
            Some(d) => d.sample(rng),
            None => self.mean,
        }
    }
}

/// Baseline sweat chemistry of one (synthetic) person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualProfile {
    pub id: String,
    pub demographics: Demographics,
    /// Baseline concentration per acid (µM), indexed by [`AminoAcidId::index`].
    pub baseline: [f64; AMINO_ACID_COUNT],
    /// For [`generate_individual`] this is the generating seed. For cohort
    /// members it is the member seed derived from the cohort seed, used to
    /// seed that member's downstream series.
    pub rng_seed: u64,
}

impl IndividualProfile {
    pub fn concentration(&self, acid: AminoAcidId) -> f64 {
        self.baseline[acid.index()]
    }
}

/// Draws one individual's baseline: each acid independently lognormal with
/// mean `mean * shift(demo)` and the configured CV.
pub fn generate_individual(
    group: &GroupDistributionSpec,
    demo: &Demographics,
    seed: u64,
) -> Result<IndividualProfile> {
    group.validate()?;
    group.vocabulary.check(demo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut baseline = [0.0; AMINO_ACID_COUNT];
    for acid in AminoAcidId::all() {
        let d = group.distribution(acid)?;
        let dist = MeanCvLogNormal::new(d.mean_um * group.shift(acid, demo)?, d.cv)?;
        baseline[acid.index()] = dist.sample(&mut rng);
    }
    Ok(IndividualProfile {
        id: format!("ind-{seed:016x}"),
        demographics: demo.clone(),
        baseline,
        rng_seed: seed,
    })
}

/// Builds a mimicked-sample cohort of `n` members: for each acid an
/// independent pool of `n` concentrations is drawn, then the pools are
/// randomly grouped into samples by an independent permutation per acid
/// (without replacement).
pub fn mimic_cohort(
    group: &GroupDistributionSpec,
    demo: &Demographics,
    n: usize,
    seed: u64,
) -> Result<Vec<IndividualProfile>> {
    group.validate()?;
    group.vocabulary.check(demo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pools = Vec::with_capacity(AMINO_ACID_COUNT);
    for acid in AminoAcidId::all() {
        let d = group.distribution(acid)?;
        let dist = MeanCvLogNormal::new(d.mean_um * group.shift(acid, demo)?, d.cv)?;
        let pool: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        pools.push(pool);
    }
    let permutations: Vec<Vec<usize>> = (0..AMINO_ACID_COUNT)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    Ok((0..n)
        .map(|i| {
            let mut baseline = [0.0; AMINO_ACID_COUNT];
            for (a, pool) in pools.iter().enumerate() {
                baseline[a] = pool[permutations[a][i]];
            }
            IndividualProfile {
                id: format!("{}-{i:03}", demo.sex.as_str()),
                demographics: demo.clone(),
                baseline,
                rng_seed: derive_seed(seed, i as u64),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub t0: f64,
    pub tau: f64,
    pub steps: usize,
}

impl SamplingSchedule {
    pub fn new(t0: f64, tau: f64, steps: usize) -> Result<Self> {
        let s = Self { t0, tau, steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) || !self.t0.is_finite() {
            return Err(Error::config("sampling interval tau must be > 0"));
        }
        if self.steps < 1 {
            return Err(Error::config("sampling schedule needs at least one step"));
        }
        Ok(())
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.tau
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.steps).map(|k| self.time(k)).collect()
    }
}

/// Slow multiplicative modulation of all channels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    #[default]
    None,
    /// `1 + amplitude * sin(2π (t - t0) / period_s)`, `0 <= amplitude < 1`.
    Sinusoidal { amplitude: f64, period_s: f64 },
}

impl Drift {
    pub fn factor(&self, elapsed: f64) -> f64 {
        match *self {
            Drift::None => 1.0,
            Drift::Sinusoidal {
                amplitude,
                period_s,
            } => 1.0 + amplitude * (std::f64::consts::TAU * elapsed / period_s).sin(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Drift::None => Ok(()),
            Drift::Sinusoidal {
                amplitude,
                period_s,
            } => {
                if !(0.0..1.0).contains(&amplitude) || !(period_s > 0.0) {
                    Err(Error::config(
                        "sinusoidal drift needs 0 <= amplitude < 1 and period_s > 0",
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Per-sample measurement noise: a mean-one lognormal factor with CV `cv`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub cv: f64,
    #[serde(default)]
    pub drift: Drift,
}

/// The input time series `x_n(t0 + k·tau)` for the selected channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSeries {
    pub profile_id: String,
    pub schedule: SamplingSchedule,
    pub channels: Vec<AminoAcidId>,
    /// `values[k][n]`, µM.
    pub values: Vec<Vec<f64>>,
    pub noise: NoiseSpec,
}

/// Samples `values[k][n] = baseline[n] · drift(k) · noise(k, n)`.
pub fn sample_series(
    profile: &IndividualProfile,
    channels: &[AminoAcidId],
    schedule: &SamplingSchedule,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<ConcentrationSeries> {
    schedule.validate()?;
    noise.drift.validate()?;
    let factor = MeanCvLogNormal::new(1.0, noise.cv)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..schedule.steps)
        .map(|k| {
            let drift = noise.drift.factor(schedule.time(k) - schedule.t0);
            channels
                .iter()
                .map(|a| profile.concentration(*a) * drift * factor.sample(&mut rng))
                .collect()
        })
        .collect();
    Ok(ConcentrationSeries {
        profile_id: profile.id.clone(),
        schedule: *schedule,
        channels: channels.to_vec(),
        values,
        noise: *noise,
    })
}

/// Cohort CSV: header of the 23 acid codes, one row per individual.
pub fn write_cohort_csv<W: Write>(
    mut w: W,
    cohort: &[IndividualProfile],
    config_hash: Option<&str>,
) -> Result<()> {
    write_hash_comment(&mut w, config_hash)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(AminoAcidId::all().map(AminoAcidId::code))?;
    for p in cohort {
        csv.write_record(p.baseline.iter().map(|v| v.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads the baselines back from a cohort CSV (comment lines skipped).
pub fn read_cohort_csv<R: std::io::Read>(r: R) -> Result<Vec<[f64; AMINO_ACID_COUNT]>> {
    let mut csv = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = csv.headers()?.clone();
    let order: Vec<AminoAcidId> = header.iter().map(str::parse).collect::<Result<_>>()?;
    if order.len() != AMINO_ACID_COUNT {
        return Err(Error::Shape {
            expected: AMINO_ACID_COUNT,
            got: order.len(),
        });
    }
    let mut rows = Vec::new();
    for rec in csv.records() {
        let rec = rec?;
        let mut row = [0.0; AMINO_ACID_COUNT];
        for (acid, field) in order.iter().zip(rec.iter()) {
            row[acid.index()] = field
                .parse()
                .map_err(|_| Error::config(format!("bad concentration {field:?}")))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Series CSV: `t_s` column followed by one column per channel.
pub fn write_series_csv<W: Write>(
    mut w: W,
    series: &ConcentrationSeries,
    config_hash: Option<&str>,
) -> Result<()> {
    write_hash_comment(&mut w, config_hash)?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["t_s".to_string()];
    header.extend(series.channels.iter().map(|a| a.code().to_string()));
    csv.write_record(&header)?;
    for (k, row) in series.values.iter().enumerate() {
        let mut rec = vec![series.schedule.time(k).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        csv.write_record(&rec)?;
    }
    csv.flush()?;
    Ok(())
}
