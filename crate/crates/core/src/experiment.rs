//! End-to-end experiments: cohort → kinetics → transduce → digitize → auth →
//! metrics, driven by one TOML experiment file.
//!
//! Every artifact embeds the experiment hash, which covers the parsed
//! experiment file (after any seed override) and the bytes of the parameter
//! and population files it references.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auth::{self, StepScorer, Template, Verdict, VerificationPolicy};
use crate::cohort::{
    self, AminoAcidId, Demographics, GroupDistributionSpec, IndividualProfile, NoiseSpec,
    SamplingSchedule,
};
use crate::digitize::{
    self, Aggregator, BandSpec, FeatureMode, Group, GroupingSpec, OutputFilter, OutputVector,
};
use crate::error::{Error, Result};
use crate::kinetics::{self, CascadeKind, CascadeNetwork, Species};
use crate::metrics::{self, RocSummary, ScoredPopulation};
use crate::params::ParameterFile;
use crate::provenance::{canonical_hash, derive_seed, sha256_hex};
use crate::transduce;

/// Seed stream reserved for group-mode enrollment cohorts.
const ENROLLMENT_STREAM: u64 = 0xE4_0011;
const SERIES_STREAM: u64 = 0x5E_41E5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortGroupConfig {
    pub label: String,
    pub seed: u64,
    pub demographics: Demographics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    /// Members per group.
    pub n: usize,
    /// Size of the separate enrollment cohort in group mode.
    #[serde(default = "default_enroll_n")]
    pub enroll_n: usize,
    pub groups: Vec<CohortGroupConfig>,
}

fn default_enroll_n() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesConfig {
    pub t0: f64,
    pub tau: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticsConfig {
    /// Gate time, s.
    #[serde(default = "default_t_g")]
    pub t_g: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Fraction of the sweat concentration present in the assay volume.
    #[serde(default = "default_dilution")]
    pub dilution: f64,
}

fn default_t_g() -> f64 {
    kinetics::DEFAULT_GATE_TIME
}
fn default_dt() -> f64 {
    kinetics::DEFAULT_DT
}
fn default_dilution() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Readout {
    Absorbance { species: Species },
    Luminescence,
    Amperometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub acid: AminoAcidId,
    pub cascade: CascadeKind,
    pub readout: Readout,
    #[serde(default = "default_feature")]
    pub feature: FeatureMode,
}

fn default_feature() -> FeatureMode {
    FeatureMode::Endpoint
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub channels: Vec<usize>,
    #[serde(default = "default_aggregator")]
    pub aggregator: Aggregator,
    /// Readout of the multi-input cascade for a chemically realized
    /// `cascade-endpoint` group.
    #[serde(default)]
    pub readout: Option<Readout>,
    #[serde(default)]
    pub feature: Option<FeatureMode>,
}

fn default_aggregator() -> Aggregator {
    Aggregator::CascadeEndpoint
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitizeConfig {
    pub groups: Vec<GroupConfig>,
    pub filters: Vec<OutputFilter>,
    #[serde(default)]
    pub bands: Option<BandSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuthMode {
    /// Per-person templates; impostors are the other people.
    Individual,
    /// One template for a demographic group; impostors are the other groups.
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthConfig {
    pub mode: AuthMode,
    /// Genuine group label in group mode.
    #[serde(default)]
    pub genuine: Option<String>,
    pub k_reg: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Number of post-registration steps accumulated.
    pub accumulate: usize,
    pub accept_thr: f64,
    pub reject_thr: f64,
    #[serde(default)]
    pub drift_margin: f64,
}

fn default_lambda() -> f64 {
    auth::DEFAULT_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// Kinetic/optical parameter file, relative to the experiment file.
    pub parameters: PathBuf,
    /// Population distribution file, relative to the experiment file.
    pub population: PathBuf,
    pub cohort: CohortConfig,
    pub series: SeriesConfig,
    #[serde(default = "default_kinetics")]
    pub kinetics: KineticsConfig,
    pub channels: Vec<ChannelConfig>,
    pub digitize: DigitizeConfig,
    pub auth: AuthConfig,
}

fn default_kinetics() -> KineticsConfig {
    KineticsConfig {
        t_g: default_t_g(),
        dt: default_dt(),
        dilution: default_dilution(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        for (i, g) in self.cohort.groups.iter_mut().enumerate() {
            g.seed = derive_seed(seed, i as u64);
        }
        self.series.seed = derive_seed(seed, SERIES_STREAM);
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m: BTreeMap<String, u64> = self
            .cohort
            .groups
            .iter()
            .map(|g| (format!("cohort.{}", g.label), g.seed))
            .collect();
        m.insert("series".into(), self.series.seed);
        m
    }

    pub fn schedule(&self) -> Result<SamplingSchedule> {
        SamplingSchedule::new(self.series.t0, self.series.tau, self.series.steps)
    }

    pub fn group(&self, label: &str) -> Result<&CohortGroupConfig> {
        self.cohort
            .groups
            .iter()
            .find(|g| g.label == label)
            .ok_or_else(|| Error::config(format!("no cohort group labeled {label:?}")))
    }
}

/// An experiment with its referenced files loaded and hashed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub params: ParameterFile,
    pub params_hash: String,
    pub population: GroupDistributionSpec,
    pub population_hash: String,
    pub config_hash: String,
    pub output_dir: PathBuf,
    /// Worker threads; `None` uses the global rayon pool.
    pub jobs: Option<usize>,
}

#[derive(Serialize)]
struct HashInput<'a> {
    config: &'a ExperimentConfig,
    params_sha256: &'a str,
    population_sha256: &'a str,
}

impl Experiment {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(format!(
                "cannot read experiment file {}: {e}",
                path.display()
            ))
        })?;
        let mut config = ExperimentConfig::from_toml_str(&text)?;
        if let Some(seed) = seed_override {
            config.override_seeds(seed);
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let (params, params_hash) = ParameterFile::load(&base.join(&config.parameters))?;
        let pop_path = base.join(&config.population);
        let pop_text = fs::read_to_string(&pop_path).map_err(|e| {
            Error::config(format!(
                "cannot read population file {}: {e}",
                pop_path.display()
            ))
        })?;
        let population = GroupDistributionSpec::from_toml_str(&pop_text)?;
        let population_hash = sha256_hex(pop_text.as_bytes());
        let output_dir = base.join(&config.output_dir);
        Self::assemble(
            config,
            params,
            params_hash,
            population,
            population_hash,
            output_dir,
        )
    }

    /// Builds an experiment from in-memory parts. File hashes are taken over the
    /// canonical encoding of the parsed structures.
    pub fn from_parts(
        config: ExperimentConfig,
        params: ParameterFile,
        population: GroupDistributionSpec,
        output_dir: PathBuf,
    ) -> Result<Self> {
        let params_hash = canonical_hash(&params)?;
        let population_hash = canonical_hash(&population)?;
        population.validate()?;
        Self::assemble(
            config,
            params,
            params_hash,
            population,
            population_hash,
            output_dir,
        )
    }

    fn assemble(
        config: ExperimentConfig,
        params: ParameterFile,
        params_hash: String,
        population: GroupDistributionSpec,
        population_hash: String,
        output_dir: PathBuf,
    ) -> Result<Self> {
        let config_hash = canonical_hash(&HashInput {
            config: &config,
            params_sha256: &params_hash,
            population_sha256: &population_hash,
        })?;
        let exp = Self {
            config,
            params,
            params_hash,
            population,
            population_hash,
            config_hash,
            output_dir,
            jobs: None,
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn with_output_dir(mut self, dir: PathBuf) -> Self {
        self.output_dir = dir;
        self
    }

    pub fn with_jobs(mut self, jobs: Option<usize>) -> Self {
        self.jobs = jobs;
        self
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.cohort.groups.is_empty() {
            return Err(Error::config("at least one cohort group is required"));
        }
        for g in &c.cohort.groups {
            self.population.vocabulary.check(&g.demographics)?;
        }
        let mut labels: Vec<_> = c.cohort.groups.iter().map(|g| &g.label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != c.cohort.groups.len() {
            return Err(Error::config("cohort group labels must be unique"));
        }
        c.schedule()?;
        if !(c.kinetics.dilution > 0.0) {
            return Err(Error::config("dilution must be > 0"));
        }
        if !(c.kinetics.t_g >= c.kinetics.dt && c.kinetics.dt > 0.0) {
            return Err(Error::config("need t_g >= dt > 0"));
        }
        if c.channels.is_empty() {
            return Err(Error::config("at least one channel is required"));
        }
        for (i, ch) in c.channels.iter().enumerate() {
            let species = analyte_species(ch.acid).ok_or_else(|| {
                Error::config(format!("channel {i}: no cascade reads {}", ch.acid))
            })?;
            if !ch.cascade.inputs().contains(&species) {
                return Err(Error::config(format!(
                    "channel {i}: cascade {:?} does not take {} as input",
                    ch.cascade, ch.acid
                )));
            }
            let net = kinetics::build_cascade(ch.cascade, &self.params.kinetics)?;
            check_readout(&net, &ch.readout, &self.params)?;
        }
        let grouping = self.grouping();
        grouping.validate(c.channels.len())?;
        if c.digitize.filters.len() != grouping.len() {
            return Err(Error::config(format!(
                "{} filters for {} output groups",
                c.digitize.filters.len(),
                grouping.len()
            )));
        }
        for f in &c.digitize.filters {
            f.validate()?;
        }
        if let Some(b) = &c.digitize.bands {
            b.validate()?;
        }
        for (g, plan) in self.group_plans()?.iter().enumerate() {
            if let GroupPlan::Chemical {
                network, readout, ..
            } = plan
            {
                check_readout(network, readout, &self.params)
                    .map_err(|e| Error::config(format!("group {g}: {e}")))?;
            }
        }
        let a = &c.auth;
        if a.k_reg < 1 || a.accumulate < 1 {
            return Err(Error::config("k_reg and accumulate must be >= 1"));
        }
        VerificationPolicy {
            accept_thr: a.accept_thr,
            reject_thr: a.reject_thr,
            drift_offset: 0.0,
        }
        .validate()?;
        if a.mode == AuthMode::Group {
            let label = a
                .genuine
                .as_deref()
                .ok_or_else(|| Error::config("group mode needs auth.genuine"))?;
            self.config.group(label)?;
        }
        Ok(())
    }

    pub fn grouping(&self) -> GroupingSpec {
        GroupingSpec {
            groups: self
                .config
                .digitize
                .groups
                .iter()
                .map(|g| Group {
                    channels: g.channels.clone(),
                    aggregator: g.aggregator.clone(),
                })
                .collect(),
        }
    }

    fn group_plans(&self) -> Result<Vec<GroupPlan>> {
        self.config
            .digitize
            .groups
            .iter()
            .map(|g| {
                if g.aggregator != Aggregator::CascadeEndpoint || g.channels.len() < 2 {
                    return Ok(GroupPlan::Arithmetic);
                }
                let acids: Vec<AminoAcidId> = g
                    .channels
                    .iter()
                    .map(|c| self.config.channels.get(*c).map(|ch| ch.acid))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::config("group channel out of range"))?;
                let species: Option<Vec<Species>> =
                    acids.iter().map(|a| analyte_species(*a)).collect();
                let Some(kind) = species.and_then(|s| CascadeKind::summing_cascade_for(&s)) else {
                    return Ok(GroupPlan::Arithmetic);
                };
                Ok(GroupPlan::Chemical {
                    network: kinetics::build_cascade(kind, &self.params.kinetics)?,
                    readout: g.readout.unwrap_or(Readout::Absorbance {
                        species: Species::ABTSox,
                    }),
                    feature: g.feature.unwrap_or(FeatureMode::Endpoint),
                })
            })
            .collect()
    }

    fn run_parallel<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.jobs {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::config(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
}

/// Sweat analytes that some built-in cascade can read.
pub fn analyte_species(acid: AminoAcidId) -> Option<Species> {
    match acid {
        AminoAcidId::ALA => Some(Species::Ala),
        AminoAcidId::GLU => Some(Species::Glu),
        AminoAcidId::ASP => Some(Species::Asp),
        AminoAcidId::PHE => Some(Species::Phe),
        _ => None,
    }
}

fn check_readout(net: &CascadeNetwork, readout: &Readout, params: &ParameterFile) -> Result<()> {
    match readout {
        Readout::Absorbance { species } => {
            params.optics.optical_config(*species)?;
            if !net.contains(*species) {
                return Err(Error::config(format!(
                    "{:?} has no {species} to read optically",
                    net.kind
                )));
            }
        }
        Readout::Luminescence => {
            if !net.contains(Species::Luminol) {
                return Err(Error::config(format!(
                    "{:?} has no luminol branch",
                    net.kind
                )));
            }
        }
        Readout::Amperometric => {
            if net.consuming_step(Species::H2O2).is_none() {
                return Err(Error::config(format!(
                    "{:?} has no H2O2 turnover",
                    net.kind
                )));
            }
        }
    }
    Ok(())
}

enum GroupPlan {
    Arithmetic,
    Chemical {
        network: CascadeNetwork,
        readout: Readout,
        feature: FeatureMode,
    },
}

/// Simulates one assay and reduces its signal to a scalar feature.
pub fn assay_feature(
    network: &CascadeNetwork,
    analytes: &[(Species, f64)],
    readout: &Readout,
    feature: FeatureMode,
    params: &ParameterFile,
    t_g: f64,
    dt: f64,
) -> Result<f64> {
    let init = params.kinetics.assay_init(network.kind, analytes);
    let trace = kinetics::simulate(network, &init, t_g, dt)?;
    let signal = match readout {
        Readout::Absorbance { species } => {
            transduce::absorbance(&trace, &params.optics.optical_config(*species)?)?
        }
        Readout::Luminescence => {
            transduce::luminescence(network, &trace, params.optics.luminescence_gain)?
        }
        Readout::Amperometric => {
            transduce::amperometric_current(network, &trace, params.optics.faradaic_gain)?
        }
    };
    digitize::endpoint_feature(&signal, t_g, feature)
}

/// Per-channel assay definitions, built once per run.
struct Channels {
    networks: Vec<CascadeNetwork>,
    plans: Vec<GroupPlan>,
    /// Channels whose individual features some arithmetic group needs.
    needed: Vec<bool>,
}

impl Channels {
    fn new(exp: &Experiment) -> Result<Self> {
        let networks = exp
            .config
            .channels
            .iter()
            .map(|c| kinetics::build_cascade(c.cascade, &exp.params.kinetics))
            .collect::<Result<_>>()?;
        let plans = exp.group_plans()?;
        let mut needed = vec![false; exp.config.channels.len()];
        for (g, plan) in exp.config.digitize.groups.iter().zip(&plans) {
            if matches!(plan, GroupPlan::Arithmetic) {
                for c in &g.channels {
                    needed[*c] = true;
                }
            }
        }
        Ok(Self {
            networks,
            plans,
            needed,
        })
    }
}

/// Output vector for one time step from the sampled sweat concentrations
/// (µM, one per configured channel).
fn process_step(
    exp: &Experiment,
    channels: &Channels,
    concentrations: &[f64],
    timestamp: f64,
) -> Result<OutputVector> {
    let cfg = &exp.config;
    let kin = &cfg.kinetics;
    let assay_level = |c: usize| concentrations[c] * kin.dilution;

    let mut features = vec![0.0; cfg.channels.len()];
    for (c, ch) in cfg.channels.iter().enumerate() {
        if channels.needed[c] {
            let species = analyte_species(ch.acid).expect("validated channel analyte");
            features[c] = assay_feature(
                &channels.networks[c],
                &[(species, assay_level(c))],
                &ch.readout,
                ch.feature,
                &exp.params,
                kin.t_g,
                kin.dt,
            )?;
        }
    }
    let grouping = exp.grouping();
    let aggregates = grouping
        .groups
        .iter()
        .zip(&channels.plans)
        .map(|(g, plan)| match plan {
            GroupPlan::Arithmetic => digitize::aggregate(g, &features),
            GroupPlan::Chemical {
                network,
                readout,
                feature,
            } => {
                // Members reading the same analyte add up before entering the cascade.
                let mut inputs: BTreeMap<Species, f64> = BTreeMap::new();
                for c in &g.channels {
                    let s = analyte_species(cfg.channels[*c].acid).expect("validated");
                    *inputs.entry(s).or_default() += assay_level(*c);
                }
                let inputs: Vec<_> = inputs.into_iter().collect();
                assay_feature(
                    network,
                    &inputs,
                    readout,
                    *feature,
                    &exp.params,
                    kin.t_g,
                    kin.dt,
                )
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    digitize::filter_aggregates(
        timestamp,
        &aggregates,
        &cfg.digitize.filters,
        cfg.digitize.bands.as_ref(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberOutputs {
    pub id: String,
    pub group: String,
    pub outputs: Vec<OutputVector>,
}

/// Builds the cohort of every configured group.
pub fn build_cohorts(exp: &Experiment) -> Result<Vec<(String, Vec<IndividualProfile>)>> {
    exp.config
        .cohort
        .groups
        .iter()
        .map(|g| {
            let members = cohort::mimic_cohort(
                &exp.population,
                &g.demographics,
                exp.config.cohort.n,
                g.seed,
            )?;
            Ok((g.label.clone(), members))
        })
        .collect()
}

fn enrollment_cohort(
    exp: &Experiment,
    group: &CohortGroupConfig,
) -> Result<Vec<IndividualProfile>> {
    let mut members = cohort::mimic_cohort(
        &exp.population,
        &group.demographics,
        exp.config.cohort.enroll_n,
        derive_seed(group.seed, ENROLLMENT_STREAM),
    )?;
    for m in &mut members {
        m.id = format!("enroll-{}", m.id);
    }
    Ok(members)
}

/// Samples each member's concentration series and runs it through the
/// configured cascades, filters and bands.
pub fn run_members(
    exp: &Experiment,
    members: &[(String, IndividualProfile)],
) -> Result<Vec<MemberOutputs>> {
    let cfg = &exp.config;
    let schedule = cfg.schedule()?;
    let acids: Vec<AminoAcidId> = cfg.channels.iter().map(|c| c.acid).collect();
    let channels = Channels::new(exp)?;
    let run_one = |(label, profile): &(String, IndividualProfile)| -> Result<MemberOutputs> {
        let seed = derive_seed(cfg.series.seed, profile.rng_seed);
        let series = cohort::sample_series(profile, &acids, &schedule, &cfg.series.noise, seed)?;
        let outputs = series
            .values
            .iter()
            .enumerate()
            .map(|(k, row)| process_step(exp, &channels, row, schedule.time(k) + cfg.kinetics.t_g))
            .collect::<Result<_>>()?;
        Ok(MemberOutputs {
            id: profile.id.clone(),
            group: label.clone(),
            outputs,
        })
    };
    exp.run_parallel(|| members.par_iter().map(run_one).collect::<Result<Vec<_>>>())?
}

fn labeled(cohorts: Vec<(String, Vec<IndividualProfile>)>) -> Vec<(String, IndividualProfile)> {
    cohorts
        .into_iter()
        .flat_map(|(label, members)| members.into_iter().map(move |m| (label.clone(), m)))
        .collect()
}

/// Runs the pipeline over every configured group's cohort.
pub fn run_pipeline(exp: &Experiment) -> Result<Vec<MemberOutputs>> {
    run_members(exp, &labeled(build_cohorts(exp)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub accept: usize,
    pub reject: usize,
    #[serde(rename = "continue")]
    pub undecided: usize,
}

impl DecisionCounts {
    fn tally(verdicts: &[Verdict]) -> Self {
        let count = |v| verdicts.iter().filter(|x| **x == v).count();
        Self {
            accept: count(Verdict::Accept),
            reject: count(Verdict::Reject),
            undecided: count(Verdict::Continue),
        }
    }
}

/// Scores of every (template, probe stream) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthScores {
    /// First post-registration step only.
    pub single_step: ScoredPopulation,
    /// Sum of `accumulate` per-step scores minus the drift offset.
    pub accumulated: ScoredPopulation,
    pub drift_offset: f64,
    pub genuine_decisions: DecisionCounts,
    pub impostor_decisions: DecisionCounts,
}

struct Session<'a> {
    template: &'a Template,
    probe: &'a [OutputVector],
    genuine: bool,
}

fn score_sessions(
    exp: &Experiment,
    sessions: &[Session<'_>],
    registration_scores: &[f64],
) -> Result<AuthScores> {
    let a = &exp.config.auth;
    let drift_offset = auth::calibrate_drift_offset(registration_scores, a.drift_margin)?;
    let policy = VerificationPolicy {
        accept_thr: a.accept_thr,
        reject_thr: a.reject_thr,
        drift_offset,
    };
    let mut single = ScoredPopulation::new(vec![], vec![]);
    let mut accumulated = ScoredPopulation::new(vec![], vec![]);
    let mut gv = Vec::new();
    let mut iv = Vec::new();
    for s in sessions {
        let (decision, series) = auth::verify_series(s.template, s.probe, &policy)?;
        let (pop_single, pop_acc, verdicts) = if s.genuine {
            (&mut single.genuine, &mut accumulated.genuine, &mut gv)
        } else {
            (&mut single.impostor, &mut accumulated.impostor, &mut iv)
        };
        pop_single.push(series.scores[0]);
        pop_acc.push(series.total());
        verdicts.push(decision.verdict);
    }
    if single.genuine.len() < 2 || single.impostor.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two genuine and two impostor sessions".into(),
        ));
    }
    Ok(AuthScores {
        single_step: single,
        accumulated,
        drift_offset,
        genuine_decisions: DecisionCounts::tally(&gv),
        impostor_decisions: DecisionCounts::tally(&iv),
    })
}

/// Per-person templates from each member's first `k_reg` vectors.
pub fn enroll_members(exp: &Experiment, members: &[MemberOutputs]) -> Result<Vec<Template>> {
    let a = &exp.config.auth;
    members
        .iter()
        .map(|m| auth::enroll(&m.id, &m.outputs, a.k_reg, a.lambda))
        .collect()
}

/// Scores genuine and impostor sessions for the configured auth mode.
pub fn evaluate_auth(exp: &Experiment) -> Result<AuthScores> {
    let a = &exp.config.auth;
    let needed = match a.mode {
        AuthMode::Individual => a.k_reg + a.accumulate,
        AuthMode::Group => a.k_reg.max(a.accumulate),
    };
    if exp.config.series.steps < needed {
        return Err(Error::InsufficientData(format!(
            "series has {} steps; authentication needs {needed}",
            exp.config.series.steps
        )));
    }
    match a.mode {
        AuthMode::Individual => {
            let members = run_pipeline(exp)?;
            if members.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "individual authentication needs at least 2 users, got {}",
                    members.len()
                )));
            }
            let templates = enroll_members(exp, &members)?;
            let (lo, hi) = (a.k_reg, a.k_reg + a.accumulate);
            let mut registration = Vec::new();
            for (t, m) in templates.iter().zip(&members) {
                for y in &m.outputs[..a.k_reg] {
                    registration.push(t.score(&y.values)?);
                }
            }
            let sessions: Vec<Session<'_>> = templates
                .iter()
                .enumerate()
                .flat_map(|(u, t)| {
                    members.iter().enumerate().map(move |(v, m)| Session {
                        template: t,
                        probe: &m.outputs[lo..hi],
                        genuine: u == v,
                    })
                })
                .collect();
            score_sessions(exp, &sessions, &registration)
        }
        AuthMode::Group => {
            let genuine_label = a.genuine.as_deref().expect("validated");
            let genuine_group = exp.config.group(genuine_label)?;
            let enroll_members: Vec<_> = enrollment_cohort(exp, genuine_group)?
                .into_iter()
                .map(|p| (genuine_label.to_string(), p))
                .collect();
            let enrolled = run_members(exp, &enroll_members)?;
            let reg_vectors: Vec<OutputVector> = enrolled
                .iter()
                .flat_map(|m| m.outputs[..a.k_reg].iter().cloned())
                .collect();
            let template = auth::enroll(genuine_label, &reg_vectors, reg_vectors.len(), a.lambda)?;
            let registration = reg_vectors
                .iter()
                .map(|y| template.score(&y.values))
                .collect::<Result<Vec<_>>>()?;
            let probes = run_pipeline(exp)?;
            let sessions: Vec<Session<'_>> = probes
                .iter()
                .map(|m| Session {
                    template: &template,
                    probe: &m.outputs[..a.accumulate],
                    genuine: m.group == genuine_label,
                })
                .collect();
            score_sessions(exp, &sessions, &registration)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthReport {
    pub experiment: String,
    pub config_sha256: String,
    pub params_sha256: String,
    pub population_sha256: String,
    pub params_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub mode: AuthMode,
    pub k_reg: usize,
    pub accumulate: usize,
    pub drift_offset: f64,
    pub single_step: RocSummary,
    pub accumulated: RocSummary,
    pub genuine_decisions: DecisionCounts,
    pub impostor_decisions: DecisionCounts,
}

pub fn build_report(exp: &Experiment, scores: &AuthScores) -> Result<AuthReport> {
    Ok(AuthReport {
        experiment: exp.config.name.clone(),
        config_sha256: exp.config_hash.clone(),
        params_sha256: exp.params_hash.clone(),
        population_sha256: exp.population_hash.clone(),
        params_version: exp.params.kinetics.version.clone(),
        seeds: exp.config.seeds(),
        mode: exp.config.auth.mode,
        k_reg: exp.config.auth.k_reg,
        accumulate: exp.config.auth.accumulate,
        drift_offset: scores.drift_offset,
        single_step: metrics::summarize(&scores.single_step)?,
        accumulated: metrics::summarize(&scores.accumulated)?,
        genuine_decisions: scores.genuine_decisions.clone(),
        impostor_decisions: scores.impostor_decisions.clone(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifestEntry {
    pub label: String,
    pub seed: u64,
    pub demographics: Demographics,
    pub n: usize,
    pub file: String,
    pub member_ids: Vec<String>,
    pub member_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub experiment: String,
    pub config_sha256: String,
    pub population_sha256: String,
    pub population_label: String,
    pub groups: Vec<CohortManifestEntry>,
}

/// Writes `cohort_<label>.csv` per group plus `cohort_manifest.json`.
pub fn cmd_cohort(exp: &Experiment) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for ((label, members), group) in build_cohorts(exp)?
        .into_iter()
        .zip(&exp.config.cohort.groups)
    {
        let file = format!("cohort_{label}.csv");
        let path = exp.output_dir.join(&file);
        cohort::write_cohort_csv(create(&path)?, &members, Some(&exp.config_hash))?;
        written.push(path);
        entries.push(CohortManifestEntry {
            label,
            seed: group.seed,
            demographics: group.demographics.clone(),
            n: members.len(),
            file,
            member_ids: members.iter().map(|m| m.id.clone()).collect(),
            member_seeds: members.iter().map(|m| m.rng_seed).collect(),
        });
    }
    let manifest = CohortManifest {
        experiment: exp.config.name.clone(),
        config_sha256: exp.config_hash.clone(),
        population_sha256: exp.population_hash.clone(),
        population_label: exp.population.label.clone(),
        groups: entries,
    };
    let path = exp.output_dir.join("cohort_manifest.json");
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub experiment: String,
    pub config_sha256: String,
    pub params_sha256: String,
    pub outputs: usize,
    pub steps: usize,
    pub gate_time_s: f64,
    pub members: Vec<PipelineManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifestEntry {
    pub id: String,
    pub group: String,
    pub file: String,
}

/// Writes one `outputs/<id>.csv` stream per member plus a manifest.
pub fn cmd_pipeline(exp: &Experiment) -> Result<Vec<MemberOutputs>> {
    let members = run_pipeline(exp)?;
    let s = exp.config.digitize.groups.len();
    let mut entries = Vec::new();
    for m in &members {
        let file = format!("outputs/{}.csv", m.id);
        digitize::write_outputs_csv(
            create(&exp.output_dir.join(&file))?,
            &m.outputs,
            s,
            Some(&exp.config_hash),
        )?;
        entries.push(PipelineManifestEntry {
            id: m.id.clone(),
            group: m.group.clone(),
            file,
        });
    }
    write_json(
        &exp.output_dir.join("pipeline_manifest.json"),
        &PipelineManifest {
            experiment: exp.config.name.clone(),
            config_sha256: exp.config_hash.clone(),
            params_sha256: exp.params_hash.clone(),
            outputs: s,
            steps: exp.config.series.steps,
            gate_time_s: exp.config.kinetics.t_g,
            members: entries,
        },
    )?;
    Ok(members)
}

/// Reads the streams written by [`cmd_pipeline`].
pub fn read_pipeline_outputs(exp: &Experiment) -> Result<Vec<MemberOutputs>> {
    let path = exp.output_dir.join("pipeline_manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::InsufficientData(format!(
            "no pipeline outputs at {} (run `pipeline` first): {e}",
            path.display()
        ))
    })?;
    let manifest: PipelineManifest = serde_json::from_str(&text)?;
    manifest
        .members
        .into_iter()
        .map(|e| {
            let outputs = digitize::read_outputs_csv(File::open(exp.output_dir.join(&e.file))?)?;
            Ok(MemberOutputs {
                id: e.id,
                group: e.group,
                outputs,
            })
        })
        .collect()
}

/// Enrolls every member's template from the stored pipeline outputs. Each
/// record carries a drift offset calibrated on its own registration scores.
pub fn cmd_enroll(exp: &Experiment) -> Result<Vec<PathBuf>> {
    let a = &exp.config.auth;
    let members = read_pipeline_outputs(exp)?;
    let templates = enroll_members(exp, &members)?;
    templates
        .iter()
        .zip(&members)
        .map(|(t, m)| {
            let registration = m.outputs[..a.k_reg]
                .iter()
                .map(|y| t.score(&y.values))
                .collect::<Result<Vec<_>>>()?;
            let mut record = t.to_record(Some(&exp.config_hash), Some(&exp.params_hash));
            record.drift_offset =
                Some(auth::calibrate_drift_offset(&registration, a.drift_margin)?);
            let path = exp.output_dir.join(format!("templates/{}.json", t.user_id));
            write_json(&path, &record)?;
            Ok(path)
        })
        .collect()
}

/// Verifies one stream against one template, appending to `audit.csv`.
pub fn cmd_verify(
    exp: &Experiment,
    template_path: &Path,
    stream_path: &Path,
    from_step: usize,
) -> Result<auth::AuthDecision> {
    let record: auth::TemplateRecord = serde_json::from_str(&fs::read_to_string(template_path)?)?;
    let template = Template::from_record(&record)?;
    let stream = digitize::read_outputs_csv(File::open(stream_path)?)?;
    if from_step > stream.len() {
        return Err(Error::InsufficientData(format!(
            "stream has {} steps, cannot start at {from_step}",
            stream.len()
        )));
    }
    let a = &exp.config.auth;
    // Records without a calibrated offset fall back to the bare margin.
    let drift_offset = record.drift_offset.unwrap_or(-a.drift_margin);
    let policy = VerificationPolicy {
        accept_thr: a.accept_thr,
        reject_thr: a.reject_thr,
        drift_offset,
    };
    let probe = &stream[from_step..];
    let (decision, series) = auth::verify_series(&template, probe, &policy)?;
    let audit = exp.output_dir.join("audit.csv");
    let fresh = !audit.exists();
    fs::create_dir_all(&exp.output_dir)?;
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&audit)?;
    auth::write_audit_csv(
        BufWriter::new(file),
        &template.user_id,
        probe,
        &series,
        &policy,
        Some(&exp.config_hash),
        fresh,
    )?;
    Ok(decision)
}

/// Writes `roc.csv` and `roc_summary.json` for an explicit scored population.
pub fn write_roc(
    dir: &Path,
    stem: &str,
    pop: &ScoredPopulation,
    config_hash: Option<&str>,
) -> Result<RocSummary> {
    let roc = metrics::roc_curve(pop)?;
    roc.write_csv(create(&dir.join(format!("{stem}.csv")))?, config_hash)?;
    let summary = metrics::summarize(pop)?;
    write_json(&dir.join(format!("{stem}_summary.json")), &summary)?;
    Ok(summary)
}

/// Reads a `label,score` CSV where label is `genuine` or `impostor`.
pub fn read_scores_csv(path: &Path) -> Result<ScoredPopulation> {
    let mut csv = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(File::open(path)?);
    let mut pop = ScoredPopulation::new(vec![], vec![]);
    for rec in csv.records() {
        let rec = rec?;
        let score: f64 = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::config(format!("bad score row {rec:?}")))?;
        match rec.get(0).map(str::trim) {
            Some("genuine") => pop.genuine.push(score),
            Some("impostor") => pop.impostor.push(score),
            other => return Err(Error::config(format!("unknown label {other:?}"))),
        }
    }
    Ok(pop)
}

/// Full authentication evaluation: ROC CSVs for single-step and accumulated
/// scores, plus `report.json`.
pub fn cmd_auth_eval(exp: &Experiment) -> Result<AuthReport> {
    let scores = evaluate_auth(exp)?;
    let report = build_report(exp, &scores)?;
    let hash = Some(exp.config_hash.as_str());
    metrics::roc_curve(&scores.single_step)?
        .write_csv(create(&exp.output_dir.join("roc_k1.csv"))?, hash)?;
    metrics::roc_curve(&scores.accumulated)?.write_csv(
        create(
            &exp.output_dir
                .join(format!("roc_k{}.csv", exp.config.auth.accumulate)),
        )?,
        hash,
    )?;
    write_json(&exp.output_dir.join("report.json"), &report)?;
    Ok(report)
}
