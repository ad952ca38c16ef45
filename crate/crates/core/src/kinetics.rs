//! Biocatalytic cascades as reaction networks with irreversible
//! Michaelis-Menten steps, integrated by fixed-step classical RK4.
//!
//! Units: concentrations µM, time s, kcat 1/s, Km µM, enzyme loading µM.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::write_hash_comment;

/// Maximum number of recursive step halvings before a step is declared failed.
pub const MAX_HALVINGS: u32 = 20;

/// States below `-NEGATIVITY_TOLERANCE` µM trigger step halving; anything
/// between that and zero is clamped to zero.
pub const NEGATIVITY_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_GATE_TIME: f64 = 120.0;
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Species {
    Ala,
    Glu,
    Asp,
    Phe,
    Pyr,
    KTG,
    OAC,
    PhPyr,
    Lac,
    NADH,
    NADplus,
    NH3,
    H2O2,
    O2,
    ABTS,
    ABTSox,
    NBT,
    Formazan,
    PMS,
    Luminol,
    LuminolOx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeciesRole {
    Substrate,
    Intermediate,
    Product,
    Cofactor,
    Chromophore,
}

impl Species {
    pub fn role(self) -> SpeciesRole {
        use Species::*;
        match self {
            Ala | Glu | Asp | Phe => SpeciesRole::Substrate,
            Pyr | KTG | OAC | PhPyr | H2O2 => SpeciesRole::Intermediate,
            Lac | NH3 => SpeciesRole::Product,
            NADH | NADplus | O2 | PMS => SpeciesRole::Cofactor,
            ABTS | ABTSox | NBT | Formazan | Luminol | LuminolOx => SpeciesRole::Chromophore,
        }
    }

    pub fn code(self) -> &'static str {
        use Species::*;
        match self {
            Ala => "Ala",
            Glu => "Glu",
            Asp => "Asp",
            Phe => "Phe",
            Pyr => "Pyr",
            KTG => "KTG",
            OAC => "OAC",
            PhPyr => "PhPyr",
            Lac => "Lac",
            NADH => "NADH",
            NADplus => "NADplus",
            NH3 => "NH3",
            H2O2 => "H2O2",
            O2 => "O2",
            ABTS => "ABTS",
            ABTSox => "ABTSox",
            NBT => "NBT",
            Formazan => "Formazan",
            PMS => "PMS",
            Luminol => "Luminol",
            LuminolOx => "LuminolOx",
        }
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Catalyst of a step. All are enzymes except `PMS`, the chemical mediator of
/// NADH → NBT electron transfer, whose loading plays the role of `e_total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Catalyst {
    ALT,
    LDH,
    POx,
    HRP,
    GlDH,
    AlaDH,
    PheDH,
    GLOx,
    AST,
    NADHox,
    PMS,
}

impl fmt::Display for Catalyst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnzymeParams {
    pub kcat: f64,
    pub e_total: f64,
    pub km: BTreeMap<Species, f64>,
}

/// Kinetic constants, assay reagent loadings and buffered species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    #[serde(default)]
    pub version: String,
    pub enzymes: BTreeMap<Catalyst, EnzymeParams>,
    /// Initial concentrations of non-analyte reagents (µM) per assay mix.
    #[serde(default)]
    pub reagents: BTreeMap<CascadeKind, BTreeMap<Species, f64>>,
    /// Species held constant at the given level (µM), e.g. dissolved O₂ in an
    /// aerated assay. Remove an entry to let that species deplete.
    #[serde(default)]
    pub buffered: BTreeMap<Species, f64>,
}

impl KineticParams {
    /// Reagent mix of `kind` plus the given analyte concentrations.
    pub fn assay_init(
        &self,
        kind: CascadeKind,
        analytes: &[(Species, f64)],
    ) -> BTreeMap<Species, f64> {
        let mut init = self.reagents.get(&kind).cloned().unwrap_or_default();
        for (s, v) in analytes {
            init.insert(*s, *v);
        }
        init
    }

    pub fn enzyme(&self, catalyst: Catalyst) -> Result<&EnzymeParams> {
        self.enzymes
            .get(&catalyst)
            .ok_or_else(|| Error::config(format!("no kinetic parameters for {catalyst}")))
    }

    /// Copy with every catalyst loading set to zero.
    pub fn without_catalysts(&self) -> Self {
        let mut p = self.clone();
        for e in p.enzymes.values_mut() {
            e.e_total = 0.0;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnzymaticStep {
    pub enzyme: Catalyst,
    pub substrates: Vec<(Species, u32)>,
    pub products: Vec<(Species, u32)>,
    pub kcat: f64,
    pub km: BTreeMap<Species, f64>,
    pub e_total: f64,
}

impl EnzymaticStep {
    fn validate(&self) -> Result<()> {
        if !(self.kcat > 0.0) || !(self.e_total >= 0.0) {
            return Err(Error::config(format!(
                "{}: kcat must be > 0 and e_total >= 0",
                self.enzyme
            )));
        }
        for (s, coeff) in self.substrates.iter().chain(&self.products) {
            if *coeff == 0 {
                return Err(Error::config(format!(
                    "{}: zero coefficient for {s}",
                    self.enzyme
                )));
            }
        }
        for (s, _) in &self.substrates {
            match self.km.get(s) {
                Some(km) if *km > 0.0 => {}
                _ => {
                    return Err(Error::config(format!(
                        "{}: missing or non-positive Km for {s}",
                        self.enzyme
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CascadeKind {
    /// ALT then LDH; alanine read as NADH loss at 340 nm.
    AltLdh,
    /// ALT, pyruvate oxidase, HRP/ABTS at 405 nm.
    AltPoxHrp,
    /// GlDH, NADH read directly at 340 nm.
    GldhA,
    /// GlDH, PMS-mediated NBT reduction to formazan at 580 nm.
    GldhB,
    /// GlDH, NADH oxidase to H₂O₂, HRP/luminol emission.
    GldhC,
    AlaGlu,
    AspGlu,
    AlaAspGlu,
    /// Alanine dehydrogenase, NADH at 340 nm.
    AladhA,
    /// Phenylalanine dehydrogenase, NADH at 340 nm.
    PhedhA,
}

impl CascadeKind {
    pub const ALL: [CascadeKind; 10] = [
        CascadeKind::AltLdh,
        CascadeKind::AltPoxHrp,
        CascadeKind::GldhA,
        CascadeKind::GldhB,
        CascadeKind::GldhC,
        CascadeKind::AlaGlu,
        CascadeKind::AspGlu,
        CascadeKind::AlaAspGlu,
        CascadeKind::AladhA,
        CascadeKind::PhedhA,
    ];

    /// The multi-input cascade that chemically sums exactly `inputs`, if any.
    pub fn summing_cascade_for(inputs: &[Species]) -> Option<CascadeKind> {
        let mut sorted = inputs.to_vec();
        sorted.sort();
        sorted.dedup();
        [
            CascadeKind::AlaGlu,
            CascadeKind::AspGlu,
            CascadeKind::AlaAspGlu,
        ]
        .into_iter()
        .find(|k| {
            let mut ins = k.inputs().to_vec();
            ins.sort();
            ins == sorted
        })
    }

    pub fn inputs(self) -> &'static [Species] {
        use Species::*;
        match self {
            CascadeKind::AltLdh | CascadeKind::AltPoxHrp | CascadeKind::AladhA => &[Ala],
            CascadeKind::GldhA | CascadeKind::GldhB | CascadeKind::GldhC => &[Glu],
            CascadeKind::AlaGlu => &[Ala, Glu],
            CascadeKind::AspGlu => &[Asp, Glu],
            CascadeKind::AlaAspGlu => &[Ala, Asp, Glu],
            CascadeKind::PhedhA => &[Phe],
        }
    }

    /// The final product whose formation the readout tracks.
    pub fn terminal_product(self) -> Species {
        use Species::*;
        match self {
            CascadeKind::AltLdh => NADplus,
            CascadeKind::GldhA | CascadeKind::AladhA | CascadeKind::PhedhA => NADH,
            CascadeKind::GldhB => Formazan,
            CascadeKind::GldhC => LuminolOx,
            CascadeKind::AltPoxHrp
            | CascadeKind::AlaGlu
            | CascadeKind::AspGlu
            | CascadeKind::AlaAspGlu => ABTSox,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SiteTerm {
    species: usize,
    km: f64,
}

#[derive(Debug, Clone)]
struct CompiledStep {
    vmax: f64,
    sites: Vec<SiteTerm>,
}

/// One assembled cascade. Immutable after construction.
#[derive(Debug, Clone)]
pub struct CascadeNetwork {
    pub kind: CascadeKind,
    pub species: Vec<Species>,
    pub steps: Vec<EnzymaticStep>,
    /// `stoichiometry[i][j]`: net change of species `i` per unit turnover of step `j`.
    pub stoichiometry: Vec<Vec<i32>>,
    pub input_species: Vec<Species>,
    pub reporter_species: Vec<Species>,
    /// Constant level for buffered species, `None` for dynamic ones.
    pub buffered: Vec<Option<f64>>,
    compiled: Vec<CompiledStep>,
}

/// `kcat · e_total · s / (km + s)`.
pub fn mm_rate(s: f64, kcat: f64, e_total: f64, km: f64) -> f64 {
    kcat * e_total * s / (km + s)
}

fn saturation(s: f64, km: f64) -> f64 {
    s / (km + s)
}

impl CascadeNetwork {
    /// Assembles a network from explicit steps; species order is first appearance.
    pub fn from_steps(
        kind: CascadeKind,
        steps: Vec<EnzymaticStep>,
        input_species: Vec<Species>,
        reporter_species: Vec<Species>,
        buffered: &BTreeMap<Species, f64>,
    ) -> Result<Self> {
        let mut species: Vec<Species> = Vec::new();
        let index_of = |s: Species, species: &mut Vec<Species>| {
            species.iter().position(|x| *x == s).unwrap_or_else(|| {
                species.push(s);
                species.len() - 1
            })
        };
        for s in &input_species {
            index_of(*s, &mut species);
        }
        for step in &steps {
            step.validate()?;
            for (s, _) in step.substrates.iter().chain(&step.products) {
                index_of(*s, &mut species);
            }
        }
        for s in &reporter_species {
            if !species.contains(s) {
                return Err(Error::config(format!(
                    "reporter {s} does not take part in any step"
                )));
            }
        }

        let idx = |s: Species| species.iter().position(|x| *x == s).unwrap();
        let mut stoichiometry = vec![vec![0i32; steps.len()]; species.len()];
        let mut compiled = Vec::with_capacity(steps.len());
        for (j, step) in steps.iter().enumerate() {
            for (s, c) in &step.substrates {
                stoichiometry[idx(*s)][j] -= *c as i32;
            }
            for (s, c) in &step.products {
                stoichiometry[idx(*s)][j] += *c as i32;
            }
            compiled.push(CompiledStep {
                vmax: step.kcat * step.e_total,
                sites: step
                    .substrates
                    .iter()
                    .map(|(s, _)| SiteTerm {
                        species: idx(*s),
                        km: step.km[s],
                    })
                    .collect(),
            });
        }
        let buffered = species.iter().map(|s| buffered.get(s).copied()).collect();

        Ok(Self {
            kind,
            species,
            steps,
            stoichiometry,
            input_species,
            reporter_species,
            buffered,
            compiled,
        })
    }

    pub fn index_of(&self, s: Species) -> Option<usize> {
        self.species.iter().position(|x| *x == s)
    }

    pub fn contains(&self, s: Species) -> bool {
        self.index_of(s).is_some()
    }

    pub fn enzymes(&self) -> Vec<Catalyst> {
        self.steps.iter().map(|s| s.enzyme).collect()
    }

    /// Net stoichiometry actually integrated: buffered species rows are zero.
    pub fn effective_stoichiometry(&self) -> Vec<Vec<i32>> {
        self.stoichiometry
            .iter()
            .zip(&self.buffered)
            .map(|(row, b)| {
                if b.is_some() {
                    vec![0; row.len()]
                } else {
                    row.clone()
                }
            })
            .collect()
    }

    /// Turnover rate of step `j` (µM/s) at state `c`.
    pub fn step_rate(&self, j: usize, c: &[f64]) -> f64 {
        let step = &self.compiled[j];
        step.sites.iter().fold(step.vmax, |v, site| {
            v * saturation(c[site.species].max(0.0), site.km)
        })
    }

    pub fn rates(&self, c: &[f64], out: &mut [f64]) {
        for (j, r) in out.iter_mut().enumerate() {
            *r = self.step_rate(j, c);
        }
    }

    fn derivative(&self, c: &[f64], rates: &mut [f64], dc: &mut [f64]) {
        self.rates(c, rates);
        for (i, d) in dc.iter_mut().enumerate() {
            *d = if self.buffered[i].is_some() {
                0.0
            } else {
                self.stoichiometry[i]
                    .iter()
                    .zip(rates.iter())
                    .map(|(s, r)| *s as f64 * r)
                    .sum()
            };
        }
    }

    /// Index of the step that consumes `s`, searching from the end of the cascade.
    pub fn consuming_step(&self, s: Species) -> Option<usize> {
        self.steps
            .iter()
            .rposition(|st| st.substrates.iter().any(|(x, _)| *x == s))
    }

    /// Initial state: reagent loadings, then buffered levels, then `init` overrides
    /// for dynamic species. Species of `init` absent from the network are ignored.
    pub fn initial_state(&self, init: &BTreeMap<Species, f64>) -> Result<Vec<f64>> {
        self.species
            .iter()
            .zip(&self.buffered)
            .map(|(s, b)| {
                let v = match b {
                    Some(level) => *level,
                    None => init.get(s).copied().unwrap_or(0.0),
                };
                if v.is_finite() && v >= 0.0 {
                    Ok(v)
                } else {
                    Err(Error::config(format!(
                        "initial {s} must be finite and >= 0, got {v}"
                    )))
                }
            })
            .collect()
    }
}

fn mk_step(
    params: &KineticParams,
    enzyme: Catalyst,
    substrates: &[Species],
    products: &[Species],
) -> Result<EnzymaticStep> {
    let p = params.enzyme(enzyme)?;
    let mut km = BTreeMap::new();
    for s in substrates {
        let v = p
            .km
            .get(s)
            .ok_or_else(|| Error::config(format!("{enzyme}: parameter file has no Km for {s}")))?;
        km.insert(*s, *v);
    }
    Ok(EnzymaticStep {
        enzyme,
        substrates: substrates.iter().map(|s| (*s, 1)).collect(),
        products: products.iter().map(|s| (*s, 1)).collect(),
        kcat: p.kcat,
        km,
        e_total: p.e_total,
    })
}

/// Wires one of the built-in cascades.
pub fn build_cascade(kind: CascadeKind, params: &KineticParams) -> Result<CascadeNetwork> {
    use Catalyst as C;
    use Species::*;
    let s = |e, subs: &[Species], prods: &[Species]| mk_step(params, e, subs, prods);

    let alt = || s(C::ALT, &[Ala, KTG], &[Pyr, Glu]);
    let ast = || s(C::AST, &[Asp, KTG], &[OAC, Glu]);
    let glox = || s(C::GLOx, &[Glu, O2], &[KTG, NH3, H2O2]);
    let hrp_abts = || s(C::HRP, &[H2O2, ABTS], &[ABTSox]);
    let gldh = || s(C::GlDH, &[Glu, NADplus], &[KTG, NH3, NADH]);

    let (steps, reporters) = match kind {
        CascadeKind::AltLdh => (
            vec![alt()?, s(C::LDH, &[Pyr, NADH], &[Lac, NADplus])?],
            vec![NADH],
        ),
        CascadeKind::AltPoxHrp => (
            vec![alt()?, s(C::POx, &[Pyr, O2], &[H2O2])?, hrp_abts()?],
            vec![ABTSox, H2O2],
        ),
        CascadeKind::GldhA => (vec![gldh()?], vec![NADH]),
        CascadeKind::GldhB => (
            vec![gldh()?, s(C::PMS, &[NADH, NBT], &[NADplus, Formazan])?],
            vec![Formazan],
        ),
        CascadeKind::GldhC => (
            vec![
                gldh()?,
                s(C::NADHox, &[NADH, O2], &[NADplus, H2O2])?,
                s(C::HRP, &[H2O2, Luminol], &[LuminolOx])?,
            ],
            vec![LuminolOx, H2O2],
        ),
        CascadeKind::AlaGlu => (vec![alt()?, glox()?, hrp_abts()?], vec![ABTSox, H2O2]),
        CascadeKind::AspGlu => (vec![ast()?, glox()?, hrp_abts()?], vec![ABTSox, H2O2]),
        CascadeKind::AlaAspGlu => (
            vec![alt()?, ast()?, glox()?, hrp_abts()?],
            vec![ABTSox, H2O2],
        ),
        CascadeKind::AladhA => (
            vec![s(C::AlaDH, &[Ala, NADplus], &[Pyr, NH3, NADH])?],
            vec![NADH],
        ),
        CascadeKind::PhedhA => (
            vec![s(C::PheDH, &[Phe, NADplus], &[PhPyr, NH3, NADH])?],
            vec![NADH],
        ),
    };
    CascadeNetwork::from_steps(
        kind,
        steps,
        kind.inputs().to_vec(),
        reporters,
        &params.buffered,
    )
}

/// Concentration trace of every species on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticsTrace {
    pub network_kind: CascadeKind,
    pub species: Vec<Species>,
    pub times: Vec<f64>,
    /// Row-major `[time × species]`.
    data: Vec<f64>,
    pub dt: f64,
}

impl KineticsTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.species.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.species.len())
    }

    pub fn index_of(&self, s: Species) -> Result<usize> {
        self.species
            .iter()
            .position(|x| *x == s)
            .ok_or_else(|| Error::Lookup(format!("species {s} is not in the trace")))
    }

    pub fn column(&self, s: Species) -> Result<Vec<f64>> {
        let i = self.index_of(s)?;
        Ok(self.rows().map(|r| r[i]).collect())
    }

    pub fn final_value(&self, s: Species) -> Result<f64> {
        let i = self.index_of(s)?;
        Ok(self.row(self.len() - 1)[i])
    }

    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: Option<&str>) -> Result<()> {
        write_hash_comment(&mut w, config_hash)?;
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["t_s".to_string()];
        header.extend(self.species.iter().map(|s| s.code().to_string()));
        csv.write_record(&header)?;
        for (t, row) in self.times.iter().zip(self.rows()) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    }
}

struct Rk4Workspace {
    rates: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    fn new(n_species: usize, n_steps: usize) -> Self {
        Self {
            rates: vec![0.0; n_steps],
            k1: vec![0.0; n_species],
            k2: vec![0.0; n_species],
            k3: vec![0.0; n_species],
            k4: vec![0.0; n_species],
            tmp: vec![0.0; n_species],
        }
    }
}

fn rk4_step(net: &CascadeNetwork, c: &[f64], h: f64, ws: &mut Rk4Workspace, out: &mut [f64]) {
    let n = c.len();
    net.derivative(c, &mut ws.rates, &mut ws.k1);
    for i in 0..n {
        ws.tmp[i] = c[i] + 0.5 * h * ws.k1[i];
    }
    net.derivative(&ws.tmp, &mut ws.rates, &mut ws.k2);
    for i in 0..n {
        ws.tmp[i] = c[i] + 0.5 * h * ws.k2[i];
    }
    net.derivative(&ws.tmp, &mut ws.rates, &mut ws.k3);
    for i in 0..n {
        ws.tmp[i] = c[i] + h * ws.k3[i];
    }
    net.derivative(&ws.tmp, &mut ws.rates, &mut ws.k4);
    for i in 0..n {
        out[i] = c[i] + h / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
    }
}

enum StepFailure {
    NonFinite,
    Negative,
}

/// Advances `c` by `h`, recursively halving while the result dips below
/// `-NEGATIVITY_TOLERANCE`.
fn advance(
    net: &CascadeNetwork,
    c: &mut [f64],
    h: f64,
    depth: u32,
    ws: &mut Rk4Workspace,
) -> std::result::Result<(), StepFailure> {
    let mut next = vec![0.0; c.len()];
    rk4_step(net, c, h, ws, &mut next);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(StepFailure::NonFinite);
    }
    if next.iter().any(|v| *v < -NEGATIVITY_TOLERANCE) {
        if depth >= MAX_HALVINGS {
            return Err(StepFailure::Negative);
        }
        advance(net, c, 0.5 * h, depth + 1, ws)?;
        return advance(net, c, 0.5 * h, depth + 1, ws);
    }
    for (dst, v) in c.iter_mut().zip(next) {
        *dst = v.max(0.0);
    }
    Ok(())
}

/// Integrates `dc/dt = S · v(c)` from `init` over `[0, horizon]` with step `dt`.
/// The last step is shortened when `horizon` is not a multiple of `dt`.
pub fn simulate(
    network: &CascadeNetwork,
    init: &BTreeMap<Species, f64>,
    horizon: f64,
    dt: f64,
) -> Result<KineticsTrace> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config(format!("dt must be > 0, got {dt}")));
    }
    if !(horizon >= dt && horizon.is_finite()) {
        return Err(Error::config(format!(
            "horizon ({horizon} s) must be >= dt ({dt} s)"
        )));
    }
    let n_steps = (horizon / dt - 1e-9).ceil() as usize;
    let n = network.species.len();
    let mut state = network.initial_state(init)?;
    let mut ws = Rk4Workspace::new(n, network.steps.len());

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut data = Vec::with_capacity((n_steps + 1) * n);
    times.push(0.0);
    data.extend_from_slice(&state);

    let mut t = 0.0;
    for k in 0..n_steps {
        let t_next = if k + 1 == n_steps {
            horizon
        } else {
            (k + 1) as f64 * dt
        };
        let h = t_next - t;
        advance(network, &mut state, h, 0, &mut ws).map_err(|f| Error::IntegrationDiverged {
            step: k,
            time: t,
            reason: match f {
                StepFailure::NonFinite => "non-finite state".into(),
                StepFailure::Negative => {
                    format!("negative concentration persists after {MAX_HALVINGS} halvings")
                }
            },
        })?;
        t = t_next;
        times.push(t);
        data.extend_from_slice(&state);
    }
    Ok(KineticsTrace {
        network_kind: network.kind,
        species: network.species.clone(),
        times,
        data,
        dt,
    })
}

/// Basis of the left null space of the integrated stoichiometry: vectors `w`
/// with `wᵀ S = 0`, so `wᵀ c(t)` is invariant along every trajectory.
pub fn conserved_moieties(network: &CascadeNetwork) -> Vec<Vec<f64>> {
    let s = network.effective_stoichiometry();
    let n_species = network.species.len();
    let n_steps = network.steps.len();
    // Rows of Sᵀ, reduced to row echelon form.
    let mut m: Vec<Vec<f64>> = (0..n_steps)
        .map(|j| (0..n_species).map(|i| s[i][j] as f64).collect())
        .collect();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..n_species {
        if row == m.len() {
            break;
        }
        let Some(p) = (row..m.len()).max_by(|a, b| m[*a][col].abs().total_cmp(&m[*b][col].abs()))
        else {
            break;
        };
        if m[p][col].abs() < 1e-12 {
            continue;
        }
        m.swap(row, p);
        let lead = m[row][col];
        for v in m[row].iter_mut() {
            *v /= lead;
        }
        for r in 0..m.len() {
            if r != row && m[r][col] != 0.0 {
                let f = m[r][col];
                for c in 0..n_species {
                    m[r][c] -= f * m[row][c];
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    (0..n_species)
        .filter(|c| !pivots.contains(c))
        .map(|free| {
            let mut w = vec![0.0; n_species];
            w[free] = 1.0;
            for (r, &pc) in pivots.iter().enumerate() {
                w[pc] = -m[r][free];
            }
            w
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use proptest::prelude::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn mm_rate_closed_forms() {
        assert_eq!(mm_rate(50.0, 10.0, 2.0, 50.0), 10.0);
        assert_eq!(mm_rate(0.0, 10.0, 2.0, 50.0), 0.0);
        let sat = mm_rate(50.0e6, 10.0, 2.0, 50.0);
        assert!((sat / 20.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn alt_ldh_species_inventory() {
        let net = build_cascade(CascadeKind::AltLdh, &default_params()).unwrap();
        use Species::*;
        for s in [Ala, KTG, Pyr, Glu, NADH, NADplus, Lac] {
            assert!(net.contains(s), "missing {s}");
        }
        assert_eq!(net.enzymes(), vec![Catalyst::ALT, Catalyst::LDH]);
        assert_eq!(net.input_species, vec![Ala]);
    }

    #[test]
    fn gldh_c_has_luminol_branch() {
        let net = build_cascade(CascadeKind::GldhC, &default_params()).unwrap();
        assert!(net.contains(Species::H2O2));
        assert!(net.contains(Species::Luminol));
        assert!(net.reporter_species.contains(&Species::H2O2));
        assert!(net.enzymes().contains(&Catalyst::HRP));
    }

    #[test]
    fn gldh_pathways_share_gldh() {
        let p = default_params();
        for kind in [CascadeKind::GldhA, CascadeKind::GldhB, CascadeKind::GldhC] {
            let net = build_cascade(kind, &p).unwrap();
            assert_eq!(net.enzymes()[0], Catalyst::GlDH);
            assert_eq!(net.input_species, vec![Species::Glu]);
        }
        let b = build_cascade(CascadeKind::GldhB, &p).unwrap();
        assert!(b.contains(Species::Formazan) && b.contains(Species::NBT));
    }

    #[test]
    fn three_input_cascade_has_four_enzymes() {
        let net = build_cascade(CascadeKind::AlaAspGlu, &default_params()).unwrap();
        assert_eq!(net.input_species.len(), 3);
        let enzymes: std::collections::BTreeSet<_> = net.enzymes().into_iter().collect();
        let expected: std::collections::BTreeSet<_> =
            [Catalyst::ALT, Catalyst::AST, Catalyst::GLOx, Catalyst::HRP]
                .into_iter()
                .collect();
        assert_eq!(enzymes, expected);
    }

    #[test]
    fn every_kind_builds_and_stoichiometry_matches_steps() {
        let p = default_params();
        for kind in CascadeKind::ALL {
            let net = build_cascade(kind, &p).unwrap();
            for (j, step) in net.steps.iter().enumerate() {
                for (i, s) in net.species.iter().enumerate() {
                    let expected: i32 = step
                        .products
                        .iter()
                        .filter(|(x, _)| x == s)
                        .map(|(_, c)| *c as i32)
                        .sum::<i32>()
                        - step
                            .substrates
                            .iter()
                            .filter(|(x, _)| x == s)
                            .map(|(_, c)| *c as i32)
                            .sum::<i32>();
                    assert_eq!(net.stoichiometry[i][j], expected);
                }
            }
            for s in net.input_species.iter().chain(&net.reporter_species) {
                assert!(net.contains(*s));
            }
            assert!(net.contains(kind.terminal_product()));
        }
    }

    #[test]
    fn missing_enzyme_is_config_error() {
        let mut p = default_params();
        p.enzymes.remove(&Catalyst::LDH);
        assert!(matches!(
            build_cascade(CascadeKind::AltLdh, &p),
            Err(Error::Config(_))
        ));
        let mut p = default_params();
        p.enzymes
            .get_mut(&Catalyst::ALT)
            .unwrap()
            .km
            .remove(&Species::KTG);
        assert!(matches!(
            build_cascade(CascadeKind::AltLdh, &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn no_catalysis_keeps_initial_state() {
        let p = default_params().without_catalysts();
        let net = build_cascade(CascadeKind::AltPoxHrp, &p).unwrap();
        let init = p.assay_init(net.kind, &[(Species::Ala, 30.0)]);
        let trace = simulate(&net, &init, 10.0, 0.01).unwrap();
        let first = trace.row(0).to_vec();
        for row in trace.rows() {
            assert_eq!(row, first.as_slice());
        }
    }

    #[test]
    fn alt_ldh_reaches_stoichiometric_endpoint() {
        // Substrate excess: all 50 µM Ala must end up as Lac.
        let p = default_params();
        let net = build_cascade(CascadeKind::AltLdh, &p).unwrap();
        let mut init = BTreeMap::new();
        init.insert(Species::Ala, 50.0);
        init.insert(Species::NADH, 200.0);
        init.insert(Species::KTG, 200.0);
        let trace = simulate(&net, &init, 6000.0, 0.05).unwrap();
        let lac = trace.final_value(Species::Lac).unwrap();
        let ala = trace.final_value(Species::Ala).unwrap();
        assert!((lac / 50.0 - 1.0).abs() < 0.01, "Lac {lac}");
        assert!(ala < 0.5, "Ala {ala}");
    }

    #[test]
    fn trace_times_and_first_row() {
        let p = default_params();
        let net = build_cascade(CascadeKind::GldhA, &p).unwrap();
        let init = p.assay_init(net.kind, &[(Species::Glu, 12.0)]);
        let trace = simulate(&net, &init, 1.005, 0.01).unwrap();
        assert_eq!(trace.times.first(), Some(&0.0));
        assert_eq!(trace.times.last(), Some(&1.005));
        assert!(trace.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(trace.row(0), net.initial_state(&init).unwrap().as_slice());
    }

    #[test]
    fn invalid_step_sizes_rejected() {
        let p = default_params();
        let net = build_cascade(CascadeKind::GldhA, &p).unwrap();
        let init = p.assay_init(net.kind, &[]);
        assert!(simulate(&net, &init, 1.0, 0.0).is_err());
        assert!(simulate(&net, &init, 0.001, 0.01).is_err());
    }

    #[test]
    fn stiff_step_diverges_with_named_step() {
        // A huge rate constant with a huge step overflows.
        let mut p = default_params();
        p.enzymes.get_mut(&Catalyst::GlDH).unwrap().kcat = 1e300;
        p.enzymes.get_mut(&Catalyst::GlDH).unwrap().e_total = 1e300;
        let net = build_cascade(CascadeKind::GldhA, &p).unwrap();
        let init = p.assay_init(net.kind, &[(Species::Glu, 10.0)]);
        match simulate(&net, &init, 10.0, 1.0) {
            Err(Error::IntegrationDiverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn negativity_guard_halves_steps() {
        // Fast depletion with a coarse step overshoots below zero without halving.
        let mut p = default_params();
        p.enzymes.get_mut(&Catalyst::GlDH).unwrap().e_total = 50.0;
        let net = build_cascade(CascadeKind::GldhA, &p).unwrap();
        let init = p.assay_init(net.kind, &[(Species::Glu, 100.0)]);
        let trace = simulate(&net, &init, 20.0, 2.0).unwrap();
        for row in trace.rows() {
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    /// Null-space oracle: solve by hand-rolled elimination on the dense matrix
    /// and check `w` is in the span of the returned basis via least squares.
    fn in_span(basis: &[Vec<f64>], w: &[f64]) -> bool {
        let k = basis.len();
        let mut g = nalgebra::DMatrix::<f64>::zeros(w.len(), k);
        for (j, b) in basis.iter().enumerate() {
            for (i, v) in b.iter().enumerate() {
                g[(i, j)] = *v;
            }
        }
        let rhs = nalgebra::DVector::from_column_slice(w);
        let svd = g.clone().svd(true, true);
        let x = svd.solve(&rhs, 1e-12).unwrap();
        (g * x - rhs).norm() < 1e-9
    }

    #[test]
    fn alt_ldh_conserved_pools() {
        let net = build_cascade(CascadeKind::AltLdh, &default_params()).unwrap();
        let basis = conserved_moieties(&net);
        let s = &net.stoichiometry;
        for w in &basis {
            for j in 0..net.steps.len() {
                let dot: f64 = (0..net.species.len()).map(|i| w[i] * s[i][j] as f64).sum();
                assert!(dot.abs() < 1e-12);
            }
        }
        assert_eq!(basis.len(), net.species.len() - 2);
        let pick = |names: &[Species]| -> Vec<f64> {
            net.species
                .iter()
                .map(|s| if names.contains(s) { 1.0 } else { 0.0 })
                .collect()
        };
        assert!(in_span(&basis, &pick(&[Species::NADH, Species::NADplus])));
        assert!(in_span(
            &basis,
            &pick(&[Species::Ala, Species::Pyr, Species::Lac])
        ));
        assert!(!in_span(&basis, &pick(&[Species::Ala])));
    }

    #[test]
    fn empty_network_conserves_everything() {
        let net = CascadeNetwork::from_steps(
            CascadeKind::AltLdh,
            vec![],
            vec![Species::Ala, Species::Glu],
            vec![],
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(conserved_moieties(&net).len(), 2);
    }

    #[test]
    fn richardson_order_on_alt_ldh() {
        let p = default_params();
        let net = build_cascade(CascadeKind::AltLdh, &p).unwrap();
        let init = p.assay_init(net.kind, &[(Species::Ala, 40.0)]);
        let end = |dt: f64| {
            let t = simulate(&net, &init, 120.0, dt).unwrap();
            t.row(t.len() - 1).to_vec()
        };
        let dt = 0.8;
        let reference = end(dt / 8.0);
        let e1 = max_abs_diff(&end(dt), &reference);
        let e2 = max_abs_diff(&end(dt / 2.0), &reference);
        let ratio = e1 / e2;
        assert!(
            (12.0..=20.0).contains(&ratio),
            "ratio {ratio}, e1 {e1}, e2 {e2}"
        );
    }

    #[test]
    fn additivity_of_ala_glu_in_linear_regime() {
        // Fast ALT with excess KTG; GLOx and HRP far from saturation.
        let mut p = default_params();
        p.enzymes.get_mut(&Catalyst::ALT).unwrap().e_total = 20.0;
        p.reagents
            .get_mut(&CascadeKind::AlaGlu)
            .unwrap()
            .insert(Species::KTG, 20_000.0);
        let net = build_cascade(CascadeKind::AlaGlu, &p).unwrap();
        let endpoint = |ala: f64, glu: f64| {
            let init = p.assay_init(
                CascadeKind::AlaGlu,
                &[(Species::Ala, ala), (Species::Glu, glu)],
            );
            simulate(&net, &init, 120.0, 0.01)
                .unwrap()
                .final_value(Species::ABTSox)
                .unwrap()
        };
        let mixed = endpoint(20.0, 15.0);
        let pure = endpoint(0.0, 35.0);
        assert!(
            (mixed / pure - 1.0).abs() < 0.05,
            "mixed {mixed}, pure {pure}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn traces_nonnegative_and_products_monotone(
            kind_idx in 0usize..CascadeKind::ALL.len(),
            level in 0.0f64..200.0,
        ) {
            let kind = CascadeKind::ALL[kind_idx];
            let p = default_params();
            let net = build_cascade(kind, &p).unwrap();
            let inputs: Vec<_> = kind.inputs().iter().map(|s| (*s, level)).collect();
            let trace = simulate(&net, &p.assay_init(kind, &inputs), 60.0, 0.05).unwrap();
            let product = trace.column(kind.terminal_product()).unwrap();
            for w in product.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
            for row in trace.rows() {
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn reporter_endpoint_monotone_in_inputs(
            kind_idx in 0usize..CascadeKind::ALL.len(),
            base in 1.0f64..100.0,
            bump in 0.0f64..100.0,
            which in 0usize..3,
        ) {
            let kind = CascadeKind::ALL[kind_idx];
            let p = default_params();
            let net = build_cascade(kind, &p).unwrap();
            let ins = kind.inputs();
            let which = which % ins.len();
            let run = |extra: f64| {
                let inputs: Vec<_> = ins
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (*s, if i == which { base + extra } else { base }))
                    .collect();
                simulate(&net, &p.assay_init(kind, &inputs), 30.0, 0.05)
                    .unwrap()
                    .final_value(kind.terminal_product())
                    .unwrap()
            };
            prop_assert!(run(bump) >= run(0.0) - 1e-9);
        }

        #[test]
        fn half_saturation_exact(kcat in 1e-3f64..1e4, e in 1e-3f64..1e3, km in 1e-2f64..1e5) {
            let v = mm_rate(km, kcat, e, km);
            prop_assert!((v / (kcat * e / 2.0) - 1.0).abs() <= 1e-12);
        }
    }
}
