//! Problem instances: arrival law, fade law, power table, batch limits.
//!
//! A [`ModelSpec`] is the declarative, serializable description of a link.
//! Solvers never work on it directly; they compile it into a [`Lattice`], in
//! which queue lengths, batch sizes and arrivals are integer multiples of a
//! common unit (one packet in integer mode, `delta` packets in grid mode).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-12;
const CONVEXITY_TOL: f64 = 1e-12;

/// Declarative arrival law, as stored in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArrivalSpec {
    Binomial { n: u32, p: f64 },
    Pmf { values: Vec<f64> },
}

/// Distribution of the number of packets arriving in one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalLaw {
    pmf: Vec<f64>,
    lambda: f64,
    sigma2: f64,
}

impl ArrivalLaw {
    pub fn binomial(n: u32, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param("p", format!("{p} is not a probability")));
        }
        let pmf = (0..=n).map(|k| binomial_pmf(n, k, p)).collect();
        Ok(Self::from_pmf(pmf))
    }

    /// Builds the law from raw probabilities; normalization is checked by
    /// [`validate`], not here.
    pub fn from_pmf(pmf: Vec<f64>) -> Self {
        let lambda = pmf.iter().enumerate().map(|(a, p)| a as f64 * p).sum();
        let second: f64 = pmf.iter().enumerate().map(|(a, p)| (a * a) as f64 * p).sum();
        Self {
            sigma2: second - lambda * lambda,
            lambda,
            pmf,
        }
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Mean arrivals per slot.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn a_max(&self) -> usize {
        self.pmf.len().saturating_sub(1)
    }

    pub fn prob(&self, a: usize) -> f64 {
        self.pmf.get(a).copied().unwrap_or(0.0)
    }

    /// `Pr{A > x}`.
    pub fn prob_above(&self, x: f64) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .filter(|(a, _)| *a as f64 > x)
            .map(|(_, p)| p)
            .sum()
    }

    /// Independent thinning: every packet is kept with probability `keep`.
    pub fn thinned(&self, keep: f64) -> Self {
        let n = self.a_max();
        let mut out = vec![0.0; n + 1];
        for (r, pr) in self.pmf.iter().enumerate() {
            for (a, slot) in out.iter_mut().enumerate().take(r + 1) {
                *slot += pr * binomial_pmf(r as u32, a as u32, keep);
            }
        }
        Self::from_pmf(out)
    }
}

fn ln_choose(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (1..=k)
        .map(|i| ((n - k + i) as f64 / i as f64).ln())
        .sum()
}

fn binomial_pmf(n: u32, k: u32, p: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let lp = ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p();
    lp.exp()
}

impl ArrivalSpec {
    pub fn law(&self) -> Result<ArrivalLaw> {
        match self {
            ArrivalSpec::Binomial { n, p } => ArrivalLaw::binomial(*n, *p),
            ArrivalSpec::Pmf { values } => Ok(ArrivalLaw::from_pmf(values.clone())),
        }
    }
}

/// IID fade process over a finite set of strictly positive states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FadeLaw {
    pub states: Vec<f64>,
    pub probs: Vec<f64>,
}

impl FadeLaw {
    pub fn new(states: Vec<f64>, probs: Vec<f64>) -> Self {
        Self { states, probs }
    }

    pub fn single(h: f64) -> Self {
        Self::new(vec![h], vec![1.0])
    }

    /// Two fade states {0.1, 1} with `Pr{h = 0.1} = 0.6`.
    pub fn example() -> Self {
        Self::new(vec![0.1, 1.0], vec![0.6, 0.4])
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Transmit power as a function of fade index and batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum PowerSpec {
    /// `P(h, s) = (1.28 / h^2) (10^(s/4) - 1)`: 50 kb/s per packet per slot
    /// through a `200 log10(1 + SNR)` rate law. Strictly convex in `s`.
    Example,
    /// `rows[h][s]` for integer `s = 0..=s_max`. Off-integer batch sizes
    /// (grid mode) interpolate linearly between table entries.
    Table { rows: Vec<Vec<f64>> },
}

pub fn example_power(h: f64, s: f64) -> f64 {
    1.28 / (h * h) * (10f64.powf(s / 4.0) - 1.0)
}

/// Queue/action granularity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Mode {
    Int,
    Grid { delta: f64 },
}

impl Mode {
    pub fn unit(&self) -> f64 {
        match self {
            Mode::Int => 1.0,
            Mode::Grid { delta } => *delta,
        }
    }
}

/// A full problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arrival: ArrivalSpec,
    pub fade: FadeLaw,
    pub power: PowerSpec,
    pub s_max: u32,
    pub mode: Mode,
    pub admission: bool,
}

impl ModelSpec {
    pub fn arrival_law(&self) -> Result<ArrivalLaw> {
        self.arrival.law()
    }

    pub fn lambda(&self) -> Result<f64> {
        Ok(self.arrival_law()?.lambda())
    }

    /// Power at a real batch size `s` (packets) in fade `h_idx`.
    pub fn power_at(&self, h_idx: usize, s: f64) -> f64 {
        match &self.power {
            PowerSpec::Example => example_power(self.fade.states[h_idx], s),
            PowerSpec::Table { rows } => {
                let row = &rows[h_idx];
                let lo = (s.floor() as usize).min(row.len() - 1);
                let frac = s - lo as f64;
                if frac <= 0.0 || lo + 1 >= row.len() {
                    row[lo]
                } else {
                    row[lo] + frac * (row[lo + 1] - row[lo])
                }
            }
        }
    }

    /// Replaces a binomial arrival law by the one with mean `lambda`.
    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        match &mut self.arrival {
            ArrivalSpec::Binomial { n, p } => {
                let q = lambda / *n as f64;
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::param("lambda", format!("{lambda} not in (0, {n})")));
                }
                *p = q;
                Ok(self)
            }
            ArrivalSpec::Pmf { .. } => Err(Error::param(
                "lambda",
                "only binomial arrival laws can be re-targeted",
            )),
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_admission(mut self, admission: bool) -> Self {
        self.admission = admission;
        self
    }

    /// Same instance with the power table replaced by its values at integer
    /// batch sizes; in grid mode this is the piecewise-linear lower convex
    /// envelope of the integer table.
    pub fn with_integer_power_table(mut self) -> Self {
        let rows = (0..self.fade.len())
            .map(|h| (0..=self.s_max).map(|s| self.power_at(h, s as f64)).collect())
            .collect();
        self.power = PowerSpec::Table { rows };
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ModelNotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Validates and discretizes the instance.
    pub fn lattice(&self) -> Result<Lattice> {
        let report = validate(self);
        if !report.passed() {
            return Err(Error::InvalidModel(report.violations.join("; ")));
        }
        let law = self.arrival_law()?;
        let unit = self.mode.unit();
        let per_packet = lattice_steps(1.0, unit).expect("validated");
        let s_units = self.s_max as usize * per_packet;
        let arrivals = law
            .pmf()
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(a, p)| (a * per_packet, *p))
            .collect();
        let power = (0..self.fade.len())
            .map(|h| {
                (0..=s_units)
                    .map(|k| self.power_at(h, k as f64 * unit))
                    .collect()
            })
            .collect();
        Ok(Lattice {
            unit,
            s_max: s_units,
            arrivals,
            fade_probs: self.fade.probs.clone(),
            power,
            lambda: law.lambda(),
            sigma2: law.sigma2(),
            prob_zero_arrival: law.prob(0),
        })
    }
}

/// Number of lattice steps in `x`, if `x` is an integer multiple of `unit`.
fn lattice_steps(x: f64, unit: f64) -> Option<usize> {
    let k = x / unit;
    let r = k.round();
    ((k - r).abs() <= 1e-9 * k.abs().max(1.0) && r >= 0.0).then_some(r as usize)
}

/// `ModelSpec` discretized on an integer lattice of step `unit` packets.
///
/// Queue states, batch sizes and arrivals are stored in lattice steps;
/// `lambda` and the power table are in packets and watts.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub unit: f64,
    pub s_max: usize,
    /// Arrival support in lattice steps with probabilities.
    pub arrivals: Vec<(usize, f64)>,
    pub fade_probs: Vec<f64>,
    /// `power[h][s]`, `s` in lattice steps.
    pub power: Vec<Vec<f64>>,
    pub lambda: f64,
    pub sigma2: f64,
    pub prob_zero_arrival: f64,
}

impl Lattice {
    pub fn n_fades(&self) -> usize {
        self.fade_probs.len()
    }

    pub fn a_max(&self) -> usize {
        self.arrivals.iter().map(|(a, _)| *a).max().unwrap_or(0)
    }

    pub fn s_max_packets(&self) -> f64 {
        self.s_max as f64 * self.unit
    }

    pub fn ensure_stable(&self) -> Result<()> {
        if self.lambda < self.s_max_packets() {
            Ok(())
        } else {
            Err(Error::Unstable {
                lambda: self.lambda,
                s_max: self.s_max_packets(),
            })
        }
    }

    /// Copy with arrivals independently thinned with keep probability `keep`.
    pub fn thinned(&self, keep: f64) -> Lattice {
        let per_packet = lattice_steps(1.0, self.unit).unwrap_or(1);
        let a_max = self.a_max() / per_packet;
        let mut pmf = vec![0.0; a_max + 1];
        for &(a, p) in &self.arrivals {
            pmf[a / per_packet] += p;
        }
        let law = ArrivalLaw::from_pmf(pmf).thinned(keep);
        Lattice {
            arrivals: law
                .pmf()
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(a, p)| (a * per_packet, *p))
                .collect(),
            lambda: law.lambda(),
            sigma2: law.sigma2(),
            prob_zero_arrival: law.prob(0),
            ..self.clone()
        }
    }
}

/// Outcome of [`validate`]: violated invariants plus the arrival assumptions
/// the bound verifiers depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    /// `Pr{A > S_max} > 0`.
    pub a1_holds: bool,
    /// Every arrival count in `0..=A_max` has positive probability.
    pub a2_holds: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(spec: &ModelSpec) -> ValidationReport {
    let mut v = Vec::new();

    let law = match &spec.arrival {
        ArrivalSpec::Binomial { p, .. } if !(0.0..=1.0).contains(p) => {
            v.push(format!("binomial p = {p} is not a probability"));
            None
        }
        ArrivalSpec::Pmf { values } if values.is_empty() => {
            v.push("arrival pmf is empty".into());
            None
        }
        other => other.law().ok(),
    };
    if let Some(law) = &law {
        if law.pmf().iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            v.push("arrival pmf has negative or non-finite entries".into());
        }
        let total: f64 = law.pmf().iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            v.push(format!("pmf not normalized (sums to {total})"));
        }
    }

    let fade = &spec.fade;
    if fade.states.is_empty() {
        v.push("fade law has no states".into());
    }
    if fade.states.len() != fade.probs.len() {
        v.push("fade states and probabilities differ in length".into());
    }
    if fade.states.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        v.push("fade states must be strictly positive".into());
    }
    if fade.probs.iter().any(|p| !(*p >= 0.0)) {
        v.push("fade probabilities must be non-negative".into());
    }
    let fade_total: f64 = fade.probs.iter().sum();
    if (fade_total - 1.0).abs() > NORM_TOL {
        v.push(format!("fade probabilities not normalized (sum to {fade_total})"));
    }

    if spec.s_max == 0 {
        v.push("s_max must be at least 1".into());
    }

    let unit = spec.mode.unit();
    let mut grid_ok = true;
    if let Mode::Grid { delta } = spec.mode {
        if !(delta > 0.0 && delta <= 1.0) || lattice_steps(1.0, delta).is_none() {
            v.push(format!(
                "grid step {delta} must divide one packet (S_max and A_max must be multiples of it)"
            ));
            grid_ok = false;
        }
    }

    if let PowerSpec::Table { rows } = &spec.power {
        if rows.len() != fade.states.len() {
            v.push(format!(
                "power table has {} rows for {} fade states",
                rows.len(),
                fade.states.len()
            ));
        }
        if rows.iter().any(|r| r.len() != spec.s_max as usize + 1) {
            v.push(format!("power table rows must have s_max + 1 = {} entries", spec.s_max + 1));
        }
        if rows.iter().flatten().any(|p| !p.is_finite()) {
            v.push("power table has non-finite entries".into());
        }
    }

    let shapes_ok = v.is_empty() || (fade.states.len() == fade.probs.len() && grid_ok);
    if shapes_ok && grid_ok && spec.s_max > 0 && !fade.states.is_empty() {
        let table_ok = match &spec.power {
            PowerSpec::Table { rows } => {
                rows.len() == fade.states.len()
                    && rows.iter().all(|r| r.len() == spec.s_max as usize + 1)
            }
            PowerSpec::Example => true,
        };
        if table_ok {
            let steps = lattice_steps(spec.s_max as f64, unit).unwrap_or(0);
            for h in 0..fade.states.len() {
                let row: Vec<f64> = (0..=steps).map(|k| spec.power_at(h, k as f64 * unit)).collect();
                if row[0] != 0.0 {
                    v.push(format!("C1: P(h{h}, 0) = {} is not zero", row[0]));
                }
                if let Some(k) = row.windows(2).position(|w| w[1] < w[0]) {
                    v.push(format!("C2: P(h{h}, s) decreases at step {}", k + 1));
                }
                if let Some(k) = row
                    .windows(3)
                    .position(|w| w[2] - 2.0 * w[1] + w[0] < -CONVEXITY_TOL)
                {
                    v.push(format!("C2: P(h{h}, s) is not convex at step {}", k + 1));
                }
            }
        }
    }

    let (a1_holds, a2_holds) = match &law {
        Some(law) => (
            law.prob_above(spec.s_max as f64) > 0.0,
            law.pmf().iter().all(|p| *p > 0.0),
        ),
        None => (false, false),
    };

    ValidationReport {
        violations: v,
        a1_holds,
        a2_holds,
    }
}

/// The running example: Binomial(`a_max`, `p`) arrivals, `S_max = 2`,
/// power `(1.28/h^2)(10^(s/4) - 1)`, integer batches, no admission control.
pub fn example_system(a_max: u32, p: f64, fade: FadeLaw) -> Result<ModelSpec> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param("p", format!("{p} not in (0, 1)")));
    }
    Ok(ModelSpec {
        arrival: ArrivalSpec::Binomial { n: a_max, p },
        fade,
        power: PowerSpec::Example,
        s_max: 2,
        mode: Mode::Int,
        admission: false,
    })
}

/// Concave increasing utility with `u(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Utility {
    /// `ln(1 + a)`
    Log1p,
    /// `sqrt(a)`
    Sqrt,
}

impl Utility {
    pub fn eval(&self, a: f64) -> f64 {
        match self {
            Utility::Log1p => a.ln_1p(),
            Utility::Sqrt => a.sqrt(),
        }
    }

    pub fn inverse(&self, u: f64) -> f64 {
        match self {
            Utility::Log1p => u.exp_m1(),
            Utility::Sqrt => u * u,
        }
    }
}

/// Throughput requirement for the admission-control variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    pub rho: f64,
    pub utility: Utility,
}

impl UtilityConfig {
    pub fn new(rho: f64, utility: Utility) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::param("rho", format!("{rho} not in (0, 1)")));
        }
        Ok(Self { rho, utility })
    }

    /// Builds the config whose utility target `u_c` corresponds to `rho * lambda`.
    pub fn from_target(u_c: f64, lambda: f64, utility: Utility) -> Result<Self> {
        Self::new(utility.inverse(u_c) / lambda, utility)
    }

    pub fn target_utility(&self, lambda: f64) -> f64 {
        self.utility.eval(self.rho * lambda)
    }

    pub fn required_throughput(&self, lambda: f64) -> f64 {
        self.rho * lambda
    }
}
