//! Checks of the stationary-distribution bounds against an exact `π`.
//!
//! Three results are verified: a geometric upper bound on `π` above the
//! first state whose mean service reaches `s1`, a drift-based geometric lower
//! bound on the tail `Pr{Q >= q}`, and a concentration bound on the mass of
//! states whose mean service is far from the rate at which `c` is supported.
//! All checks allow a slack of `SLACK_TOL`.

use std::io::Write;

use crate::chain::{averages, StationaryDist};
use crate::error::Result;
use crate::mdp::{check_monotone, Policy};
use crate::mincost::{fmt, CaseInfo, MinPowerCurve};
use crate::model::Lattice;
use crate::numeric::CompensatedSum;

pub const SLACK_TOL: f64 = 1e-9;

/// Largest number of `q1` (and of `k`) values checked per drift horizon.
const MAX_DRIFT_POINTS: usize = 64;

/// Constants shared by the three checks. Rates and queue lengths in packets.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    pub s1: f64,
    pub q1: Option<f64>,
    pub rho_d: Option<f64>,
    pub eps_a: f64,
    pub delta_a: Option<f64>,
    pub d: Option<f64>,
    pub q_d: Option<f64>,
    /// Per-step growth allowance `δ` of the drift bound (grid mode).
    pub delta: Option<f64>,
    /// Queue step `Δ`: one lattice unit.
    pub step: f64,
    pub eps_v: f64,
    pub v: Option<f64>,
}

impl BoundParams {
    pub fn new(lattice: &Lattice, s1: f64, eps_v: f64) -> Self {
        let (eps_a, delta_a) = arrival_excess(lattice);
        BoundParams {
            s1,
            q1: None,
            rho_d: None,
            eps_a,
            delta_a,
            d: None,
            q_d: None,
            delta: None,
            step: lattice.unit,
            eps_v,
            v: None,
        }
    }
}

/// `ε_a = Pr{A > S_max}` and the largest lattice `x` with
/// `Pr{A - S_max > x} >= ε_a`; `None` when `ε_a = 0`.
pub fn arrival_excess(lattice: &Lattice) -> (f64, Option<f64>) {
    let s = lattice.s_max;
    let mut eps = CompensatedSum::new();
    for &(a, p) in &lattice.arrivals {
        if a > s {
            eps.add(p);
        }
    }
    let eps = eps.value();
    if eps <= 0.0 {
        return (0.0, None);
    }
    // Pr{A - S_max > x} drops below ε_a once x reaches the smallest excess.
    let min_excess = lattice
        .arrivals
        .iter()
        .filter(|&&(a, p)| a > s && p > 0.0)
        .map(|&(a, _)| a - s)
        .min()
        .unwrap_or(1);
    (eps, Some((min_excess - 1) as f64 * lattice.unit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundStatus {
    Pass,
    Fail,
    Inapplicable,
}

impl BoundStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundStatus::Pass => "pass",
            BoundStatus::Fail => "fail",
            BoundStatus::Inapplicable => "inapplicable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `empirical <= bound`
    Upper,
    /// `empirical >= bound`
    Lower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub index: String,
    pub empirical: f64,
    pub bound: f64,
}

impl BoundRow {
    fn slack(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Upper => self.bound - self.empirical,
            Direction::Lower => self.empirical - self.bound,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub name: &'static str,
    pub direction: Direction,
    pub status: BoundStatus,
    pub rows: Vec<BoundRow>,
    pub worst_slack: f64,
    /// Upper bound above 1 (or lower bound at most 0) at every index.
    pub vacuous: bool,
    pub params: Option<BoundParams>,
    pub note: String,
}

impl BoundReport {
    fn inapplicable(name: &'static str, direction: Direction, note: impl Into<String>) -> Self {
        BoundReport {
            name,
            direction,
            status: BoundStatus::Inapplicable,
            rows: Vec::new(),
            worst_slack: f64::INFINITY,
            vacuous: true,
            params: None,
            note: note.into(),
        }
    }

    fn from_rows(
        name: &'static str,
        direction: Direction,
        rows: Vec<BoundRow>,
        params: BoundParams,
        note: impl Into<String>,
    ) -> Self {
        let worst_slack = rows
            .iter()
            .map(|r| r.slack(direction))
            .fold(f64::INFINITY, f64::min);
        let vacuous = rows.iter().all(|r| match direction {
            Direction::Upper => r.bound > 1.0,
            Direction::Lower => r.bound <= 0.0,
        });
        let status = if worst_slack >= -SLACK_TOL {
            BoundStatus::Pass
        } else {
            BoundStatus::Fail
        };
        BoundReport {
            name,
            direction,
            status,
            rows,
            worst_slack,
            vacuous,
            params: Some(params),
            note: note.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.status != BoundStatus::Fail
    }

    pub fn write_csv<W: Write>(&self, out: W, provenance: &str) -> Result<()> {
        let mut w = crate::io::csv_writer(out, provenance)?;
        w.write_record(["index", "empirical", "bound", "slack", "vacuous"])?;
        for r in &self.rows {
            w.write_record([
                r.index.clone(),
                fmt(r.empirical),
                fmt(r.bound),
                fmt(r.slack(self.direction)),
                self.vacuous.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn not_monotone(policy: &Policy) -> bool {
    !check_monotone(policy).is_monotone()
}

/// First state (in steps) whose mean service reaches `s1`.
fn threshold_state(dist: &StationaryDist, s1: f64) -> Option<usize> {
    dist.sbar.iter().position(|&s| s >= s1)
}

/// Threshold used when none is given: half the largest mean service of the
/// policy, and at least 1.5 steps on a grid.
pub fn default_s1(lattice: &Lattice, dist: &StationaryDist) -> f64 {
    let peak = dist.sbar.iter().copied().fold(0.0, f64::max);
    if lattice.unit < 1.0 {
        (0.5 * peak).max(1.5 * lattice.unit)
    } else {
        0.5 * peak
    }
}

/// Geometric upper bound on `π` above `q1 = min{q : s̄(q) >= s1}`.
///
/// On a grid with step `Δ` each lattice point is one interval
/// `[q1 + kΔ, q1 + (k+1)Δ)` and `ρ_d` uses `(s1 - Δ)/(S_max - Δ)`.
pub fn verify_prop1(
    lattice: &Lattice,
    dist: &StationaryDist,
    policy: &Policy,
    s1: f64,
) -> BoundReport {
    const NAME: &str = "prop1";
    let s_max = lattice.s_max_packets();
    if !(s1 > 0.0 && s1 < s_max) {
        return BoundReport::inapplicable(NAME, Direction::Upper, format!("s1 = {s1} outside (0, {s_max})"));
    }
    let p0 = lattice.prob_zero_arrival;
    if p0 <= 0.0 {
        return BoundReport::inapplicable(NAME, Direction::Upper, "Pr{A = 0} = 0");
    }
    if not_monotone(policy) {
        return BoundReport::inapplicable(NAME, Direction::Upper, "policy not monotone");
    }
    let step = lattice.unit;
    let grid = step < 1.0;
    let ratio = if grid { (s1 - step) / (s_max - step) } else { s1 / s_max };
    if ratio <= 0.0 {
        return BoundReport::inapplicable(NAME, Direction::Upper, format!("s1 = {s1} not above the step {step}"));
    }
    let rho_d = ratio * p0;
    let Some(q1) = threshold_state(dist, s1) else {
        return BoundReport::inapplicable(NAME, Direction::Upper, format!("mean service never reaches s1 = {s1}"));
    };

    let below: f64 = {
        let mut acc = CompensatedSum::new();
        dist.pi[..q1].iter().for_each(|&p| acc.add(p));
        acc.value()
    };
    let growth = 1.0 + 1.0 / rho_d;
    let rows = (q1..dist.pi.len())
        .map(|q| {
            let k = (q - q1) as i32;
            BoundRow {
                index: fmt(q as f64 * step),
                empirical: dist.pi[q],
                bound: below * growth.powi(k) / rho_d,
            }
        })
        .collect();
    let mut params = BoundParams::new(lattice, s1, f64::NAN);
    params.q1 = Some(q1 as f64 * step);
    params.rho_d = Some(rho_d);
    BoundReport::from_rows(NAME, Direction::Upper, rows, params, "")
}

/// Drift horizons checked by default: a quarter, half and all of `q_max`.
pub fn default_drift_horizons(dist: &StationaryDist) -> Vec<usize> {
    let q_max = dist.q_max();
    let mut out: Vec<usize> = [q_max / 4, q_max / 2, q_max]
        .into_iter()
        .filter(|&q| q > 0)
        .collect();
    out.dedup();
    out
}

fn strided(lo: usize, hi: usize) -> Vec<usize> {
    if hi < lo {
        return Vec::new();
    }
    let n = hi - lo + 1;
    let stride = n.div_ceil(MAX_DRIFT_POINTS).max(1);
    let mut out: Vec<usize> = (lo..=hi).step_by(stride).collect();
    if out.last() != Some(&hi) {
        out.push(hi);
    }
    out
}

/// Drift-based geometric lower bound on `Pr{Q >= q1 + kΔ}`.
///
/// For each horizon `q_d`, `d` is the largest negative one-step drift of the
/// exact kernel over `q <= q_d` and the tail term uses the same drift above
/// `q_d`. Pairs `(q1, k)` are strided to at most 64 values each.
pub fn verify_prop2(
    lattice: &Lattice,
    dist: &StationaryDist,
    policy: &Policy,
    horizons: &[usize],
) -> BoundReport {
    const NAME: &str = "prop2";
    let (eps_a, delta_a) = arrival_excess(lattice);
    let Some(delta_a) = delta_a else {
        return BoundReport::inapplicable(NAME, Direction::Lower, "Pr{A > S_max} = 0");
    };
    if policy.admit.is_some() {
        return BoundReport::inapplicable(NAME, Direction::Lower, "admitted batches are controlled");
    }
    if not_monotone(policy) {
        return BoundReport::inapplicable(NAME, Direction::Lower, "policy not monotone");
    }
    let step = lattice.unit;
    let grid = step < 1.0;
    // Integer queues use Δ = δ = 1; on a grid Δ is one step and Δ + δ < δ_a.
    let delta = if grid { 0.5 * (delta_a - step) } else { 1.0 };
    if delta <= 0.0 {
        return BoundReport::inapplicable(NAME, Direction::Lower, format!("δ_a = {delta_a} not above the step {step}"));
    }
    let push = delta * eps_a;

    let n = dist.pi.len();
    let ccdf = dist.ccdf();
    // suffix sums of drift·π
    let mut tail_drift = vec![0.0; n + 1];
    let mut acc = CompensatedSum::new();
    for q in (0..n).rev() {
        acc.add(dist.drift[q] * dist.pi[q]);
        tail_drift[q] = acc.value();
    }

    let mut rows = Vec::new();
    let mut last_d = f64::NAN;
    let mut last_qd = 0;
    for &q_d in horizons.iter().filter(|&&q| q < n) {
        let d = dist.drift[..=q_d]
            .iter()
            .fold(0.0_f64, |m, &x| m.max(-x))
            .max(1e-12);
        let r = push / (push + d);
        let tail = ccdf[q_d + 1] + tail_drift[q_d + 1] / d;
        for q1 in strided(0, q_d) {
            for k in strided(0, q_d - q1) {
                let rk = r.powi(k as i32);
                rows.push(BoundRow {
                    index: format!("qd={} q1={} k={k}", fmt(q_d as f64 * step), fmt(q1 as f64 * step)),
                    empirical: ccdf[q1 + k],
                    bound: rk * ccdf[q1] + (1.0 - rk) * tail,
                });
            }
        }
        last_d = d;
        last_qd = q_d;
    }
    if rows.is_empty() {
        return BoundReport::inapplicable(NAME, Direction::Lower, "no drift horizon inside the truncation");
    }
    let mut params = BoundParams::new(lattice, f64::NAN, f64::NAN);
    params.d = Some(last_d);
    params.q_d = Some(last_qd as f64 * step);
    params.delta = Some(delta);
    BoundReport::from_rows(NAME, Direction::Lower, rows, params, "")
}

/// Largest `a` with `G(x) >= a x²` for `|x| >= eps` on `[-λ, S_max - λ]`,
/// where `G(x) = c(λ + x) - l(λ + x)`. Exact for piecewise-linear `c`.
pub fn quadratic_gap_constant(curve: &MinPowerCurve, info: &CaseInfo, eps: f64) -> f64 {
    let center = info.lambda;
    let gap = |s: f64| (curve.eval(s) - info.line.eval(s)).max(0.0);
    let mut best = f64::INFINITY;
    let mut consider = |s: f64| {
        let x = s - center;
        if x.abs() >= eps * (1.0 - 1e-12) && x != 0.0 {
            best = best.min(gap(s) / (x * x));
        }
    };
    let v = &curve.vertices;
    for w in v.windows(2) {
        let (lo, hi) = (w[0].0, w[1].0);
        // Restrict the segment to |s - λ| >= eps.
        for (a, b) in [(lo, hi.min(center - eps)), (lo.max(center + eps), hi)] {
            if a > b {
                continue;
            }
            consider(a);
            consider(b);
            // G linear on the piece: G = α + βx, f = α/x² + β/x, f' = 0 at x = -2α/β
            let (xa, xb) = (a - center, b - center);
            let (ga, gb) = (gap(a), gap(b));
            if xb != xa {
                let beta = (gb - ga) / (xb - xa);
                let alpha = ga - beta * xa;
                if beta != 0.0 {
                    let x = -2.0 * alpha / beta;
                    if x > xa && x < xb {
                        consider(center + x);
                    }
                }
            }
        }
    }
    best
}

/// Mass of states whose mean service lies away from the support of `l`.
///
/// Integer queues use the linear form `V/(m ε)` with `m` from `info`; grids
/// use `V/(a ε²)` around `λ`. `V` is measured as `P̄ - l(S̄)`, which equals
/// `P̄ - c(λ)` when no packets are lost at the truncation boundary.
pub fn verify_lemma1(
    lattice: &Lattice,
    dist: &StationaryDist,
    policy: &Policy,
    info: &CaseInfo,
    curve: &MinPowerCurve,
    eps_v: f64,
) -> BoundReport {
    const NAME: &str = "lemma1";
    if !(eps_v > 0.0) {
        return BoundReport::inapplicable(NAME, Direction::Upper, "eps_v must be positive");
    }
    let avg = averages(lattice, dist, policy);
    let v = (avg.p_bar - info.line.eval(avg.s_bar)).max(0.0);
    let grid = lattice.unit < 1.0;
    let (lo, hi, bound) = if grid {
        let a = quadratic_gap_constant(curve, info, eps_v);
        let c = info.lambda;
        let bound = if a > 0.0 { v / (a * eps_v * eps_v) } else { f64::INFINITY };
        (c - eps_v, c + eps_v, bound)
    } else {
        let Some(m) = info.m else {
            return BoundReport::inapplicable(NAME, Direction::Upper, "first segment: no slope gap");
        };
        if info.m_l.is_none() && info.case.number() == 1 {
            return BoundReport::inapplicable(NAME, Direction::Upper, "first segment: no slope gap");
        }
        (info.s_l - eps_v, info.s_u + eps_v, v / (m * eps_v))
    };
    let mut mass = CompensatedSum::new();
    for (p, &s) in dist.pi.iter().zip(&dist.sbar) {
        if s < lo || s > hi {
            mass.add(*p);
        }
    }
    let rows = vec![BoundRow {
        index: fmt(eps_v),
        empirical: mass.value(),
        bound,
    }];
    let mut params = BoundParams::new(lattice, f64::NAN, eps_v);
    params.v = Some(v);
    BoundReport::from_rows(NAME, Direction::Upper, rows, params, "")
}

/// `E_π c(s̄(Q))` squeezed between `c(S̄)` and `P̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sandwich {
    /// `c(λ)`
    pub c_lambda: f64,
    /// `c(S̄)`; equals `c(λ)` up to boundary losses.
    pub c_mean: f64,
    pub expected_cost: f64,
    pub p_bar: f64,
}

impl Sandwich {
    pub fn holds(&self) -> bool {
        self.expected_cost <= self.p_bar + SLACK_TOL && self.c_mean <= self.expected_cost + SLACK_TOL
    }
}

pub fn gamma_dependent_lower_bound(
    lattice: &Lattice,
    dist: &StationaryDist,
    policy: &Policy,
    curve: &MinPowerCurve,
) -> Sandwich {
    let avg = averages(lattice, dist, policy);
    let mut cost = CompensatedSum::new();
    for (p, &s) in dist.pi.iter().zip(&dist.sbar) {
        cost.add(p * curve.eval(s));
    }
    Sandwich {
        c_lambda: curve.eval(lattice.lambda),
        c_mean: curve.eval(avg.s_bar),
        expected_cost: cost.value(),
        p_bar: avg.p_bar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::evaluate;
    use crate::mincost::{classify_case, curve_from_lattice};
    use crate::model::{ArrivalSpec, FadeLaw, Mode, ModelSpec, PowerSpec};

    fn bernoulli(p: f64, s_max: u32) -> ModelSpec {
        ModelSpec {
            arrival: ArrivalSpec::Pmf { values: vec![1.0 - p, p] },
            fade: FadeLaw::single(1.0),
            power: PowerSpec::Example,
            s_max,
            mode: Mode::Int,
            admission: false,
        }
    }

    #[test]
    fn prop1_bernoulli_closed_form() {
        let lat = bernoulli(0.3, 2).lattice().unwrap();
        let pol = Policy::serve_min(&lat, 1, 8);
        let (dist, _) = evaluate(&lat, &pol).unwrap();
        // s1 = 1 of S_max = 2: ρ_d = 0.5·0.7
        let rep = verify_prop1(&lat, &dist, &pol, 1.0);
        assert_eq!(rep.status, BoundStatus::Pass);
        let p = rep.params.as_ref().unwrap();
        assert_eq!(p.q1, Some(1.0));
        assert!((p.rho_d.unwrap() - 0.35).abs() < 1e-12);
        assert!((rep.rows[0].bound - 2.0).abs() < 1e-12);
        assert!((rep.rows[0].empirical - 0.3).abs() < 1e-12);
    }

    #[test]
    fn prop1_bounds_grow_geometrically() {
        let lat = bernoulli(0.3, 2).lattice().unwrap();
        let pol = Policy::serve_min(&lat, 1, 8);
        let (dist, _) = evaluate(&lat, &pol).unwrap();
        let rep = verify_prop1(&lat, &dist, &pol, 0.5);
        assert!(rep.rows.windows(2).all(|w| w[1].bound > w[0].bound));
    }

    #[test]
    fn prop1_threshold_never_reached() {
        let lat = bernoulli(0.3, 2).lattice().unwrap();
        let pol = Policy::serve_min(&lat, 1, 8);
        let (dist, _) = evaluate(&lat, &pol).unwrap();
        let rep = verify_prop1(&lat, &dist, &pol, 1.5);
        assert_eq!(rep.status, BoundStatus::Inapplicable);
    }

    #[test]
    fn prop2_requires_excess_arrivals() {
        let lat = bernoulli(0.3, 1).lattice().unwrap();
        let pol = Policy::serve_min(&lat, 1, 8);
        let (dist, _) = evaluate(&lat, &pol).unwrap();
        let rep = verify_prop2(&lat, &dist, &pol, &[4]);
        assert_eq!(rep.status, BoundStatus::Inapplicable);
    }

    #[test]
    fn prop2_two_packet_batches() {
        let spec = ModelSpec {
            arrival: ArrivalSpec::Pmf { values: vec![0.5, 0.3, 0.2] },
            ..bernoulli(0.3, 1)
        };
        let lat = spec.lattice().unwrap();
        let (eps, da) = arrival_excess(&lat);
        assert!((eps - 0.2).abs() < 1e-15);
        assert_eq!(da, Some(0.0));
        let pol = Policy::serve_min(&lat, 1, 200);
        let (dist, _) = evaluate(&lat, &pol).unwrap();
        let rep = verify_prop2(&lat, &dist, &pol, &default_drift_horizons(&dist));
        assert_eq!(rep.status, BoundStatus::Pass, "worst {}", rep.worst_slack);
        // k = 0 rows are equalities
        let zero = rep.rows.iter().find(|r| r.index.ends_with(" k=0")).unwrap();
        assert!((zero.empirical - zero.bound).abs() < 1e-15);
    }

    #[test]
    fn lemma1_and_sandwich_on_serve_max() {
        let spec = crate::model::example_system(5, 0.78 / 5.0, FadeLaw::example()).unwrap();
        let lat = spec.lattice().unwrap();
        let curve = curve_from_lattice(&lat);
        let info = classify_case(&curve, lat.lambda).unwrap();
        let pol = Policy::serve_min(&lat, 2, 200);
        let (dist, _) = evaluate(&lat, &pol).unwrap();
        for eps in [0.01, 0.02, 0.05] {
            let rep = verify_lemma1(&lat, &dist, &pol, &info, &curve, eps);
            assert_eq!(rep.status, BoundStatus::Pass);
        }
        let sw = gamma_dependent_lower_bound(&lat, &dist, &pol, &curve);
        assert!(sw.holds());
        assert!(sw.expected_cost < sw.p_bar);
    }

    #[test]
    fn sandwich_tight_on_a_linear_piece() {
        // single fade, service in {0, 1}: c is linear on [0, 1]
        let lat = bernoulli(0.3, 2).lattice().unwrap();
        let curve = curve_from_lattice(&lat);
        let pol = Policy::serve_min(&lat, 1, 8);
        let (dist, _) = evaluate(&lat, &pol).unwrap();
        let sw = gamma_dependent_lower_bound(&lat, &dist, &pol, &curve);
        assert!((sw.expected_cost - sw.c_lambda).abs() < 1e-12);
        assert!((sw.expected_cost - sw.p_bar).abs() < 1e-12);
    }

    #[test]
    fn quadratic_constant_exact_on_parabola_samples() {
        // c(s) = s² sampled on 0, 0.5, 1, 1.5, 2 around λ = 1 with l(s) = 2s - 1
        let vertices: Vec<(f64, f64)> = (0..5).map(|i| {
            let s = i as f64 * 0.5;
            (s, s * s)
        }).collect();
        let slopes = vertices.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
        let curve = MinPowerCurve { vertices, slopes };
        let info = classify_case(&curve, 1.0).unwrap();
        let a = quadratic_gap_constant(&curve, &info, 0.5);
        // G(x) = x² at the vertices, chords lie above: a = 1
        assert!((a - 1.0).abs() < 1e-12, "{a}");
        let a_small = quadratic_gap_constant(&curve, &info, 0.1);
        assert!(a_small > 0.0 && a_small <= 1.0);
    }
}
