//! The end-to-end checks behind `repro-paper` and the `acceptance` test.
//!
//! Checks run in order; the sweeps from the regime checks are kept and reused
//! by the bound and invariant checks. Artifacts are CSV bytes keyed by file
//! name and are only written out by the caller.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asymptotics::{expected_class, fit_sweep, ModelKind, ScalingClass, ScalingFit};
use crate::bounds::{
    default_drift_horizons, default_s1, gamma_dependent_lower_bound, verify_lemma1, verify_prop1, verify_prop2, BoundReport,
    BoundStatus,
};
use crate::chain::{evaluate, StationaryDist};
use crate::error::{Error, Result};
use crate::io::provenance;
use crate::mdp::{
    check_monotone, dominates, drop_price, probabilistic_admission_baseline, solve_lattice, sweep_lattice, sweep_u_lattice,
    Multipliers, Policy, SolverOptions, SweepOptions, TradeoffCurve,
};
use crate::mincost::{
    classify_case, curve_from_lattice, grid_error_estimate, min_power_curve, min_power_curve_real, Case, CaseInfo,
    MinPowerCurve,
};
use crate::model::{example_system, validate, ArrivalSpec, FadeLaw, Lattice, Mode, ModelSpec, PowerSpec};
use crate::numeric::log_grid;
use crate::sim::simulate_lattice;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: usize,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Wall time of the check; kept out of [`Outcome::record`] so that
    /// artifacts do not depend on it.
    pub seconds: f64,
}

impl Outcome {
    pub fn record(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("[{tag}] {:>2} {}: {}", self.id, self.title, self.detail)
    }

    pub fn line(&self) -> String {
        format!("{} ({:.1} s)", self.record(), self.seconds)
    }
}

/// One `β` sweep and what is known about its model.
pub struct SweepRun {
    pub label: String,
    pub lattice: Lattice,
    pub curve: TradeoffCurve,
    pub min_curve: MinPowerCurve,
    /// Case at the reference rate (`λ`, or `ρλ` with admission).
    pub info: CaseInfo,
    pub kind: ModelKind,
    pub fit: Option<ScalingFit>,
    pub fit_error: Option<String>,
    pub seconds: f64,
}

impl SweepRun {
    pub fn class(&self) -> ScalingClass {
        self.fit.as_ref().map_or(ScalingClass::Inconclusive, |f| f.class)
    }

    fn summary(&self) -> String {
        let fit = match &self.fit {
            Some(f) => format!("{} (margin {:.2}, {:.2} decades)", f.class, f.margin, f.decades),
            None => format!("no fit: {}", self.fit_error.as_deref().unwrap_or("?")),
        };
        format!("{} -> {}", self.label, fit)
    }

    /// Every policy behind the curve, with its stationary distribution.
    /// Time-shared points contribute both policies.
    pub fn policies(&self) -> Result<Vec<(f64, Policy, StationaryDist)>> {
        let mut out = Vec::new();
        for p in &self.curve.points {
            out.push((p.beta, p.policy.clone(), p.dist.clone()));
            if let Some((_, partner)) = &p.mix {
                let (dist, _) = evaluate(&self.lattice, partner)?;
                out.push((p.beta, partner.clone(), dist));
            }
        }
        Ok(out)
    }
}

#[derive(Default)]
pub struct Suite {
    pub outcomes: Vec<Outcome>,
    pub artifacts: BTreeMap<String, Vec<u8>>,
    pub sweeps: Vec<SweepRun>,
}

const TITLES: [&str; 10] = [
    "minimum-power anchors",
    "grid power ratio",
    "case-1 queue length",
    "integer regimes",
    "grid regimes",
    "admission control",
    "bound soundness",
    "oracle equivalence",
    "structural invariants",
    "simulator agreement",
];

const SEED: u64 = 42;

fn example(lambda: f64) -> Result<ModelSpec> {
    example_system(5, lambda / 5.0, FadeLaw::example())
}

impl Suite {
    /// Runs every check in order, calling `report` after each.
    pub fn run(mut report: impl FnMut(&Outcome)) -> Suite {
        let mut suite = Suite::default();
        for id in 1..=TITLES.len() {
            let title = TITLES[id - 1];
            let start = Instant::now();
            let result = match id {
                1 => suite.min_power_anchors(),
                2 => suite.grid_ratio(),
                3 => suite.case1_queue(),
                4 => suite.integer_regimes(),
                5 => suite.grid_regimes(),
                6 => suite.admission(),
                7 => suite.bound_soundness(),
                8 => suite.oracles(),
                9 => suite.invariants(),
                _ => suite.simulator(),
            };
            let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
            let outcome = Outcome {
                id,
                title,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            };
            report(&outcome);
            suite.outcomes.push(outcome);
        }
        let summary: String = suite.outcomes.iter().map(|o| o.record() + "\n").collect();
        suite.artifacts.insert("summary.txt".into(), summary.into_bytes());
        suite
    }

    pub fn passed(&self, id: usize) -> bool {
        self.outcomes.iter().any(|o| o.id == id && o.passed)
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>, &str) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf, &provenance(&format!("repro-paper {name}")))?;
        self.artifacts.insert(name.to_string(), buf);
        Ok(())
    }

    fn min_power_anchors(&mut self) -> Result<(bool, String)> {
        let start = Instant::now();
        let curve = min_power_curve(&example(0.8)?)?;
        let anchors = [(0.2, 0.1992), (0.78, 1.0717), (0.80, 1.1071), (0.82, 3.0995)];
        let worst = anchors
            .iter()
            .map(|&(l, c)| (curve.eval(l) - c).abs())
            .fold(0.0, f64::max);
        let bp = curve.breakpoints();
        let bp_err = if bp.len() == 3 {
            bp.iter().zip([0.4, 0.8, 1.4]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        let secs = start.elapsed().as_secs_f64();
        self.csv("mincost.csv", |w, p| curve.write_csv(w, p))?;
        let values: Vec<String> = anchors.iter().map(|&(l, _)| format!("c({l})={:.4}", curve.eval(l))).collect();
        Ok((
            worst <= 5e-4 && bp_err <= 1e-9 && secs < 1.0,
            format!("{}; max error {worst:.1e}; breakpoints {bp:?}", values.join(" ")),
        ))
    }

    fn grid_ratio(&mut self) -> Result<(bool, String)> {
        let int = min_power_curve(&example(0.8)?)?.eval(1.7);
        let real = min_power_curve_real(&example(0.8)?.with_mode(Mode::Grid { delta: 0.05 }))?.eval(1.7)?;
        let ratio = int / real;
        Ok((
            (ratio - 1.07).abs() <= 0.01,
            format!("c(1.7) = {int:.4}, c_R(1.7) = {real:.4}, ratio {ratio:.4}"),
        ))
    }

    fn case1_queue(&mut self) -> Result<(bool, String)> {
        let spec = example_system(5, 0.04, FadeLaw::single(1.0))?;
        let lattice = spec.lattice()?;
        let policy = Policy::serve_min(&lattice, 1, 200);
        let (dist, avg) = evaluate(&lattice, &policy)?;
        let err = (avg.q_bar - 0.22).abs();
        Ok((
            err <= 1e-6,
            format!("Q = {:.9} (tail mass {:.1e}), error {err:.1e}", avg.q_bar, dist.tail_mass),
        ))
    }

    fn sweep(&mut self, label: &str, spec: &ModelSpec, grid: &[f64], kind: ModelKind, rho: Option<f64>) -> Result<()> {
        let start = Instant::now();
        let lattice = spec.lattice()?;
        let opts = SweepOptions::default();
        let curve = match rho {
            Some(rho) => sweep_u_lattice(&lattice, rho, grid, &opts)?,
            None => sweep_lattice(&lattice, grid, &opts)?,
        };
        let min_curve = curve_from_lattice(&lattice);
        let rate = rho.map_or(lattice.lambda, |r| r * lattice.lambda);
        let info = classify_case(&min_curve, rate)?;
        let model_error = if lattice.unit < 1.0 {
            grid_error_estimate(spec, rate)?
        } else {
            0.0
        };
        let (fit, fit_error) = match fit_sweep(&curve, model_error) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let name = label.replace([' ', '=', ','], "_");
        self.csv(&format!("sweep_{name}.csv"), |w, p| curve.write_csv(w, p))?;
        if let Some(f) = &fit {
            self.csv(&format!("fit_{name}.csv"), |w, p| f.write_csv(w, p))?;
        }
        self.sweeps.push(SweepRun {
            label: label.to_string(),
            lattice,
            curve,
            min_curve,
            info,
            kind,
            fit,
            fit_error,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    fn integer_regimes(&mut self) -> Result<(bool, String)> {
        let start = Instant::now();
        let runs = [
            (0.80, 0.1, 1e4, ScalingClass::Inv),
            (0.78, 1e2, 1e5, ScalingClass::Log),
            (0.82, 1e1, 1e4, ScalingClass::Log),
            (0.20, 0.1, 1e3, ScalingClass::Bounded),
        ];
        let mut ok = true;
        let mut parts = Vec::new();
        for (lambda, lo, hi, want) in runs {
            self.sweep(&format!("int lambda={lambda}"), &example(lambda)?, &log_grid(lo, hi, 10), ModelKind::Integer, None)?;
            let run = self.sweeps.last().expect("just pushed");
            ok &= run.class() == want && expected_class(&run.info, run.kind) == want && run.curve.failures.is_empty();
            parts.push(run.summary());
        }
        ok &= start.elapsed().as_secs_f64() < 600.0;
        Ok((ok, parts.join("; ")))
    }

    fn grid_regimes(&mut self) -> Result<(bool, String)> {
        let grid = Mode::Grid { delta: 0.05 };
        let runs = [
            (0.6, false, 1.0, 1e4, ScalingClass::InvSqrt),
            (0.6, true, 1.0, 1e5, ScalingClass::Log),
            (0.8, true, 0.1, 1e4, ScalingClass::Inv),
        ];
        let mut ok = true;
        let mut parts = Vec::new();
        for (lambda, linear, lo, hi, want) in runs {
            let mut spec = example(lambda)?.with_mode(grid);
            let (kind, tag) = if linear {
                spec = spec.with_integer_power_table();
                (ModelKind::GridPiecewiseLinear, "linear")
            } else {
                (ModelKind::GridConvex, "convex")
            };
            self.sweep(&format!("grid {tag} lambda={lambda}"), &spec, &log_grid(lo, hi, 5), kind, None)?;
            let run = self.sweeps.last().expect("just pushed");
            let pass = run.class() == want && expected_class(&run.info, run.kind) == want;
            ok &= pass;
            parts.push(format!("{} (want {want})", run.summary()));
        }
        Ok((ok, parts.join("; ")))
    }

    fn admission(&mut self) -> Result<(bool, String)> {
        let (rho, lambda) = (0.9, 0.8);
        let spec = example(lambda)?.with_admission(true);
        let lattice = spec.lattice()?;
        self.sweep(
            &format!("admission rho={rho} lambda={lambda}"),
            &spec,
            &log_grid(1e2, 1e6, 4),
            ModelKind::Admission,
            Some(rho),
        )?;
        let baseline = probabilistic_admission_baseline(&lattice, rho, &log_grid(0.1, 1e6, 4), &SweepOptions::default())?;
        self.csv("sweep_admission_baseline.csv", |w, p| baseline.write_csv(w, p))?;
        let run = self.sweeps.last().expect("just pushed");
        let target = rho * lambda;
        let short = run
            .curve
            .points
            .iter()
            .filter(|p| p.a_bar.unwrap_or(0.0) < target - 1e-6)
            .count();
        let dominated = run
            .curve
            .points
            .iter()
            .filter(|p| {
                baseline
                    .points
                    .iter()
                    .any(|b| dominates((b.p_bar, b.q_bar), (p.p_bar, p.q_bar), 1e-9))
            })
            .count();
        let want = ScalingClass::Log;
        let ok = run.class() == want
            && expected_class(&run.info, run.kind) == want
            && short == 0
            && dominated == 0
            && run.curve.failures.is_empty()
            && !run.curve.points.is_empty();
        Ok((
            ok,
            format!(
                "{}; {} points, {short} below the target, {dominated} dominated by the baseline",
                run.summary(),
                run.curve.points.len()
            ),
        ))
    }

    fn bound_soundness(&mut self) -> Result<(bool, String)> {
        let mut counts: BTreeMap<&'static str, [usize; 3]> = BTreeMap::new();
        let mut worst = f64::INFINITY;
        let mut sandwich_bad = 0;
        let mut rows = String::from("sweep,beta,bound,status,worst_slack,vacuous\n");
        for run in &self.sweeps {
            for (beta, policy, dist) in run.policies()? {
                let s1 = default_s1(&run.lattice, &dist);
                let mut reports: Vec<BoundReport> = vec![
                    verify_prop1(&run.lattice, &dist, &policy, s1),
                    verify_prop2(&run.lattice, &dist, &policy, &default_drift_horizons(&dist)),
                ];
                if run.info.case != Case::One {
                    reports.push(verify_lemma1(&run.lattice, &dist, &policy, &run.info, &run.min_curve, 0.05));
                }
                for r in &reports {
                    let slot = match r.status {
                        BoundStatus::Pass => 0,
                        BoundStatus::Fail => 1,
                        BoundStatus::Inapplicable => 2,
                    };
                    counts.entry(r.name).or_default()[slot] += 1;
                    if r.status != BoundStatus::Inapplicable {
                        worst = worst.min(r.worst_slack);
                    }
                    let _ = writeln!(
                        rows,
                        "{},{beta},{},{},{},{}",
                        run.label,
                        r.name,
                        r.status.as_str(),
                        r.worst_slack,
                        r.vacuous
                    );
                }
                let sw = gamma_dependent_lower_bound(&run.lattice, &dist, &policy, &run.min_curve);
                if !sw.holds() {
                    sandwich_bad += 1;
                }
                worst = worst.min(sw.p_bar - sw.expected_cost).min(sw.expected_cost - sw.c_mean);
            }
        }
        let mut bytes = format!("# {}\n", provenance("repro-paper bounds.csv")).into_bytes();
        bytes.extend(rows.into_bytes());
        self.artifacts.insert("bounds.csv".into(), bytes);
        let failed: usize = counts.values().map(|c| c[1]).sum();
        let applied: usize = counts.values().map(|c| c[0] + c[1]).sum();
        let tally: Vec<String> = counts
            .iter()
            .map(|(n, c)| format!("{n} {} pass/{} fail/{} n.a.", c[0], c[1], c[2]))
            .collect();
        Ok((
            failed == 0 && sandwich_bad == 0 && applied > 0 && worst >= -1e-9,
            format!("{}; sandwich failures {sandwich_bad}; worst slack {worst:.2e}", tally.join(", ")),
        ))
    }

    fn oracles(&mut self) -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let mut worst_gain = 0.0f64;
        let mut worst_curve = 0.0f64;
        let mut unsound = 0;
        let mut rows = String::from("instance,fades,s_max,q_max,beta,g_solver,g_oracle,curve_error\n");
        let instances = 60;
        for i in 0..instances {
            let (spec, beta, q_max) = random_instance(&mut rng)?;
            let lattice = spec.lattice()?;
            let price = drop_price(&lattice);
            let opts = SolverOptions { tol: 1e-12, service_price: price, ..SolverOptions::default() };
            let sol = solve_lattice(&lattice, Multipliers { beta, theta: None }, q_max, &opts, None)?;
            let g_oracle = monotone_oracle(&lattice, beta, price, q_max)?.0;
            worst_gain = worst_gain.max((sol.g_star - g_oracle).abs());

            let curve = min_power_curve(&spec)?;
            let env = PowerEnvelope::new(&lattice, 64);
            let mut err = 0.0f64;
            for k in 1..20 {
                let rate = curve.s_max() * k as f64 / 20.0;
                err = err.max((curve.eval(rate) - env.eval(rate)).abs());
                if curve.eval(rate) > env.best_feasible(rate) + 1e-9 {
                    unsound += 1;
                }
            }
            worst_curve = worst_curve.max(err);
            let _ = writeln!(
                rows,
                "{i},{},{},{q_max},{beta},{},{g_oracle},{err}",
                lattice.n_fades(),
                lattice.s_max,
                sol.g_star
            );
        }
        let mut bytes = format!("# {}\n", provenance("repro-paper oracles.csv")).into_bytes();
        bytes.extend(rows.into_bytes());
        self.artifacts.insert("oracles.csv".into(), bytes);
        Ok((
            worst_gain <= 1e-8 && worst_curve <= 1e-3 && unsound == 0,
            format!(
                "{instances} instances; max |g* - enumeration| {worst_gain:.1e}; max curve gap {worst_curve:.1e}; \
                 {unsound} rates where the curve exceeds a grid distribution"
            ),
        ))
    }

    fn invariants(&mut self) -> Result<(bool, String)> {
        let (mut n, mut non_monotone, mut residual_bad, mut flow_bad) = (0, 0, 0, 0);
        let mut worst_residual = 0.0f64;
        for run in &self.sweeps {
            for (_, policy, dist) in run.policies()? {
                n += 1;
                if !check_monotone(&policy).is_monotone() {
                    non_monotone += 1;
                }
                worst_residual = worst_residual.max(dist.residual);
                if dist.residual > 1e-10 {
                    residual_bad += 1;
                }
                let avg = crate::chain::averages(&run.lattice, &dist, &policy);
                let rate = avg.a_bar.unwrap_or(run.lattice.lambda);
                let allowed = 10.0 * dist.tail_mass * run.lattice.s_max_packets() + 1e-12;
                if (avg.s_bar - rate).abs() > allowed {
                    flow_bad += 1;
                }
            }
        }
        Ok((
            n > 0 && non_monotone == 0 && residual_bad == 0 && flow_bad == 0,
            format!(
                "{n} policies; {non_monotone} non-monotone; worst residual {worst_residual:.1e}; \
                 {flow_bad} flow-conservation violations"
            ),
        ))
    }

    fn simulator(&mut self) -> Result<(bool, String)> {
        let (horizon, burn_in) = (1_000_000, 100_000);
        let mut cases: Vec<(String, Lattice, Policy)> = Vec::new();

        let bern = ModelSpec {
            arrival: ArrivalSpec::Pmf { values: vec![0.7, 0.3] },
            fade: FadeLaw::single(1.0),
            power: PowerSpec::Example,
            s_max: 2,
            mode: Mode::Int,
            admission: false,
        }
        .lattice()?;
        cases.push(("bernoulli serve-one".into(), bern.clone(), Policy::serve_min(&bern, 1, 60)));
        for (label, beta) in [
            ("int lambda=0.8", 10.0),
            ("int lambda=0.78", 1e3),
            ("admission rho=0.9 lambda=0.8", 1e3),
            ("grid convex lambda=0.6", 1e2),
        ] {
            let run = self
                .sweeps
                .iter()
                .find(|r| r.label == label)
                .ok_or_else(|| Error::Shape(format!("sweep {label} has not run")))?;
            let point = run
                .curve
                .points
                .iter()
                .min_by(|a, b| (a.beta / beta).ln().abs().total_cmp(&(b.beta / beta).ln().abs()))
                .ok_or_else(|| Error::Shape(format!("sweep {label} is empty")))?;
            cases.push((format!("{label} beta={}", point.beta), run.lattice.clone(), point.policy.clone()));
        }

        let mut ok = true;
        let mut parts = Vec::new();
        for (k, (label, lattice, policy)) in cases.iter().enumerate() {
            let (dist, exact) = evaluate(lattice, policy)?;
            let est = simulate_lattice(lattice, policy, horizon, burn_in, SEED + k as u64)?;
            let zq = (est.q_bar - exact.q_bar).abs() / est.se.q_bar.max(f64::MIN_POSITIVE);
            let zp = (est.p_bar - exact.p_bar).abs() / est.se.p_bar.max(f64::MIN_POSITIVE);
            let little = est.little_gap(lattice, policy.admit.is_some());
            let pass = zq <= 3.0 && zp <= 3.0 && little <= 3.0 && dist.tail_mass < 1e-9;
            ok &= pass;
            parts.push(format!("{label}: Q {zq:.2} se, P {zp:.2} se, Little {little:.2} se"));
            self.csv(&format!("sim_{k}.csv"), |w, p| est.write_csv(w, p))?;
        }
        Ok((ok, parts.join("; ")))
    }
}

/// A small model with `q_max <= 4`, at most two fades and `S_max <= 2`.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Result<(ModelSpec, f64, usize)> {
    loop {
        let s_max = rng.gen_range(1..=2u32);
        let n_fades = rng.gen_range(1..=2usize);
        let a_max = rng.gen_range(1..=3usize);
        let weights: Vec<f64> = (0..=a_max).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let pmf: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let states: Vec<f64> = (0..n_fades).map(|_| rng.gen_range(0.2..2.0)).collect();
        let fw: Vec<f64> = (0..n_fades).map(|_| rng.gen_range(0.1..1.0)).collect();
        let ft: f64 = fw.iter().sum();
        let power = if rng.gen_bool(0.5) {
            PowerSpec::Example
        } else {
            let rows = (0..n_fades)
                .map(|_| {
                    let mut row = vec![0.0];
                    let mut inc = 0.0;
                    for _ in 0..s_max {
                        inc += rng.gen_range(0.1..2.0);
                        row.push(row.last().unwrap() + inc);
                    }
                    row
                })
                .collect();
            PowerSpec::Table { rows }
        };
        let spec = ModelSpec {
            arrival: ArrivalSpec::Pmf { values: pmf },
            fade: FadeLaw::new(states, fw.iter().map(|w| w / ft).collect()),
            power,
            s_max,
            mode: Mode::Int,
            admission: false,
        };
        if !validate(&spec).passed() || spec.lattice()?.ensure_stable().is_err() {
            continue;
        }
        let beta = 10f64.powf(rng.gen_range(-1.0..1.5));
        let q_max = rng.gen_range(1..=4usize);
        return Ok((spec, beta, q_max));
    }
}

/// Best `Q̄ + β P̄` over every deterministic policy on `{0..q_max}` whose
/// batch size is non-decreasing in the queue length, each evaluated from an
/// empty queue by [`average_cost_from_empty`].
pub fn monotone_oracle(lattice: &Lattice, beta: f64, price: f64, q_max: usize) -> Result<(f64, Policy)> {
    enumerate_policies(lattice, beta, price, q_max, true)
}

/// As [`monotone_oracle`], over every deterministic serving policy.
pub fn deterministic_oracle(lattice: &Lattice, beta: f64, price: f64, q_max: usize) -> Result<(f64, Policy)> {
    enumerate_policies(lattice, beta, price, q_max, false)
}

fn enumerate_policies(lattice: &Lattice, beta: f64, price: f64, q_max: usize, monotone: bool) -> Result<(f64, Policy)> {
    fn extend(prefix: &mut Vec<u32>, q_max: usize, cap: usize, monotone: bool, out: &mut Vec<Vec<u32>>) {
        let q = prefix.len();
        if q > q_max {
            out.push(prefix.clone());
            return;
        }
        let lo = if monotone { prefix.last().copied().unwrap_or(0) } else { 0 };
        for s in lo..=q.min(cap) as u32 {
            prefix.push(s);
            extend(prefix, q_max, cap, monotone, out);
            prefix.pop();
        }
    }
    let mut columns = Vec::new();
    extend(&mut Vec::new(), q_max, lattice.s_max, monotone, &mut columns);
    let n_h = lattice.n_fades();
    let mut best: Option<(f64, Policy)> = None;
    let mut index = vec![0usize; n_h];
    loop {
        let serve = (0..=q_max).map(|q| index.iter().map(|&c| columns[c][q]).collect()).collect();
        let policy = Policy { q_max, serve, admit: None };
        let g = average_cost_from_empty(lattice, &policy, beta, price);
        if best.as_ref().is_none_or(|b| g < b.0) {
            best = Some((g, policy));
        }
        let mut h = 0;
        while h < n_h {
            index[h] += 1;
            if index[h] < columns.len() {
                break;
            }
            index[h] = 0;
            h += 1;
        }
        if h == n_h {
            break;
        }
    }
    best.ok_or_else(|| Error::Shape("no policy to enumerate".into()))
}

/// Long-run `Q̄ + β P̄` of a small truncated chain started empty, from a dense
/// kernel built here and iterated as the lazy chain `(P + I)/2`, which has the
/// same stationary laws and no periodicity. Policies that strand the queue
/// above zero are scored like any other.
pub fn average_cost_from_empty(lattice: &Lattice, policy: &Policy, beta: f64, price: f64) -> f64 {
    let n = policy.q_max + 1;
    let mut kernel = vec![vec![0.0; n]; n];
    let mut stage = vec![0.0; n];
    for q in 0..n {
        stage[q] = q as f64 * lattice.unit;
        for (h, &ph) in lattice.fade_probs.iter().enumerate() {
            let s = (policy.serve[q][h] as usize).min(q).min(lattice.s_max);
            stage[q] += beta * ph * (lattice.power[h][s] - price * s as f64 * lattice.unit);
            for &(a, pa) in &lattice.arrivals {
                kernel[q][(q - s + a).min(policy.q_max)] += ph * pa;
            }
        }
    }
    let mut mu = vec![0.0; n];
    mu[0] = 1.0;
    for _ in 0..1_000_000 {
        let mut next: Vec<f64> = mu.iter().map(|m| 0.5 * m).collect();
        for (q, row) in kernel.iter().enumerate() {
            for (r, &p) in row.iter().enumerate() {
                next[r] += 0.5 * mu[q] * p;
            }
        }
        let change = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        mu = next;
        if change < 1e-16 {
            break;
        }
    }
    mu.iter().zip(&stage).map(|(m, c)| m * c).sum()
}

/// Every `(E S, E P)` reachable with per-fade batch distributions whose
/// probabilities are multiples of `1/steps`, and their lower convex hull.
pub struct PowerEnvelope {
    points: Vec<(f64, f64)>,
    hull: Vec<(f64, f64)>,
}

impl PowerEnvelope {
    pub fn new(lattice: &Lattice, steps: usize) -> Self {
        let per_fade: Vec<Vec<(f64, f64)>> = (0..lattice.n_fades())
            .map(|h| {
                let mut out = Vec::new();
                let mut counts = vec![0usize; lattice.s_max + 1];
                compositions(steps, 0, &mut counts, &mut |c| {
                    let (mut s, mut p) = (0.0, 0.0);
                    for (k, &n) in c.iter().enumerate() {
                        let w = n as f64 / steps as f64;
                        s += w * k as f64 * lattice.unit;
                        p += w * lattice.power[h][k];
                    }
                    out.push((s, p));
                });
                out
            })
            .collect();
        let mut points = vec![(0.0, 0.0)];
        for (h, pts) in per_fade.iter().enumerate() {
            let w = lattice.fade_probs[h];
            points = points
                .iter()
                .flat_map(|&(s0, p0)| pts.iter().map(move |&(s, p)| (s0 + w * s, p0 + w * p)))
                .collect();
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut hull: Vec<(f64, f64)> = Vec::new();
        for &pt in &points {
            while hull.len() >= 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                let cross = (b.0 - a.0) * (pt.1 - a.1) - (b.1 - a.1) * (pt.0 - a.0);
                if cross <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            if hull.last().is_none_or(|l| pt.0 > l.0) {
                hull.push(pt);
            }
        }
        PowerEnvelope { points, hull }
    }

    /// Hull value at `rate`, taking the cheapest point at or above it.
    pub fn eval(&self, rate: f64) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.hull.windows(2) {
            let ((s0, p0), (s1, p1)) = (w[0], w[1]);
            if s1 < rate {
                continue;
            }
            let at = if s0 >= rate { p0 } else { p0 + (p1 - p0) * (rate - s0) / (s1 - s0) };
            best = best.min(at);
        }
        best
    }

    /// Cheapest single grid point with mean at least `rate`.
    pub fn best_feasible(&self, rate: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.0 >= rate - 1e-12)
            .map(|p| p.1)
            .fold(f64::INFINITY, f64::min)
    }
}

fn compositions(left: usize, k: usize, counts: &mut Vec<usize>, emit: &mut impl FnMut(&[usize])) {
    if k + 1 == counts.len() {
        counts[k] = left;
        emit(counts);
        return;
    }
    for n in 0..=left {
        counts[k] = n;
        compositions(left - n, k + 1, counts, emit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_of_a_single_linear_fade() {
        let spec = ModelSpec {
            arrival: ArrivalSpec::Pmf { values: vec![0.5, 0.5] },
            fade: FadeLaw::single(1.0),
            power: PowerSpec::Table { rows: vec![vec![0.0, 1.0, 3.0]] },
            s_max: 2,
            mode: Mode::Int,
            admission: false,
        };
        let env = PowerEnvelope::new(&spec.lattice().unwrap(), 8);
        assert!((env.eval(0.5) - 0.5).abs() < 1e-12);
        assert!((env.eval(1.5) - 2.0).abs() < 1e-12);
        assert!((env.best_feasible(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monotone_oracle_counts_policies() {
        let spec = ModelSpec {
            arrival: ArrivalSpec::Pmf { values: vec![0.7, 0.3] },
            fade: FadeLaw::single(1.0),
            power: PowerSpec::Example,
            s_max: 1,
            mode: Mode::Int,
            admission: false,
        };
        let lat = spec.lattice().unwrap();
        // serve-one from q=1 is the only stable monotone choice worth having at β = 0
        let (g, pol) = monotone_oracle(&lat, 0.0, 0.0, 3).unwrap();
        assert_eq!(pol.serve, vec![vec![0], vec![1], vec![1], vec![1]]);
        let (_, avg) = evaluate(&lat, &pol).unwrap();
        assert!((g - avg.q_bar).abs() < 1e-12);
    }
}
