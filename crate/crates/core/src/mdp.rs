//! Lagrangian relaxation of the power-constrained delay problem.
//!
//! For a multiplier `β` (and `θ` for the admission-control variant) the
//! single-stage cost is `q + β P(h, s) - θ a`, and we minimize its long-run
//! average on the truncated state space `{0..q_max}`. Two solvers share one
//! Bellman backup: policy iteration with banded policy evaluation (default)
//! and relative value iteration. Sweeping `β` traces the tradeoff curve.

use std::io::Write;

use rayon::prelude::*;

use crate::chain::{self, queue_kernel, Averages, StationaryDist};
use crate::error::{Error, Result};
use crate::mincost::{curve_from_lattice, fmt};
use crate::model::{Lattice, ModelSpec};
use crate::numeric::Banded;

/// Deterministic stationary policy on lattice steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub q_max: usize,
    /// `serve[q][h]`: batch size in lattice steps, at most `min(q, S_max)`.
    pub serve: Vec<Vec<u32>>,
    /// `admit[q][r][h]` with `r` indexing `Lattice::arrivals`.
    pub admit: Option<Vec<Vec<Vec<u32>>>>,
}

impl Policy {
    pub fn from_fn(lattice: &Lattice, q_max: usize, f: impl Fn(usize, usize) -> usize) -> Self {
        let serve = (0..=q_max)
            .map(|q| {
                (0..lattice.n_fades())
                    .map(|h| f(q, h).min(q).min(lattice.s_max) as u32)
                    .collect()
            })
            .collect();
        Self {
            q_max,
            serve,
            admit: None,
        }
    }

    /// Serve `min(q, cap)` in every fade; `cap` in lattice steps.
    pub fn serve_min(lattice: &Lattice, cap: usize, q_max: usize) -> Self {
        Self::from_fn(lattice, q_max, |q, _| q.min(cap))
    }

    pub fn with_admit_all(mut self, lattice: &Lattice) -> Self {
        let row: Vec<Vec<u32>> = lattice
            .arrivals
            .iter()
            .map(|&(r, _)| vec![r as u32; lattice.n_fades()])
            .collect();
        self.admit = Some(vec![row; self.q_max + 1]);
        self
    }

    /// Same decisions on a larger (or smaller) truncation; states beyond the
    /// old boundary copy the boundary row.
    pub fn resized(&self, q_max: usize) -> Self {
        let pick = |q: usize| q.min(self.q_max);
        Self {
            q_max,
            serve: (0..=q_max).map(|q| self.serve[pick(q)].clone()).collect(),
            admit: self
                .admit
                .as_ref()
                .map(|a| (0..=q_max).map(|q| a[pick(q)].clone()).collect()),
        }
    }

    /// Batch size at any queue length, extending constantly past `q_max`.
    pub fn serve_at(&self, q: usize, h: usize) -> usize {
        (self.serve[q.min(self.q_max)][h] as usize).min(q)
    }

    pub fn admit_at(&self, q: usize, r_idx: usize, h: usize) -> Option<usize> {
        self.admit
            .as_ref()
            .map(|a| a[q.min(self.q_max)][r_idx][h] as usize)
    }

    /// Columns `q,h_index,s` (plus `r,a` per arrival value with admission), in
    /// lattice steps.
    pub fn write_csv<W: Write>(&self, lattice: &Lattice, out: W, provenance: &str) -> Result<()> {
        let mut w = crate::io::csv_writer(out, provenance)?;
        match &self.admit {
            None => {
                w.write_record(["q", "h_index", "s"])?;
                for (q, row) in self.serve.iter().enumerate() {
                    for (h, s) in row.iter().enumerate() {
                        w.write_record([q.to_string(), h.to_string(), s.to_string()])?;
                    }
                }
            }
            Some(admit) => {
                w.write_record(["q", "h_index", "s", "r", "a"])?;
                for (q, row) in self.serve.iter().enumerate() {
                    for (h, s) in row.iter().enumerate() {
                        for (ri, &(r, _)) in lattice.arrivals.iter().enumerate() {
                            w.write_record([
                                q.to_string(),
                                h.to_string(),
                                s.to_string(),
                                r.to_string(),
                                admit[q][ri][h].to_string(),
                            ])?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a policy table in any row order. Every `(q, h)` up to the largest
    /// `q` present must be covered.
    pub fn read_csv<R: std::io::Read>(lattice: &Lattice, input: R) -> Result<Self> {
        let mut rdr = crate::io::csv_reader(input);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (qc, hc, sc) = match (col("q"), col("h_index"), col("s")) {
            (Some(q), Some(h), Some(s)) => (q, h, s),
            _ => return Err(Error::Shape("policy CSV needs columns q, h_index, s".into())),
        };
        let (rc, ac) = (col("r"), col("a"));
        let admission = rc.is_some() && ac.is_some();
        let parse = |v: &str, what: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Shape(format!("bad {what} value `{v}`")))
        };
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let q = parse(&rec[qc], "q")?;
            let h = parse(&rec[hc], "h_index")?;
            let s = parse(&rec[sc], "s")?;
            let ra = match (rc, ac) {
                (Some(rc), Some(ac)) => Some((parse(&rec[rc], "r")?, parse(&rec[ac], "a")?)),
                _ => None,
            };
            rows.push((q, h, s, ra));
        }
        let q_max = rows
            .iter()
            .map(|r| r.0)
            .max()
            .ok_or_else(|| Error::Shape("empty policy CSV".into()))?;
        let n_h = lattice.n_fades();
        let mut serve: Vec<Vec<Option<u32>>> = vec![vec![None; n_h]; q_max + 1];
        let n_r = lattice.arrivals.len();
        let mut admit: Vec<Vec<Vec<Option<u32>>>> = vec![vec![vec![None; n_h]; n_r]; q_max + 1];
        for (q, h, s, ra) in rows {
            if h >= n_h {
                return Err(Error::Shape(format!("h_index {h} out of range")));
            }
            serve[q][h] = Some(s as u32);
            if let Some((r, a)) = ra {
                let ri = lattice
                    .arrivals
                    .iter()
                    .position(|&(v, _)| v == r)
                    .ok_or_else(|| Error::Shape(format!("arrival value {r} not in model support")))?;
                admit[q][ri][h] = Some(a as u32);
            }
        }
        let missing = || Error::Shape("policy CSV does not cover every (q, h)".into());
        let serve = serve
            .into_iter()
            .map(|row| row.into_iter().collect::<Option<Vec<_>>>())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(missing)?;
        let admit = if admission {
            Some(
                admit
                    .into_iter()
                    .map(|per_r| {
                        per_r
                            .into_iter()
                            .map(|row| row.into_iter().collect::<Option<Vec<_>>>())
                            .collect::<Option<Vec<_>>>()
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(missing)?,
            )
        } else {
            None
        };
        Ok(Self {
            q_max,
            serve,
            admit,
        })
    }
}

/// Result of [`check_monotone`]: queue lengths where `s(q, h) < s(q - 1, h)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonotoneReport {
    pub violations: Vec<Vec<usize>>,
}

impl MonotoneReport {
    pub fn is_monotone(&self) -> bool {
        self.violations.iter().all(|v| v.is_empty())
    }
}

pub fn check_monotone(policy: &Policy) -> MonotoneReport {
    let n_h = policy.serve.first().map_or(0, |r| r.len());
    let violations = (0..n_h)
        .map(|h| {
            (1..policy.serve.len())
                .filter(|&q| policy.serve[q][h] < policy.serve[q - 1][h])
                .collect()
        })
        .collect();
    MonotoneReport { violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    #[default]
    PolicyIteration,
    RelativeValueIteration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Span tolerance on `T v - v`.
    pub tol: f64,
    pub max_iter: usize,
    pub method: SolverMethod,
    /// Retry with relative value iteration when policy evaluation is singular.
    pub fallback: bool,
    /// Watts per packet credited for each served packet and charged for each
    /// admitted one. Stable untruncated policies all serve what they admit, so
    /// their ranking is unchanged, while packets lost at the truncation
    /// boundary lose the credit. `g_star` includes the shift.
    pub service_price: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 2_000_000,
            method: SolverMethod::PolicyIteration,
            fallback: true,
            service_price: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MdpSolution {
    /// Optimal average Lagrangian cost `Q + β P - θ A`.
    pub g_star: f64,
    /// Relative value per queue state (fade marginalized), `bias[0] = 0`.
    pub bias: Vec<f64>,
    pub policy: Policy,
    pub beta: f64,
    pub theta: Option<f64>,
    /// Final `span(T v - v)`, scaled by `max(1, span(v))`.
    pub residual: f64,
    pub iterations: usize,
}

/// Largest marginal power of one more packet, over fades and batch sizes.
/// As a [`SolverOptions::service_price`] it makes losing a packet at the
/// truncation boundary at least as expensive as serving it, which matters on
/// truncations small enough for the boundary to shape the optimum.
pub fn drop_price(lattice: &Lattice) -> f64 {
    let steepest = lattice
        .power
        .iter()
        .flat_map(|row| row.windows(2).map(|w| w[1] - w[0]))
        .fold(0.0, f64::max);
    steepest / lattice.unit
}

struct Bellman<'a> {
    lattice: &'a Lattice,
    beta: f64,
    theta: Option<f64>,
    q_max: usize,
    /// `β · service_price` per lattice step
    price: f64,
}

const TIE_REL: f64 = 1e-11;
const STALL_RESIDUAL: f64 = 1e-12;

#[inline]
fn tie_eps(x: f64) -> f64 {
    TIE_REL * (1.0 + x.abs())
}

impl Bellman<'_> {
    /// `E_A v(min(y + A, q_max))` for each post-service level `y`, and with
    /// admission the per-arrival best admitted count.
    fn continuation(&self, v: &[f64]) -> (Vec<f64>, Option<Vec<Vec<u32>>>) {
        let q_max = self.q_max;
        let arr = &self.lattice.arrivals;
        let mut w = vec![0.0; q_max + 1];
        match self.theta {
            None => {
                for (y, wy) in w.iter_mut().enumerate() {
                    *wy = arr.iter().map(|&(a, p)| p * v[(y + a).min(q_max)]).sum();
                }
                (w, None)
            }
            Some(theta) => {
                let per_step = theta * self.lattice.unit - self.price;
                let mut best_a = vec![vec![0u32; arr.len()]; q_max + 1];
                for y in 0..=q_max {
                    let mut acc = 0.0;
                    for (ri, &(r, p)) in arr.iter().enumerate() {
                        let mut best = (0usize, v[y]);
                        for a in 1..=r {
                            let val = -per_step * a as f64 + v[(y + a).min(q_max)];
                            if val < best.1 - tie_eps(best.1) {
                                best = (a, val);
                            }
                        }
                        best_a[y][ri] = best.0 as u32;
                        acc += p * best.1;
                    }
                    w[y] = acc;
                }
                (w, Some(best_a))
            }
        }
    }

    /// One backup. Returns `T v` and the greedy policy; with `incumbent`, an
    /// incumbent action is kept unless another is better beyond the tie
    /// tolerance, otherwise ties go to the smallest batch.
    fn backup(&self, v: &[f64], incumbent: Option<&Policy>) -> (Vec<f64>, Policy) {
        let l = self.lattice;
        let (w, best_a) = self.continuation(v);
        let mut tv = vec![0.0; self.q_max + 1];
        let mut serve = vec![vec![0u32; l.n_fades()]; self.q_max + 1];
        for q in 0..=self.q_max {
            let mut acc = q as f64 * l.unit;
            for (h, &ph) in l.fade_probs.iter().enumerate() {
                let cap = q.min(l.s_max);
                let row = &l.power[h];
                let mut best = (0usize, self.beta * row[0] + w[q]);
                for s in 1..=cap {
                    let val = self.beta * row[s] - self.price * s as f64 + w[q - s];
                    if val < best.1 - tie_eps(best.1) {
                        best = (s, val);
                    }
                }
                if let Some(inc) = incumbent {
                    let s = inc.serve[q][h] as usize;
                    let val = self.beta * row[s] - self.price * s as f64 + w[q - s];
                    if val <= best.1 + tie_eps(best.1) {
                        best = (s, val);
                    }
                }
                serve[q][h] = best.0 as u32;
                acc += ph * best.1;
            }
            tv[q] = acc;
        }
        let admit = best_a.map(|best_a| {
            (0..=self.q_max)
                .map(|q| {
                    (0..l.arrivals.len())
                        .map(|ri| {
                            (0..l.n_fades())
                                .map(|h| best_a[q - serve[q][h] as usize][ri])
                                .collect()
                        })
                        .collect()
                })
                .collect()
        });
        (
            tv,
            Policy {
                q_max: self.q_max,
                serve,
                admit,
            },
        )
    }

    fn stage_costs(&self, policy: &Policy) -> Vec<f64> {
        let l = self.lattice;
        (0..=self.q_max)
            .map(|q| {
                let mut c = q as f64 * l.unit;
                for (h, &ph) in l.fade_probs.iter().enumerate() {
                    let s = policy.serve[q][h] as usize;
                    c += ph * (self.beta * l.power[h][s] - self.price * s as f64);
                    if let (Some(theta), Some(admit)) = (self.theta, &policy.admit) {
                        for (ri, &(_, pr)) in l.arrivals.iter().enumerate() {
                            c -= ph * pr * (theta * l.unit - self.price) * admit[q][ri][h] as f64;
                        }
                    }
                }
                c
            })
            .collect()
    }

    /// Average cost and bias of a fixed policy, `bias[0] = 0`.
    fn evaluate(&self, policy: &Policy) -> Result<(f64, Vec<f64>)> {
        let kernel = queue_kernel(self.lattice, policy)?;
        let cost = self.stage_costs(policy);
        let q_max = self.q_max;
        if q_max == 0 {
            return Ok((cost[0], vec![0.0]));
        }
        let mut m = Banded::zeros(q_max, kernel.down, kernel.up);
        for i in 1..=q_max {
            m.add(i - 1, i - 1, 1.0);
            for (j, p) in kernel.rows[i].iter() {
                if j >= 1 {
                    m.add(i - 1, j - 1, -p);
                }
            }
        }
        let lu = m.factor()?;
        let x = lu.solve(&cost[1..]);
        let y = lu.solve(&vec![1.0; q_max]);
        let (mut num, mut den) = (cost[0], 1.0);
        for (j, p) in kernel.rows[0].iter() {
            if j >= 1 {
                num += p * x[j - 1];
                den += p * y[j - 1];
            }
        }
        let g = num / den;
        let mut bias = Vec::with_capacity(q_max + 1);
        bias.push(0.0);
        bias.extend(x.iter().zip(&y).map(|(xi, yi)| xi - g * yi));
        Ok((g, bias))
    }
}

fn span(xs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    hi - lo
}

fn scaled_residual(tv: &[f64], v: &[f64]) -> f64 {
    let s = span(tv.iter().zip(v).map(|(a, b)| a - b));
    s / span(v.iter().copied()).max(1.0)
}

/// Multipliers for one Lagrangian solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Multipliers {
    /// packets per watt
    pub beta: f64,
    /// admission reward per packet; `Some` selects the admission-control model
    pub theta: Option<f64>,
}

/// Solves the Lagrangian MDP on `{0..q_max}` for a compiled lattice. Unlike
/// [`solve_mdp`] any positive truncation is accepted.
pub fn solve_lattice(
    lattice: &Lattice,
    mult: Multipliers,
    q_max: usize,
    opts: &SolverOptions,
    warm: Option<&Policy>,
) -> Result<MdpSolution> {
    lattice.ensure_stable()?;
    if !(mult.beta >= 0.0) {
        return Err(Error::param("beta", format!("{} is negative", mult.beta)));
    }
    if let Some(theta) = mult.theta {
        if !(theta >= 0.0) {
            return Err(Error::param("theta", format!("{theta} is negative")));
        }
    }
    if q_max == 0 {
        return Err(Error::param("q_max", "must be positive"));
    }
    let bell = Bellman {
        lattice,
        beta: mult.beta,
        theta: mult.theta,
        q_max,
        price: mult.beta * opts.service_price * lattice.unit,
    };
    match opts.method {
        SolverMethod::PolicyIteration => match policy_iteration(&bell, opts, warm) {
            Err(Error::Singular(_)) if opts.fallback => relative_value_iteration(&bell, opts, None),
            other => other,
        },
        SolverMethod::RelativeValueIteration => relative_value_iteration(&bell, opts, None),
    }
}

fn initial_policy(bell: &Bellman, warm: Option<&Policy>) -> Policy {
    let l = bell.lattice;
    let mut p = match warm {
        Some(w) => w.resized(bell.q_max),
        None => Policy::serve_min(l, l.s_max, bell.q_max),
    };
    match bell.theta {
        Some(_) if p.admit.is_none() => p = p.with_admit_all(l),
        None => p.admit = None,
        _ => {}
    }
    p
}

fn policy_iteration(bell: &Bellman, opts: &SolverOptions, warm: Option<&Policy>) -> Result<MdpSolution> {
    let mut policy = initial_policy(bell, warm);
    let (mut g, mut bias) = match bell.evaluate(&policy) {
        Ok(gb) => gb,
        Err(Error::Singular(_)) if warm.is_some() => {
            policy = initial_policy(bell, None);
            bell.evaluate(&policy)?
        }
        Err(e) => return Err(e),
    };
    let cap = opts.max_iter.min(1_000);
    for it in 1..=cap {
        let (tv, next) = bell.backup(&bias, Some(&policy));
        // ties the incumbent rule cannot see (admission) may flip by
        // round-off; a Bellman residual at that level is converged
        if next == policy || scaled_residual(&tv, &bias) <= STALL_RESIDUAL {
            // final extraction with the plain smallest-batch tie rule
            let (tv, clean) = bell.backup(&bias, None);
            let residual = scaled_residual(&tv, &bias);
            if clean != policy {
                if let Ok((g2, b2)) = bell.evaluate(&clean) {
                    if g2 <= g + opts.tol * g.abs().max(1.0) {
                        let (tv2, _) = bell.backup(&b2, None);
                        return Ok(MdpSolution {
                            g_star: g2,
                            residual: scaled_residual(&tv2, &b2),
                            bias: b2,
                            policy: clean,
                            beta: bell.beta,
                            theta: bell.theta,
                            iterations: it,
                        });
                    }
                }
            }
            return Ok(MdpSolution {
                g_star: g,
                bias,
                policy,
                beta: bell.beta,
                theta: bell.theta,
                residual,
                iterations: it,
            });
        }
        policy = next;
        (g, bias) = match bell.evaluate(&policy) {
            Ok(gb) => gb,
            // an improvement step produced a policy with a closed class
            // away from 0; finish by value iteration from the last bias
            Err(Error::Singular(_)) => return finish_by_rvi(bell, opts, bias),
            Err(e) => return Err(e),
        };
    }
    let (tv, _) = bell.backup(&bias, None);
    Err(Error::NotConverged {
        iterations: cap,
        residual: scaled_residual(&tv, &bias),
    })
}

fn finish_by_rvi(bell: &Bellman, opts: &SolverOptions, bias: Vec<f64>) -> Result<MdpSolution> {
    let rvi = relative_value_iteration(bell, opts, Some(bias))?;
    // exact gain and bias of the greedy policy when it is unichain
    match bell.evaluate(&rvi.policy) {
        Ok((g, b)) => {
            let (tv, _) = bell.backup(&b, None);
            let residual = scaled_residual(&tv, &b);
            if residual <= rvi.residual {
                return Ok(MdpSolution {
                    g_star: g,
                    bias: b,
                    residual,
                    ..rvi
                });
            }
            Ok(rvi)
        }
        Err(_) => Ok(rvi),
    }
}

fn relative_value_iteration(bell: &Bellman, opts: &SolverOptions, start: Option<Vec<f64>>) -> Result<MdpSolution> {
    // aperiodicity transform: v <- v + τ (T v - v), renormalized at state 0
    const TAU: f64 = 0.5;
    let mut v = start.unwrap_or_else(|| vec![0.0; bell.q_max + 1]);
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let (tv, policy) = bell.backup(&v, None);
        let diff_span = span(tv.iter().zip(&v).map(|(a, b)| a - b));
        residual = diff_span / span(v.iter().copied()).max(1.0);
        if residual <= opts.tol {
            let (lo, hi) = tv.iter().zip(&v).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
                (lo.min(a - b), hi.max(a - b))
            });
            let g = 0.5 * (lo + hi);
            return Ok(MdpSolution {
                g_star: g,
                bias: v,
                policy,
                beta: bell.beta,
                theta: bell.theta,
                residual,
                iterations: it,
            });
        }
        let base = v[0] + TAU * (tv[0] - v[0]);
        for (vi, ti) in v.iter_mut().zip(&tv) {
            *vi += TAU * (ti - *vi);
            *vi -= base;
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        residual,
    })
}

fn check_truncation(lattice: &Lattice, q_max: usize) -> Result<()> {
    let floor = 10 * lattice.a_max().max(1);
    if q_max < floor {
        return Err(Error::param(
            "q_max",
            format!("{q_max} is below 10 * A_max = {floor}"),
        ));
    }
    Ok(())
}

/// Solves the plain (no admission) Lagrangian MDP for `β`, with boundary
/// losses priced at [`drop_price`].
pub fn solve_mdp(spec: &ModelSpec, beta: f64, q_max: usize, tol: f64) -> Result<MdpSolution> {
    let lattice = spec.lattice()?;
    check_truncation(&lattice, q_max)?;
    let opts = SolverOptions {
        tol,
        service_price: drop_price(&lattice),
        ..SolverOptions::default()
    };
    solve_lattice(&lattice, Multipliers { beta, theta: None }, q_max, &opts, None)
}

/// Solves the admission-control MDP with cost `q + β P - θ a`, with boundary
/// losses priced at [`drop_price`].
pub fn solve_mdp_u(
    spec: &ModelSpec,
    beta: f64,
    theta: f64,
    q_max: usize,
    tol: f64,
) -> Result<MdpSolution> {
    let lattice = spec.lattice()?;
    check_truncation(&lattice, q_max)?;
    let opts = SolverOptions {
        tol,
        service_price: drop_price(&lattice),
        ..SolverOptions::default()
    };
    solve_lattice(
        &lattice,
        Multipliers {
            beta,
            theta: Some(theta),
        },
        q_max,
        &opts,
        None,
    )
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Initial truncation in lattice steps (raised to `10 * A_max` if smaller).
    pub q_max: usize,
    pub solver: SolverOptions,
    /// Escalate `q_max` until the boundary-band mass falls below this.
    pub tail_ceiling: f64,
    pub q_max_cap: usize,
    /// Stop the `θ` bisection once `Ā` is within this of the target.
    pub theta_tol: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            q_max: 64,
            solver: SolverOptions::default(),
            tail_ceiling: 1e-10,
            q_max_cap: 1 << 17,
            theta_tol: 1e-6,
        }
    }
}

/// One solved multiplier on a tradeoff curve.
#[derive(Debug, Clone)]
pub struct TradeoffPoint {
    pub beta: f64,
    pub theta: Option<f64>,
    pub p_bar: f64,
    pub q_bar: f64,
    pub s_bar: f64,
    pub a_bar: Option<f64>,
    /// `p_bar - c(rate)` against the curve of the model's own lattice.
    pub v: f64,
    pub tail_mass: f64,
    pub q_max: usize,
    /// Estimated truncation error on `q_bar` (packets) and `p_bar` (watts).
    pub q_err: f64,
    pub p_err: f64,
    pub g_star: f64,
    pub residual: f64,
    pub flags: Vec<String>,
    pub policy: Policy,
    pub dist: StationaryDist,
    /// Time-sharing partner for admission points: the averages above are
    /// `(1 - w)` of `policy` plus `w` of the partner, which admits less.
    pub mix: Option<(f64, Policy)>,
}

impl TradeoffPoint {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TradeoffCurve {
    pub points: Vec<TradeoffPoint>,
    /// Multipliers whose solve failed, with the reason.
    pub failures: Vec<(f64, String)>,
    /// Reference power `c(rate)` used for `v`.
    pub c_ref: f64,
}

impl TradeoffCurve {
    pub fn write_csv<W: Write>(&self, out: W, provenance: &str) -> Result<()> {
        let mut w = crate::io::csv_writer(out, provenance)?;
        w.write_record([
            "beta", "theta", "p_bar", "q_bar", "s_bar", "a_bar", "v", "tail_mass", "q_max", "mix_weight",
            "flags",
        ])?;
        let opt = |x: Option<f64>| x.map(fmt).unwrap_or_default();
        for p in &self.points {
            w.write_record([
                fmt(p.beta),
                opt(p.theta),
                fmt(p.p_bar),
                fmt(p.q_bar),
                fmt(p.s_bar),
                opt(p.a_bar),
                fmt(p.v),
                fmt(p.tail_mass),
                p.q_max.to_string(),
                p.mix.as_ref().map(|m| fmt(m.0)).unwrap_or_default(),
                p.flags.join("|"),
            ])?;
        }
        for (beta, reason) in &self.failures {
            w.write_record([
                fmt(*beta),
                String::new(),
                "NaN".into(),
                "NaN".into(),
                "NaN".into(),
                String::new(),
                "NaN".into(),
                "NaN".into(),
                "0".into(),
                String::new(),
                format!("error:{reason}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `(V, Q̄)` pairs of clean points, sorted by decreasing `V`.
    pub fn v_q_pairs(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.is_clean())
            .map(|p| (p.v, p.q_bar))
            .collect();
        out.sort_by(|a, b| b.0.total_cmp(&a.0));
        out
    }
}

/// Truncation error estimate from the geometric decay of the stationary tail.
fn truncation_error(lattice: &Lattice, dist: &StationaryDist) -> (f64, f64) {
    let n = dist.pi.len();
    let w = lattice.a_max().max(1);
    if n < 3 * w {
        return (f64::INFINITY, f64::INFINITY);
    }
    let band = |lo: usize, hi: usize| dist.pi[lo..hi].iter().sum::<f64>();
    let b0 = band(n - w, n);
    let b1 = band(n - 2 * w, n - w);
    let ratio = if b1 > 0.0 { (b0 / b1).min(0.999) } else { 0.0 };
    let beyond = b0 / (1.0 - ratio);
    let q_scale = (n as f64 + w as f64 / (1.0 - ratio)) * lattice.unit;
    let p_max = lattice
        .power
        .iter()
        .map(|r| r[lattice.s_max])
        .fold(0.0, f64::max);
    (2.0 * beyond * q_scale, 2.0 * beyond * p_max)
}

struct PointSolve {
    sol: MdpSolution,
    dist: StationaryDist,
    avg: Averages,
    q_max: usize,
    capped: bool,
}

/// Solves on `{0..2 q_max}` and keeps the policy on `{0..q_max}`; the upper
/// half absorbs the clamping artifacts of the truncation.
///
/// Served packets are credited at the slope of `c` at `rate`; without the
/// credit, dropping arrivals at the boundary saves about `β c(λ)` per slot and
/// beats every honest policy once that exceeds `q_max`.
fn solve_escalating(
    lattice: &Lattice,
    mult: Multipliers,
    rate: f64,
    opts: &SweepOptions,
    warm: Option<&Policy>,
) -> Result<PointSolve> {
    let mut q_max = opts.q_max.max(10 * lattice.a_max().max(1));
    let mut warm = warm.cloned();
    let solver = SolverOptions {
        fallback: false,
        service_price: curve_from_lattice(lattice).subgradient(rate),
        ..opts.solver
    };
    loop {
        let capped = q_max * 2 > opts.q_max_cap;
        let solved = solve_lattice(lattice, mult, 2 * q_max, &solver, warm.as_ref()).and_then(|sol| {
            let kept = sol.policy.resized(q_max);
            chain::evaluate(lattice, &kept).map(|(d, a)| (sol, kept, d, a))
        });
        let (mut sol, kept, dist, avg) = match solved {
            Ok(v) => v,
            Err(Error::Reducible { .. } | Error::Singular(_) | Error::NotConverged { .. }) if !capped => {
                warm = None;
                q_max *= 2;
                continue;
            }
            Err(e) => return Err(e),
        };
        let over = dist.tail_mass >= opts.tail_ceiling;
        if !over || capped {
            sol.bias.truncate(q_max + 1);
            sol.policy = kept;
            return Ok(PointSolve {
                sol,
                dist,
                avg,
                q_max,
                capped: capped && over,
            });
        }
        warm = Some(sol.policy);
        q_max *= 2;
    }
}

/// Solves each multiplier in order, warm-starting from the previous one.
fn solve_chunk<T>(
    betas: &[f64],
    mut solve: impl FnMut(f64, Option<&Policy>) -> Result<T>,
    policy_of: impl Fn(&T) -> &Policy,
) -> Vec<(f64, Result<T>)> {
    let mut out: Vec<(f64, Result<T>)> = Vec::with_capacity(betas.len());
    for &beta in betas {
        let warm = out.iter().rev().find_map(|(_, r)| r.as_ref().ok().map(&policy_of));
        let r = solve(beta, warm);
        out.push((beta, r));
    }
    out
}

/// Splits the grid into one contiguous chunk per worker.
fn chunks(grid: &[f64]) -> Vec<&[f64]> {
    let n = rayon::current_num_threads().max(1);
    let size = grid.len().div_ceil(n).max(1);
    grid.chunks(size).collect()
}

fn make_point(lattice: &Lattice, ps: PointSolve, c_ref: f64, opts: &SweepOptions) -> TradeoffPoint {
    let (q_err, p_err) = truncation_error(lattice, &ps.dist);
    let mut flags = Vec::new();
    if ps.capped {
        flags.push("tail".to_string());
    }
    if ps.sol.residual > opts.solver.tol {
        flags.push("residual".to_string());
    }
    TradeoffPoint {
        beta: ps.sol.beta,
        theta: ps.sol.theta,
        p_bar: ps.avg.p_bar,
        q_bar: ps.avg.q_bar,
        s_bar: ps.avg.s_bar,
        a_bar: ps.avg.a_bar,
        v: ps.avg.p_bar - c_ref,
        tail_mass: ps.dist.tail_mass,
        q_max: ps.q_max,
        q_err,
        p_err,
        g_star: ps.avg.q_bar + ps.sol.beta * ps.avg.p_bar - ps.sol.theta.unwrap_or(0.0) * ps.avg.a_bar.unwrap_or(0.0),
        residual: ps.sol.residual,
        flags,
        policy: ps.sol.policy,
        dist: ps.dist,
        mix: None,
    }
}

/// Blends `hi` (admits at least `target`) with `lo` (admits less) so that
/// the admitted rate is exactly `target`. Both are optimal at the critical
/// `θ`, so the blend is optimal for the constrained problem.
fn mix_points(lattice: &Lattice, hi: PointSolve, lo: PointSolve, target: f64, c_ref: f64, opts: &SweepOptions) -> TradeoffPoint {
    let a_hi = hi.avg.a_bar.unwrap_or(0.0);
    let a_lo = lo.avg.a_bar.unwrap_or(0.0);
    let w = ((a_hi - target) / (a_hi - a_lo)).clamp(0.0, 1.0);
    let lo_point = make_point(lattice, lo, c_ref, opts);
    let mut p = make_point(lattice, hi, c_ref, opts);
    let blend = |x: f64, y: f64| (1.0 - w) * x + w * y;
    p.p_bar = blend(p.p_bar, lo_point.p_bar);
    p.q_bar = blend(p.q_bar, lo_point.q_bar);
    p.s_bar = blend(p.s_bar, lo_point.s_bar);
    p.a_bar = Some(blend(a_hi, a_lo));
    p.v = p.p_bar - c_ref;
    p.tail_mass = p.tail_mass.max(lo_point.tail_mass);
    p.q_max = p.q_max.max(lo_point.q_max);
    p.q_err = blend(p.q_err, lo_point.q_err);
    p.p_err = blend(p.p_err, lo_point.p_err);
    p.g_star = p.q_bar + p.beta * p.p_bar - p.theta.unwrap_or(0.0) * target;
    p.residual = p.residual.max(lo_point.residual);
    for f in lo_point.flags {
        if !p.flags.contains(&f) {
            p.flags.push(f);
        }
    }
    p.mix = Some((w, lo_point.policy));
    p
}

/// Drops points dominated in `(P̄, Q̄)` and orders the rest by `β`.
pub fn pareto_filter(mut points: Vec<TradeoffPoint>) -> Vec<TradeoffPoint> {
    let tol = |x: f64| 1e-12 * x.abs().max(1.0);
    let dominated = |a: &TradeoffPoint, b: &TradeoffPoint| {
        b.p_bar <= a.p_bar + tol(a.p_bar)
            && b.q_bar <= a.q_bar + tol(a.q_bar)
            && (b.p_bar < a.p_bar - tol(a.p_bar) || b.q_bar < a.q_bar - tol(a.q_bar))
    };
    let keep: Vec<bool> = points
        .iter()
        .map(|a| !points.iter().any(|b| dominated(a, b)))
        .collect();
    let mut i = 0;
    points.retain(|_| {
        i += 1;
        keep[i - 1]
    });
    points.sort_by(|a, b| a.beta.total_cmp(&b.beta));
    points
}

fn check_grid(beta_grid: &[f64]) -> Result<()> {
    if beta_grid.is_empty() {
        return Err(Error::param("beta_grid", "empty"));
    }
    if beta_grid.windows(2).any(|w| w[1] < w[0]) || beta_grid.iter().any(|b| !(*b >= 0.0)) {
        return Err(Error::param("beta_grid", "must be non-negative and ascending"));
    }
    Ok(())
}

/// Traces `(P̄, Q̄)` over a `β` grid, escalating `q_max` per point.
pub fn sweep_beta(spec: &ModelSpec, beta_grid: &[f64], opts: &SweepOptions) -> Result<TradeoffCurve> {
    sweep_lattice(&spec.lattice()?, beta_grid, opts)
}

pub fn sweep_lattice(lattice: &Lattice, beta_grid: &[f64], opts: &SweepOptions) -> Result<TradeoffCurve> {
    check_grid(beta_grid)?;
    lattice.ensure_stable()?;
    let c_ref = curve_from_lattice(lattice).eval(lattice.lambda);
    let results: Vec<(f64, Result<PointSolve>)> = chunks(beta_grid)
        .par_iter()
        .flat_map_iter(|chunk| {
            solve_chunk(
                chunk,
                |beta, warm| solve_escalating(lattice, Multipliers { beta, theta: None }, lattice.lambda, opts, warm),
                |ps: &PointSolve| &ps.sol.policy,
            )
        })
        .collect();
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (beta, r) in results {
        match r {
            Ok(ps) => points.push(make_point(lattice, ps, c_ref, opts)),
            Err(e) => failures.push((beta, e.to_string())),
        }
    }
    Ok(TradeoffCurve {
        points: pareto_filter(points),
        failures,
        c_ref,
    })
}

/// For one `β`, the smallest `θ` (to bisection precision) whose optimal
/// policy admits at least `target` packets per slot.
fn calibrate_theta(
    lattice: &Lattice,
    beta: f64,
    target: f64,
    opts: &SweepOptions,
    warm: Option<&Policy>,
) -> Result<Calibrated> {
    let solve = |theta: f64, warm: Option<&Policy>| {
        solve_escalating(
            lattice,
            Multipliers {
                beta,
                theta: Some(theta),
            },
            target,
            opts,
            warm,
        )
    };
    let admitted = |ps: &PointSolve| ps.avg.a_bar.unwrap_or(0.0);

    let mut lo = 0.0;
    let mut lo_sol = None;
    let mut hi = 1.0;
    let mut hi_sol = solve(hi, warm)?;
    let mut guard = 0;
    while admitted(&hi_sol) < target {
        lo = hi;
        hi *= 2.0;
        let next = solve(hi, Some(&hi_sol.sol.policy))?;
        lo_sol = Some(std::mem::replace(&mut hi_sol, next));
        guard += 1;
        if guard > 60 {
            return Ok(Calibrated { hi: hi_sol, lo: None, ok: false });
        }
    }
    for _ in 0..100 {
        if admitted(&hi_sol) - target <= opts.theta_tol || hi - lo <= 1e-12 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let sol = solve(mid, Some(&hi_sol.sol.policy))?;
        if admitted(&sol) >= target {
            hi = mid;
            hi_sol = sol;
        } else {
            lo = mid;
            lo_sol = Some(sol);
        }
    }
    if admitted(&hi_sol) - target <= opts.theta_tol {
        lo_sol = None;
    } else if lo_sol.is_none() {
        lo_sol = Some(solve(lo, Some(&hi_sol.sol.policy))?);
    }
    Ok(Calibrated { hi: hi_sol, lo: lo_sol, ok: true })
}

struct Calibrated {
    hi: PointSolve,
    lo: Option<PointSolve>,
    ok: bool,
}

/// Admission-control sweep: per `β`, `θ` is bisected to the smallest value
/// with `Ā >= ρλ`. When the admitted rate jumps past `ρλ` at that `θ`, the
/// point time-shares the two policies on either side of the jump (see
/// [`TradeoffPoint::mix`]). `v` is measured against `c(ρλ)`.
pub fn sweep_u(spec: &ModelSpec, rho: f64, beta_grid: &[f64], opts: &SweepOptions) -> Result<TradeoffCurve> {
    sweep_u_lattice(&spec.lattice()?, rho, beta_grid, opts)
}

pub fn sweep_u_lattice(
    lattice: &Lattice,
    rho: f64,
    beta_grid: &[f64],
    opts: &SweepOptions,
) -> Result<TradeoffCurve> {
    check_grid(beta_grid)?;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param("rho", format!("{rho} not in (0, 1]")));
    }
    lattice.ensure_stable()?;
    let target = rho * lattice.lambda;
    let c_ref = curve_from_lattice(lattice).eval(target);
    let results: Vec<(f64, Result<Calibrated>)> = chunks(beta_grid)
        .par_iter()
        .flat_map_iter(|chunk| {
            solve_chunk(
                chunk,
                |beta, warm| calibrate_theta(lattice, beta, target, opts, warm),
                |r: &Calibrated| &r.hi.sol.policy,
            )
        })
        .collect();
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (beta, r) in results {
        match r {
            Ok(cal) => {
                let mut p = match cal.lo {
                    Some(lo) => mix_points(lattice, cal.hi, lo, target, c_ref, opts),
                    None => make_point(lattice, cal.hi, c_ref, opts),
                };
                if !cal.ok {
                    p.flags.push("theta".into());
                }
                points.push(p);
            }
            Err(e) => failures.push((beta, e.to_string())),
        }
    }
    Ok(TradeoffCurve {
        points: pareto_filter(points),
        failures,
        c_ref,
    })
}

/// Reference policy family for the admission model: drop each packet
/// independently with probability `1 - ρ`, then serve optimally for the
/// thinned arrivals. `v` is measured against `c(ρλ)`.
pub fn probabilistic_admission_baseline(
    lattice: &Lattice,
    rho: f64,
    beta_grid: &[f64],
    opts: &SweepOptions,
) -> Result<TradeoffCurve> {
    sweep_lattice(&lattice.thinned(rho), beta_grid, opts)
}

/// `a` dominates `b` in `(P̄, Q̄)`: no worse in both, strictly better in one
/// by more than `tol` (relative).
pub fn dominates(a: (f64, f64), b: (f64, f64), tol: f64) -> bool {
    let le = |x: f64, y: f64| x <= y + tol * y.abs().max(1.0);
    let lt = |x: f64, y: f64| x < y - tol * y.abs().max(1.0);
    le(a.0, b.0) && le(a.1, b.1) && (lt(a.0, b.0) || lt(a.1, b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{example_system, ArrivalSpec, FadeLaw};

    fn example(p: f64) -> ModelSpec {
        example_system(5, p, FadeLaw::example()).unwrap()
    }

    #[test]
    fn zero_beta_serves_maximally() {
        let sol = solve_mdp(&example(0.16), 0.0, 80, 1e-9).unwrap();
        for (q, row) in sol.policy.serve.iter().enumerate() {
            for &s in row {
                assert_eq!(s as usize, q.min(2), "q={q}");
            }
        }
    }

    #[test]
    fn monotone_check_examples() {
        let l = example(0.16).lattice().unwrap();
        assert!(check_monotone(&Policy::serve_min(&l, 2, 20)).is_monotone());
        let mut p = Policy::serve_min(&l, 2, 5);
        p.serve[2][0] = 1;
        p.serve[3][0] = 0;
        let r = check_monotone(&p);
        assert!(!r.is_monotone());
        assert_eq!(r.violations[0], vec![3]);
        assert!(r.violations[1].is_empty());
    }

    #[test]
    fn pi_and_rvi_agree() {
        let spec = example(0.16);
        let l = spec.lattice().unwrap();
        for beta in [0.5, 5.0, 50.0] {
            let mult = Multipliers { beta, theta: None };
            let pi = solve_lattice(&l, mult, 400, &SolverOptions::default(), None).unwrap();
            let rvi = solve_lattice(
                &l,
                mult,
                400,
                &SolverOptions {
                    tol: 1e-11,
                    method: SolverMethod::RelativeValueIteration,
                    ..SolverOptions::default()
                },
                None,
            )
            .unwrap();
            let (_, avg) = chain::evaluate(&l, &rvi.policy).unwrap();
            let g_rvi = avg.q_bar + beta * avg.p_bar;
            let scale = pi.g_star.abs().max(1.0);
            assert!((pi.g_star - rvi.g_star).abs() < 1e-6 * scale, "β={beta}: {} vs {}", pi.g_star, rvi.g_star);
            assert!(pi.g_star <= g_rvi + 1e-9 * scale, "β={beta}: {} vs {g_rvi}", pi.g_star);
            assert!(pi.residual <= 1e-6);
        }
    }

    #[test]
    fn gain_matches_chain_evaluation() {
        let spec = example(0.16);
        let l = spec.lattice().unwrap();
        let beta = 20.0;
        let sol = solve_mdp(&spec, beta, 120, 1e-9).unwrap();
        let (_, avg) = chain::evaluate(&l, &sol.policy).unwrap();
        let credit = beta * drop_price(&l) * avg.s_bar;
        assert!((sol.g_star - (avg.q_bar + beta * avg.p_bar - credit)).abs() < 1e-8);
    }

    #[test]
    fn preconditions() {
        let spec = example(0.16);
        assert!(matches!(solve_mdp(&spec, -1.0, 80, 1e-9), Err(Error::InvalidParameter { .. })));
        assert!(matches!(solve_mdp(&spec, 1.0, 20, 1e-9), Err(Error::InvalidParameter { .. })));
        let mut heavy = spec.clone();
        heavy.arrival = ArrivalSpec::Binomial { n: 5, p: 0.5 };
        assert!(matches!(solve_mdp(&heavy, 1.0, 80, 1e-9), Err(Error::Unstable { .. })));
    }

    #[test]
    fn admission_without_reward_admits_nothing() {
        let spec = example(0.16).with_admission(true);
        let sol = solve_mdp_u(&spec, 0.0, 0.0, 60, 1e-9).unwrap();
        let l = spec.lattice().unwrap();
        let (_, avg) = chain::evaluate(&l, &sol.policy).unwrap();
        assert_eq!(avg.q_bar, 0.0);
        assert_eq!(avg.a_bar, Some(0.0));
    }

    #[test]
    fn policy_csv_round_trip_any_order() {
        let l = example(0.16).lattice().unwrap();
        let sol = solve_mdp(&example(0.16), 5.0, 60, 1e-9).unwrap();
        let mut buf = Vec::new();
        sol.policy.write_csv(&l, &mut buf, "t").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let body = lines.split_off(2);
        let mut shuffled = body.clone();
        shuffled.reverse();
        let rebuilt = format!("{}\n{}\n{}\n", lines[0], lines[1], shuffled.join("\n"));
        let back = Policy::read_csv(&l, rebuilt.as_bytes()).unwrap();
        assert_eq!(back, sol.policy);
    }

    #[test]
    fn policy_csv_missing_entries_rejected() {
        let l = example(0.16).lattice().unwrap();
        let text = "q,h_index,s\n0,0,0\n1,0,1\n1,1,1\n";
        assert!(matches!(Policy::read_csv(&l, text.as_bytes()), Err(Error::Shape(_))));
    }

    #[test]
    fn dominance_relation() {
        assert!(dominates((1.0, 1.0), (1.0, 2.0), 1e-12));
        assert!(!dominates((1.0, 2.0), (1.0, 2.0), 1e-12));
        assert!(!dominates((0.5, 3.0), (1.0, 2.0), 1e-12));
    }
}
