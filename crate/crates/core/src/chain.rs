//! Exact stationary analysis of the queue-length chain under a fixed policy.
//!
//! Fade and arrivals are marginalized out, leaving a banded row-stochastic
//! kernel on `{0..q_max}` (overflow folds into `q_max`). The stationary law is
//! obtained from the balance equations with `π(0)` pinned, which is a banded
//! M-matrix system; power iteration is kept as an independent second route.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{Error, Result};
use crate::mdp::Policy;
use crate::mincost::{curve_from_lattice, fmt};
use crate::model::{Lattice, ModelSpec};
use crate::numeric::{compensated_sum, Banded, CompensatedSum};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub start: usize,
    pub probs: Vec<f64>,
}

impl SparseRow {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p != 0.0)
            .map(move |(k, p)| (self.start + k, *p))
    }
}

/// Row-stochastic kernel over queue states `0..=q_max` (lattice steps).
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub rows: Vec<SparseRow>,
    /// Largest downward jump.
    pub down: usize,
    /// Largest upward jump.
    pub up: usize,
}

impl TransitionKernel {
    pub fn q_max(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        let r = &self.rows[from];
        if to < r.start || to >= r.start + r.probs.len() {
            0.0
        } else {
            r.probs[to - r.start]
        }
    }

    pub fn max_row_defect(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (compensated_sum(r.probs.iter().copied()) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `π P` for a row vector `π`.
    pub fn left_mul(&self, pi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; pi.len()];
        for (i, row) in self.rows.iter().enumerate() {
            if pi[i] == 0.0 {
                continue;
            }
            for (k, p) in row.probs.iter().enumerate() {
                out[row.start + k] += pi[i] * p;
            }
        }
        out
    }
}

fn check_shape(lattice: &Lattice, policy: &Policy) -> Result<()> {
    if policy.serve.len() != policy.q_max + 1 {
        return Err(Error::Shape("serve table length differs from q_max + 1".into()));
    }
    for (q, row) in policy.serve.iter().enumerate() {
        if row.len() != lattice.n_fades() {
            return Err(Error::Shape(format!(
                "policy has {} fade entries at q={q}, model has {}",
                row.len(),
                lattice.n_fades()
            )));
        }
        if let Some(&s) = row.iter().find(|&&s| s as usize > q.min(lattice.s_max)) {
            return Err(Error::Shape(format!("serve {s} exceeds min(q, S_max) at q={q}")));
        }
    }
    if let Some(admit) = &policy.admit {
        if admit.len() != policy.q_max + 1 {
            return Err(Error::Shape("admit table length differs from q_max + 1".into()));
        }
        for (q, per_r) in admit.iter().enumerate() {
            if per_r.len() != lattice.arrivals.len() {
                return Err(Error::Shape(format!(
                    "admit table at q={q} covers {} arrival values, model has {}",
                    per_r.len(),
                    lattice.arrivals.len()
                )));
            }
            for (ri, per_h) in per_r.iter().enumerate() {
                let r = lattice.arrivals[ri].0;
                if per_h.len() != lattice.n_fades() || per_h.iter().any(|&a| a as usize > r) {
                    return Err(Error::Shape(format!("bad admit entry at q={q}, r={r}")));
                }
            }
        }
    }
    Ok(())
}

pub fn queue_kernel(lattice: &Lattice, policy: &Policy) -> Result<TransitionKernel> {
    check_shape(lattice, policy)?;
    let q_max = policy.q_max;
    let up = lattice.a_max();
    let down = lattice.s_max;
    let mut rows = Vec::with_capacity(q_max + 1);
    for q in 0..=q_max {
        let start = q.saturating_sub(down);
        let end = (q + up).min(q_max);
        let mut probs = vec![0.0; end - start + 1];
        for (h, &ph) in lattice.fade_probs.iter().enumerate() {
            if ph == 0.0 {
                continue;
            }
            let base = q - policy.serve[q][h] as usize;
            for (ri, &(r, pr)) in lattice.arrivals.iter().enumerate() {
                let a = match &policy.admit {
                    Some(admit) => admit[q][ri][h] as usize,
                    None => r,
                };
                let next = (base + a).min(q_max);
                probs[next - start] += ph * pr;
            }
        }
        rows.push(SparseRow { start, probs });
    }
    Ok(TransitionKernel { rows, down, up })
}

/// Stationary law of the queue chain plus per-state service and drift.
#[derive(Debug, Clone)]
pub struct StationaryDist {
    pub pi: Vec<f64>,
    /// Mean service per state, packets per slot.
    pub sbar: Vec<f64>,
    /// `E[Q' - Q | Q = q]` in packets, including the overflow fold at `q_max`.
    pub drift: Vec<f64>,
    /// Mass of the states from which an arrival batch can overflow `q_max`.
    pub tail_mass: f64,
    /// `π(q_max)`.
    pub boundary_mass: f64,
    /// `max_j |(πP)_j - π_j|`.
    pub residual: f64,
    /// Packets per lattice step.
    pub unit: f64,
}

impl StationaryDist {
    pub fn q_max(&self) -> usize {
        self.pi.len() - 1
    }

    /// `Pr{Q >= q}` for every `q`, with `ccdf[q_max + 1] = 0`.
    pub fn ccdf(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.pi.len() + 1];
        let mut acc = CompensatedSum::new();
        for q in (0..self.pi.len()).rev() {
            acc.add(self.pi[q]);
            out[q] = acc.value();
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W, provenance: &str) -> Result<()> {
        let mut w = crate::io::csv_writer(out, provenance)?;
        w.write_record(["q", "pi", "sbar"])?;
        for (q, (p, s)) in self.pi.iter().zip(&self.sbar).enumerate() {
            w.write_record([fmt(q as f64 * self.unit), fmt(*p), fmt(*s)])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StationaryMethod {
    /// Banded direct solve of the balance equations.
    #[default]
    Direct,
    /// Lazy power iteration `π <- (π + πP)/2` to residual 1e-12.
    PowerIteration,
}

/// States that cannot reach 0; non-empty means a second closed class exists.
fn states_not_reaching_zero(kernel: &TransitionKernel) -> Vec<usize> {
    let n = kernel.rows.len();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, row) in kernel.rows.iter().enumerate() {
        for (j, _) in row.iter() {
            preds[j].push(i);
        }
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(j) = queue.pop_front() {
        for &i in &preds[j] {
            if !seen[i] {
                seen[i] = true;
                queue.push_back(i);
            }
        }
    }
    (0..n).filter(|&i| !seen[i]).collect()
}

pub fn stationary_dist(
    lattice: &Lattice,
    kernel: &TransitionKernel,
    policy: &Policy,
    method: StationaryMethod,
) -> Result<StationaryDist> {
    let stray = states_not_reaching_zero(kernel);
    if !stray.is_empty() {
        return Err(Error::Reducible { states: stray });
    }
    let pi = match method {
        StationaryMethod::Direct => solve_balance(kernel)?,
        StationaryMethod::PowerIteration => power_iteration(kernel, 1e-12, 50_000_000)?,
    };
    Ok(finish(lattice, kernel, policy, pi))
}

fn solve_balance(kernel: &TransitionKernel) -> Result<Vec<f64>> {
    let q_max = kernel.q_max();
    if q_max == 0 {
        return Ok(vec![1.0]);
    }
    // Unknowns π(1..=q_max) with π(0) = 1: (I - P_sub)^T x = P(0, 1..)^T.
    let n = q_max;
    let mut m = Banded::zeros(n, kernel.up, kernel.down);
    for j in 0..n {
        m.add(j, j, 1.0);
    }
    for (i, row) in kernel.rows.iter().enumerate().skip(1) {
        for (j, p) in row.iter() {
            if j >= 1 {
                m.add(j - 1, i - 1, -p);
            }
        }
    }
    let rhs: Vec<f64> = (1..=q_max).map(|j| kernel.prob(0, j)).collect();
    let x = m.factor()?.solve(&rhs);
    let mut pi = Vec::with_capacity(q_max + 1);
    pi.push(1.0);
    pi.extend(x.into_iter().map(|v| v.max(0.0)));
    let total = compensated_sum(pi.iter().copied());
    for p in &mut pi {
        *p /= total;
    }
    Ok(pi)
}

fn power_iteration(kernel: &TransitionKernel, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = kernel.rows.len();
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let next = kernel.left_mul(&pi);
        if it % 64 == 0 {
            residual = next
                .iter()
                .zip(&pi)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if residual <= tol {
                return Ok(pi);
            }
        }
        for (p, q) in pi.iter_mut().zip(&next) {
            *p = 0.5 * (*p + q);
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual,
    })
}

fn finish(lattice: &Lattice, kernel: &TransitionKernel, policy: &Policy, pi: Vec<f64>) -> StationaryDist {
    let unit = lattice.unit;
    let q_max = kernel.q_max();
    let pi_p = kernel.left_mul(&pi);
    let residual = pi_p
        .iter()
        .zip(&pi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let sbar = (0..=q_max)
        .map(|q| {
            unit * compensated_sum(
                lattice
                    .fade_probs
                    .iter()
                    .zip(&policy.serve[q])
                    .map(|(p, &s)| p * s as f64),
            )
        })
        .collect();
    let drift = kernel
        .rows
        .iter()
        .enumerate()
        .map(|(q, row)| {
            unit * compensated_sum(row.iter().map(|(j, p)| p * (j as f64 - q as f64)))
        })
        .collect();
    let band_start = (q_max + 1).saturating_sub(lattice.a_max().max(1));
    let tail_mass = compensated_sum(pi[band_start..].iter().copied());
    StationaryDist {
        boundary_mass: pi[q_max],
        tail_mass,
        residual,
        sbar,
        drift,
        unit,
        pi,
    }
}

/// Exact long-run averages under the stationary law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Averages {
    /// packets
    pub q_bar: f64,
    /// watts
    pub p_bar: f64,
    /// packets per slot
    pub s_bar: f64,
    /// admitted packets per slot (admission mode only)
    pub a_bar: Option<f64>,
    /// slots: `q_bar` over the throughput (`λ`, or `a_bar` with admission)
    pub delay: f64,
}

pub fn averages(lattice: &Lattice, dist: &StationaryDist, policy: &Policy) -> Averages {
    let unit = lattice.unit;
    let mut q = CompensatedSum::new();
    let mut p = CompensatedSum::new();
    let mut s = CompensatedSum::new();
    let mut a = CompensatedSum::new();
    for (state, &w) in dist.pi.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        q.add(w * state as f64 * unit);
        s.add(w * dist.sbar[state]);
        for (h, &ph) in lattice.fade_probs.iter().enumerate() {
            let srv = policy.serve[state][h] as usize;
            p.add(w * ph * lattice.power[h][srv]);
            if let Some(admit) = &policy.admit {
                for (ri, &(_, pr)) in lattice.arrivals.iter().enumerate() {
                    a.add(w * ph * pr * admit[state][ri][h] as f64 * unit);
                }
            }
        }
    }
    let q_bar = q.value();
    let a_bar = policy.admit.as_ref().map(|_| a.value());
    let throughput = a_bar.unwrap_or(lattice.lambda);
    Averages {
        q_bar,
        p_bar: p.value(),
        s_bar: s.value(),
        a_bar,
        delay: if throughput > 0.0 { q_bar / throughput } else { 0.0 },
    }
}

/// Kernel, stationary law and averages in one call.
pub fn evaluate(lattice: &Lattice, policy: &Policy) -> Result<(StationaryDist, Averages)> {
    let kernel = queue_kernel(lattice, policy)?;
    let dist = stationary_dist(lattice, &kernel, policy, StationaryMethod::Direct)?;
    let avg = averages(lattice, &dist, policy);
    Ok((dist, avg))
}

/// Mean queue length of the serve-`min(Q, 1)` policy for a single fade state
/// in Case 1 with `s_u = 1`: `σ² / (2(1 - λ)) + λ / 2`.
pub fn case1_qbar_analytic(spec: &ModelSpec) -> Result<f64> {
    let lattice = spec.lattice()?;
    if lattice.n_fades() != 1 {
        return Err(Error::param("fade", "closed form needs a single fade state"));
    }
    let lambda = lattice.lambda;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::param("lambda", format!("{lambda} not in (0, 1)")));
    }
    let curve = curve_from_lattice(&lattice);
    let s_u = curve
        .breakpoints()
        .first()
        .copied()
        .unwrap_or_else(|| curve.s_max());
    if (s_u - 1.0).abs() > 1e-9 {
        return Err(Error::param("s_u", format!("first breakpoint is {s_u}, need 1")));
    }
    Ok(lattice.sigma2 / (2.0 * (1.0 - lambda)) + lambda / 2.0)
}
