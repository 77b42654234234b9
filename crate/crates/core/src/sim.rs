//! Seeded Monte Carlo simulation of the queue under a fixed policy.
//!
//! The generator is ChaCha8 (`rand_chacha` 0.3) seeded with `seed_from_u64`;
//! golden digests are tied to that version. Each slot draws the fade state,
//! then the arrival batch, serves `s(q, h)` and only then admits arrivals.
//! Policies are extended above their `q_max` by the boundary row.

use std::collections::VecDeque;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::Policy;
use crate::mincost::fmt;
use crate::model::{Lattice, ModelSpec};

pub const BATCHES: usize = 20;
pub const MAX_TRACE_SLOTS: usize = 10_000;

/// Batch-means standard errors of the corresponding estimates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StdErrors {
    pub q_bar: f64,
    pub p_bar: f64,
    pub s_bar: f64,
    pub a_bar: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEstimates {
    /// packets
    pub q_bar: f64,
    /// watts
    pub p_bar: f64,
    /// packets per slot
    pub s_bar: f64,
    /// admitted packets per slot
    pub a_bar: f64,
    pub se: StdErrors,
    pub horizon: u64,
    pub burn_in: u64,
    pub seed: u64,
    /// Mean slots from admission to service, counting the admission slot.
    pub delay_direct: f64,
    /// Packets whose delay entered `delay_direct`.
    pub delivered: f64,
}

impl SimEstimates {
    /// `q_bar / throughput` against `delay_direct`, in combined standard
    /// errors. Throughput is `λ` without admission control and `a_bar` with it.
    pub fn little_gap(&self, lattice: &Lattice, admission: bool) -> f64 {
        let (thr, thr_se) = if admission {
            (self.a_bar, self.se.a_bar)
        } else {
            (lattice.lambda, 0.0)
        };
        if thr <= 0.0 {
            return 0.0;
        }
        let ratio = self.q_bar / thr;
        let ratio_se = ratio * ((self.se.q_bar / self.q_bar.max(f64::MIN_POSITIVE)).powi(2) + (thr_se / thr).powi(2)).sqrt();
        let combined = (ratio_se * ratio_se + self.se.delay * self.se.delay).sqrt();
        let diff = (self.delay_direct - ratio).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / combined
        }
    }

    pub fn write_csv<W: Write>(&self, out: W, provenance: &str) -> Result<()> {
        let mut w = crate::io::csv_writer(out, provenance)?;
        w.write_record(["quantity", "estimate", "se"])?;
        for (name, v, se) in [
            ("q_bar", self.q_bar, self.se.q_bar),
            ("p_bar", self.p_bar, self.se.p_bar),
            ("s_bar", self.s_bar, self.se.s_bar),
            ("a_bar", self.a_bar, self.se.a_bar),
            ("delay_direct", self.delay_direct, self.se.delay),
        ] {
            w.write_record([name.to_string(), fmt(v), fmt(se)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One slot of the sample path. Queue, arrival and service in lattice steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub m: u64,
    /// queue at the start of the slot
    pub q: usize,
    pub h: usize,
    /// admitted batch
    pub a: usize,
    pub s: usize,
    pub power: f64,
}

/// Sample-path generator.
pub struct Path<'a> {
    lattice: &'a Lattice,
    policy: &'a Policy,
    rng: ChaCha8Rng,
    fades: WeightedIndex<f64>,
    arrivals: WeightedIndex<f64>,
    q: usize,
    m: u64,
}

impl<'a> Path<'a> {
    pub fn new(lattice: &'a Lattice, policy: &'a Policy, seed: u64) -> Result<Self> {
        let fades = WeightedIndex::new(&lattice.fade_probs)
            .map_err(|e| Error::InvalidModel(format!("fade law: {e}")))?;
        let arrivals = WeightedIndex::new(lattice.arrivals.iter().map(|&(_, p)| p))
            .map_err(|e| Error::InvalidModel(format!("arrival law: {e}")))?;
        if policy.serve.first().map_or(0, |r| r.len()) != lattice.n_fades() {
            return Err(Error::Shape("policy fade count differs from the model".into()));
        }
        Ok(Path {
            lattice,
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fades,
            arrivals,
            q: 0,
            m: 0,
        })
    }
}

impl Iterator for Path<'_> {
    type Item = Slot;

    fn next(&mut self) -> Option<Slot> {
        let h = self.fades.sample(&mut self.rng);
        let ri = self.arrivals.sample(&mut self.rng);
        let q = self.q;
        let s = self.policy.serve_at(q, h).min(self.lattice.s_max);
        let a = self
            .policy
            .admit_at(q, ri, h)
            .unwrap_or(self.lattice.arrivals[ri].0);
        let slot = Slot {
            m: self.m,
            q,
            h,
            a,
            s,
            power: self.lattice.power[h][s],
        };
        self.q = q - s + a;
        self.m += 1;
        Some(slot)
    }
}

#[derive(Default, Clone, Copy)]
struct Totals {
    q: f64,
    p: f64,
    s: f64,
    a: f64,
    delay: f64,
    delivered: f64,
    slots: f64,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn simulate(spec: &ModelSpec, policy: &Policy, horizon: u64, burn_in: u64, seed: u64) -> Result<SimEstimates> {
    simulate_lattice(&spec.lattice()?, policy, horizon, burn_in, seed)
}

/// Time averages over slots `burn_in..horizon` with 20 batch means.
///
/// Delay is tracked per lattice step in FIFO order; a unit admitted in slot
/// `m` and served in slot `m'` waits `m' - m` slots. Only units admitted after
/// the burn-in count toward `delay_direct`.
pub fn simulate_lattice(
    lattice: &Lattice,
    policy: &Policy,
    horizon: u64,
    burn_in: u64,
    seed: u64,
) -> Result<SimEstimates> {
    if horizon <= burn_in.saturating_mul(2) || horizon - burn_in < BATCHES as u64 * 2 {
        return Err(Error::param("horizon", format!("{horizon} must exceed twice the burn-in {burn_in}")));
    }
    let unit = lattice.unit;
    let span = horizon - burn_in;
    let batch_len = span / BATCHES as u64;
    let mut batches = [Totals::default(); BATCHES];
    // (admission slot, units)
    let mut fifo: VecDeque<(u64, usize)> = VecDeque::new();

    for slot in Path::new(lattice, policy, seed)?.take(horizon as usize) {
        let counted = slot.m >= burn_in;
        let b = if counted {
            (((slot.m - burn_in) / batch_len) as usize).min(BATCHES - 1)
        } else {
            0
        };
        let mut to_serve = slot.s;
        while to_serve > 0 {
            let front = fifo.front_mut().expect("served units are queued");
            let take = front.1.min(to_serve);
            if counted && front.0 >= burn_in {
                batches[b].delay += (slot.m - front.0) as f64 * take as f64;
                batches[b].delivered += take as f64;
            }
            front.1 -= take;
            to_serve -= take;
            if front.1 == 0 {
                fifo.pop_front();
            }
        }
        if slot.a > 0 {
            fifo.push_back((slot.m, slot.a));
        }
        if counted {
            let t = &mut batches[b];
            t.q += slot.q as f64 * unit;
            t.p += slot.power;
            t.s += slot.s as f64 * unit;
            t.a += slot.a as f64 * unit;
            t.slots += 1.0;
        }
    }

    let per = |f: &dyn Fn(&Totals) -> f64| -> (f64, f64) {
        let v: Vec<f64> = batches.iter().map(|t| f(t) / t.slots).collect();
        mean_and_se(&v)
    };
    let total = |f: &dyn Fn(&Totals) -> f64| batches.iter().map(f).sum::<f64>();
    let slots = total(&|t| t.slots);
    let (_, se_q) = per(&|t| t.q);
    let (_, se_p) = per(&|t| t.p);
    let (_, se_s) = per(&|t| t.s);
    let (_, se_a) = per(&|t| t.a);
    let delivered = total(&|t| t.delivered);
    let delay_direct = if delivered > 0.0 {
        total(&|t| t.delay) / delivered
    } else {
        0.0
    };
    let delay_batches: Vec<f64> = batches
        .iter()
        .map(|t| if t.delivered > 0.0 { t.delay / t.delivered } else { 0.0 })
        .collect();
    let (_, se_delay) = mean_and_se(&delay_batches);

    Ok(SimEstimates {
        q_bar: total(&|t| t.q) / slots,
        p_bar: total(&|t| t.p) / slots,
        s_bar: total(&|t| t.s) / slots,
        a_bar: total(&|t| t.a) / slots,
        se: StdErrors {
            q_bar: se_q,
            p_bar: se_p,
            s_bar: se_s,
            a_bar: se_a,
            delay: se_delay,
        },
        horizon,
        burn_in,
        seed,
        delay_direct,
        delivered: delivered * unit,
    })
}

/// Independent replications, one per seed, run in parallel.
pub fn simulate_replications(
    lattice: &Lattice,
    policy: &Policy,
    horizon: u64,
    burn_in: u64,
    seeds: &[u64],
) -> Result<Vec<SimEstimates>> {
    seeds
        .par_iter()
        .map(|&seed| simulate_lattice(lattice, policy, horizon, burn_in, seed))
        .collect()
}

/// Equal-weight pooling of replications with a common horizon.
pub fn pool(reps: &[SimEstimates]) -> Option<SimEstimates> {
    let first = reps.first()?;
    let n = reps.len() as f64;
    let avg = |f: &dyn Fn(&SimEstimates) -> f64| reps.iter().map(f).sum::<f64>() / n;
    let se = |f: &dyn Fn(&SimEstimates) -> f64| reps.iter().map(|r| f(r).powi(2)).sum::<f64>().sqrt() / n;
    Some(SimEstimates {
        q_bar: avg(&|r| r.q_bar),
        p_bar: avg(&|r| r.p_bar),
        s_bar: avg(&|r| r.s_bar),
        a_bar: avg(&|r| r.a_bar),
        se: StdErrors {
            q_bar: se(&|r| r.se.q_bar),
            p_bar: se(&|r| r.se.p_bar),
            s_bar: se(&|r| r.se.s_bar),
            a_bar: se(&|r| r.se.a_bar),
            delay: se(&|r| r.se.delay),
        },
        horizon: first.horizon,
        burn_in: first.burn_in,
        seed: first.seed,
        delay_direct: avg(&|r| r.delay_direct),
        delivered: reps.iter().map(|r| r.delivered).sum(),
    })
}

/// SHA-256 over the `(q, h, a, s)` trace as little-endian `u64` words.
pub fn golden_trace(lattice: &Lattice, policy: &Policy, seed: u64, n_slots: usize) -> Result<String> {
    if n_slots > MAX_TRACE_SLOTS {
        return Err(Error::param("n_slots", format!("{n_slots} exceeds {MAX_TRACE_SLOTS}")));
    }
    let mut hasher = Sha256::new();
    for slot in Path::new(lattice, policy, seed)?.take(n_slots) {
        for v in [slot.q, slot.h, slot.a, slot.s] {
            hasher.update((v as u64).to_le_bytes());
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Trace CSV: `m,q,h,a,s,power` with queue quantities in packets.
pub fn write_trace<W: Write>(
    lattice: &Lattice,
    policy: &Policy,
    seed: u64,
    n_slots: usize,
    out: W,
    provenance: &str,
) -> Result<()> {
    if n_slots > MAX_TRACE_SLOTS {
        return Err(Error::param("n_slots", format!("{n_slots} exceeds {MAX_TRACE_SLOTS}")));
    }
    let unit = lattice.unit;
    let mut w = crate::io::csv_writer(out, provenance)?;
    w.write_record(["m", "q", "h", "a", "s", "power"])?;
    for slot in Path::new(lattice, policy, seed)?.take(n_slots) {
        w.write_record([
            slot.m.to_string(),
            fmt(slot.q as f64 * unit),
            slot.h.to_string(),
            fmt(slot.a as f64 * unit),
            fmt(slot.s as f64 * unit),
            fmt(slot.power),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArrivalSpec, FadeLaw, Mode, PowerSpec};

    fn bernoulli(p: f64) -> Lattice {
        ModelSpec {
            arrival: ArrivalSpec::Pmf { values: vec![1.0 - p, p] },
            fade: FadeLaw::single(1.0),
            power: PowerSpec::Example,
            s_max: 1,
            mode: Mode::Int,
            admission: false,
        }
        .lattice()
        .unwrap()
    }

    #[test]
    fn zero_arrivals_give_zero_estimates() {
        let lat = bernoulli(0.3);
        let lat = Lattice {
            arrivals: vec![(0, 1.0)],
            lambda: 0.0,
            ..lat
        };
        let pol = Policy::serve_min(&lat, 1, 4);
        let est = simulate_lattice(&lat, &pol, 10_000, 1_000, 7).unwrap();
        assert_eq!((est.q_bar, est.p_bar, est.s_bar, est.a_bar, est.delay_direct), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn bernoulli_serve_one_delay_is_one_slot() {
        let lat = bernoulli(0.3);
        let pol = Policy::serve_min(&lat, 1, 4);
        let est = simulate_lattice(&lat, &pol, 100_000, 10_000, 1).unwrap();
        assert_eq!(est.delay_direct, 1.0);
        assert!((est.q_bar - 0.3).abs() < 4.0 * est.se.q_bar);
    }

    #[test]
    fn horizon_must_exceed_burn_in() {
        let lat = bernoulli(0.3);
        let pol = Policy::serve_min(&lat, 1, 4);
        assert!(simulate_lattice(&lat, &pol, 100, 60, 1).is_err());
    }

    #[test]
    fn digest_depends_on_seed_only_through_the_path() {
        let lat = bernoulli(0.3);
        let pol = Policy::serve_min(&lat, 1, 4);
        let a = golden_trace(&lat, &pol, 42, 1000).unwrap();
        assert_eq!(a, golden_trace(&lat, &pol, 42, 1000).unwrap());
        assert_ne!(a, golden_trace(&lat, &pol, 43, 1000).unwrap());
        assert!(golden_trace(&lat, &pol, 42, MAX_TRACE_SLOTS + 1).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let lat = bernoulli(0.3);
        let pol = Policy::serve_min(&lat, 1, 4);
        let mut buf = Vec::new();
        write_trace(&lat, &pol, 1, 5, &mut buf, "t").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1), Some("m,q,h,a,s,power"));
        assert_eq!(text.lines().count(), 7);
    }
}
