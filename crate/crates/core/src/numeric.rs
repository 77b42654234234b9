//! Small numerical kernels shared by the solvers: compensated summation and a
//! banded LU factorization without pivoting.
//!
//! Every linear system solved in this crate is a (transposed) M-matrix of the
//! form `I - P` restricted to the states that can reach the empty queue, so
//! elimination without pivoting is stable and keeps fill-in inside the band.

use crate::error::{Error, Result};

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Square banded matrix with `kl` sub-diagonals and `ku` super-diagonals.
#[derive(Debug, Clone)]
pub struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku, "({i},{j}) outside band");
        i * (self.kl + self.ku + 1) + (j + self.kl - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// In-place LU factorization (Doolittle, no pivoting).
    pub fn factor(mut self) -> Result<BandedLu> {
        let n = self.n;
        for k in 0..n {
            let pivot = self.data[self.idx(k, k)];
            if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
                return Err(Error::Singular(format!("zero pivot at row {k}")));
            }
            let i_end = (k + self.kl).min(n - 1);
            let j_end = (k + self.ku).min(n - 1);
            for i in k + 1..=i_end {
                let ik = self.idx(i, k);
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=j_end {
                    let kj = self.data[self.idx(k, j)];
                    let ij = self.idx(i, j);
                    self.data[ij] -= l * kj;
                }
            }
        }
        Ok(BandedLu { m: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandedLu {
    m: Banded,
}

impl BandedLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let m = &self.m;
        let n = m.n;
        let mut x = rhs.to_vec();
        for i in 0..n {
            let j0 = i.saturating_sub(m.kl);
            let mut acc = x[i];
            for j in j0..i {
                acc -= m.data[m.idx(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let j_end = (i + m.ku).min(n - 1);
            let mut acc = x[i];
            for j in i + 1..=j_end {
                acc -= m.data[m.idx(i, j)] * x[j];
            }
            x[i] = acc / m.data[m.idx(i, i)];
        }
        x
    }
}

/// Log-spaced grid from `lo` to `hi` inclusive with `per_decade` points per decade.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let steps = (decades * per_decade as f64).round() as usize;
    if steps == 0 {
        return vec![lo];
    }
    let (l0, l1) = (lo.log10(), hi.log10());
    (0..=steps)
        .map(|i| 10f64.powf(l0 + (l1 - l0) * i as f64 / steps as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn banded_solve_matches_dense_tridiagonal() {
        // -1 2 -1 system with known solution
        let n = 6;
        let mut m = Banded::zeros(n, 1, 1);
        for i in 0..n {
            m.add(i, i, 2.0);
            if i > 0 {
                m.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                m.add(i, i + 1, -1.0);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let rhs: Vec<f64> = (0..n)
            .map(|i| {
                (0..n).map(|j| m.get(i, j) * x_true[j]).sum::<f64>()
            })
            .collect();
        let x = m.factor().unwrap().solve(&rhs);
        for (a, b) in x.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_band_solve() {
        let n = 8;
        let (kl, ku) = (1, 3);
        let mut m = Banded::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                let v = if i == j { 5.0 } else { -0.5 / (1.0 + (i + j) as f64) };
                m.add(i, j, v);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let rhs: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| m.get(i, j) * x_true[j]).sum())
            .collect();
        let x = m.factor().unwrap().solve(&rhs);
        for (a, b) in x.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let m = Banded::zeros(3, 1, 1);
        assert!(matches!(m.factor(), Err(Error::Singular(_))));
    }

    #[test]
    fn log_grid_counts() {
        let g = log_grid(1e-1, 1e4, 40);
        assert_eq!(g.len(), 201);
        assert!((g[0] - 0.1).abs() < 1e-15);
        assert!((g[200] - 1e4).abs() < 1e-9);
    }
}
