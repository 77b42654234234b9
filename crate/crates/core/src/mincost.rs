//! Minimum average power needed to serve a given mean rate.
//!
//! For a fixed fade law the cheapest way to serve mean rate `λ` is a
//! per-fade randomization over batch sizes. Its value `c(λ)` is obtained by a
//! parametric Lagrangian sweep: each fade responds to a price `μ` per packet
//! with `argmin_s P(h, s) - μ s`, and as `μ` increases the responses walk the
//! per-fade lower convex envelopes. Collecting every envelope segment, sorted by
//! slope and weighted by the fade probabilities, yields the vertices of `c`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{Lattice, ModelSpec};

/// Tolerance used to deduplicate breakpoints and to detect `λ` at a breakpoint.
pub const BREAKPOINT_TOL: f64 = 1e-9;

/// Piecewise-linear `c(λ)` on `[0, S_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinPowerCurve {
    /// `(rate, power)` vertices sorted by rate, starting at `(0, 0)`.
    pub vertices: Vec<(f64, f64)>,
    /// Slope of each segment between consecutive vertices.
    pub slopes: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    ds: f64,
    dp: f64,
    slope: f64,
}

/// Lower convex hull of `(k * unit, row[k])`, returned as segments left to right.
fn envelope_segments(row: &[f64], unit: f64) -> Vec<Segment> {
    let mut hull: Vec<usize> = Vec::with_capacity(row.len());
    for k in 0..row.len() {
        while hull.len() >= 2 {
            let (i, j) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // drop j if it lies on or above the chord i -> k
            let lhs = (row[j] - row[i]) * (k - i) as f64;
            let rhs = (row[k] - row[i]) * (j - i) as f64;
            if lhs >= rhs - 1e-12 * rhs.abs().max(lhs.abs()) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    hull.windows(2)
        .map(|w| {
            let ds = (w[1] - w[0]) as f64 * unit;
            let dp = row[w[1]] - row[w[0]];
            Segment { ds, dp, slope: dp / ds }
        })
        .collect()
}

pub fn min_power_curve(spec: &ModelSpec) -> Result<MinPowerCurve> {
    Ok(curve_from_lattice(&spec.lattice()?))
}

pub fn curve_from_lattice(lattice: &Lattice) -> MinPowerCurve {
    let mut segs: Vec<Segment> = Vec::new();
    for (row, &prob) in lattice.power.iter().zip(&lattice.fade_probs) {
        if prob <= 0.0 {
            continue;
        }
        for s in envelope_segments(row, lattice.unit) {
            segs.push(Segment {
                ds: prob * s.ds,
                dp: prob * s.dp,
                slope: s.slope,
            });
        }
    }
    segs.sort_by(|a, b| a.slope.total_cmp(&b.slope));

    // merge segments whose slopes tie across fades
    let mut merged: Vec<Segment> = Vec::new();
    for s in segs {
        match merged.last_mut() {
            Some(last) if (s.slope - last.slope).abs() <= 1e-12 * s.slope.abs().max(1.0) => {
                last.ds += s.ds;
                last.dp += s.dp;
            }
            _ => merged.push(s),
        }
    }

    let mut vertices = vec![(0.0, 0.0)];
    let mut slopes = Vec::with_capacity(merged.len());
    let (mut x, mut y) = (0.0, 0.0);
    for s in &merged {
        x += s.ds;
        y += s.dp;
        vertices.push((x, y));
        slopes.push(s.dp / s.ds);
    }
    MinPowerCurve { vertices, slopes }
}

impl MinPowerCurve {
    pub fn s_max(&self) -> f64 {
        self.vertices.last().map(|v| v.0).unwrap_or(0.0)
    }

    /// Linear interpolation between vertices; clamps outside `[0, S_max]`.
    pub fn eval(&self, rate: f64) -> f64 {
        let v = &self.vertices;
        if rate <= v[0].0 {
            return v[0].1;
        }
        let i = v.partition_point(|p| p.0 < rate);
        if i >= v.len() {
            return v[v.len() - 1].1;
        }
        let (x0, y0) = v[i - 1];
        let (x1, y1) = v[i];
        if x1 <= x0 {
            return y1;
        }
        y0 + (rate - x0) * (y1 - y0) / (x1 - x0)
    }

    /// Interior abscissae where the slope changes.
    pub fn breakpoints(&self) -> Vec<f64> {
        let s_max = self.s_max();
        let mut out: Vec<f64> = Vec::new();
        for &(x, _) in &self.vertices[1..self.vertices.len().saturating_sub(1)] {
            if x <= BREAKPOINT_TOL || x >= s_max - BREAKPOINT_TOL {
                continue;
            }
            if out.last().is_none_or(|&l| x - l > BREAKPOINT_TOL) {
                out.push(x);
            }
        }
        out
    }

    /// Segment index whose closed interval contains `rate` (left-most on ties).
    fn segment_of(&self, rate: f64) -> usize {
        let i = self.vertices.partition_point(|p| p.0 < rate);
        i.clamp(1, self.slopes.len()) - 1
    }

    /// A subgradient of `c` at `rate`: the mean of the one-sided slopes.
    pub fn subgradient(&self, rate: f64) -> f64 {
        let i = self.segment_of(rate);
        let right = self.vertices[i + 1].0;
        if (rate - right).abs() <= BREAKPOINT_TOL && i + 1 < self.slopes.len() {
            0.5 * (self.slopes[i] + self.slopes[i + 1])
        } else if (rate - self.vertices[i].0).abs() <= BREAKPOINT_TOL && i > 0 {
            0.5 * (self.slopes[i - 1] + self.slopes[i])
        } else {
            self.slopes[i]
        }
    }

    pub fn write_csv<W: Write>(&self, out: W, provenance: &str) -> Result<()> {
        let mut w = crate::io::csv_writer(out, provenance)?;
        w.write_record(["rate", "power"])?;
        for (x, y) in &self.vertices {
            w.write_record([fmt(*x), fmt(*y)])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn breakpoints(curve: &MinPowerCurve) -> Vec<f64> {
    curve.breakpoints()
}

/// `c_R(λ)` evaluated by bisection over the multiplier on a fixed lattice.
///
/// Unlike [`MinPowerCurve`], no envelope is built: each evaluation bisects on
/// `μ` until the per-fade responses bracket `λ`, then interpolates between the
/// two bracketing responses.
#[derive(Debug, Clone)]
pub struct RealCurve {
    unit: f64,
    power: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

pub fn min_power_curve_real(spec: &ModelSpec) -> Result<RealCurve> {
    Ok(RealCurve::from_lattice(&spec.lattice()?))
}

impl RealCurve {
    pub fn from_lattice(lattice: &Lattice) -> Self {
        Self {
            unit: lattice.unit,
            power: lattice.power.clone(),
            probs: lattice.fade_probs.clone(),
        }
    }

    pub fn s_max(&self) -> f64 {
        (self.power[0].len() - 1) as f64 * self.unit
    }

    /// Per-fade response to price `mu`; ties go to the smaller batch unless
    /// `prefer_large`.
    fn response(&self, mu: f64, prefer_large: bool) -> (f64, f64) {
        let (mut rate, mut cost) = (0.0, 0.0);
        for (row, &p) in self.power.iter().zip(&self.probs) {
            let mut best = (0usize, row[0]);
            for (k, &pw) in row.iter().enumerate().skip(1) {
                let val = pw - mu * k as f64 * self.unit;
                let better = if prefer_large { val <= best.1 } else { val < best.1 };
                if better {
                    best = (k, val);
                }
            }
            rate += p * best.0 as f64 * self.unit;
            cost += p * row[best.0];
        }
        (rate, cost)
    }

    pub fn eval(&self, lambda: f64) -> Result<f64> {
        let s_max = self.s_max();
        if !(0.0..=s_max + 1e-12).contains(&lambda) {
            return Err(Error::param("lambda", format!("{lambda} outside [0, {s_max}]")));
        }
        let max_slope = self
            .power
            .iter()
            .flat_map(|row| row.windows(2).map(|w| (w[1] - w[0]) / self.unit))
            .fold(0.0f64, f64::max);
        let (mut lo, mut hi) = (0.0f64, 2.0 * max_slope + 1.0);
        if self.response(lo, true).0 >= lambda {
            let (r, c) = self.response(lo, true);
            return Ok(if r > 0.0 { c * lambda / r } else { 0.0 });
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.response(mid, false).0 < lambda {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        let (ra, ca) = self.response(lo, false);
        let (rb, cb) = self.response(hi, true);
        if (rb - ra).abs() < 1e-15 {
            return Ok(ca);
        }
        Ok(ca + (lambda - ra) * (cb - ca) / (rb - ra))
    }
}

/// Estimated discretization error of the lattice `c_R` near `lambda`: the
/// largest gap to a 16x finer lattice over `[λ - Δ, λ + Δ]`.
pub fn grid_error_estimate(spec: &ModelSpec, lambda: f64) -> Result<f64> {
    let unit = spec.mode.unit();
    let coarse = min_power_curve_real(spec)?;
    let fine_spec = spec
        .clone()
        .with_mode(crate::model::Mode::Grid { delta: unit / 16.0 });
    let fine = min_power_curve_real(&fine_spec)?;
    let s_max = coarse.s_max();
    let mut worst = 0.0f64;
    for i in 0..=32 {
        let x = (lambda - unit + 2.0 * unit * i as f64 / 32.0).clamp(0.0, s_max);
        worst = worst.max(coarse.eval(x)? - fine.eval(x)?);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    /// `0 < λ < b_1`
    One,
    /// strictly inside a segment other than the first
    Two,
    /// at a breakpoint
    Three,
}

impl Case {
    pub fn number(&self) -> u8 {
        match self {
            Case::One => 1,
            Case::Two => 2,
            Case::Three => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub intercept: f64,
    pub slope: f64,
}

impl Line {
    pub fn eval(&self, s: f64) -> f64 {
        self.intercept + self.slope * s
    }
}

/// Position of `λ` on the curve together with the reference line `l(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseInfo {
    pub case: Case,
    pub lambda: f64,
    pub s_l: f64,
    pub s_u: f64,
    pub line: Line,
    /// `slope(l) - slope(left segment)`, absent in Case 1.
    pub m_l: Option<f64>,
    /// `slope(right segment) - slope(l)`, absent on the last segment.
    pub m_u: Option<f64>,
    /// `min(m_l, m_u)` over the gaps that exist.
    pub m: Option<f64>,
}

pub fn classify_case(curve: &MinPowerCurve, lambda: f64) -> Result<CaseInfo> {
    let s_max = curve.s_max();
    if !(lambda > 0.0 && lambda < s_max) {
        return Err(Error::param("lambda", format!("{lambda} not in (0, {s_max})")));
    }
    let v = &curve.vertices;
    let slopes = &curve.slopes;

    // breakpoint incidence: vertex index i (1..len-1) with |λ - x_i| <= tol
    let at_vertex = (1..v.len() - 1).find(|&i| (lambda - v[i].0).abs() <= BREAKPOINT_TOL);
    if let Some(i) = at_vertex {
        let (left, right) = (slopes[i - 1], slopes[i]);
        let slope = 0.5 * (left + right);
        let (x, y) = v[i];
        let (m_l, m_u) = (slope - left, right - slope);
        return Ok(CaseInfo {
            case: Case::Three,
            lambda,
            s_l: x,
            s_u: x,
            line: Line {
                intercept: y - slope * x,
                slope,
            },
            m_l: Some(m_l),
            m_u: Some(m_u),
            m: Some(m_l.min(m_u)),
        });
    }

    let p = curve.segment_of(lambda);
    let (a, ca) = v[p];
    let (b, _) = v[p + 1];
    let slope = slopes[p];
    let line = Line {
        intercept: ca - slope * a,
        slope,
    };
    let m_l = (p > 0).then(|| slope - slopes[p - 1]);
    let m_u = (p + 1 < slopes.len()).then(|| slopes[p + 1] - slope);
    let m = match (m_l, m_u) {
        (Some(l), Some(u)) => Some(l.min(u)),
        (l, u) => l.or(u),
    };
    Ok(CaseInfo {
        case: if p == 0 { Case::One } else { Case::Two },
        lambda,
        s_l: a,
        s_u: b,
        line,
        m_l,
        m_u,
        m,
    })
}

impl CaseInfo {
    pub fn write_csv<W: Write>(&self, out: W, provenance: &str) -> Result<()> {
        let opt = |x: Option<f64>| x.map(fmt).unwrap_or_default();
        let mut w = crate::io::csv_writer(out, provenance)?;
        w.write_record([
            "case",
            "lambda",
            "s_l",
            "s_u",
            "line_intercept",
            "line_slope",
            "m_l",
            "m_u",
            "m",
        ])?;
        w.write_record([
            self.case.number().to_string(),
            fmt(self.lambda),
            fmt(self.s_l),
            fmt(self.s_u),
            fmt(self.line.intercept),
            fmt(self.line.slope),
            opt(self.m_l),
            opt(self.m_u),
            opt(self.m),
        ])?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{example_system, FadeLaw, Mode, PowerSpec};

    fn example() -> ModelSpec {
        example_system(5, 0.04, FadeLaw::example()).unwrap()
    }

    #[test]
    fn zero_and_full_rate() {
        let c = min_power_curve(&example()).unwrap();
        assert_eq!(c.eval(0.0), 0.0);
        let full = 0.6 * crate::model::example_power(0.1, 2.0) + 0.4 * crate::model::example_power(1.0, 2.0);
        assert!((c.eval(2.0) - full).abs() < 1e-9);
        assert!((c.eval(2.0) - 167.1700).abs() < 1e-3);
    }

    #[test]
    fn single_fade_breakpoints_are_integers() {
        let mut m = example();
        m.fade = FadeLaw::single(1.0);
        m.s_max = 4;
        let bp = min_power_curve(&m).unwrap().breakpoints();
        assert_eq!(bp.len(), 3);
        for (x, k) in bp.iter().zip(1..) {
            assert!((x - k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_table_has_no_breakpoints() {
        let mut m = example();
        m.power = PowerSpec::Table {
            rows: vec![vec![0.0, 3.0, 6.0], vec![0.0, 3.0, 6.0]],
        };
        let c = min_power_curve(&m).unwrap();
        assert!(c.breakpoints().is_empty());
        assert_eq!(c.slopes.len(), 1);
        assert_eq!(classify_case(&c, 1.3).unwrap().case, Case::One);
    }

    #[test]
    fn slopes_strictly_increase() {
        let c = min_power_curve(&example().with_mode(Mode::Grid { delta: 0.05 })).unwrap();
        assert!(c.slopes.windows(2).all(|w| w[1] > w[0]));
        assert!(c.vertices.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn case_examples() {
        let c = min_power_curve(&example()).unwrap();
        let ci = classify_case(&c, 0.2).unwrap();
        assert_eq!(ci.case, Case::One);
        assert!(ci.s_l.abs() < 1e-12 && (ci.s_u - 0.4).abs() < 1e-12);

        let ci = classify_case(&c, 0.78).unwrap();
        assert_eq!(ci.case, Case::Two);
        assert!((ci.s_l - 0.4).abs() < 1e-12 && (ci.s_u - 0.8).abs() < 1e-12);
        assert!((ci.line.slope - 1.771517).abs() < 1e-6);
        assert!((ci.m.unwrap() - 0.775320).abs() < 1e-6);

        let ci = classify_case(&c, 0.8).unwrap();
        assert_eq!(ci.case, Case::Three);
        assert!((ci.s_l - 0.8).abs() < 1e-12 && ci.s_l == ci.s_u);
        assert!(ci.m.unwrap() > 0.0);
    }

    #[test]
    fn classify_rejects_out_of_range() {
        let c = min_power_curve(&example()).unwrap();
        assert!(classify_case(&c, 0.0).is_err());
        assert!(classify_case(&c, 2.0).is_err());
    }

    #[test]
    fn reference_line_supports_curve() {
        let c = min_power_curve(&example()).unwrap();
        for lambda in [0.2, 0.5, 0.78, 0.8, 1.0, 1.4, 1.7] {
            let ci = classify_case(&c, lambda).unwrap();
            for i in 0..=200 {
                let s = 2.0 * i as f64 / 200.0;
                assert!(ci.line.eval(s) <= c.eval(s) + 1e-9, "λ={lambda} s={s}");
            }
            match ci.case {
                Case::Three => assert!((ci.line.eval(lambda) - c.eval(lambda)).abs() < 1e-9),
                _ => {
                    assert!((ci.line.eval(ci.s_l) - c.eval(ci.s_l)).abs() < 1e-9);
                    assert!((ci.line.eval(ci.s_u) - c.eval(ci.s_u)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn real_curve_zero_and_bounds() {
        let r = min_power_curve_real(&example().with_mode(Mode::Grid { delta: 0.05 })).unwrap();
        assert_eq!(r.eval(0.0).unwrap(), 0.0);
        assert!(r.eval(-0.1).is_err());
        assert!(r.eval(2.5).is_err());
    }

    #[test]
    fn bisection_matches_envelope_on_same_lattice() {
        let m = example().with_mode(Mode::Grid { delta: 0.05 });
        let env = min_power_curve(&m).unwrap();
        let bis = min_power_curve_real(&m).unwrap();
        for i in 0..=100 {
            let x = 2.0 * i as f64 / 100.0;
            let (a, b) = (env.eval(x), bis.eval(x).unwrap());
            assert!((a - b).abs() <= 1e-9 * (1.0 + a), "x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn csv_has_header_and_provenance() {
        let c = min_power_curve(&example()).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf, "test").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        assert_eq!(lines.next().unwrap(), "rate,power");
    }
}
