//! Growth-rate classification of `Q̄` as the power gap `V` shrinks.
//!
//! Each growth model `Q = α + b f(V)` with `f ∈ {log(1/V), 1/√V, 1/V}` is
//! fitted by least squares; the normalized residual is `√(1 - R²)`. A curve
//! is `bounded` when its last decade of `V` barely moves `Q`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TradeoffCurve;
use crate::mincost::{fmt as num, Case, CaseInfo};

pub const MIN_POINTS: usize = 8;
pub const MIN_DECADES: f64 = 2.0;
pub const MIN_MARGIN: f64 = 1.5;
/// Last-decade variation, relative to the final `Q`, below which a curve may
/// be declared bounded.
pub const BOUNDED_VARIATION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingClass {
    Bounded,
    Log,
    InvSqrt,
    Inv,
    Inconclusive,
}

impl ScalingClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bounded => "bounded",
            Self::Log => "log",
            Self::InvSqrt => "inv_sqrt",
            Self::Inv => "inv",
            Self::Inconclusive => "inconclusive",
        }
    }
}

impl fmt::Display for ScalingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const GROWTH: [ScalingClass; 3] = [ScalingClass::Log, ScalingClass::InvSqrt, ScalingClass::Inv];

fn basis(class: ScalingClass, v: f64) -> f64 {
    match class {
        ScalingClass::Log => (1.0 / v).ln(),
        ScalingClass::InvSqrt => 1.0 / v.sqrt(),
        ScalingClass::Inv => 1.0 / v,
        _ => unreachable!("not a growth model"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub class: ScalingClass,
    /// `b` of the winning growth model (0 when bounded or inconclusive).
    pub coefficient: f64,
    /// `α` of the winning model; the final `Q` when bounded.
    pub intercept: f64,
    /// Normalized residuals of the log, inv_sqrt and inv models, in that
    /// order; infinite for a non-increasing fit.
    pub residuals: [f64; 3],
    /// Decades of `V` covered.
    pub decades: f64,
    /// Runner-up residual over winner residual.
    pub margin: f64,
    pub n_points: usize,
}

impl ScalingFit {
    pub fn residual(&self, class: ScalingClass) -> Option<f64> {
        GROWTH.iter().position(|&c| c == class).map(|i| self.residuals[i])
    }

    pub fn write_csv<W: Write>(&self, out: W, provenance: &str) -> Result<()> {
        let mut w = crate::io::csv_writer(out, provenance)?;
        w.write_record([
            "class",
            "coefficient",
            "intercept",
            "residual_log",
            "residual_invsqrt",
            "residual_inv",
            "margin",
            "decades",
        ])?;
        w.write_record([
            self.class.as_str().to_string(),
            num(self.coefficient),
            num(self.intercept),
            num(self.residuals[0]),
            num(self.residuals[1]),
            num(self.residuals[2]),
            num(self.margin),
            num(self.decades),
        ])?;
        w.flush()?;
        Ok(())
    }
}

struct LineFit {
    intercept: f64,
    slope: f64,
    residual: f64,
}

fn least_squares(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
        syy += (yi - my) * (yi - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let r = yi - intercept - slope * xi;
            r * r
        })
        .sum();
    let residual = if slope <= 0.0 {
        f64::INFINITY
    } else if syy > 0.0 {
        (ss_res / syy).sqrt()
    } else {
        0.0
    };
    LineFit {
        intercept,
        slope,
        residual,
    }
}

/// Classifies `(V, Q̄)` points sorted by decreasing `V`, all `V > 0`.
pub fn fit_scaling(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.iter().any(|&(v, q)| !(v > 0.0) || !q.is_finite()) {
        return Err(Error::param("points", "V must be positive and Q finite"));
    }
    if points.windows(2).any(|w| w[1].0 > w[0].0) {
        return Err(Error::param("points", "must be sorted by decreasing V"));
    }
    let n = points.len();
    let inconclusive = |decades: f64| ScalingFit {
        class: ScalingClass::Inconclusive,
        coefficient: 0.0,
        intercept: 0.0,
        residuals: [f64::INFINITY; 3],
        decades,
        margin: 0.0,
        n_points: n,
    };
    if n == 0 {
        return Ok(inconclusive(0.0));
    }
    let v_min = points[n - 1].0;
    let decades = (points[0].0 / v_min).log10();
    if n < MIN_POINTS || decades < MIN_DECADES {
        return Ok(inconclusive(decades));
    }

    let q: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fits: Vec<LineFit> = GROWTH
        .iter()
        .map(|&c| {
            let x: Vec<f64> = points.iter().map(|p| basis(c, p.0)).collect();
            least_squares(&x, &q)
        })
        .collect();
    let residuals = [fits[0].residual, fits[1].residual, fits[2].residual];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| residuals[a].total_cmp(&residuals[b]));
    let (best, second) = (order[0], order[1]);
    let margin = if residuals[best] > 0.0 {
        residuals[second] / residuals[best]
    } else if residuals[second] > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };

    // bounded: the last decade moves Q by little, both in absolute terms and
    // against what the best growth model predicts for that decade
    let q_final = q[n - 1];
    let last: Vec<f64> = points
        .iter()
        .filter(|p| p.0 <= 10.0 * v_min)
        .map(|p| p.1)
        .collect();
    let variation = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - last.iter().cloned().fold(f64::INFINITY, f64::min);
    let predicted = if residuals[best].is_finite() {
        let c = GROWTH[best];
        fits[best].slope * (basis(c, v_min) - basis(c, 10.0 * v_min))
    } else {
        0.0
    };
    let small = variation < BOUNDED_VARIATION * q_final.abs();
    if small && (predicted <= 0.0 || variation < 0.5 * predicted) {
        return Ok(ScalingFit {
            class: ScalingClass::Bounded,
            coefficient: 0.0,
            intercept: q_final,
            residuals,
            decades,
            margin,
            n_points: n,
        });
    }

    if !residuals[best].is_finite() || margin < MIN_MARGIN {
        return Ok(ScalingFit {
            residuals,
            margin,
            ..inconclusive(decades)
        });
    }
    Ok(ScalingFit {
        class: GROWTH[best],
        coefficient: fits[best].slope,
        intercept: fits[best].intercept,
        residuals,
        decades,
        margin,
        n_points: n,
    })
}

/// `(V, Q̄)` pairs of the clean points of a sweep with `V` at least `floor`,
/// sorted by decreasing `V`.
pub fn fit_points(curve: &TradeoffCurve, floor: f64) -> Vec<(f64, f64)> {
    curve
        .v_q_pairs()
        .into_iter()
        .filter(|&(v, _)| v >= floor && v > 0.0)
        .collect()
}

/// Error floor of `V` for a sweep: the worst per-point truncation error on
/// `P̄`, roundoff, and the supplied model error (e.g. grid error).
pub fn v_error_floor(curve: &TradeoffCurve, model_error: f64) -> f64 {
    let trunc = curve
        .points
        .iter()
        .filter(|p| p.is_clean())
        .map(|p| p.p_err)
        .fold(0.0, f64::max);
    let roundoff = 1e-13 * curve.c_ref.abs().max(1.0);
    trunc.max(roundoff).max(model_error)
}

/// Fits a sweep after dropping `V` below 100x its error floor.
pub fn fit_sweep(curve: &TradeoffCurve, model_error: f64) -> Result<ScalingFit> {
    fit_scaling(&fit_points(curve, 100.0 * v_error_floor(curve, model_error)))
}

/// How the model was discretized, for [`expected_class`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// integer batches
    Integer,
    /// real batches on a grid, strictly convex power
    GridConvex,
    /// real batches on a grid, piecewise-linear power
    GridPiecewiseLinear,
    /// admission control with a throughput target (integer batches)
    Admission,
}

pub fn expected_class(info: &CaseInfo, kind: ModelKind) -> ScalingClass {
    match (kind, info.case) {
        (ModelKind::GridConvex, _) => ScalingClass::InvSqrt,
        (_, Case::One) => ScalingClass::Bounded,
        (ModelKind::Admission, _) => ScalingClass::Log,
        (_, Case::Two) => ScalingClass::Log,
        (_, Case::Three) => ScalingClass::Inv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        (0..=30)
            .map(|i| {
                let v = 10f64.powf(-1.0 - 3.0 * i as f64 / 30.0);
                (v, f(v))
            })
            .collect()
    }

    #[test]
    fn exact_log() {
        let fit = fit_scaling(&series(|v| 3.0 * (1.0 / v).ln() + 1.0)).unwrap();
        assert_eq!(fit.class, ScalingClass::Log);
        assert!((fit.coefficient - 3.0).abs() < 1e-9);
        assert!((fit.intercept - 1.0).abs() < 1e-9);
        assert!((fit.decades - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_inv() {
        let fit = fit_scaling(&series(|v| 5.0 / v)).unwrap();
        assert_eq!(fit.class, ScalingClass::Inv);
        assert!((fit.coefficient - 5.0).abs() < 1e-9);
    }

    #[test]
    fn exact_inv_sqrt() {
        let fit = fit_scaling(&series(|v| 2.0 / v.sqrt() + 4.0)).unwrap();
        assert_eq!(fit.class, ScalingClass::InvSqrt);
    }

    #[test]
    fn saturating_is_bounded() {
        let fit = fit_scaling(&series(|v| 2.0 - (-1.0 / (100.0 * v)).exp())).unwrap();
        assert_eq!(fit.class, ScalingClass::Bounded);
    }

    #[test]
    fn slow_log_with_large_offset_is_not_bounded() {
        let fit = fit_scaling(&series(|v| 40.0 + (1.0 / v).ln())).unwrap();
        assert_eq!(fit.class, ScalingClass::Log);
    }

    #[test]
    fn too_few_points_or_decades() {
        let few: Vec<_> = series(|v| 1.0 / v).into_iter().step_by(5).collect();
        assert_eq!(fit_scaling(&few).unwrap().class, ScalingClass::Inconclusive);
        let narrow: Vec<_> = series(|v| 1.0 / v).into_iter().take(15).collect();
        assert_eq!(fit_scaling(&narrow).unwrap().class, ScalingClass::Inconclusive);
    }

    #[test]
    fn rejects_unsorted_and_nonpositive() {
        let mut s = series(|v| 1.0 / v);
        s.swap(0, 1);
        assert!(fit_scaling(&s).is_err());
        assert!(fit_scaling(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn expected_classes() {
        use crate::mincost::Line;
        let info = |case| CaseInfo {
            case,
            lambda: 0.5,
            s_l: 0.0,
            s_u: 1.0,
            line: Line {
                intercept: 0.0,
                slope: 1.0,
            },
            m_l: None,
            m_u: None,
            m: None,
        };
        assert_eq!(expected_class(&info(Case::Three), ModelKind::Integer), ScalingClass::Inv);
        assert_eq!(expected_class(&info(Case::Two), ModelKind::Integer), ScalingClass::Log);
        assert_eq!(expected_class(&info(Case::One), ModelKind::Integer), ScalingClass::Bounded);
        assert_eq!(expected_class(&info(Case::Two), ModelKind::GridConvex), ScalingClass::InvSqrt);
        assert_eq!(
            expected_class(&info(Case::Three), ModelKind::GridPiecewiseLinear),
            ScalingClass::Inv
        );
        assert_eq!(expected_class(&info(Case::Two), ModelKind::Admission), ScalingClass::Log);
        assert_eq!(expected_class(&info(Case::Three), ModelKind::Admission), ScalingClass::Log);
    }
}
