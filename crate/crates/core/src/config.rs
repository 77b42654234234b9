//! Run configuration files and `β` grid specifications.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;

/// Parameters shared by the command-line pipelines. Paths are taken as
/// written; relative ones resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_grid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Grid step for the real-valued model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl RunConfig {
    pub fn new(model: impl Into<PathBuf>) -> Self {
        RunConfig {
            model: model.into(),
            lambda: None,
            rho: None,
            beta_grid: None,
            q_max: None,
            tol: None,
            seed: DEFAULT_SEED,
            out: None,
            delta: None,
            horizon: None,
            burn_in: None,
        }
    }

    /// Range checks on every numeric field that is present.
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::param("lambda", format!("{l} must be positive")));
            }
        }
        if let Some(r) = self.rho {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::param("rho", format!("{r} not in (0, 1]")));
            }
        }
        if let Some(g) = &self.beta_grid {
            g.parse::<BetaGrid>()?;
        }
        if self.q_max == Some(0) {
            return Err(Error::param("q_max", "must be at least 1"));
        }
        if let Some(t) = self.tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::param("tol", format!("{t} must be positive")));
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::param("delta", format!("{d} not in (0, 1]")));
            }
        }
        if let (Some(h), Some(b)) = (self.horizon, self.burn_in) {
            if h <= 2 * b {
                return Err(Error::param("horizon", format!("{h} must exceed twice burn_in = {b}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Log-spaced `lo:hi:N/decade` (endpoints included) or an explicit
/// comma-separated list.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaGrid(pub Vec<f64>);

impl BetaGrid {
    pub fn log_spaced(lo: f64, hi: f64, per_decade: usize) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::param("beta_grid", format!("need 0 < lo <= hi, got {lo}:{hi}")));
        }
        if per_decade == 0 {
            return Err(Error::param("beta_grid", "points per decade must be positive"));
        }
        let decades = (hi / lo).log10();
        let steps = (decades * per_decade as f64).round() as usize;
        if steps == 0 {
            return Ok(BetaGrid(vec![lo]));
        }
        let (a, b) = (lo.log10(), hi.log10());
        let mut v: Vec<f64> = (0..=steps)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / steps as f64))
            .collect();
        v[0] = lo;
        v[steps] = hi;
        Ok(BetaGrid(v))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl FromStr for BetaGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::param("beta_grid", format!("{s:?}: {why}"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("not a number"));
        let s = s.trim();
        if let Some((range, per)) = s.split_once('/') {
            if per.trim() != "decade" {
                return Err(bad("expected lo:hi:N/decade"));
            }
            let parts: Vec<&str> = range.split(':').collect();
            let [lo, hi, n] = parts[..] else {
                return Err(bad("expected lo:hi:N/decade"));
            };
            let n: usize = n.trim().parse().map_err(|_| bad("N must be a positive integer"))?;
            return Self::log_spaced(num(lo)?, num(hi)?, n);
        }
        let v = s.split(',').map(num).collect::<Result<Vec<f64>>>()?;
        if v.iter().any(|b| !(*b >= 0.0)) || v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(bad("values must be non-negative and increasing"));
        }
        Ok(BetaGrid(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_per_decade() {
        let g: BetaGrid = "1e-1:1e4:40/decade".parse().unwrap();
        assert_eq!(g.0.len(), 201);
        assert_eq!(g.0[0], 0.1);
        assert_eq!(g.0[200], 1e4);
        assert!((g.0[40] - 1.0).abs() < 1e-12);
        assert!(g.0.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn explicit_list() {
        let g: BetaGrid = "0, 1.5,10".parse().unwrap();
        assert_eq!(g.0, vec![0.0, 1.5, 10.0]);
        assert!("3,2".parse::<BetaGrid>().is_err());
        assert!("1:10:x/decade".parse::<BetaGrid>().is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::new("examples/example.json");
        c.lambda = Some(0.8);
        c.beta_grid = Some("1:100:5/decade".into());
        c.rho = Some(0.9);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn negative_rho_names_field() {
        let err = RunConfig::from_toml("model = \"m.json\"\nrho = -0.5\n").unwrap_err();
        assert!(err.to_string().contains("rho"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let err = RunConfig::from_toml("model = \"m.json\"\nspeed = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("speed") && msg.contains("line 2"), "{msg}");
    }
}
