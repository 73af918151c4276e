use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use whiskers::cohomology::FreeChoicePolicy;
use whiskers::error::{Error, Result};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub divisor_floor: Option<f64>,
    pub order_tolerance: Option<f64>,
    pub slope_slack: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorConfig {
    pub beta: f64,
    pub rho: f64,
}

impl Default for SectorConfig {
    fn default() -> Self {
        SectorConfig {
            beta: std::f64::consts::FRAC_PI_3,
            rho: 0.1,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub label: String,
    pub model: Option<PathBuf>,
    pub fixture: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterateConfig {
    pub steps: Option<usize>,
    pub x0: Option<f64>,
    pub theta0: Option<Vec<f64>>,
    pub state: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub on_manifold: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub primaries: Option<PathBuf>,
    pub x0: Option<f64>,
    pub horizon: Option<f64>,
    pub tol: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureConfig {
    pub b0: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub omega: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    pub tau: Option<f64>,
}

/// Contents of a run configuration file. Every field is optional; command
/// line flags take precedence.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub fixture: Option<String>,
    pub solution: Option<PathBuf>,
    pub order: Option<usize>,
    pub order_cap: Option<u32>,
    pub scan_depth: Option<u32>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<bool>,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub sector: Option<SectorConfig>,
    pub choices: Option<FreeChoicePolicy>,
    #[serde(default)]
    pub prescribed_x: BTreeMap<String, f64>,
    #[serde(default)]
    pub sweep: Vec<SweepEntry>,
    #[serde(default)]
    pub iterate: IterateConfig,
    #[serde(default)]
    pub demo: DemoConfig,
    #[serde(default)]
    pub fixture_params: FixtureConfig,
    #[serde(default)]
    pub scan: ScanConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.model);
        fix(&mut cfg.solution);
        fix(&mut cfg.out);
        fix(&mut cfg.demo.primaries);
        for s in &mut cfg.sweep {
            fix(&mut s.model);
        }
        Ok(cfg)
    }
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub fixture: Option<String>,
    pub solution: Option<PathBuf>,
    pub order: usize,
    pub order_cap: Option<u32>,
    pub scan_depth: u32,
    pub out: PathBuf,
    pub checkpoint: bool,
    pub divisor_floor: f64,
    pub order_tolerance: f64,
    pub slope_slack: f64,
    pub sector: SectorConfig,
    pub choices: FreeChoicePolicy,
    pub prescribed_x: BTreeMap<usize, f64>,
    pub sweep: Vec<SweepEntry>,
    pub iterate: IterateConfig,
    pub demo: DemoConfig,
    pub fixture_params: FixtureConfig,
    pub scan: ScanConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Invalid("order must be at least 1".into()));
        }
        for (name, v) in [
            ("divisor_floor", self.divisor_floor),
            ("order_tolerance", self.order_tolerance),
            ("slope_slack", self.slope_slack),
            ("sector.beta", self.sector.beta),
            ("sector.rho", self.sector.rho),
        ] {
            if !(v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for p in [&self.model, &self.solution, &self.demo.primaries].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} not found", p.display()),
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_prescribed(table: &BTreeMap<String, f64>) -> Result<BTreeMap<usize, f64>> {
    table
        .iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<usize>()
                .map(|l| (l, *v))
                .map_err(|_| Error::Invalid(format!("prescribed_x key {k:?} is not a degree")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prescribed_keys_are_degrees() {
        let t: BTreeMap<String, f64> = [("4".to_string(), -1.0), (" 5".to_string(), 1.0)].into();
        let p = parse_prescribed(&t).unwrap();
        assert_eq!(p, [(4, -1.0), (5, 1.0)].into());
        let bad: BTreeMap<String, f64> = [("x4".to_string(), 1.0)].into();
        assert!(parse_prescribed(&bad).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "model = \"m.json\"\nout = \"/abs/out\"\n[sector]\nbeta = 1.0\nrho = 0.05\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        assert_eq!(cfg.model.unwrap(), dir.path().join("m.json"));
        assert_eq!(cfg.out.unwrap(), PathBuf::from("/abs/out"));
        assert_eq!(cfg.sector.unwrap().rho, 0.05);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "ordr = 3\n").unwrap();
        assert!(matches!(FileConfig::load(&path), Err(Error::Invalid(_))));
    }
}
