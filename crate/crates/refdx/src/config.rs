//! Engine configuration: a TOML file, `ENGINE_*` environment overrides and
//! a JSON sidecar holding the calibrated threshold.

use std::path::{Path, PathBuf};

use refdx_core::confidence::{DEFAULT_MASK_RATE, DEFAULT_PASSES};
use refdx_core::diagnosis::{DEFAULT_K, DEFAULT_TOP_N};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const ENV_PREFIX: &str = "ENGINE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub passes: u32,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { passes: DEFAULT_PASSES, mask_rate: DEFAULT_MASK_RATE, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub library_path: PathBuf,
    /// Binary library or JSON-lines manifest (whose `ref` fields become
    /// external references) used for case retrieval.
    pub case_store_path: Option<PathBuf>,
    /// Labeled manifest evaluated by `GET /v1/metrics`.
    pub eval_manifest_path: Option<PathBuf>,
    pub k_neighbors: usize,
    pub top_n: usize,
    pub ensemble: EnsembleConfig,
    /// Fallback threshold; a calibrated value in the state file wins.
    pub theta_star: Option<f64>,
    /// Sidecar for the calibrated threshold. Defaults to
    /// `<library_path>.state.json`.
    pub state_path: Option<PathBuf>,
    pub listen_address: String,
    /// Expected embedding dimension; checked against the library on load.
    pub dim: Option<usize>,
    /// Seed of the toy image featurizer's projection.
    pub featurizer_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            library_path: PathBuf::from("library.grdl"),
            case_store_path: None,
            eval_manifest_path: None,
            k_neighbors: DEFAULT_K,
            top_n: DEFAULT_TOP_N,
            ensemble: EnsembleConfig::default(),
            theta_star: None,
            state_path: None,
            listen_address: "127.0.0.1:8080".into(),
            dim: None,
            featurizer_seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path.display().to_string(), e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.library_path);
        for p in [&mut self.case_store_path, &mut self.eval_manifest_path, &mut self.state_path].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `ENGINE_*` overrides, e.g. `ENGINE_K_NEIGHBORS=10` or
    /// `ENGINE_ENSEMBLE_SEED=3`. Unknown keys are errors.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (key, value) in vars {
            let Some(name) = key.as_ref().strip_prefix(ENV_PREFIX) else { continue };
            let v = value.as_ref();
            match name {
                "LIBRARY_PATH" => self.library_path = v.into(),
                "CASE_STORE_PATH" => self.case_store_path = Some(v.into()),
                "EVAL_MANIFEST_PATH" => self.eval_manifest_path = Some(v.into()),
                "STATE_PATH" => self.state_path = Some(v.into()),
                "LISTEN_ADDRESS" => self.listen_address = v.into(),
                "K_NEIGHBORS" => self.k_neighbors = parse(name, v)?,
                "TOP_N" => self.top_n = parse(name, v)?,
                "ENSEMBLE_PASSES" => self.ensemble.passes = parse(name, v)?,
                "ENSEMBLE_MASK_RATE" => self.ensemble.mask_rate = parse(name, v)?,
                "ENSEMBLE_SEED" => self.ensemble.seed = parse(name, v)?,
                "THETA_STAR" => self.theta_star = Some(parse(name, v)?),
                "DIM" => self.dim = Some(parse(name, v)?),
                "FEATURIZER_SEED" => self.featurizer_seed = parse(name, v)?,
                other => return Err(ServiceError::Config(format!("unknown override {ENV_PREFIX}{other}"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if self.k_neighbors == 0 {
            return bad("k_neighbors must be at least 1".into());
        }
        if self.top_n == 0 {
            return bad("top_n must be at least 1".into());
        }
        if self.ensemble.passes == 0 {
            return bad("ensemble.passes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ensemble.mask_rate) {
            return bad(format!("ensemble.mask_rate must be in [0, 1), got {}", self.ensemble.mask_rate));
        }
        if let Some(t) = self.theta_star {
            check_theta(t)?;
        }
        if matches!(self.dim, Some(d) if d < 2) {
            return bad("dim must be at least 2".into());
        }
        Ok(())
    }

    pub fn state_file(&self) -> PathBuf {
        self.state_path.clone().unwrap_or_else(|| {
            let mut p = self.library_path.clone().into_os_string();
            p.push(".state.json");
            p.into()
        })
    }
}

pub fn check_theta(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(ServiceError::Config(format!("theta must be in [0, 1], got {t}")))
    }
}

fn parse<T: std::str::FromStr>(name: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e| ServiceError::Config(format!("{ENV_PREFIX}{name}={v:?}: {e}")))
}

/// Calibration output persisted next to the library.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub theta_star: Option<f64>,
    /// Library generation the threshold was calibrated against.
    pub calibrated_generation: Option<u64>,
}

impl EngineState {
    /// A missing file is an empty state.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(ServiceError::io(path.display().to_string(), e)),
        }
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string_pretty(self).expect("state serializes");
        std::fs::write(&tmp, text).map_err(|e| ServiceError::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| ServiceError::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_toml() {
        let cfg = EngineConfig::from_toml("library_path = \"lib.grdl\"\n[ensemble]\nseed = 9\n").unwrap();
        assert_eq!(cfg.k_neighbors, 30);
        assert_eq!(cfg.top_n, 5);
        assert_eq!(cfg.ensemble, EnsembleConfig { passes: 100, mask_rate: 0.1, seed: 9 });
        cfg.validate().unwrap();
        assert_eq!(EngineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(EngineConfig::from_toml("k_neigbors = 3").is_err());
        let mut cfg = EngineConfig::default();
        assert!(cfg.apply_env([("ENGINE_NOPE", "1")]).is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = EngineConfig::default();
        cfg.apply_env([
            ("ENGINE_K_NEIGHBORS", "10"),
            ("ENGINE_ENSEMBLE_MASK_RATE", "0.2"),
            ("ENGINE_THETA_STAR", "0.55"),
            ("PATH", "/usr/bin"),
        ])
        .unwrap();
        assert_eq!(cfg.k_neighbors, 10);
        assert_eq!(cfg.ensemble.mask_rate, 0.2);
        assert_eq!(cfg.theta_star, Some(0.55));
        assert!(matches!(cfg.apply_env([("ENGINE_TOP_N", "x")]), Err(ServiceError::Config(_))));
    }

    #[test]
    fn ranges_are_checked() {
        for bad in ["k_neighbors = 0", "top_n = 0", "theta_star = 1.5", "dim = 1", "[ensemble]\nmask_rate = 1.0", "[ensemble]\npasses = 0"] {
            let cfg = EngineConfig::from_toml(bad).unwrap();
            assert!(cfg.validate().is_err(), "{bad}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("engine.toml");
        std::fs::write(&path, "library_path = \"lib.grdl\"\nstate_path = \"/abs/state.json\"\n").unwrap();
        let cfg = EngineConfig::load(&path).unwrap();
        assert_eq!(cfg.library_path, dir.path().join("lib.grdl"));
        assert_eq!(cfg.state_file(), PathBuf::from("/abs/state.json"));
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        assert_eq!(EngineState::load(&path).unwrap(), EngineState::default());
        let s = EngineState { theta_star: Some(0.45), calibrated_generation: Some(2) };
        s.save(&path).unwrap();
        assert_eq!(EngineState::load(&path).unwrap(), s);
    }
}
