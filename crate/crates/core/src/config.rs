//! TOML experiment files.
//!
//! ```toml
//! theta = 0.3
//! moment_mode = "exact"                    # or "paper_literal"
//! aoi_network_weighting = "paper_theorem1" # or "unweighted"
//! seed = 7
//!
//! [pareto]            # sizes for classes that omit d_size / e_size
//! shape = 2.0
//! scale = 0.5
//! cap_multiplier = 5.0
//!
//! [pareto_output]     # optional; output sizes, defaults to [pareto]
//! shape = 2.0
//! scale = 0.05
//!
//! [network]
//! gamma = 112.0
//! zeta = 18.0
//!
//! [[vms]]
//! alpha = 82.0
//! beta = 10.0
//!
//! [[classes]]         # either explicit classes ...
//! lambda = 0.04
//! d_size = 1.0
//!
//! [class_generator]   # ... or lambda_j = base_rate / (j + 1), j = 1..count
//! count = 20
//! base_rate = 0.08
//! ```
//!
//! Missing compute sizes are drawn with `sample_class_sizes(pareto, J, seed)`
//! and missing output sizes with seed `seed ^ OUTPUT_SIZE_SEED_SALT`.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    sample_class_sizes, AoiNetworkWeighting, JobClass, MomentMode, NetworkProfile, ParetoSpec,
    SystemConfig, VmProfile,
};

pub const OUTPUT_SIZE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<usize>,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info_set: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGenerator {
    pub count: usize,
    pub base_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub theta: f64,
    #[serde(default)]
    pub moment_mode: MomentMode,
    #[serde(default)]
    pub aoi_network_weighting: AoiNetworkWeighting,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pareto: Option<ParetoSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pareto_output: Option<ParetoSpec>,
    pub network: NetworkProfile,
    #[serde(default)]
    pub vms: Vec<VmEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<ClassEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_generator: Option<ClassGenerator>,
}

impl FromStr for ConfigFile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(format!("config: {e}")))
    }
}

impl ConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        text.parse()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Builds the fully specified system, drawing any missing sizes.
    pub fn resolve(&self) -> Result<SystemConfig> {
        let entries: Vec<ClassEntry> = match (&self.class_generator, self.classes.is_empty()) {
            (Some(_), false) => {
                return Err(Error::Parse(
                    "config: give either [[classes]] or [class_generator], not both".into(),
                ))
            }
            (Some(g), true) => (1..=g.count)
                .map(|j| ClassEntry {
                    id: Some(j),
                    lambda: g.base_rate / (j as f64 + 1.0),
                    mu: g.mu,
                    d_size: None,
                    e_size: None,
                    info_set: None,
                })
                .collect(),
            (None, _) => self.classes.clone(),
        };
        let count = entries.len();

        let needs_d = entries.iter().any(|c| c.d_size.is_none());
        let needs_e = entries.iter().any(|c| c.e_size.is_none());
        let d_draws = if needs_d {
            let spec = self.pareto.ok_or_else(|| {
                Error::Parse("config: classes without d_size need a [pareto] section".into())
            })?;
            sample_class_sizes(&spec, count, self.seed)?
        } else {
            Vec::new()
        };
        let e_draws = if needs_e {
            let spec = self.pareto_output.or(self.pareto).ok_or_else(|| {
                Error::Parse("config: classes without e_size need a [pareto] section".into())
            })?;
            sample_class_sizes(&spec, count, self.seed ^ OUTPUT_SIZE_SEED_SALT)?
        } else {
            Vec::new()
        };

        let classes = entries
            .iter()
            .enumerate()
            .map(|(i, c)| JobClass {
                id: c.id.unwrap_or(i + 1),
                lambda: c.lambda,
                mu: c.mu,
                d_size: c.d_size.unwrap_or_else(|| d_draws[i]),
                e_size: c.e_size.unwrap_or_else(|| e_draws[i]),
                info_set: c.info_set.clone(),
            })
            .collect();
        let vms = self
            .vms
            .iter()
            .enumerate()
            .map(|(i, v)| VmProfile::new(v.id.unwrap_or(i + 1), v.alpha, v.beta))
            .collect();

        Ok(SystemConfig {
            classes,
            vms,
            network: self.network,
            theta: self.theta,
            moment_mode: self.moment_mode,
            aoi_network_weighting: self.aoi_network_weighting,
        })
    }

    /// Inverse of [`resolve`](Self::resolve) for a concrete system: every
    /// size is written out explicitly.
    pub fn from_system(config: &SystemConfig, seed: u64) -> Self {
        Self {
            theta: config.theta,
            moment_mode: config.moment_mode,
            aoi_network_weighting: config.aoi_network_weighting,
            seed,
            pareto: None,
            pareto_output: None,
            network: config.network,
            vms: config
                .vms
                .iter()
                .map(|v| VmEntry {
                    id: Some(v.id),
                    alpha: v.alpha,
                    beta: v.beta,
                })
                .collect(),
            classes: config
                .classes
                .iter()
                .map(|c| ClassEntry {
                    id: Some(c.id),
                    lambda: c.lambda,
                    mu: c.mu,
                    d_size: Some(c.d_size),
                    e_size: Some(c.e_size),
                    info_set: c.info_set.clone(),
                })
                .collect(),
            class_generator: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_config;

    const EXPLICIT: &str = r#"
theta = 0.25
moment_mode = "paper_literal"
seed = 3

[network]
gamma = 112.0
zeta = 18.0

[[vms]]
alpha = 82.0
beta = 10.0

[[vms]]
alpha = 76.0
beta = 12.0

[[classes]]
lambda = 0.01
d_size = 1.0
e_size = 0.5

[[classes]]
lambda = 0.02
d_size = 2.0
e_size = 0.25
mu = 0.1
info_set = [1, 2]
"#;

    #[test]
    fn explicit_classes_resolve_verbatim() {
        let cfg: ConfigFile = EXPLICIT.parse().unwrap();
        let sys = cfg.resolve().unwrap();
        assert_eq!(sys.moment_mode, MomentMode::PaperLiteral);
        assert_eq!(sys.num_classes(), 2);
        assert_eq!(sys.classes[1].id, 2);
        assert_eq!(sys.classes[1].info_set.as_deref(), Some(&[1, 2][..]));
        assert_eq!(sys.vms[1].beta, 12.0);
        assert!(validate_config(&sys).is_empty());
    }

    #[test]
    fn generator_draws_sizes_from_pareto() {
        let text = r#"
theta = 0.3
seed = 11
[pareto]
shape = 2.0
scale = 0.5
[network]
gamma = 112.0
zeta = 18.0
[[vms]]
alpha = 82.0
beta = 10.0
[class_generator]
count = 4
base_rate = 0.08
"#;
        let sys = text.parse::<ConfigFile>().unwrap().resolve().unwrap();
        assert_eq!(sys.num_classes(), 4);
        assert!((sys.classes[2].lambda - 0.02).abs() < 1e-15);
        for c in &sys.classes {
            assert!((0.5..=5.0).contains(&c.d_size));
            assert!((0.5..=5.0).contains(&c.e_size));
        }
        // deterministic in the seed
        let again = text.parse::<ConfigFile>().unwrap().resolve().unwrap();
        assert_eq!(sys, again);
    }

    #[test]
    fn missing_sizes_without_pareto_is_an_error() {
        let text = r#"
theta = 0.3
[network]
gamma = 1.0
zeta = 0.0
[[classes]]
lambda = 0.1
"#;
        assert!(text.parse::<ConfigFile>().unwrap().resolve().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!("theta = 0.3\nbogus = 1\n[network]\ngamma = 1.0\nzeta = 0.0\n"
            .parse::<ConfigFile>()
            .is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let sys = EXPLICIT.parse::<ConfigFile>().unwrap().resolve().unwrap();
        let file = ConfigFile::from_system(&sys, 3);
        let back: ConfigFile = file.to_toml().parse().unwrap();
        assert_eq!(back.resolve().unwrap(), sys);
    }
}
