//! Domain types for the two-phase (compute, then networking) job pipeline.
//!
//! All times are in milliseconds and all rates in 1/ms. Job classes and VMs
//! carry 1-based ids; internally they are addressed by 0-based position.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobClass {
    pub id: usize,
    /// Request arrival rate (1/ms).
    pub lambda: f64,
    /// Information update rate (1/ms); only the simulator's staleness
    /// measurement uses it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Compute size, in work units.
    pub d_size: f64,
    /// Output size, in data units.
    pub e_size: f64,
    /// Classes whose information a job of this class reads. Defaults to
    /// the class itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info_set: Option<Vec<usize>>,
}

impl JobClass {
    pub fn new(id: usize, lambda: f64, d_size: f64, e_size: f64) -> Self {
        Self {
            id,
            lambda,
            mu: None,
            d_size,
            e_size,
            info_set: None,
        }
    }

    pub fn info_ids(&self) -> Vec<usize> {
        self.info_set.clone().unwrap_or_else(|| vec![self.id])
    }
}

/// Shifted-exponential compute speed of one VM: a unit-size job takes
/// `beta + Exp(alpha)` ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmProfile {
    pub id: usize,
    /// Exponential rate per unit size (1/ms).
    pub alpha: f64,
    /// Deterministic shift per unit size (ms).
    pub beta: f64,
}

impl VmProfile {
    pub fn new(id: usize, alpha: f64, beta: f64) -> Self {
        Self { id, alpha, beta }
    }

    /// Mean time to process one unit of work.
    pub fn unit_mean_time(&self) -> f64 {
        self.beta + 1.0 / self.alpha
    }

    /// `(rate, shift)` of the compute time of a job of size `d_size`.
    pub fn service_params(&self, d_size: f64) -> (f64, f64) {
        (self.alpha / d_size, self.beta * d_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    /// Exponential rate per unit output size (1/ms).
    pub gamma: f64,
    /// Shift per unit output size (ms).
    pub zeta: f64,
}

impl NetworkProfile {
    /// `(rate, shift)` of the transmission time of an output of size `e_size`.
    pub fn service_params(&self, e_size: f64) -> (f64, f64) {
        (self.gamma / e_size, self.zeta * e_size)
    }
}

/// How second moments of shifted-exponential service times are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    /// `E[(shift + Exp(rate))^2] = shift^2 + 2 shift/rate + 2/rate^2`.
    #[default]
    Exact,
    /// `shift^2 + shift + (shift + 2)/rate`, the historical printed form.
    PaperLiteral,
}

/// Whether the networking terms of the expected age carry the `lambda_j/Lambda`
/// factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AoiNetworkWeighting {
    #[default]
    PaperTheorem1,
    Unweighted,
}

/// Order in which the shared networking queue serves waiting jobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkDiscipline {
    /// Non-preemptive strict priority by decreasing `(w_j + g_j) / E_j`,
    /// FIFO within a class.
    #[default]
    PriorityWsept,
    /// Global arrival order.
    Fcfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub classes: Vec<JobClass>,
    pub vms: Vec<VmProfile>,
    pub network: NetworkProfile,
    /// Weight of completion time against age, in `[0, 1]`.
    pub theta: f64,
    #[serde(default)]
    pub moment_mode: MomentMode,
    #[serde(default)]
    pub aoi_network_weighting: AoiNetworkWeighting,
}

impl SystemConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_vms(&self) -> usize {
        self.vms.len()
    }

    /// Total arrival rate `lambda = sum_j lambda_j`.
    pub fn total_rate(&self) -> f64 {
        self.classes.iter().map(|c| c.lambda).sum()
    }

    /// Completion-time weight `w_j = lambda_j theta / lambda`.
    pub fn completion_weight(&self, class: usize) -> f64 {
        self.classes[class].lambda * self.theta / self.total_rate()
    }

    /// Age weight `g_j = lambda_j (1 - theta) / lambda`.
    pub fn age_weight(&self, class: usize) -> f64 {
        self.classes[class].lambda * (1.0 - self.theta) / self.total_rate()
    }

    /// Share of requests `lambda_j / lambda`, equal to `w_j + g_j`.
    pub fn rate_share(&self, class: usize) -> f64 {
        self.classes[class].lambda / self.total_rate()
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        Self {
            theta,
            ..self.clone()
        }
    }

    /// Copy with every arrival rate multiplied by `factor`.
    pub fn with_scaled_rates(&self, factor: f64) -> Self {
        let mut cfg = self.clone();
        for c in &mut cfg.classes {
            c.lambda *= factor;
        }
        cfg
    }

    /// Total compute demand `sum_j lambda_j D_j` in work units per ms.
    pub fn compute_demand(&self) -> f64 {
        self.classes.iter().map(|c| c.lambda * c.d_size).sum()
    }

    /// Work units per ms the VM pool absorbs while every VM stays at
    /// intensity `max_rho`.
    pub fn compute_capacity(&self, max_rho: f64) -> f64 {
        self.vms.iter().map(|v| max_rho / v.unit_mean_time()).sum()
    }

    /// Networking traffic intensity `sum_j lambda_j E[S_2,j]`.
    pub fn network_load(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| {
                let (rate, shift) = self.network.service_params(c.e_size);
                c.lambda * (shift + 1.0 / rate)
            })
            .sum()
    }
}

/// A violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every configuration invariant and returns all violations found.
pub fn validate_config(config: &SystemConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(0.0..=1.0).contains(&config.theta) {
        out.push(Violation::new("theta", "theta out of [0,1]"));
    }
    if config.classes.is_empty() {
        out.push(Violation::new("classes", "at least one job class is required"));
    }
    if config.vms.is_empty() {
        out.push(Violation::new("vms", "at least one VM is required"));
    }

    let num_classes = config.classes.len();
    for (i, c) in config.classes.iter().enumerate() {
        let field = |name: &str| format!("classes[{i}].{name}");
        if c.id != i + 1 {
            out.push(Violation::new(
                field("id"),
                format!("class ids must be 1..J in order; found {} at position {}", c.id, i + 1),
            ));
        }
        if !(c.lambda > 0.0 && c.lambda.is_finite()) {
            out.push(Violation::new(field("lambda"), "arrival rate must be positive"));
        }
        if !(c.d_size > 0.0 && c.d_size.is_finite()) {
            out.push(Violation::new(field("d_size"), "compute size must be positive"));
        }
        if !(c.e_size > 0.0 && c.e_size.is_finite()) {
            out.push(Violation::new(field("e_size"), "output size must be positive"));
        }
        if let Some(mu) = c.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                out.push(Violation::new(field("mu"), "update rate must be positive"));
            }
        }
        if let Some(set) = &c.info_set {
            if set.is_empty() {
                out.push(Violation::new(field("info_set"), "information set is empty"));
            }
            if let Some(bad) = set.iter().find(|&&k| k == 0 || k > num_classes) {
                out.push(Violation::new(
                    field("info_set"),
                    format!("unknown class id {bad}"),
                ));
            }
        }
    }

    for (i, v) in config.vms.iter().enumerate() {
        let field = |name: &str| format!("vms[{i}].{name}");
        if v.id != i + 1 {
            out.push(Violation::new(
                field("id"),
                format!("VM ids must be 1..V in order; found {} at position {}", v.id, i + 1),
            ));
        }
        if !(v.alpha > 0.0 && v.alpha.is_finite()) {
            out.push(Violation::new(field("alpha"), "rate must be positive"));
        }
        if !(v.beta >= 0.0 && v.beta.is_finite()) {
            out.push(Violation::new(field("beta"), "shift must be nonnegative"));
        }
    }

    let net = &config.network;
    if !(net.gamma > 0.0 && net.gamma.is_finite()) {
        out.push(Violation::new("network.gamma", "rate must be positive"));
    }
    if !(net.zeta >= 0.0 && net.zeta.is_finite()) {
        out.push(Violation::new("network.zeta", "shift must be nonnegative"));
    }

    // Load checks only make sense once the individual fields are sane.
    if out.is_empty() {
        let rho = config.network_load();
        if rho >= 1.0 {
            out.push(Violation::new(
                "network.load",
                format!("networking queue unstable (rho = {rho:.6})"),
            ));
        }
        let demand = config.compute_demand();
        let capacity = config.compute_capacity(1.0);
        if demand >= capacity {
            out.push(Violation::new(
                "vms.load",
                format!(
                    "compute pool overloaded: demand {demand:.6} >= capacity {capacity:.6} work units/ms"
                ),
            ));
        }
    }
    out
}

/// Violations other than the two load checks, whose fields end in `.load`.
pub fn structural_violations(config: &SystemConfig) -> Vec<Violation> {
    validate_config(config)
        .into_iter()
        .filter(|v| !v.field.ends_with(".load"))
        .collect()
}

/// Returns `Err(InvalidConfig)` unless the configuration is valid.
pub fn ensure_valid(config: &SystemConfig) -> Result<()> {
    let violations = validate_config(config);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(violations))
    }
}

/// Pareto size distribution `P(D > u) = (scale/u)^shape` for `u >= scale`,
/// clipped at `cap_multiplier` times its mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoSpec {
    pub shape: f64,
    pub scale: f64,
    #[serde(default = "default_cap_multiplier")]
    pub cap_multiplier: f64,
}

fn default_cap_multiplier() -> f64 {
    5.0
}

impl ParetoSpec {
    pub fn new(shape: f64, scale: f64, cap_multiplier: f64) -> Result<Self> {
        let spec = Self {
            shape,
            scale,
            cap_multiplier,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.shape > 1.0 && self.shape.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Pareto shape must exceed 1 for a finite mean, got {}",
                self.shape
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Pareto scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.cap_multiplier > 0.0) || self.cap() < self.scale {
            return Err(Error::InvalidParameter(format!(
                "Pareto cap {} x mean falls below the support minimum {}",
                self.cap_multiplier, self.scale
            )));
        }
        Ok(())
    }

    /// Mean of the unclipped distribution, `shape * scale / (shape - 1)`.
    pub fn mean(&self) -> f64 {
        self.shape * self.scale / (self.shape - 1.0)
    }

    pub fn cap(&self) -> f64 {
        self.cap_multiplier * self.mean()
    }
}

/// Draws one clipped Pareto size per class. Sizes are per-class constants,
/// so this is called once per experiment, not per job.
pub fn sample_class_sizes(spec: &ParetoSpec, count: usize, seed: u64) -> Result<Vec<f64>> {
    spec.check()?;
    if count == 0 {
        return Err(Error::InvalidParameter("class count must be at least 1".into()));
    }
    let dist = Pareto::new(spec.scale, spec.shape)
        .map_err(|e| Error::InvalidParameter(format!("Pareto: {e}")))?;
    let cap = spec.cap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| dist.sample(&mut rng).min(cap)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_class(lambda: f64) -> SystemConfig {
        SystemConfig {
            classes: vec![JobClass::new(1, lambda, 1.0, 1.0)],
            vms: vec![VmProfile::new(1, 82.0, 10.0)],
            network: NetworkProfile {
                gamma: 112.0,
                zeta: 18.0,
            },
            theta: 0.5,
            moment_mode: MomentMode::Exact,
            aoi_network_weighting: AoiNetworkWeighting::PaperTheorem1,
        }
    }

    #[test]
    fn theta_out_of_range_is_reported() {
        let mut cfg = one_class(0.04);
        cfg.theta = 1.2;
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "theta");
        assert!(v[0].message.contains("theta out of [0,1]"));
    }

    #[test]
    fn network_load_example_is_valid() {
        let cfg = one_class(0.04);
        // 0.04 * (18 + 1/112)
        assert!((cfg.network_load() - 0.720_357_142_857).abs() < 1e-9);
        assert!(validate_config(&cfg).is_empty());
    }

    #[test]
    fn overloaded_network_is_reported() {
        let cfg = one_class(0.06);
        assert!((cfg.network_load() - 1.080_535_714_286).abs() < 1e-9);
        let v = validate_config(&cfg);
        assert!(v.iter().any(|x| x.message.contains("networking queue unstable")));
    }

    #[test]
    fn every_bad_field_is_reported() {
        let mut cfg = one_class(0.04);
        cfg.classes[0].lambda = 0.0;
        cfg.classes[0].e_size = -1.0;
        cfg.vms[0].beta = -2.0;
        cfg.vms[0].id = 3;
        let fields: Vec<_> = validate_config(&cfg).into_iter().map(|v| v.field).collect();
        assert_eq!(
            fields,
            ["classes[0].lambda", "classes[0].e_size", "vms[0].id", "vms[0].beta"]
        );
    }

    #[test]
    fn overloaded_compute_pool_is_reported() {
        let mut cfg = one_class(0.04);
        cfg.classes[0].d_size = 3.0; // 0.04 * 3 * 10.012 > 1
        let v = validate_config(&cfg);
        assert!(v.iter().any(|x| x.field == "vms.load"));
    }

    #[test]
    fn pareto_shape_must_exceed_one() {
        assert!(ParetoSpec::new(1.0, 300.0, 5.0).is_err());
        assert!(ParetoSpec::new(0.5, 300.0, 5.0).is_err());
        assert!(ParetoSpec::new(2.0, 300.0, 5.0).is_ok());
    }

    #[test]
    fn pareto_sizes_stay_within_support_and_cap() {
        let spec = ParetoSpec::new(2.0, 300.0, 5.0).unwrap();
        assert_eq!(spec.mean(), 600.0);
        let sizes = sample_class_sizes(&spec, 10_000, 11).unwrap();
        assert!(sizes.iter().all(|&s| (300.0..=3000.0).contains(&s)));
        assert!(sizes.contains(&3000.0));
    }

    #[test]
    fn unit_cap_clips_to_the_mean() {
        let spec = ParetoSpec::new(2.0, 300.0, 1.0).unwrap();
        let sizes = sample_class_sizes(&spec, 20_000, 5).unwrap();
        assert!(sizes.iter().all(|&s| (300.0..=600.0).contains(&s)));
        let clipped = sizes.iter().filter(|&&s| s == 600.0).count() as f64 / 20_000.0;
        // P(X > 600) = (300/600)^2
        assert!((clipped - 0.25).abs() < 0.02, "{clipped}");
    }

    #[test]
    fn sizes_are_reproducible() {
        let spec = ParetoSpec::new(2.0, 1.0, 5.0).unwrap();
        assert_eq!(
            sample_class_sizes(&spec, 50, 9).unwrap(),
            sample_class_sizes(&spec, 50, 9).unwrap()
        );
        assert_ne!(
            sample_class_sizes(&spec, 50, 9).unwrap(),
            sample_class_sizes(&spec, 50, 10).unwrap()
        );
    }
}
