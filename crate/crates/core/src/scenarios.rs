//! Ready-made instances: the ten VM profiles of the evaluation table, the
//! desk-scale default experiment, a random instance family for property
//! checks, and the deterministic two-policy example.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ClassGenerator, ConfigFile, VmEntry};
use crate::error::Result;
use crate::model::{
    sample_class_sizes, AoiNetworkWeighting, JobClass, MomentMode, NetworkDiscipline, NetworkProfile, ParetoSpec,
    SystemConfig, VmProfile,
};
use crate::simulator::{scripted_arrivals, ScriptedJob};

/// `(alpha, beta)` per VM, alpha in 1/ms and beta in ms.
pub const VM_PROFILES: [(f64, f64); 10] = [
    (82.0, 10.0),
    (76.0, 12.0),
    (71.0, 13.0),
    (65.0, 17.0),
    (60.0, 16.0),
    (51.0, 18.0),
    (44.0, 20.0),
    (39.0, 21.0),
    (34.0, 23.0),
    (29.0, 25.0),
];

pub const NETWORK: NetworkProfile = NetworkProfile {
    gamma: 112.0,
    zeta: 18.0,
};

pub const DESK_CLASSES: usize = 20;
pub const DESK_VMS: usize = 5;
pub const DESK_BASE_RATE: f64 = 0.08;
pub const DESK_THETA: f64 = 0.3;

/// The first `count` rows of [`VM_PROFILES`], cycling past ten.
pub fn profile_vms(count: usize) -> Vec<VmProfile> {
    (0..count)
        .map(|v| {
            let (alpha, beta) = VM_PROFILES[v % VM_PROFILES.len()];
            VmProfile::new(v + 1, alpha, beta)
        })
        .collect()
}

pub fn desk_compute_sizes() -> ParetoSpec {
    ParetoSpec {
        shape: 2.0,
        scale: 0.5,
        cap_multiplier: 5.0,
    }
}

pub fn desk_output_sizes() -> ParetoSpec {
    ParetoSpec {
        shape: 2.0,
        scale: 0.05,
        cap_multiplier: 5.0,
    }
}

/// Desk-scale experiment file: 20 classes with `lambda_j = 0.08 / (j + 1)`,
/// the first five table VMs, Pareto sizes, `theta = 0.3`.
pub fn desk_config_file(seed: u64) -> ConfigFile {
    ConfigFile {
        theta: DESK_THETA,
        moment_mode: MomentMode::Exact,
        aoi_network_weighting: AoiNetworkWeighting::PaperTheorem1,
        seed,
        pareto: Some(desk_compute_sizes()),
        pareto_output: Some(desk_output_sizes()),
        network: NETWORK,
        vms: VM_PROFILES[..DESK_VMS]
            .iter()
            .map(|&(alpha, beta)| VmEntry { id: None, alpha, beta })
            .collect(),
        classes: Vec::new(),
        class_generator: Some(ClassGenerator {
            count: DESK_CLASSES,
            base_rate: DESK_BASE_RATE,
            mu: None,
        }),
    }
}

pub fn desk_config(seed: u64) -> Result<SystemConfig> {
    desk_config_file(seed).resolve()
}

/// Knobs for [`random_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFamily {
    pub min_classes: usize,
    pub max_classes: usize,
    pub min_vms: usize,
    pub max_vms: usize,
    /// Target `sum lambda_j D_j` over the pool's full capacity, drawn
    /// uniformly from this range.
    pub compute_load: (f64, f64),
    /// Rates are scaled down further if networking would exceed this.
    pub max_network_load: f64,
    pub compute_sizes: ParetoSpec,
    pub output_sizes: ParetoSpec,
    pub moment_mode: MomentMode,
    pub aoi_network_weighting: AoiNetworkWeighting,
}

impl Default for InstanceFamily {
    fn default() -> Self {
        Self {
            min_classes: 2,
            max_classes: 6,
            min_vms: 2,
            max_vms: 5,
            compute_load: (0.3, 0.8),
            max_network_load: 0.8,
            compute_sizes: desk_compute_sizes(),
            output_sizes: desk_output_sizes(),
            moment_mode: MomentMode::Exact,
            aoi_network_weighting: AoiNetworkWeighting::PaperTheorem1,
        }
    }
}

/// Draws a stable instance: class and VM counts uniform in the family's
/// ranges, VMs sampled from [`VM_PROFILES`] without replacement, rates
/// proportional to `1/(j+1)` scaled to the drawn load, `theta ~ U[0,1]`.
pub fn random_instance(family: &InstanceFamily, seed: u64) -> Result<SystemConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j_count = rng.random_range(family.min_classes..=family.max_classes);
    let v_count = rng.random_range(family.min_vms..=family.max_vms);

    let mut rows: Vec<usize> = (0..VM_PROFILES.len()).collect();
    for i in 0..v_count.min(rows.len()) {
        let k = rng.random_range(i..rows.len());
        rows.swap(i, k);
    }
    let vms: Vec<VmProfile> = (0..v_count)
        .map(|v| {
            let (alpha, beta) = VM_PROFILES[rows[v % rows.len()]];
            VmProfile::new(v + 1, alpha, beta)
        })
        .collect();

    let d = sample_class_sizes(&family.compute_sizes, j_count, rng.random())?;
    let e = sample_class_sizes(&family.output_sizes, j_count, rng.random())?;
    let classes: Vec<JobClass> = (0..j_count)
        .map(|j| JobClass::new(j + 1, 1.0 / (j as f64 + 2.0), d[j], e[j]))
        .collect();
    let (lo, hi) = family.compute_load;
    let target = lo + (hi - lo) * rng.random::<f64>();
    let theta = rng.random::<f64>();

    let cfg = SystemConfig {
        classes,
        vms,
        network: NETWORK,
        theta,
        moment_mode: family.moment_mode,
        aoi_network_weighting: family.aoi_network_weighting,
    };
    let mut factor = target * cfg.compute_capacity(1.0) / cfg.compute_demand();
    let net = cfg.network_load() * factor;
    if net > family.max_network_load {
        factor *= family.max_network_load / net;
    }
    Ok(cfg.with_scaled_rates(factor))
}

/// Per-job weights of the two-policy example; job 1 is identical under both
/// policies and carries no weight.
pub const TWO_POLICY_WEIGHTS: [f64; 3] = [0.0, 1.0, 0.5];

/// Deterministic compute and networking times of jobs 1-3.
pub const TWO_POLICY_COMPUTE: [f64; 3] = [50.0, 15.0, 1.0];
pub const TWO_POLICY_NETWORK: [f64; 3] = [20.0, 7.0, 0.1];

/// Three single-job classes on two VMs. Service parameters are placeholders;
/// the scripted run fixes every service time.
pub fn two_policy_config() -> SystemConfig {
    SystemConfig {
        classes: (1..=3).map(|j| JobClass::new(j, 0.001, 1.0, 1.0)).collect(),
        vms: profile_vms(2),
        network: NETWORK,
        theta: 0.5,
        moment_mode: MomentMode::Exact,
        aoi_network_weighting: AoiNetworkWeighting::Unweighted,
    }
}

/// VM (1-based) of each job under policy 1 or 2.
pub fn two_policy_assignment(policy: usize) -> [usize; 3] {
    match policy {
        1 => [1, 1, 2],
        _ => [1, 2, 1],
    }
}

pub fn two_policy_jobs(policy: usize) -> Vec<ScriptedJob> {
    let vm = two_policy_assignment(policy);
    (0..3)
        .map(|j| ScriptedJob {
            release: 0.0,
            class: j + 1,
            vm: vm[j],
            compute_time: TWO_POLICY_COMPUTE[j],
            network_time: TWO_POLICY_NETWORK[j],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPolicyOutcome {
    pub policy: usize,
    pub completions: [f64; 3],
    pub ages: [f64; 3],
    pub weighted_completion: f64,
    pub weighted_age: f64,
}

/// Replays both policies with FCFS networking.
pub fn run_two_policy_example() -> Result<Vec<TwoPolicyOutcome>> {
    let cfg = two_policy_config();
    [1, 2]
        .into_iter()
        .map(|policy| {
            let result = scripted_arrivals(&cfg, &two_policy_jobs(policy), NetworkDiscipline::Fcfs)?;
            let records = result.records.unwrap_or_default();
            let mut completions = [0.0; 3];
            let mut ages = [0.0; 3];
            for r in &records {
                completions[r.class - 1] = r.completion();
                ages[r.class - 1] = r.aoi();
            }
            let dot = |x: &[f64; 3]| x.iter().zip(TWO_POLICY_WEIGHTS).map(|(a, w)| a * w).sum();
            Ok(TwoPolicyOutcome {
                policy,
                weighted_completion: dot(&completions),
                weighted_age: dot(&ages),
                completions,
                ages,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_config;

    #[test]
    fn two_policy_example_matches_hand_schedule() {
        let out = run_two_policy_example().unwrap();
        assert_eq!(out[0].completions, [70.0, 77.0, 1.1]);
        assert_eq!(out[1].completions, [70.0, 22.0, 70.1]);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        assert!(close(out[0].ages[1], 27.0) && close(out[0].ages[2], 1.1));
        assert!(close(out[1].ages[1], 22.0) && close(out[1].ages[2], 20.1));
        assert!(close(out[0].weighted_age, 27.55));
        assert!(close(out[1].weighted_age, 32.05));
        assert!(close(out[0].weighted_completion, 77.55));
        assert!(close(out[1].weighted_completion, 57.05));
    }

    #[test]
    fn desk_config_is_valid_and_moderately_loaded() {
        let cfg = desk_config(1).unwrap();
        assert!(validate_config(&cfg).is_empty());
        assert_eq!(cfg.num_classes(), 20);
        assert_eq!(cfg.num_vms(), 5);
        let load = cfg.compute_demand() / cfg.compute_capacity(1.0);
        assert!(load > 0.1 && load < 0.9, "{load}");
    }

    #[test]
    fn random_instances_are_valid_and_reproducible() {
        let fam = InstanceFamily::default();
        for seed in 0..50 {
            let cfg = random_instance(&fam, seed).unwrap();
            assert!(validate_config(&cfg).is_empty(), "seed {seed}");
            assert!((2..=6).contains(&cfg.num_classes()));
            assert!((2..=5).contains(&cfg.num_vms()));
            assert!(cfg.network_load() <= 0.8 + 1e-12);
            assert_eq!(cfg, random_instance(&fam, seed).unwrap());
        }
    }

    #[test]
    fn table_vms_cycle() {
        let vms = profile_vms(12);
        assert_eq!(vms[10].alpha, 82.0);
        assert_eq!(vms[11].beta, 12.0);
        assert_eq!(vms[11].id, 12);
    }
}
