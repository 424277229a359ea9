//! Policy comparisons and parameter sweeps producing long-format rows.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{analyze, AnalyticReport};
use crate::error::{Error, Result};
use crate::model::{ensure_valid, NetworkDiscipline, SystemConfig};
use crate::optimizer::{baseline_pca, baseline_rca, optimize_pps, OptimizerSettings, PcaMode};
use crate::scenarios::profile_vms;
use crate::schedule::ScheduleMatrix;
use crate::simulator::{run_simulation, SimConfig, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Optimized schedule, WSEPT networking.
    Pps,
    /// Uniform random assignment, WSEPT networking.
    Rca,
    /// Service-proportional assignment, WSEPT networking.
    Pca,
    /// Optimized schedule, FCFS networking.
    OcaFcfs,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Pps, Policy::Rca, Policy::Pca, Policy::OcaFcfs];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Pps => "pps",
            Policy::Rca => "rca",
            Policy::Pca => "pca",
            Policy::OcaFcfs => "ocafcfs",
        }
    }

    pub fn discipline(self) -> NetworkDiscipline {
        match self {
            Policy::OcaFcfs => NetworkDiscipline::Fcfs,
            _ => NetworkDiscipline::PriorityWsept,
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown policy '{s}' (pps, rca, pca, ocafcfs)")))
    }
}

/// A policy's schedule with its analytic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub policy: Policy,
    pub schedule: ScheduleMatrix,
    pub report: AnalyticReport,
}

/// Schedules for every policy, sharing one optimization between PPS and
/// OCA-FCFS.
pub fn evaluate_policies(
    config: &SystemConfig,
    settings: &OptimizerSettings,
    pca_mode: PcaMode,
) -> Result<Vec<PolicyEvaluation>> {
    ensure_valid(config)?;
    let optimized = optimize_pps(config, settings)?.schedule;
    let margin = settings.stability_margin;
    Policy::ALL
        .into_iter()
        .map(|policy| {
            let schedule = match policy {
                Policy::Pps | Policy::OcaFcfs => optimized.clone(),
                Policy::Rca => baseline_rca(config, margin)?,
                Policy::Pca => baseline_pca(config, pca_mode, margin)?,
            };
            let report = analyze(&schedule, config, policy.discipline())?;
            Ok(PolicyEvaluation {
                policy,
                schedule,
                report,
            })
        })
        .collect()
}

pub fn policy_schedule(
    config: &SystemConfig,
    policy: Policy,
    settings: &OptimizerSettings,
    pca_mode: PcaMode,
) -> Result<ScheduleMatrix> {
    let margin = settings.stability_margin;
    match policy {
        Policy::Pps | Policy::OcaFcfs => Ok(optimize_pps(config, settings)?.schedule),
        Policy::Rca => baseline_rca(config, margin),
        Policy::Pca => baseline_pca(config, pca_mode, margin),
    }
}

/// Simulates a schedule under a policy's networking discipline.
pub fn simulate_policy(
    config: &SystemConfig,
    policy: Policy,
    schedule: &ScheduleMatrix,
    sim: &SimConfig,
) -> Result<SimResult> {
    let sim = SimConfig {
        networking_discipline: policy.discipline(),
        ..sim.clone()
    };
    run_simulation(config, schedule, &sim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Tradeoff factor.
    Theta,
    /// Number of VMs, profiles cycled from the evaluation table.
    Vms,
    /// Multiplier on every arrival rate.
    LambdaScale,
    /// Multiplier on every arrival rate with classes split into
    /// [`WEIGHT_GROUPS`] groups of increasing base rate; emits per-group
    /// weighted age.
    Weights,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Theta => "theta",
            SweepAxis::Vms => "vms",
            SweepAxis::LambdaScale => "lambda-scale",
            SweepAxis::Weights => "weights",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Theta, SweepAxis::Vms, SweepAxis::LambdaScale, SweepAxis::Weights]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown sweep axis '{s}' (theta, vms, lambda-scale, weights)")))
    }
}

pub const WEIGHT_GROUPS: usize = 4;

/// Config at one sweep point.
pub fn sweep_point(base: &SystemConfig, axis: SweepAxis, value: f64) -> Result<SystemConfig> {
    let bad = |m: String| Err(Error::InvalidParameter(m));
    match axis {
        SweepAxis::Theta => {
            if !(0.0..=1.0).contains(&value) {
                return bad(format!("theta {value} outside [0, 1]"));
            }
            Ok(base.with_theta(value))
        }
        SweepAxis::Vms => {
            if value < 1.0 || value.fract() != 0.0 {
                return bad(format!("vm count {value} must be a positive integer"));
            }
            let mut cfg = base.clone();
            cfg.vms = profile_vms(value as usize);
            Ok(cfg)
        }
        SweepAxis::LambdaScale => {
            if !(value > 0.0) {
                return bad(format!("rate scale {value} must be positive"));
            }
            Ok(base.with_scaled_rates(value))
        }
        SweepAxis::Weights => {
            if !(value > 0.0) {
                return bad(format!("rate scale {value} must be positive"));
            }
            let mut cfg = base.with_scaled_rates(value);
            let j_count = cfg.num_classes();
            for (j, c) in cfg.classes.iter_mut().enumerate() {
                c.lambda *= (weight_group(j, j_count) + 1) as f64;
            }
            Ok(cfg)
        }
    }
}

/// Group (0-based) of class position `j` out of `j_count`.
pub fn weight_group(j: usize, j_count: usize) -> usize {
    j * WEIGHT_GROUPS / j_count.max(1)
}

/// One long-format output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: usize,
    pub axis: String,
    pub value: f64,
    pub policy: String,
    pub metric: String,
    pub metric_value: f64,
    pub feasible: bool,
    pub note: String,
}

pub const SWEEP_CSV_HEADER: [&str; 8] = [
    "point", "axis", "value", "policy", "metric", "metric_value", "feasible", "note",
];

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.point.to_string(),
            r.axis.clone(),
            r.value.to_string(),
            r.policy.clone(),
            r.metric.clone(),
            r.metric_value.to_string(),
            r.feasible.to_string(),
            r.note.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub optimizer: OptimizerSettings,
    pub pca_mode: PcaMode,
    /// Also simulate every policy when set.
    pub sim: Option<SimConfig>,
}

/// Evaluates all four policies at every point. Points run in parallel;
/// a point that cannot be made stable yields one flagged row and the
/// sweep continues.
pub fn run_sweep(base: &SystemConfig, axis: SweepAxis, values: &[f64], settings: &SweepSettings) -> Result<Vec<SweepRow>> {
    settings.optimizer.validate()?;
    if values.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one point".into()));
    }
    let per_point: Vec<Result<Vec<SweepRow>>> = values
        .par_iter()
        .enumerate()
        .map(|(point, &value)| {
            let cfg = sweep_point(base, axis, value)?;
            let flagged = |note: String| {
                vec![SweepRow {
                    point,
                    axis: axis.name().into(),
                    value,
                    policy: String::new(),
                    metric: String::new(),
                    metric_value: f64::NAN,
                    feasible: false,
                    note,
                }]
            };
            match sweep_rows(&cfg, point, axis, value, settings) {
                Ok(rows) => Ok(rows),
                Err(
                    e @ (Error::InvalidConfig(_)
                    | Error::Infeasible { .. }
                    | Error::VmUnstable { .. }
                    | Error::NetworkUnstable { .. }),
                ) => Ok(flagged(e.to_string())),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_point {
        rows.extend(r?);
    }
    Ok(rows)
}

fn sweep_rows(
    cfg: &SystemConfig,
    point: usize,
    axis: SweepAxis,
    value: f64,
    settings: &SweepSettings,
) -> Result<Vec<SweepRow>> {
    let evals = evaluate_policies(cfg, &settings.optimizer, settings.pca_mode)?;
    let mut rows = Vec::new();
    let mut push = |policy: Policy, metric: String, metric_value: f64, note: String| {
        rows.push(SweepRow {
            point,
            axis: axis.name().into(),
            value,
            policy: policy.name().into(),
            metric,
            metric_value,
            feasible: true,
            note,
        });
    };
    for ev in &evals {
        let r = &ev.report;
        push(ev.policy, "objective".into(), r.objective, String::new());
        push(ev.policy, "weighted_completion".into(), r.weighted_completion, String::new());
        push(ev.policy, "weighted_aoi".into(), r.weighted_aoi, String::new());
        if axis == SweepAxis::Weights {
            for g in 0..WEIGHT_GROUPS {
                let members: Vec<usize> = (0..cfg.num_classes())
                    .filter(|&j| weight_group(j, cfg.num_classes()) == g)
                    .collect();
                let total: f64 = members.iter().map(|&j| cfg.classes[j].lambda).sum();
                if total > 0.0 {
                    let aoi: f64 = members
                        .iter()
                        .map(|&j| cfg.classes[j].lambda / total * r.classes[j].aoi)
                        .sum();
                    push(ev.policy, format!("weighted_aoi_group_{}", g + 1), aoi, String::new());
                }
            }
        }
        if let Some(sim) = &settings.sim {
            let s = simulate_policy(cfg, ev.policy, &ev.schedule, sim)?;
            let note = if s.unstable { "backlog growing".to_string() } else { String::new() };
            for (name, est) in [
                ("sim_objective", s.objective),
                ("sim_weighted_completion", s.weighted_completion),
                ("sim_weighted_aoi", s.weighted_aoi),
            ] {
                push(ev.policy, name.into(), est.mean, note.clone());
                push(ev.policy, format!("{name}_hw"), est.hw(), note.clone());
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::desk_config;

    fn metric(rows: &[SweepRow], point: usize, policy: &str, metric: &str) -> f64 {
        rows.iter()
            .find(|r| r.point == point && r.policy == policy && r.metric == metric)
            .map(|r| r.metric_value)
            .unwrap()
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("fifo".parse::<Policy>().is_err());
        assert_eq!("lambda-scale".parse::<SweepAxis>().unwrap(), SweepAxis::LambdaScale);
    }

    #[test]
    fn infeasible_point_is_flagged_and_sweep_continues() {
        let base = desk_config(3).unwrap();
        let settings = SweepSettings {
            optimizer: OptimizerSettings {
                random_restarts: 0,
                ..OptimizerSettings::default()
            },
            pca_mode: PcaMode::PaperLiteral,
            sim: None,
        };
        let rows = run_sweep(&base, SweepAxis::LambdaScale, &[1.0, 50.0], &settings).unwrap();
        assert!(rows.iter().any(|r| r.point == 1 && !r.feasible));
        assert!(metric(&rows, 0, "pps", "objective").is_finite());
        assert!(metric(&rows, 0, "pps", "objective") <= metric(&rows, 0, "rca", "objective") + 1e-9);
    }

    #[test]
    fn weight_groups_partition_classes() {
        let groups: Vec<usize> = (0..10).map(|j| weight_group(j, 10)).collect();
        assert_eq!(groups, vec![0, 0, 0, 1, 1, 2, 2, 2, 3, 3]);
    }
}
