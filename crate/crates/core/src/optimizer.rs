//! Projected gradient descent over PPS schedules, plus the baseline
//! schedules it is compared against.
//!
//! The feasible set is the product of per-class probability simplices cut by
//! the per-VM stability constraints `rho_v <= 1 - margin`. Iterates are
//! projected onto that polytope, so every accepted point is stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{
    aoi_network_factor, check_shape, network_waiting_times, net_service_moments, ServiceTable,
    VmLoads, DEFAULT_STABILITY_MARGIN,
};
use crate::error::{Error, Result};
use crate::model::{ensure_valid, NetworkDiscipline, SystemConfig};
use crate::schedule::{Matrix, ScheduleMatrix};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 80;
const MAX_STEP_GROWTH: f64 = 1e8;
const MIN_STEP: f64 = 1e-12;
const PROJECTION_SWEEPS: usize = 2000;
/// Extra slack under `1 - margin` so recomputed intensities stay inside.
const CAPACITY_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub initial_step: f64,
    pub armijo_shrink: f64,
    pub stability_margin: f64,
    pub seed: u64,
    /// Use central finite differences instead of the analytic gradient.
    pub finite_difference_gradient: bool,
    /// Extra descents from seeded random schedules, on top of the uniform,
    /// capacity-proportional and service-proportional starts.
    pub random_restarts: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            rel_tol: 1e-8,
            initial_step: 0.1,
            armijo_shrink: 0.5,
            stability_margin: DEFAULT_STABILITY_MARGIN,
            seed: 0,
            finite_difference_gradient: false,
            random_restarts: 2,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.rel_tol > 0.0) {
            return bad("rel_tol must be positive");
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return bad("initial_step must be positive");
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return bad("armijo_shrink must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.stability_margin) {
            return bad("stability_margin must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeTrace {
    /// Objective of iterate `k` at index `k`; index 0 is the starting point.
    pub objectives: Vec<f64>,
    pub schedule: ScheduleMatrix,
    pub iterations: usize,
    pub converged: bool,
}

impl OptimizeTrace {
    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().expect("trace holds the starting point")
    }

    /// `iteration,objective` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "objective"])?;
        for (k, f) in self.objectives.iter().enumerate() {
            w.write_record(&[k.to_string(), f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes a schedule as `class,vm_1,...,vm_V` rows.
pub fn write_schedule_csv<W: std::io::Write>(p: &Matrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["class".to_string()];
    header.extend((1..=p.cols()).map(|v| format!("vm_{v}")));
    w.write_record(&header)?;
    for j in 0..p.rows() {
        let mut rec = vec![(j + 1).to_string()];
        rec.extend(p.row(j).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format written by [`write_schedule_csv`].
pub fn read_schedule_csv<R: std::io::Read>(input: R) -> Result<ScheduleMatrix> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row: std::result::Result<Vec<f64>, _> =
            rec.iter().skip(1).map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Parse(format!("schedule row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    ScheduleMatrix::from_rows(&rows)
}

/// Euclidean projection of one row onto the probability simplex.
pub fn project_simplex_row(row: &mut [f64]) {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    for x in row.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
    // Inputs of large magnitude leave a rounding residue in the sum.
    let sum: f64 = row.iter().sum();
    if sum != 1.0 && sum > 0.0 {
        row.iter_mut().for_each(|x| *x /= sum);
    }
}

pub fn project_simplex_rows(m: &Matrix) -> ScheduleMatrix {
    let mut out = m.clone();
    for j in 0..out.rows() {
        project_simplex_row(out.row_mut(j));
    }
    ScheduleMatrix::from_projected(out)
}

/// Schedule-independent pieces of the objective, for repeated evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveModel<'a> {
    config: &'a SystemConfig,
    table: ServiceTable,
    /// Networking contribution, constant in the schedule.
    constant: f64,
    total_rate: f64,
}

impl<'a> ObjectiveModel<'a> {
    pub fn new(config: &'a SystemConfig, discipline: NetworkDiscipline) -> Result<Self> {
        let net = net_service_moments(config);
        let waits = network_waiting_times(config, discipline)?;
        let theta = config.theta;
        let constant = (0..config.num_classes())
            .map(|j| {
                let factor = theta + (1.0 - theta) * aoi_network_factor(config, j);
                config.rate_share(j) * factor * (waits[j] + net.mean[j])
            })
            .sum();
        Ok(Self {
            config,
            table: ServiceTable::new(config),
            constant,
            total_rate: config.total_rate(),
        })
    }

    /// `(theta/lambda) sum_v Lambda_v W_v + (1/lambda) sum lambda_j p m1 + const`.
    pub fn value(&self, p: &Matrix) -> Result<f64> {
        check_shape(p, self.config)?;
        let loads = VmLoads::new(p, self.config, &self.table);
        let waits = loads.waits(self.config)?;
        let queueing: f64 = loads.arrival.iter().zip(&waits).map(|(a, w)| a * w).sum();
        let mut service = 0.0;
        for (j, class) in self.config.classes.iter().enumerate() {
            for v in 0..self.config.num_vms() {
                service += class.lambda * p.get(j, v) * self.table.mean.get(j, v);
            }
        }
        Ok((self.config.theta * queueing + service) / self.total_rate + self.constant)
    }

    pub fn gradient(&self, p: &Matrix) -> Result<Matrix> {
        check_shape(p, self.config)?;
        let cfg = self.config;
        let loads = VmLoads::new(p, cfg, &self.table);
        let waits = loads.waits(cfg)?;
        let theta = cfg.theta;
        let mut g = Matrix::zeros(cfg.num_classes(), cfg.num_vms());
        for (j, class) in cfg.classes.iter().enumerate() {
            let lj = class.lambda;
            for v in 0..cfg.num_vms() {
                let m1 = self.table.mean.get(j, v);
                let m2 = self.table.second.get(j, v);
                let slack = 1.0 - loads.rho[v];
                let dwait = m2 / (2.0 * slack) + loads.second_flux[v] * m1 / (2.0 * slack * slack);
                let value = lj * (theta * waits[v] + m1) + theta * loads.arrival[v] * lj * dwait;
                g.set(j, v, value / self.total_rate);
            }
        }
        Ok(g)
    }

    /// Central differences with step `h * max(1, |p|)`.
    pub fn finite_difference_gradient(&self, p: &Matrix, h: f64) -> Result<Matrix> {
        let mut g = Matrix::zeros(p.rows(), p.cols());
        let mut probe = p.clone();
        for j in 0..p.rows() {
            for v in 0..p.cols() {
                let x = p.get(j, v);
                let step = h * x.abs().max(1.0);
                probe.set(j, v, x + step);
                let up = self.value(&probe)?;
                probe.set(j, v, x - step);
                let down = self.value(&probe)?;
                probe.set(j, v, x);
                g.set(j, v, (up - down) / (2.0 * step));
            }
        }
        Ok(g)
    }
}

/// Analytic gradient of [`crate::analytics::objective`] with respect to `p`.
pub fn objective_gradient(p: &Matrix, config: &SystemConfig) -> Result<Matrix> {
    ObjectiveModel::new(config, NetworkDiscipline::PriorityWsept)?.gradient(p)
}

/// Per-(class, VM) load coefficients `a[j][v] = lambda_j E[S1_jv]`, so that
/// `rho_v = sum_j a[j][v] p[j][v]`.
fn load_coefficients(config: &SystemConfig) -> Matrix {
    let table = ServiceTable::new(config);
    let mut a = table.mean;
    for (j, class) in config.classes.iter().enumerate() {
        for x in a.row_mut(j) {
            *x *= class.lambda;
        }
    }
    a
}

fn column_loads(a: &Matrix, x: &Matrix) -> Vec<f64> {
    let mut loads = vec![0.0; x.cols()];
    for j in 0..x.rows() {
        for (v, load) in loads.iter_mut().enumerate() {
            *load += a.get(j, v) * x.get(j, v);
        }
    }
    loads
}

fn check_capacity(config: &SystemConfig, margin: f64) -> Result<()> {
    let demand = config.compute_demand();
    let capacity = config.compute_capacity(1.0 - margin);
    if demand >= capacity {
        return Err(Error::Infeasible { demand, capacity });
    }
    Ok(())
}

/// Every class split proportionally to VM throughput `1 / E[unit time]`;
/// equalizes intensities across VMs.
fn capacity_proportional(config: &SystemConfig) -> Matrix {
    let caps: Vec<f64> = config.vms.iter().map(|v| 1.0 / v.unit_mean_time()).collect();
    let total: f64 = caps.iter().sum();
    let mut m = Matrix::zeros(config.num_classes(), config.num_vms());
    for j in 0..m.rows() {
        for (v, c) in caps.iter().enumerate() {
            m.set(j, v, c / total);
        }
    }
    m
}

fn shifted_rows(y: &Matrix, a: &Matrix, mu: &[f64], out: &mut Matrix) {
    for j in 0..y.rows() {
        let row = out.row_mut(j);
        for (v, x) in row.iter_mut().enumerate() {
            *x = y.get(j, v) - mu[v] * a.get(j, v);
        }
        project_simplex_row(row);
    }
}

fn in_polytope(y: &Matrix, a: &Matrix, bound: f64) -> bool {
    ScheduleMatrix::new(y.clone()).is_ok() && column_loads(a, y).iter().all(|&l| l <= bound)
}

/// Euclidean projection of `y` onto the stable schedules
/// `{rows on the simplex, rho_v <= 1 - margin}`.
///
/// Solved by coordinate ascent on the multipliers of the VM constraints,
/// each row being a simplex projection of `y_j - mu * a_j`. Any residual
/// violation left by the iteration is removed by moving toward the
/// capacity-proportional schedule, which is strictly feasible.
pub fn project_feasible(y: &Matrix, config: &SystemConfig, margin: f64) -> Result<ScheduleMatrix> {
    check_shape(y, config)?;
    check_capacity(config, margin)?;
    let a = load_coefficients(config);
    let bound = 1.0 - margin - CAPACITY_SLACK;
    if in_polytope(y, &a, bound) {
        return Ok(ScheduleMatrix::from_projected(y.clone()));
    }

    let nv = config.num_vms();
    let mut mu = vec![0.0; nv];
    let mut x = y.clone();
    shifted_rows(y, &a, &mu, &mut x);
    for _ in 0..PROJECTION_SWEEPS {
        let mut largest_change: f64 = 0.0;
        for v in 0..nv {
            let before = mu[v];
            let load_at = |m: f64, mu: &mut Vec<f64>, x: &mut Matrix| {
                mu[v] = m;
                shifted_rows(y, &a, mu, x);
                column_loads(&a, x)[v]
            };
            if load_at(0.0, &mut mu, &mut x) <= bound {
                continue;
            }
            let mut hi = before.max(1e-12);
            let mut doublings = 0;
            while load_at(hi, &mut mu, &mut x) > bound && doublings < 200 {
                hi *= 2.0;
                doublings += 1;
            }
            let mut lo = 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if load_at(mid, &mut mu, &mut x) > bound {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            mu[v] = hi;
            largest_change = largest_change.max((hi - before).abs() / (1.0 + hi));
        }
        shifted_rows(y, &a, &mu, &mut x);
        if largest_change <= 1e-13 {
            break;
        }
    }

    let loads = column_loads(&a, &x);
    if loads.iter().any(|&l| l > bound) {
        let anchor = capacity_proportional(config);
        let anchor_loads = column_loads(&a, &anchor);
        let mut t: f64 = 0.0;
        for v in 0..nv {
            if loads[v] > bound {
                t = t.max((loads[v] - bound) / (loads[v] - anchor_loads[v]));
            }
        }
        let t = (t * (1.0 + 1e-9) + 1e-15).min(1.0);
        x = x.axpy(-t, &x.axpy(-1.0, &anchor));
        for j in 0..x.rows() {
            for e in x.row_mut(j) {
                *e = e.max(0.0);
            }
        }
    }
    Ok(ScheduleMatrix::from_projected(x))
}

/// The uniform schedule, or its nearest stable schedule when uniform
/// overloads a VM.
pub fn feasible_init(config: &SystemConfig, margin: f64) -> Result<ScheduleMatrix> {
    let uniform = ScheduleMatrix::uniform(config.num_classes(), config.num_vms());
    project_feasible(&uniform, config, margin)
}

/// Random assignment: uniform over VMs, made stable if necessary.
pub fn baseline_rca(config: &SystemConfig, margin: f64) -> Result<ScheduleMatrix> {
    feasible_init(config, margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMode {
    /// Rows proportional to each VM's mean service time.
    #[default]
    PaperLiteral,
    /// Rows proportional to each VM's service rate.
    InverseTime,
}

/// Service-proportional assignment. The `D_j` factor cancels, so every row
/// is the same.
pub fn baseline_pca(config: &SystemConfig, mode: PcaMode, margin: f64) -> Result<ScheduleMatrix> {
    let weights: Vec<f64> = config
        .vms
        .iter()
        .map(|v| match mode {
            PcaMode::PaperLiteral => v.unit_mean_time(),
            PcaMode::InverseTime => 1.0 / v.unit_mean_time(),
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let row: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let m = Matrix::from_rows(&vec![row; config.num_classes()])?;
    project_feasible(&m, config, margin)
}

/// Starting schedules for [`optimize_pps`]: uniform, capacity-proportional,
/// both service-proportional baselines, then `random_restarts` seeded
/// random rows, each made stable.
pub fn starting_points(config: &SystemConfig, settings: &OptimizerSettings) -> Result<Vec<ScheduleMatrix>> {
    let margin = settings.stability_margin;
    let mut starts = vec![
        feasible_init(config, margin)?,
        project_feasible(&capacity_proportional(config), config, margin)?,
        baseline_pca(config, PcaMode::PaperLiteral, margin)?,
        baseline_pca(config, PcaMode::InverseTime, margin)?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    for _ in 0..settings.random_restarts {
        let mut m = Matrix::zeros(config.num_classes(), config.num_vms());
        for j in 0..m.rows() {
            let row = m.row_mut(j);
            for x in row.iter_mut() {
                *x = -rng.random::<f64>().ln();
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum);
        }
        starts.push(project_feasible(&m, config, margin)?);
    }
    let mut unique: Vec<ScheduleMatrix> = Vec::with_capacity(starts.len());
    for s in starts {
        if !unique.contains(&s) {
            unique.push(s);
        }
    }
    Ok(unique)
}

/// Minimizes the objective by descending from every point of
/// [`starting_points`] and keeping the best run. Several starts are used
/// because the objective is not convex when compute sizes differ across
/// classes.
pub fn optimize_pps(config: &SystemConfig, settings: &OptimizerSettings) -> Result<OptimizeTrace> {
    ensure_valid(config)?;
    settings.validate()?;
    let mut best: Option<OptimizeTrace> = None;
    for start in starting_points(config, settings)? {
        let trace = optimize_from(config, settings, start)?;
        if best.as_ref().is_none_or(|b| trace.final_objective() < b.final_objective()) {
            best = Some(trace);
        }
    }
    Ok(best.expect("at least one starting point"))
}

/// Projected gradient descent with Armijo backtracking along the
/// projection arc, starting from `start`.
pub fn optimize_from(
    config: &SystemConfig,
    settings: &OptimizerSettings,
    start: ScheduleMatrix,
) -> Result<OptimizeTrace> {
    settings.validate()?;
    let model = ObjectiveModel::new(config, NetworkDiscipline::PriorityWsept)?;
    let margin = settings.stability_margin;
    let mut x = project_feasible(start.matrix(), config, margin)?.into_matrix();
    let mut f = model.value(&x)?;
    let mut objectives = vec![f];
    let mut step = settings.initial_step;
    let max_step = settings.initial_step * MAX_STEP_GROWTH;
    let mut iterations = 0;
    let mut converged = false;
    let mut previous: Option<(Matrix, Matrix)> = None;

    for it in 1..=settings.max_iters {
        let g = if settings.finite_difference_gradient {
            model.finite_difference_gradient(&x, 1e-6)?
        } else {
            model.gradient(&x)?
        };
        if let Some((px, pg)) = &previous {
            let sx = x.axpy(-1.0, px);
            let sy = g.axpy(-1.0, pg);
            let curvature = sx.dot(&sy);
            if curvature > 0.0 {
                step = (sx.dot(&sx) / curvature).clamp(MIN_STEP, max_step);
            }
        }
        let mut s = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = project_feasible(&x.axpy(-s, &g), config, margin)?.into_matrix();
            let decrease = g.dot(&candidate.axpy(-1.0, &x));
            if let Ok(fc) = model.value(&candidate) {
                if fc <= f + ARMIJO_C1 * decrease && fc <= f {
                    accepted = Some((candidate, fc));
                    break;
                }
            }
            s *= settings.armijo_shrink;
        }
        let Some((candidate, fc)) = accepted else {
            converged = true;
            break;
        };
        step = (s / settings.armijo_shrink).min(max_step);
        let change = f - fc;
        previous = Some((x, g));
        x = candidate;
        f = fc;
        objectives.push(f);
        iterations = it;
        if change <= settings.rel_tol * f.abs() {
            converged = true;
            break;
        }
    }

    Ok(OptimizeTrace {
        objectives,
        schedule: ScheduleMatrix::from_projected(x),
        iterations,
        converged,
    })
}

/// Two-stage rack-then-VM schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageSchedule {
    /// `J x m`, class to rack switch.
    pub pi: ScheduleMatrix,
    /// `m x V`, rack switch to VM under it.
    pub p_tor: ScheduleMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageExpansion {
    /// `J x (m V)`; column `u V + v` is VM `v` under switch `u`.
    pub q: ScheduleMatrix,
    /// `m x V` arrival rates `Lambda_{u,v}`.
    pub rates: Matrix,
}

/// `q[j][(u,v)] = pi[j][u] p_tor[u][v]` and `Lambda_{u,v} = sum_j lambda_j q`.
pub fn expand_two_stage(ts: &TwoStageSchedule, lambdas: &[f64]) -> Result<TwoStageExpansion> {
    let (j_count, m) = (ts.pi.rows(), ts.pi.cols());
    let v_count = ts.p_tor.cols();
    if ts.p_tor.rows() != m || lambdas.len() != j_count {
        return Err(Error::InvalidSchedule(format!(
            "two-stage shapes disagree: pi {}x{}, p_tor {}x{}, {} rates",
            j_count,
            m,
            ts.p_tor.rows(),
            v_count,
            lambdas.len()
        )));
    }
    let mut q = Matrix::zeros(j_count, m * v_count);
    let mut rates = Matrix::zeros(m, v_count);
    for (j, &lambda) in lambdas.iter().enumerate() {
        for u in 0..m {
            for v in 0..v_count {
                let x = ts.pi.get(j, u) * ts.p_tor.get(u, v);
                q.set(j, u * v_count + v, x);
                rates.set(u, v, rates.get(u, v) + lambda * x);
            }
        }
    }
    // Row sums of a product of stochastic rows can drift by a few ulps.
    for j in 0..j_count {
        let sum: f64 = q.row(j).iter().sum();
        if (sum - 1.0).abs() > crate::schedule::SIMPLEX_TOLERANCE {
            for x in q.row_mut(j) {
                *x /= sum;
            }
        }
    }
    Ok(TwoStageExpansion {
        q: ScheduleMatrix::new(q)?,
        rates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub schedule: TwoStageSchedule,
    /// Objective after each alternating round; index 0 is the start.
    pub objectives: Vec<f64>,
    pub converged: bool,
}

/// Alternating block descent over `pi` and `p_tor`. `config.vms` lists the
/// `tors * V` VMs switch by switch.
pub fn optimize_two_stage(
    config: &SystemConfig,
    tors: usize,
    settings: &OptimizerSettings,
) -> Result<TwoStageResult> {
    ensure_valid(config)?;
    settings.validate()?;
    if tors == 0 || !config.num_vms().is_multiple_of(tors) {
        return Err(Error::InvalidParameter(format!(
            "{} VMs cannot be split evenly over {tors} switches",
            config.num_vms()
        )));
    }
    check_capacity(config, settings.stability_margin)?;
    let per = config.num_vms() / tors;
    let lambdas: Vec<f64> = config.classes.iter().map(|c| c.lambda).collect();
    let model = ObjectiveModel::new(config, NetworkDiscipline::PriorityWsept)?;
    let bound = 1.0 - settings.stability_margin;

    let caps: Vec<f64> = config.vms.iter().map(|v| 1.0 / v.unit_mean_time()).collect();
    let rack_caps: Vec<f64> = (0..tors).map(|u| caps[u * per..(u + 1) * per].iter().sum()).collect();
    let total_cap: f64 = rack_caps.iter().sum();
    let pi0: Vec<Vec<f64>> = vec![rack_caps.iter().map(|c| c / total_cap).collect(); config.num_classes()];
    let tor0: Vec<Vec<f64>> = (0..tors)
        .map(|u| caps[u * per..(u + 1) * per].iter().map(|c| c / rack_caps[u]).collect())
        .collect();
    let mut pi = Matrix::from_rows(&pi0)?;
    let mut tor = Matrix::from_rows(&tor0)?;

    let evaluate = |pi: &Matrix, tor: &Matrix| -> Result<(f64, Matrix)> {
        let ts = TwoStageSchedule {
            pi: ScheduleMatrix::from_projected(pi.clone()),
            p_tor: ScheduleMatrix::from_projected(tor.clone()),
        };
        let q = expand_two_stage(&ts, &lambdas)?.q.into_matrix();
        let table = ServiceTable::new(config);
        let loads = VmLoads::new(&q, config, &table);
        if loads.rho.iter().any(|&r| r > bound) {
            return Err(Error::InvalidSchedule("unstable".into()));
        }
        Ok((model.value(&q)?, q))
    };

    let (mut f, _) = evaluate(&pi, &tor)?;
    let mut objectives = vec![f];
    let mut steps = [settings.initial_step; 2];
    let mut converged = false;
    for _ in 0..settings.max_iters {
        let start = f;
        for block in 0..2 {
            let (_, q) = evaluate(&pi, &tor)?;
            let g = model.gradient(&q)?;
            let grad = if block == 0 {
                let mut gp = Matrix::zeros(pi.rows(), tors);
                for j in 0..pi.rows() {
                    for u in 0..tors {
                        let s: f64 = (0..per).map(|v| g.get(j, u * per + v) * tor.get(u, v)).sum();
                        gp.set(j, u, s);
                    }
                }
                gp
            } else {
                let mut gt = Matrix::zeros(tors, per);
                for u in 0..tors {
                    for v in 0..per {
                        let s: f64 = (0..pi.rows()).map(|j| g.get(j, u * per + v) * pi.get(j, u)).sum();
                        gt.set(u, v, s);
                    }
                }
                gt
            };
            let current = if block == 0 { &pi } else { &tor };
            let mut s = steps[block];
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let cand = project_simplex_rows(&current.axpy(-s, &grad)).into_matrix();
                let decrease = grad.dot(&cand.axpy(-1.0, current));
                let trial = if block == 0 { evaluate(&cand, &tor) } else { evaluate(&pi, &cand) };
                if let Ok((fc, _)) = trial {
                    if fc <= f + ARMIJO_C1 * decrease && fc <= f {
                        accepted = Some((cand, fc));
                        break;
                    }
                }
                s *= settings.armijo_shrink;
            }
            if let Some((cand, fc)) = accepted {
                steps[block] = (s / settings.armijo_shrink).min(settings.initial_step * MAX_STEP_GROWTH);
                if block == 0 {
                    pi = cand;
                } else {
                    tor = cand;
                }
                f = fc;
            }
        }
        objectives.push(f);
        if start - f <= settings.rel_tol * f.abs() {
            converged = true;
            break;
        }
    }

    Ok(TwoStageResult {
        schedule: TwoStageSchedule {
            pi: ScheduleMatrix::from_projected(pi),
            p_tor: ScheduleMatrix::from_projected(tor),
        },
        objectives,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{objective, stability_report};
    use crate::model::{AoiNetworkWeighting, JobClass, MomentMode, NetworkProfile, VmProfile};

    fn config(classes: Vec<JobClass>, vms: Vec<VmProfile>, theta: f64) -> SystemConfig {
        SystemConfig {
            classes,
            vms,
            network: NetworkProfile {
                gamma: 112.0,
                zeta: 18.0,
            },
            theta,
            moment_mode: MomentMode::Exact,
            aoi_network_weighting: AoiNetworkWeighting::PaperTheorem1,
        }
    }

    fn three_by_two() -> SystemConfig {
        config(
            vec![
                JobClass::new(1, 0.03, 0.8, 0.3),
                JobClass::new(2, 0.02, 1.6, 0.2),
                JobClass::new(3, 0.01, 2.5, 0.4),
            ],
            vec![VmProfile::new(1, 82.0, 10.0), VmProfile::new(2, 39.0, 21.0)],
            0.4,
        )
    }

    #[test]
    fn simplex_projection_examples() {
        let mut r = [0.2, 0.8];
        project_simplex_row(&mut r);
        assert_eq!(r, [0.2, 0.8]);

        let mut r = [0.5, 0.7];
        project_simplex_row(&mut r);
        assert!((r[0] - 0.4).abs() < 1e-15 && (r[1] - 0.6).abs() < 1e-15);

        let mut r = [2.0, 0.0, 0.0];
        project_simplex_row(&mut r);
        assert_eq!(r, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn two_point_projection_matches_closed_form_oracle() {
        // On the 2-simplex the projection of (a, b) is (t, 1 - t) with
        // t = clamp((1 + a - b) / 2, 0, 1).
        for &(a, b) in &[(0.5, 0.7), (3.0, -1.0), (-0.4, 0.1), (0.9, 0.9), (-5.0, -5.5)] {
            let mut r = [a, b];
            project_simplex_row(&mut r);
            let t = ((1.0 + a - b) / 2.0_f64).clamp(0.0, 1.0);
            assert!((r[0] - t).abs() < 1e-14 && (r[1] - (1.0 - t)).abs() < 1e-14, "{a} {b}");
        }
    }

    #[test]
    fn uniform_is_kept_when_stable() {
        let cfg = config(
            vec![JobClass::new(1, 0.02, 1.0, 0.3)],
            vec![VmProfile::new(1, 82.0, 10.0), VmProfile::new(2, 82.0, 10.0)],
            0.5,
        );
        let p = feasible_init(&cfg, 1e-3).unwrap();
        assert_eq!(p, ScheduleMatrix::uniform(1, 2));
        let single = config(vec![JobClass::new(1, 0.02, 1.0, 0.3)], vec![VmProfile::new(1, 82.0, 10.0)], 0.5);
        assert_eq!(feasible_init(&single, 1e-3).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn overloaded_vm_loses_mass() {
        // uniform puts rho = 0.04 * 25.03 = 1.0 on the slow VM
        let cfg = config(
            vec![JobClass::new(1, 0.08, 1.0, 0.1)],
            vec![VmProfile::new(1, 82.0, 10.0), VmProfile::new(2, 29.0, 25.0)],
            0.5,
        );
        assert!(!stability_report(&ScheduleMatrix::uniform(1, 2), &cfg, 1e-3).stable);
        let p = feasible_init(&cfg, 1e-3).unwrap();
        let r = stability_report(&p, &cfg, 1e-3);
        assert!(r.stable, "{r:?}");
        assert!(p.get(0, 1) < 0.5);
        // the projection lands exactly on the active constraint
        assert!((r.vm_rho[1] - 0.999).abs() < 1e-9, "{}", r.vm_rho[1]);
    }

    #[test]
    fn impossible_load_is_infeasible() {
        let cfg = config(
            vec![JobClass::new(1, 0.2, 1.0, 0.01)],
            vec![VmProfile::new(1, 82.0, 10.0), VmProfile::new(2, 29.0, 25.0)],
            0.5,
        );
        assert!(matches!(feasible_init(&cfg, 1e-3), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn polytope_projection_is_idempotent_and_nearest_among_samples() {
        let cfg = config(
            vec![JobClass::new(1, 0.05, 1.0, 0.1), JobClass::new(2, 0.04, 1.2, 0.1)],
            vec![VmProfile::new(1, 82.0, 10.0), VmProfile::new(2, 29.0, 25.0)],
            0.5,
        );
        let y = Matrix::from_rows(&[vec![0.1, 0.9], vec![-0.3, 1.1]]).unwrap();
        let x = project_feasible(&y, &cfg, 1e-3).unwrap();
        assert!(stability_report(&x, &cfg, 1e-3).stable);
        let again = project_feasible(x.matrix(), &cfg, 1e-3).unwrap();
        assert_eq!(again, x);
        let dist = |m: &Matrix| m.axpy(-1.0, &y).frobenius_norm();
        // no grid point of the feasible set is closer
        let best = dist(&x);
        for a in 0..=100 {
            for b in 0..=100 {
                let cand = Matrix::from_rows(&[
                    vec![a as f64 / 100.0, 1.0 - a as f64 / 100.0],
                    vec![b as f64 / 100.0, 1.0 - b as f64 / 100.0],
                ])
                .unwrap();
                let s = ScheduleMatrix::new(cand.clone()).unwrap();
                if stability_report(&s, &cfg, 1e-3).stable {
                    assert!(dist(&cand) >= best - 1e-9);
                }
            }
        }
    }

    #[test]
    fn model_matches_analytics() {
        let cfg = three_by_two();
        let p = ScheduleMatrix::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6], vec![0.9, 0.1]]).unwrap();
        let m = ObjectiveModel::new(&cfg, NetworkDiscipline::PriorityWsept).unwrap();
        let a = objective(&p, &cfg).unwrap();
        assert!((m.value(&p).unwrap() - a).abs() < 1e-12 * a);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = three_by_two();
        let p = ScheduleMatrix::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6], vec![0.9, 0.1]]).unwrap();
        let m = ObjectiveModel::new(&cfg, NetworkDiscipline::PriorityWsept).unwrap();
        let g = m.gradient(&p).unwrap();
        let fd = m.finite_difference_gradient(&p, 1e-6).unwrap();
        let scale = g.as_slice().iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        assert!(g.max_abs_diff(&fd) < 1e-5 * scale, "{g:?} {fd:?}");
    }

    #[test]
    fn age_only_gradient_is_service_time() {
        let cfg = config(
            vec![JobClass::new(1, 0.03, 1.0, 0.3)],
            vec![VmProfile::new(1, 82.0, 10.0)],
            0.0,
        );
        let p = ScheduleMatrix::uniform(1, 1);
        let g = objective_gradient(&p, &cfg).unwrap();
        assert!((g.get(0, 0) - (10.0 + 1.0 / 82.0)).abs() < 1e-12);
        let fd = ObjectiveModel::new(&cfg, NetworkDiscipline::PriorityWsept)
            .unwrap()
            .finite_difference_gradient(&p, 1e-6)
            .unwrap();
        assert!((fd.get(0, 0) - g.get(0, 0)).abs() < 1e-6);
    }

    #[test]
    fn symmetric_point_has_equal_gradient_entries() {
        let cfg = config(
            vec![JobClass::new(1, 0.03, 1.0, 0.3), JobClass::new(2, 0.01, 2.0, 0.3)],
            vec![VmProfile::new(1, 60.0, 16.0), VmProfile::new(2, 60.0, 16.0)],
            0.7,
        );
        let g = objective_gradient(&ScheduleMatrix::uniform(2, 2), &cfg).unwrap();
        for j in 0..2 {
            assert!((g.get(j, 0) - g.get(j, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_vm_converges_in_one_iteration() {
        let cfg = config(vec![JobClass::new(1, 0.03, 1.0, 0.3)], vec![VmProfile::new(1, 82.0, 10.0)], 0.5);
        let t = optimize_pps(&cfg, &OptimizerSettings::default()).unwrap();
        assert_eq!(t.iterations, 1);
        assert!(t.converged);
        assert_eq!(t.schedule.get(0, 0), 1.0);
    }

    #[test]
    fn identical_vms_split_evenly() {
        let vms = vec![VmProfile::new(1, 60.0, 16.0), VmProfile::new(2, 60.0, 16.0)];
        let one = config(vec![JobClass::new(1, 0.05, 1.0, 0.3)], vms.clone(), 0.8);
        let tight = OptimizerSettings {
            rel_tol: 1e-15,
            ..Default::default()
        };
        let start = ScheduleMatrix::from_rows(&[vec![0.9, 0.1]]).unwrap();
        let t = optimize_from(&one, &tight, start).unwrap();
        assert!((t.schedule.get(0, 0) - 0.5).abs() < 1e-6, "{:?}", t.schedule);

        // equal compute sizes: only the per-VM rates matter, and they balance
        let same_size = config(
            vec![JobClass::new(1, 0.03, 1.2, 0.3), JobClass::new(2, 0.02, 1.2, 0.2)],
            vms,
            0.8,
        );
        let start = ScheduleMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let t = optimize_from(&same_size, &tight, start).unwrap();
        let rates = crate::analytics::vm_arrival_rates(&t.schedule, &same_size);
        assert!((rates[0] - rates[1]).abs() < 1e-6, "{:?}", t.schedule);
    }

    #[test]
    fn identical_vms_segregate_classes_of_different_size() {
        // Segregating classes removes the cross terms of the per-VM
        // second-moment mixture, so the even split is not optimal here.
        let cfg = config(
            vec![JobClass::new(1, 0.03, 1.0, 0.3), JobClass::new(2, 0.02, 1.5, 0.2)],
            vec![VmProfile::new(1, 60.0, 16.0), VmProfile::new(2, 60.0, 16.0)],
            0.8,
        );
        let even = objective(&ScheduleMatrix::uniform(2, 2), &cfg).unwrap();
        let split = ScheduleMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(objective(&split, &cfg).unwrap() < even);
        let t = optimize_pps(&cfg, &OptimizerSettings::default()).unwrap();
        assert!(t.final_objective() < even);
    }

    #[test]
    fn descent_is_monotone_and_beats_baselines() {
        let cfg = three_by_two();
        let t = optimize_pps(&cfg, &OptimizerSettings::default()).unwrap();
        assert!(t.objectives.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let best = t.final_objective();
        for p in [
            baseline_rca(&cfg, 1e-3).unwrap(),
            baseline_pca(&cfg, PcaMode::PaperLiteral, 1e-3).unwrap(),
            baseline_pca(&cfg, PcaMode::InverseTime, 1e-3).unwrap(),
        ] {
            assert!(best <= objective(&p, &cfg).unwrap() + 1e-9);
        }
    }

    #[test]
    fn pca_rows() {
        // mean unit times 10 and 30
        let cfg = config(
            vec![JobClass::new(1, 0.01, 1.0, 0.1), JobClass::new(2, 0.01, 3.0, 0.1)],
            vec![VmProfile::new(1, 1.0, 9.0), VmProfile::new(2, 0.5, 28.0)],
            0.5,
        );
        let lit = baseline_pca(&cfg, PcaMode::PaperLiteral, 1e-3).unwrap();
        let inv = baseline_pca(&cfg, PcaMode::InverseTime, 1e-3).unwrap();
        for j in 0..2 {
            assert!((lit.get(j, 0) - 0.25).abs() < 1e-15 && (lit.get(j, 1) - 0.75).abs() < 1e-15);
            assert!((inv.get(j, 0) - 0.75).abs() < 1e-15 && (inv.get(j, 1) - 0.25).abs() < 1e-15);
        }
        let homo = config(
            vec![JobClass::new(1, 0.01, 1.0, 0.1)],
            vec![VmProfile::new(1, 82.0, 10.0); 3]
                .into_iter()
                .enumerate()
                .map(|(i, mut v)| {
                    v.id = i + 1;
                    v
                })
                .collect(),
            0.5,
        );
        let u = baseline_pca(&homo, PcaMode::PaperLiteral, 1e-3).unwrap();
        assert!(u.row(0).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn two_stage_expansion() {
        let pi = ScheduleMatrix::uniform(2, 2);
        let p_tor = ScheduleMatrix::uniform(2, 2);
        let e = expand_two_stage(&TwoStageSchedule { pi, p_tor }, &[0.1, 0.3]).unwrap();
        assert!(e.q.as_slice().iter().all(|&x| x == 0.25));
        assert!((e.rates.get(1, 0) - 0.1).abs() < 1e-15);

        let cfg = three_by_two();
        let p_tor = ScheduleMatrix::from_rows(&[vec![0.6, 0.4]]).unwrap();
        let pi = ScheduleMatrix::from_rows(&vec![vec![1.0]; 3]).unwrap();
        let lambdas: Vec<f64> = cfg.classes.iter().map(|c| c.lambda).collect();
        let e = expand_two_stage(&TwoStageSchedule { pi, p_tor: p_tor.clone() }, &lambdas).unwrap();
        let flat = ScheduleMatrix::from_rows(&vec![vec![0.6, 0.4]; 3]).unwrap();
        assert_eq!(e.q, flat);
        assert_eq!(
            objective(&e.q, &cfg).unwrap().to_bits(),
            objective(&flat, &cfg).unwrap().to_bits()
        );
    }

    #[test]
    fn two_stage_descent_improves_on_start() {
        let cfg = config(
            vec![JobClass::new(1, 0.03, 0.8, 0.3), JobClass::new(2, 0.02, 1.6, 0.2)],
            vec![
                VmProfile::new(1, 82.0, 10.0),
                VmProfile::new(2, 76.0, 12.0),
                VmProfile::new(3, 39.0, 21.0),
                VmProfile::new(4, 29.0, 25.0),
            ],
            0.6,
        );
        let r = optimize_two_stage(&cfg, 2, &OptimizerSettings::default()).unwrap();
        assert!(r.objectives.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(r.objectives.last().unwrap() < &r.objectives[0]);
        // two-stage schedules are a subset of flat ones
        let flat = optimize_pps(&cfg, &OptimizerSettings::default()).unwrap();
        assert!(flat.final_objective() <= r.objectives.last().unwrap() + 1e-6);
    }

    #[test]
    fn schedule_csv_round_trip() {
        let p = ScheduleMatrix::from_rows(&[vec![0.7, 0.3], vec![0.125, 0.875]]).unwrap();
        let mut buf = Vec::new();
        write_schedule_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("class,vm_1,vm_2\n"));
        assert_eq!(read_schedule_csv(&buf[..]).unwrap(), p);
    }
}
