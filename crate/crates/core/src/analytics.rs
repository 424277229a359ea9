//! Closed-form queueing analytics.
//!
//! Compute phase: each VM is an M/G/1 FCFS queue fed by the thinned class
//! streams `p[j][v] lambda_j`, with Pollaczek-Khinchine mean waiting time.
//! Networking phase: one M/G/1 queue with non-preemptive class priority
//! (or FCFS for the baseline), fed at the total rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AoiNetworkWeighting, JobClass, MomentMode, NetworkDiscipline, SystemConfig, VmProfile,
};
use crate::schedule::Matrix;

/// Default distance from saturation required of optimizer iterates.
pub const DEFAULT_STABILITY_MARGIN: f64 = 1e-3;

/// First and second moment of a service time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub second: f64,
}

impl Moments {
    pub const ZERO: Moments = Moments {
        mean: 0.0,
        second: 0.0,
    };
}

/// Moments of `shift + Exp(rate)`.
pub fn shifted_exp_moments(rate: f64, shift: f64, mode: MomentMode) -> Moments {
    let mean = shift + 1.0 / rate;
    let second = match mode {
        MomentMode::Exact => shift * shift + 2.0 * shift / rate + 2.0 / (rate * rate),
        MomentMode::PaperLiteral => shift * shift + shift + (shift + 2.0) / rate,
    };
    Moments { mean, second }
}

pub fn compute_service_moments(vm: &VmProfile, class: &JobClass, mode: MomentMode) -> Moments {
    let (rate, shift) = vm.service_params(class.d_size);
    shifted_exp_moments(rate, shift, mode)
}

/// Per-(class, VM) compute service moments; independent of the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceTable {
    pub mean: Matrix,
    pub second: Matrix,
}

impl ServiceTable {
    pub fn new(config: &SystemConfig) -> Self {
        let (j, v) = (config.num_classes(), config.num_vms());
        let mut mean = Matrix::zeros(j, v);
        let mut second = Matrix::zeros(j, v);
        for (ci, class) in config.classes.iter().enumerate() {
            for (vi, vm) in config.vms.iter().enumerate() {
                let m = compute_service_moments(vm, class, config.moment_mode);
                mean.set(ci, vi, m.mean);
                second.set(ci, vi, m.second);
            }
        }
        Self { mean, second }
    }
}

/// `Lambda_v = sum_j p[j][v] lambda_j`.
pub fn vm_arrival_rates(p: &Matrix, config: &SystemConfig) -> Vec<f64> {
    let mut rates = vec![0.0; config.num_vms()];
    for (j, class) in config.classes.iter().enumerate() {
        for (v, rate) in rates.iter_mut().enumerate() {
            *rate += p.get(j, v) * class.lambda;
        }
    }
    rates
}

/// Mixture moments of the service time seen at each VM, weighting class
/// `j` by `p[j][v] lambda_j / Lambda_v`. Idle VMs get zero moments.
pub fn vm_aggregate_moments(p: &Matrix, config: &SystemConfig) -> Vec<Moments> {
    let table = ServiceTable::new(config);
    let loads = VmLoads::new(p, config, &table);
    (0..config.num_vms())
        .map(|v| {
            if loads.arrival[v] > 0.0 {
                Moments {
                    mean: loads.rho[v] / loads.arrival[v],
                    second: loads.second_flux[v] / loads.arrival[v],
                }
            } else {
                Moments::ZERO
            }
        })
        .collect()
}

/// Pollaczek-Khinchine mean wait `Lambda E[Z^2] / (2 (1 - Lambda E[Z]))`.
pub fn vm_waiting_time(vm_id: usize, arrival_rate: f64, moments: Moments) -> Result<f64> {
    if arrival_rate <= 0.0 {
        return Ok(0.0);
    }
    let rho = arrival_rate * moments.mean;
    if rho >= 1.0 {
        return Err(Error::VmUnstable { vm: vm_id, rho });
    }
    Ok(arrival_rate * moments.second / (2.0 * (1.0 - rho)))
}

/// Per-VM linear load terms of a schedule.
#[derive(Debug, Clone)]
pub(crate) struct VmLoads {
    /// `Lambda_v`
    pub arrival: Vec<f64>,
    /// `rho_v = sum_j p lambda_j E[S1]`
    pub rho: Vec<f64>,
    /// `Lambda_v E[Z_v^2] = sum_j p lambda_j E[S1^2]`
    pub second_flux: Vec<f64>,
}

impl VmLoads {
    pub fn new(p: &Matrix, config: &SystemConfig, table: &ServiceTable) -> Self {
        let nv = config.num_vms();
        let mut arrival = vec![0.0; nv];
        let mut rho = vec![0.0; nv];
        let mut second_flux = vec![0.0; nv];
        for (j, class) in config.classes.iter().enumerate() {
            for v in 0..nv {
                let flow = p.get(j, v) * class.lambda;
                arrival[v] += flow;
                rho[v] += flow * table.mean.get(j, v);
                second_flux[v] += flow * table.second.get(j, v);
            }
        }
        Self {
            arrival,
            rho,
            second_flux,
        }
    }

    /// P-K waits per VM, or the first saturated VM.
    pub fn waits(&self, config: &SystemConfig) -> Result<Vec<f64>> {
        self.rho
            .iter()
            .zip(&self.second_flux)
            .enumerate()
            .map(|(v, (&rho, &flux))| {
                if self.arrival[v] <= 0.0 {
                    Ok(0.0)
                } else if rho >= 1.0 {
                    Err(Error::VmUnstable {
                        vm: config.vms[v].id,
                        rho,
                    })
                } else {
                    Ok(flux / (2.0 * (1.0 - rho)))
                }
            })
            .collect()
    }
}

/// Sort key of the networking priority rule, `(w_j + g_j) / E_j`.
///
/// `w_j + g_j = lambda_j / lambda` for every theta, so the key is evaluated
/// in that form to keep ties exact across theta.
pub fn wsept_key(config: &SystemConfig, class: usize) -> f64 {
    config.rate_share(class) / config.classes[class].e_size
}

/// Class ids in networking priority order: decreasing WSEPT key, ties by
/// ascending id.
pub fn wsept_order(config: &SystemConfig) -> Vec<usize> {
    let keys: Vec<f64> = (0..config.num_classes())
        .map(|j| wsept_key(config, j))
        .collect();
    let mut idx: Vec<usize> = (0..config.num_classes()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx.into_iter().map(|j| config.classes[j].id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetMoments {
    /// `E[S_2,j] = zeta E_j + E_j / gamma`, by class position.
    pub mean: Vec<f64>,
    /// Per-class second moments.
    pub second: Vec<f64>,
    /// `E[Z_2^2] = sum_j (lambda_j / Lambda) second_j`.
    pub aggregate_second: f64,
}

pub fn net_service_moments(config: &SystemConfig) -> NetMoments {
    let total = config.total_rate();
    let mut mean = Vec::with_capacity(config.num_classes());
    let mut second = Vec::with_capacity(config.num_classes());
    let mut aggregate_second = 0.0;
    for class in &config.classes {
        let (rate, shift) = config.network.service_params(class.e_size);
        let m = shifted_exp_moments(rate, shift, config.moment_mode);
        aggregate_second += class.lambda / total * m.second;
        mean.push(m.mean);
        second.push(m.second);
    }
    NetMoments {
        mean,
        second,
        aggregate_second,
    }
}

/// Non-preemptive priority M/G/1 waits for an explicit priority order
/// (class ids, highest priority first). Returned by class position.
pub fn priority_waiting_times_for_order(config: &SystemConfig, order: &[usize]) -> Result<Vec<f64>> {
    let net = net_service_moments(config);
    let residual = config.total_rate() * net.aggregate_second / 2.0;
    let mut waits = vec![0.0; config.num_classes()];
    let mut above = 0.0;
    for (level, &id) in order.iter().enumerate() {
        let j = id - 1;
        let through = above + config.classes[j].lambda * net.mean[j];
        if through >= 1.0 {
            return Err(Error::NetworkUnstable {
                level: level + 1,
                cumulative_rho: through,
            });
        }
        waits[j] = residual / ((1.0 - through) * (1.0 - above));
        above = through;
    }
    Ok(waits)
}

/// Networking waits under the WSEPT priority order, by class position.
pub fn priority_waiting_times(config: &SystemConfig) -> Result<Vec<f64>> {
    priority_waiting_times_for_order(config, &wsept_order(config))
}

/// FCFS networking wait, identical for every class.
pub fn fcfs_waiting_time(config: &SystemConfig) -> Result<f64> {
    let net = net_service_moments(config);
    let total = config.total_rate();
    let rho: f64 = config
        .classes
        .iter()
        .zip(&net.mean)
        .map(|(c, m)| c.lambda * m)
        .sum();
    if rho >= 1.0 {
        return Err(Error::NetworkUnstable {
            level: 1,
            cumulative_rho: rho,
        });
    }
    Ok(total * net.aggregate_second / (2.0 * (1.0 - rho)))
}

pub fn network_waiting_times(config: &SystemConfig, discipline: NetworkDiscipline) -> Result<Vec<f64>> {
    match discipline {
        NetworkDiscipline::PriorityWsept => priority_waiting_times(config),
        NetworkDiscipline::Fcfs => Ok(vec![fcfs_waiting_time(config)?; config.num_classes()]),
    }
}

/// Factor on the networking terms of class `j`'s expected age.
pub(crate) fn aoi_network_factor(config: &SystemConfig, class: usize) -> f64 {
    match config.aoi_network_weighting {
        AoiNetworkWeighting::PaperTheorem1 => config.rate_share(class),
        AoiNetworkWeighting::Unweighted => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub id: usize,
    pub lambda: f64,
    /// Schedule-averaged compute wait `sum_v p W1_v`.
    pub wait_compute: f64,
    /// Schedule-averaged compute service `sum_v p E[S1]`.
    pub service_compute: f64,
    pub wait_network: f64,
    pub service_network: f64,
    pub aoi: f64,
    pub completion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmMetrics {
    pub id: usize,
    pub arrival_rate: f64,
    pub rho: f64,
    pub wait: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticReport {
    pub discipline: NetworkDiscipline,
    pub theta: f64,
    pub classes: Vec<ClassMetrics>,
    pub vms: Vec<VmMetrics>,
    pub network_rho: f64,
    /// `sum_j (lambda_j / lambda) E[C_j]`
    pub weighted_completion: f64,
    /// `sum_j (lambda_j / lambda) E[A_j]`
    pub weighted_aoi: f64,
    /// `theta * weighted_completion + (1 - theta) * weighted_aoi`
    pub objective: f64,
}

pub const REPORT_CSV_HEADER: [&str; 8] = [
    "class",
    "lambda",
    "w1_ms",
    "s1_ms",
    "w2_ms",
    "s2_ms",
    "aoi_ms",
    "completion_ms",
];

impl AnalyticReport {
    /// One row per class, columns as in [`REPORT_CSV_HEADER`].
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_CSV_HEADER)?;
        for c in &self.classes {
            w.write_record(&[
                c.id.to_string(),
                c.lambda.to_string(),
                c.wait_compute.to_string(),
                c.service_compute.to_string(),
                c.wait_network.to_string(),
                c.service_network.to_string(),
                c.aoi.to_string(),
                c.completion.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every per-class and per-VM expectation plus the scalar objective.
pub fn analyze(p: &Matrix, config: &SystemConfig, discipline: NetworkDiscipline) -> Result<AnalyticReport> {
    check_shape(p, config)?;
    let table = ServiceTable::new(config);
    let loads = VmLoads::new(p, config, &table);
    let vm_waits = loads.waits(config)?;
    let net = net_service_moments(config);
    let net_waits = network_waiting_times(config, discipline)?;

    let mut classes = Vec::with_capacity(config.num_classes());
    let mut weighted_completion = 0.0;
    let mut weighted_aoi = 0.0;
    for (j, class) in config.classes.iter().enumerate() {
        let mut wait_compute = 0.0;
        let mut service_compute = 0.0;
        for (v, &w) in vm_waits.iter().enumerate() {
            let pv = p.get(j, v);
            wait_compute += pv * w;
            service_compute += pv * table.mean.get(j, v);
        }
        let network_time = net_waits[j] + net.mean[j];
        let aoi = service_compute + aoi_network_factor(config, j) * network_time;
        let completion = wait_compute + service_compute + network_time;
        let share = config.rate_share(j);
        weighted_completion += share * completion;
        weighted_aoi += share * aoi;
        classes.push(ClassMetrics {
            id: class.id,
            lambda: class.lambda,
            wait_compute,
            service_compute,
            wait_network: net_waits[j],
            service_network: net.mean[j],
            aoi,
            completion,
        });
    }

    let vms = config
        .vms
        .iter()
        .enumerate()
        .map(|(v, vm)| VmMetrics {
            id: vm.id,
            arrival_rate: loads.arrival[v],
            rho: loads.rho[v],
            wait: vm_waits[v],
        })
        .collect();

    let theta = config.theta;
    Ok(AnalyticReport {
        discipline,
        theta,
        classes,
        vms,
        network_rho: config.network_load(),
        weighted_completion,
        weighted_aoi,
        objective: theta * weighted_completion + (1.0 - theta) * weighted_aoi,
    })
}

/// `E[A_j]` by class position, WSEPT networking.
pub fn expected_aoi(p: &Matrix, config: &SystemConfig) -> Result<Vec<f64>> {
    Ok(analyze(p, config, NetworkDiscipline::PriorityWsept)?
        .classes
        .iter()
        .map(|c| c.aoi)
        .collect())
}

/// `E[C_j]` by class position, WSEPT networking.
pub fn expected_completion(p: &Matrix, config: &SystemConfig) -> Result<Vec<f64>> {
    Ok(analyze(p, config, NetworkDiscipline::PriorityWsept)?
        .classes
        .iter()
        .map(|c| c.completion)
        .collect())
}

/// `sum_j [theta (lambda_j/lambda) E[C_j] + (1 - theta)(lambda_j/lambda) E[A_j]]`
/// with WSEPT networking.
pub fn objective(p: &Matrix, config: &SystemConfig) -> Result<f64> {
    Ok(analyze(p, config, NetworkDiscipline::PriorityWsept)?.objective)
}

pub fn objective_with(p: &Matrix, config: &SystemConfig, discipline: NetworkDiscipline) -> Result<f64> {
    Ok(analyze(p, config, discipline)?.objective)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub vm_rho: Vec<f64>,
    /// Cumulative networking intensity at each WSEPT priority level.
    pub network_cumulative_rho: Vec<f64>,
    pub margin: f64,
    /// Every intensity is at most `1 - margin`.
    pub stable: bool,
}

impl StabilityReport {
    pub fn max_vm_rho(&self) -> f64 {
        self.vm_rho.iter().copied().fold(0.0, f64::max)
    }

    pub fn network_rho(&self) -> f64 {
        self.network_cumulative_rho.last().copied().unwrap_or(0.0)
    }
}

pub fn stability_report(p: &Matrix, config: &SystemConfig, margin: f64) -> StabilityReport {
    let table = ServiceTable::new(config);
    let loads = VmLoads::new(p, config, &table);
    let net = net_service_moments(config);
    let mut cumulative = 0.0;
    let network_cumulative_rho: Vec<f64> = wsept_order(config)
        .into_iter()
        .map(|id| {
            cumulative += config.classes[id - 1].lambda * net.mean[id - 1];
            cumulative
        })
        .collect();
    let bound = 1.0 - margin;
    let stable = loads.rho.iter().all(|&r| r <= bound)
        && network_cumulative_rho.last().is_none_or(|&r| r <= bound);
    StabilityReport {
        vm_rho: loads.rho,
        network_cumulative_rho,
        margin,
        stable,
    }
}

pub(crate) fn check_shape(p: &Matrix, config: &SystemConfig) -> Result<()> {
    if p.rows() != config.num_classes() || p.cols() != config.num_vms() {
        return Err(Error::InvalidSchedule(format!(
            "schedule is {}x{}, configuration has {} classes and {} VMs",
            p.rows(),
            p.cols(),
            config.num_classes(),
            config.num_vms()
        )));
    }
    Ok(())
}
