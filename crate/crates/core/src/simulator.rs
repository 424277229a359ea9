//! Discrete-event simulation of the compute-then-network pipeline.
//!
//! Each replication is a single-threaded event loop. Replication `r` draws
//! from ChaCha8 generators seeded with the master seed, one stream per
//! purpose: stream `8 r + k` with `k` = 0 arrivals, 1 routing, 2 compute
//! service, 3 network service, 4 information updates. Replications run in
//! parallel and are reduced in index order, so results do not depend on
//! thread count.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analytics::wsept_order;
use crate::error::{Error, Result};
use crate::model::{structural_violations, NetworkDiscipline, SystemConfig};
use crate::schedule::{Matrix, ScheduleMatrix};

const STREAM_ARRIVALS: u64 = 0;
const STREAM_ROUTING: u64 = 1;
const STREAM_COMPUTE: u64 = 2;
const STREAM_NETWORK: u64 = 3;
const STREAM_UPDATES: u64 = 4;

/// Number of backlog snapshots taken over the horizon.
pub const BACKLOG_CHECKPOINTS: usize = 20;
/// A queue is flagged when its last snapshot holds at least this many jobs
/// and its snapshots are mostly non-decreasing.
pub const BACKLOG_FLOOR: usize = 50;
pub const BACKLOG_MONOTONE_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceMode {
    #[default]
    ShiftedExponential,
    /// Every service takes exactly its shift.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Arrivals are generated on `[0, horizon)`; the system then drains.
    pub horizon: f64,
    /// Jobs released before `warmup_fraction * horizon` are not measured.
    pub warmup_fraction: f64,
    pub replications: usize,
    pub seed: u64,
    pub networking_discipline: NetworkDiscipline,
    pub service_mode: ServiceMode,
    pub simulate_updates: bool,
    /// Keep per-job records of the first replication.
    pub record_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 1e6,
            warmup_fraction: 0.2,
            replications: 10,
            seed: 0,
            networking_discipline: NetworkDiscipline::PriorityWsept,
            service_mode: ServiceMode::ShiftedExponential,
            simulate_updates: false,
            record_events: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidParameter("warmup_fraction must lie in [0, 1)".into()));
        }
        if self.replications < 1 {
            return Err(Error::InvalidParameter("at least one replication is required".into()));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, replication: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((replication as u64) << 3) | purpose);
    rng
}

/// `shift + Exp(rate)`, or `shift` alone in deterministic mode.
pub fn sample_shifted_exp<R: Rng + ?Sized>(rate: f64, shift: f64, mode: ServiceMode, rng: &mut R) -> f64 {
    match mode {
        ServiceMode::ShiftedExponential => {
            let e: f64 = Exp1.sample(rng);
            shift + e / rate
        }
        ServiceMode::Deterministic => shift,
    }
}

/// One job entering the system.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub time: f64,
    /// Class position (0-based).
    pub class: usize,
    /// Fixed VM position; drawn from the routing schedule when `None`.
    pub vm: Option<usize>,
    pub compute_time: Option<f64>,
    pub network_time: Option<f64>,
}

/// Time-varying routing and networking priorities. Each list holds
/// `(start time, value)` segments sorted by start; the first segment
/// should start at or before the first arrival.
#[derive(Debug, Clone)]
pub struct Plan {
    pub routing: Vec<(f64, Matrix)>,
    /// Class positions, highest priority first.
    pub priority: Vec<(f64, Vec<usize>)>,
    pub discipline: NetworkDiscipline,
}

impl Plan {
    pub fn stationary(config: &SystemConfig, p: &ScheduleMatrix, discipline: NetworkDiscipline) -> Self {
        let order = wsept_order(config).into_iter().map(|id| id - 1).collect();
        Self {
            routing: vec![(f64::NEG_INFINITY, p.matrix().clone())],
            priority: vec![(f64::NEG_INFINITY, order)],
            discipline,
        }
    }

    fn segment<T>(segments: &[(f64, T)], time: f64) -> &T {
        let idx = segments.partition_point(|(start, _)| *start <= time);
        &segments[idx.saturating_sub(1)].1
    }
}

/// Lifecycle of one simulated job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub serial: usize,
    /// Class id (1-based).
    pub class: usize,
    /// VM id (1-based).
    pub vm: usize,
    pub release: f64,
    pub compute_start: f64,
    pub compute_end: f64,
    pub net_start: f64,
    pub net_end: f64,
    /// Staleness of the newest information at compute start, when updates
    /// are simulated.
    pub info_age: f64,
}

impl JobRecord {
    pub fn wait_compute(&self) -> f64 {
        self.compute_start - self.release
    }
    pub fn service_compute(&self) -> f64 {
        self.compute_end - self.compute_start
    }
    pub fn wait_network(&self) -> f64 {
        self.net_start - self.compute_end
    }
    pub fn service_network(&self) -> f64 {
        self.net_end - self.net_start
    }
    pub fn completion(&self) -> f64 {
        self.net_end - self.release
    }
    /// `Y + S1 + W2 + S2`.
    pub fn aoi(&self) -> f64 {
        self.info_age + self.net_end - self.compute_start
    }
}

pub const EVENT_LOG_HEADER: [&str; 9] = [
    "serial",
    "class",
    "vm",
    "release",
    "compute_start",
    "compute_end",
    "net_start",
    "net_end",
    "info_age",
];

pub fn write_event_log<W: std::io::Write>(records: &[JobRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENT_LOG_HEADER)?;
    for r in records {
        w.write_record(&[
            r.serial.to_string(),
            r.class.to_string(),
            r.vm.to_string(),
            r.release.to_string(),
            r.compute_start.to_string(),
            r.compute_end.to_string(),
            r.net_start.to_string(),
            r.net_end.to_string(),
            r.info_age.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    JobArrival,
    ComputeDeparture,
    NetworkDeparture,
    InfoUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    /// Class position.
    pub class: usize,
    pub vm: Option<usize>,
    /// Job index for job events; insertion counter otherwise.
    pub job: usize,
    /// Insertion counter, the tie-break after time.
    pub serial: u64,
}

impl Eq for Event {}

impl Ord for Event {
    // Reversed so that `BinaryHeap` pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.serial.cmp(&self.serial))
            .then(other.kind.cmp(&self.kind))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Everything a replication needs besides its random streams.
struct Scenario<'a> {
    config: &'a SystemConfig,
    plan: &'a Plan,
    arrivals: &'a [Arrival],
    sim: &'a SimConfig,
    measure: (f64, f64),
    checkpoints: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct ClassAccumulator {
    count: usize,
    sums: [f64; 6],
}

/// Per-replication reduction.
#[derive(Debug, Clone)]
struct ReplicationOutcome {
    classes: Vec<ClassAccumulator>,
    objective: f64,
    completion: f64,
    aoi: f64,
    measured: usize,
    utilization: Vec<f64>,
    interdeparture: (f64, f64, usize),
    /// Backlog snapshots per VM, then the network queue last.
    backlog: Vec<Vec<usize>>,
    records: Option<Vec<JobRecord>>,
}

fn run_replication(scn: &Scenario<'_>, rep: usize) -> Result<ReplicationOutcome> {
    let cfg = scn.config;
    let sim = scn.sim;
    let nv = cfg.num_vms();
    let nj = cfg.num_classes();
    let mut routing_rng = stream_rng(sim.seed, rep, STREAM_ROUTING);
    let mut compute_rng = stream_rng(sim.seed, rep, STREAM_COMPUTE);
    let mut network_rng = stream_rng(sim.seed, rep, STREAM_NETWORK);
    let mut update_rng = stream_rng(sim.seed, rep, STREAM_UPDATES);

    let mut jobs: Vec<JobRecord> = Vec::with_capacity(scn.arrivals.len());
    let mut heap: BinaryHeap<Event> = BinaryHeap::new();
    let mut serial: u64 = 0;
    let mut push = |heap: &mut BinaryHeap<Event>, time, kind, class, vm, job| {
        heap.push(Event {
            time,
            kind,
            class,
            vm,
            job,
            serial,
        });
        serial += 1;
    };

    let mut vm_queue: Vec<VecDeque<usize>> = vec![VecDeque::new(); nv];
    let mut vm_busy = vec![false; nv];
    let mut net_class_queue: Vec<VecDeque<usize>> = vec![VecDeque::new(); nj];
    let mut net_fifo: VecDeque<usize> = VecDeque::new();
    let mut net_busy = false;
    let mut last_update = vec![0.0; nj];
    let mut departures: Vec<f64> = Vec::new();
    let mut backlog: Vec<Vec<usize>> = vec![Vec::with_capacity(scn.checkpoints.len()); nv + 1];
    let mut next_checkpoint = 0;
    let mut in_system = 0usize;

    let update_classes: Vec<usize> = if sim.simulate_updates {
        let mut needed = vec![false; nj];
        for c in &cfg.classes {
            for id in c.info_ids() {
                needed[id - 1] = true;
            }
        }
        (0..nj).filter(|&i| needed[i]).collect()
    } else {
        Vec::new()
    };
    for &i in &update_classes {
        let mu = cfg.classes[i].mu.expect("checked before the run");
        let e: f64 = Exp1.sample(&mut update_rng);
        push(&mut heap, e / mu, EventKind::InfoUpdate, i, None, 0);
    }

    let mut next_arrival = 0;
    if let Some(a) = scn.arrivals.first() {
        push(&mut heap, a.time, EventKind::JobArrival, a.class, None, 0);
    }

    let compute_time = |job: &JobRecord, arrival: &Arrival, rng: &mut ChaCha8Rng| -> f64 {
        arrival.compute_time.unwrap_or_else(|| {
            let (rate, shift) = cfg.vms[job.vm - 1].service_params(cfg.classes[job.class - 1].d_size);
            sample_shifted_exp(rate, shift, sim.service_mode, rng)
        })
    };
    let network_time = |class: usize, arrival: &Arrival, rng: &mut ChaCha8Rng| -> f64 {
        arrival.network_time.unwrap_or_else(|| {
            let (rate, shift) = cfg.network.service_params(cfg.classes[class].e_size);
            sample_shifted_exp(rate, shift, sim.service_mode, rng)
        })
    };

    while let Some(ev) = heap.pop() {
        while next_checkpoint < scn.checkpoints.len() && scn.checkpoints[next_checkpoint] < ev.time {
            for v in 0..nv {
                backlog[v].push(vm_queue[v].len() + usize::from(vm_busy[v]));
            }
            let waiting = net_fifo.len() + net_class_queue.iter().map(VecDeque::len).sum::<usize>();
            backlog[nv].push(waiting + usize::from(net_busy));
            next_checkpoint += 1;
        }
        let t = ev.time;
        match ev.kind {
            EventKind::JobArrival => {
                let arrival = &scn.arrivals[next_arrival];
                let idx = jobs.len();
                let vm = match arrival.vm {
                    Some(v) => v,
                    None => {
                        let p = Plan::segment(&scn.plan.routing, t);
                        let row = p.row(arrival.class);
                        let u: f64 = routing_rng.random();
                        let mut acc = 0.0;
                        let mut chosen = row.iter().rposition(|&x| x > 0.0).unwrap_or(0);
                        for (v, &x) in row.iter().enumerate() {
                            acc += x;
                            if u < acc {
                                chosen = v;
                                break;
                            }
                        }
                        chosen
                    }
                };
                jobs.push(JobRecord {
                    serial: idx,
                    class: arrival.class + 1,
                    vm: vm + 1,
                    release: t,
                    compute_start: f64::NAN,
                    compute_end: f64::NAN,
                    net_start: f64::NAN,
                    net_end: f64::NAN,
                    info_age: 0.0,
                });
                in_system += 1;
                if vm_busy[vm] {
                    vm_queue[vm].push_back(idx);
                } else {
                    vm_busy[vm] = true;
                    start_compute(&mut jobs[idx], t, &last_update, cfg, sim.simulate_updates);
                    let s = compute_time(&jobs[idx], arrival, &mut compute_rng);
                    jobs[idx].compute_end = t + s;
                    push(&mut heap, t + s, EventKind::ComputeDeparture, arrival.class, Some(vm), idx);
                }
                next_arrival += 1;
                if let Some(a) = scn.arrivals.get(next_arrival) {
                    push(&mut heap, a.time, EventKind::JobArrival, a.class, None, 0);
                }
            }
            EventKind::ComputeDeparture => {
                let idx = ev.job;
                let vm = ev.vm.expect("compute events carry a VM");
                departures.push(t);
                if net_busy {
                    match scn.plan.discipline {
                        NetworkDiscipline::Fcfs => net_fifo.push_back(idx),
                        NetworkDiscipline::PriorityWsept => net_class_queue[ev.class].push_back(idx),
                    }
                } else {
                    net_busy = true;
                    jobs[idx].net_start = t;
                    let s = network_time(ev.class, &scn.arrivals[idx], &mut network_rng);
                    jobs[idx].net_end = t + s;
                    push(&mut heap, t + s, EventKind::NetworkDeparture, ev.class, None, idx);
                }
                if let Some(next) = vm_queue[vm].pop_front() {
                    start_compute(&mut jobs[next], t, &last_update, cfg, sim.simulate_updates);
                    let s = compute_time(&jobs[next], &scn.arrivals[next], &mut compute_rng);
                    jobs[next].compute_end = t + s;
                    let class = jobs[next].class - 1;
                    push(&mut heap, t + s, EventKind::ComputeDeparture, class, Some(vm), next);
                } else {
                    vm_busy[vm] = false;
                }
            }
            EventKind::NetworkDeparture => {
                in_system -= 1;
                let next = match scn.plan.discipline {
                    NetworkDiscipline::Fcfs => net_fifo.pop_front(),
                    NetworkDiscipline::PriorityWsept => {
                        let order = Plan::segment(&scn.plan.priority, t);
                        order.iter().find_map(|&c| net_class_queue[c].pop_front())
                    }
                };
                if let Some(next) = next {
                    let class = jobs[next].class - 1;
                    jobs[next].net_start = t;
                    let s = network_time(class, &scn.arrivals[next], &mut network_rng);
                    jobs[next].net_end = t + s;
                    push(&mut heap, t + s, EventKind::NetworkDeparture, class, None, next);
                } else {
                    net_busy = false;
                }
            }
            EventKind::InfoUpdate => {
                last_update[ev.class] = t;
                let pending = next_arrival < scn.arrivals.len() || in_system > 0;
                if pending {
                    let mu = cfg.classes[ev.class].mu.expect("checked before the run");
                    let e: f64 = Exp1.sample(&mut update_rng);
                    push(&mut heap, t + e / mu, EventKind::InfoUpdate, ev.class, None, 0);
                }
            }
        }
    }
    while next_checkpoint < scn.checkpoints.len() {
        for b in backlog.iter_mut() {
            b.push(0);
        }
        next_checkpoint += 1;
    }

    Ok(summarize(scn, jobs, departures, backlog, rep))
}

fn start_compute(job: &mut JobRecord, t: f64, last_update: &[f64], cfg: &SystemConfig, updates: bool) {
    job.compute_start = t;
    if updates {
        let newest = cfg.classes[job.class - 1]
            .info_ids()
            .iter()
            .map(|&id| last_update[id - 1])
            .fold(f64::NEG_INFINITY, f64::max);
        job.info_age = t - newest;
    }
}

fn summarize(
    scn: &Scenario<'_>,
    jobs: Vec<JobRecord>,
    departures: Vec<f64>,
    backlog: Vec<Vec<usize>>,
    rep: usize,
) -> ReplicationOutcome {
    let cfg = scn.config;
    let (t0, t1) = scn.measure;
    let mut classes = vec![ClassAccumulator::default(); cfg.num_classes()];
    let mut busy = vec![0.0; cfg.num_vms()];
    let (mut sum_c, mut sum_a, mut measured) = (0.0, 0.0, 0usize);
    for job in &jobs {
        let overlap = job.compute_end.min(t1) - job.compute_start.max(t0);
        if overlap > 0.0 {
            busy[job.vm - 1] += overlap;
        }
        if job.release < t0 || job.release >= t1 {
            continue;
        }
        let acc = &mut classes[job.class - 1];
        acc.count += 1;
        let parts = [
            job.completion(),
            job.aoi(),
            job.wait_compute(),
            job.service_compute(),
            job.wait_network(),
            job.service_network(),
        ];
        for (s, x) in acc.sums.iter_mut().zip(parts) {
            *s += x;
        }
        sum_c += parts[0];
        sum_a += parts[1];
        measured += 1;
    }
    let span = t1 - t0;
    let utilization = busy.iter().map(|b| if span > 0.0 { b / span } else { 0.0 }).collect();

    let window: Vec<f64> = departures.into_iter().filter(|&d| d >= t0 && d < t1).collect();
    let gaps: Vec<f64> = window.windows(2).map(|w| w[1] - w[0]).collect();
    let interdeparture = if gaps.len() >= 2 {
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt() / mean, gaps.len())
    } else {
        (f64::NAN, f64::NAN, gaps.len())
    };

    let (completion, aoi) = if measured > 0 {
        (sum_c / measured as f64, sum_a / measured as f64)
    } else {
        (f64::NAN, f64::NAN)
    };
    let theta = cfg.theta;
    ReplicationOutcome {
        classes,
        objective: theta * completion + (1.0 - theta) * aoi,
        completion,
        aoi,
        measured,
        utilization,
        interdeparture,
        backlog,
        records: (scn.sim.record_events && rep == 0).then_some(jobs),
    }
}

/// Mean over replications with its standard error and 95% Student-t
/// half-width. Both are `None` with fewer than two replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: Option<f64>,
    pub half_width: Option<f64>,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let values: Vec<f64> = samples.iter().copied().filter(|x| x.is_finite()).collect();
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_error: None,
                half_width: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self {
                mean,
                std_error: None,
                half_width: None,
            };
        }
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        Self {
            mean,
            std_error: Some(se),
            half_width: Some(t * se),
        }
    }

    /// Standard error, or zero when unavailable.
    pub fn se(&self) -> f64 {
        self.std_error.unwrap_or(0.0)
    }

    pub fn hw(&self) -> f64 {
        self.half_width.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSim {
    pub id: usize,
    /// Measured jobs over all replications.
    pub count: usize,
    pub completion: Estimate,
    pub aoi: Estimate,
    pub wait_compute: Estimate,
    pub service_compute: Estimate,
    pub wait_network: Estimate,
    pub service_network: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmSim {
    pub id: usize,
    pub utilization: Estimate,
    pub unstable: bool,
}

/// Compute-phase departures seen as one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterdepartureStats {
    pub mean: Estimate,
    /// Coefficient of variation of the gaps; 1 for a Poisson stream.
    pub cv: Estimate,
    pub gaps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub replications: usize,
    pub classes: Vec<ClassSim>,
    pub vms: Vec<VmSim>,
    pub network_unstable: bool,
    /// Some queue's backlog grew through the run.
    pub unstable: bool,
    /// `theta * mean completion + (1 - theta) * mean age` over measured jobs.
    pub objective: Estimate,
    pub weighted_completion: Estimate,
    pub weighted_aoi: Estimate,
    pub jobs_measured: usize,
    pub interdeparture: InterdepartureStats,
    #[serde(skip)]
    pub records: Option<Vec<JobRecord>>,
}

pub const SIM_CSV_HEADER: [&str; 14] = [
    "class",
    "count",
    "completion_ms",
    "completion_hw",
    "aoi_ms",
    "aoi_hw",
    "w1_ms",
    "w1_hw",
    "s1_ms",
    "s1_hw",
    "w2_ms",
    "w2_hw",
    "s2_ms",
    "s2_hw",
];

impl SimResult {
    /// One row per class; `_hw` columns are 95% half-widths (empty with a
    /// single replication).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SIM_CSV_HEADER)?;
        let hw = |e: &Estimate| e.half_width.map(|h| h.to_string()).unwrap_or_default();
        for c in &self.classes {
            let mut rec = vec![c.id.to_string(), c.count.to_string()];
            for e in [
                &c.completion,
                &c.aoi,
                &c.wait_compute,
                &c.service_compute,
                &c.wait_network,
                &c.service_network,
            ] {
                rec.push(e.mean.to_string());
                rec.push(hw(e));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean and CV of the aggregate compute-phase inter-departure times.
    pub fn interdeparture_stats(&self) -> &InterdepartureStats {
        &self.interdeparture
    }
}

fn growing(series: &[usize]) -> bool {
    let Some(&last) = series.last() else {
        return false;
    };
    if last < BACKLOG_FLOOR || series.len() < 2 {
        return false;
    }
    let pairs = series.len() - 1;
    let up = series.windows(2).filter(|w| w[1] >= w[0]).count();
    up as f64 >= BACKLOG_MONOTONE_FRACTION * pairs as f64
}

fn aggregate(config: &SystemConfig, outcomes: Vec<ReplicationOutcome>) -> SimResult {
    let reps = outcomes.len();
    let classes = (0..config.num_classes())
        .map(|j| {
            let per_rep = |k: usize| -> Vec<f64> {
                outcomes
                    .iter()
                    .map(|o| {
                        let a = &o.classes[j];
                        if a.count > 0 {
                            a.sums[k] / a.count as f64
                        } else {
                            f64::NAN
                        }
                    })
                    .collect()
            };
            ClassSim {
                id: config.classes[j].id,
                count: outcomes.iter().map(|o| o.classes[j].count).sum(),
                completion: Estimate::from_samples(&per_rep(0)),
                aoi: Estimate::from_samples(&per_rep(1)),
                wait_compute: Estimate::from_samples(&per_rep(2)),
                service_compute: Estimate::from_samples(&per_rep(3)),
                wait_network: Estimate::from_samples(&per_rep(4)),
                service_network: Estimate::from_samples(&per_rep(5)),
            }
        })
        .collect();
    let nv = config.num_vms();
    let vms: Vec<VmSim> = (0..nv)
        .map(|v| VmSim {
            id: config.vms[v].id,
            utilization: Estimate::from_samples(&outcomes.iter().map(|o| o.utilization[v]).collect::<Vec<_>>()),
            unstable: outcomes.iter().any(|o| growing(&o.backlog[v])),
        })
        .collect();
    let network_unstable = outcomes.iter().any(|o| growing(&o.backlog[nv]));
    let collect = |f: &dyn Fn(&ReplicationOutcome) -> f64| -> Vec<f64> { outcomes.iter().map(f).collect() };
    let unstable = network_unstable || vms.iter().any(|v| v.unstable);
    SimResult {
        replications: reps,
        classes,
        network_unstable,
        unstable,
        objective: Estimate::from_samples(&collect(&|o| o.objective)),
        weighted_completion: Estimate::from_samples(&collect(&|o| o.completion)),
        weighted_aoi: Estimate::from_samples(&collect(&|o| o.aoi)),
        jobs_measured: outcomes.iter().map(|o| o.measured).sum(),
        interdeparture: InterdepartureStats {
            mean: Estimate::from_samples(&collect(&|o| o.interdeparture.0)),
            cv: Estimate::from_samples(&collect(&|o| o.interdeparture.1)),
            gaps: outcomes.iter().map(|o| o.interdeparture.2).sum(),
        },
        vms,
        records: outcomes.into_iter().next().and_then(|o| o.records),
    }
}

fn check_inputs(config: &SystemConfig, sim: &SimConfig) -> Result<()> {
    let violations = structural_violations(config);
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(violations));
    }
    sim.validate()?;
    if sim.simulate_updates {
        for c in &config.classes {
            for id in c.info_ids() {
                if config.classes[id - 1].mu.is_none() {
                    return Err(Error::InvalidParameter(format!(
                        "class {id} needs an update rate mu to simulate information updates"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Poisson arrivals on `[0, horizon)` as a superposition of the class
/// streams.
pub fn poisson_arrivals<R: Rng + ?Sized>(config: &SystemConfig, horizon: f64, rng: &mut R) -> Vec<Arrival> {
    let total = config.total_rate();
    let pick = WeightedIndex::new(config.classes.iter().map(|c| c.lambda)).expect("positive rates");
    let mut out = Vec::with_capacity((total * horizon * 1.05) as usize + 16);
    let mut t = 0.0;
    loop {
        let e: f64 = Exp1.sample(rng);
        t += e / total;
        if t >= horizon {
            break;
        }
        out.push(Arrival {
            time: t,
            class: pick.sample(rng),
            vm: None,
            compute_time: None,
            network_time: None,
        });
    }
    out
}

fn checkpoints(horizon: f64) -> Vec<f64> {
    (1..=BACKLOG_CHECKPOINTS)
        .map(|k| horizon * k as f64 / BACKLOG_CHECKPOINTS as f64)
        .collect()
}

/// Simulates `p` with Poisson arrivals, `sim.replications` times.
pub fn run_simulation(config: &SystemConfig, p: &ScheduleMatrix, sim: &SimConfig) -> Result<SimResult> {
    check_inputs(config, sim)?;
    crate::analytics::check_shape(p, config)?;
    let plan = Plan::stationary(config, p, sim.networking_discipline);
    let measure = (sim.warmup_fraction * sim.horizon, sim.horizon);
    let outcomes: Result<Vec<ReplicationOutcome>> = (0..sim.replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(sim.seed, rep, STREAM_ARRIVALS);
            let arrivals = poisson_arrivals(config, sim.horizon, &mut rng);
            let scn = Scenario {
                config,
                plan: &plan,
                arrivals: &arrivals,
                sim,
                measure,
                checkpoints: checkpoints(sim.horizon),
            };
            run_replication(&scn, rep)
        })
        .collect();
    Ok(aggregate(config, outcomes?))
}

/// Replays a fixed arrival list under a time-varying plan. Jobs released in
/// `[measure.0, measure.1)` are measured; `sim.horizon` only places the
/// backlog checkpoints.
pub fn run_plan(
    config: &SystemConfig,
    plan: &Plan,
    arrivals: &[Arrival],
    sim: &SimConfig,
    measure: (f64, f64),
) -> Result<SimResult> {
    check_inputs(config, sim)?;
    if arrivals.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(Error::InvalidParameter("arrivals must be sorted by time".into()));
    }
    for (i, a) in arrivals.iter().enumerate() {
        if a.class >= config.num_classes() {
            return Err(Error::InvalidParameter(format!("arrival {i} has unknown class {}", a.class + 1)));
        }
        if let Some(v) = a.vm {
            if v >= config.num_vms() {
                return Err(Error::UnknownVm { job: i + 1, vm: v + 1 });
            }
        }
    }
    let outcomes: Result<Vec<ReplicationOutcome>> = (0..sim.replications)
        .into_par_iter()
        .map(|rep| {
            let scn = Scenario {
                config,
                plan,
                arrivals,
                sim,
                measure,
                checkpoints: checkpoints(sim.horizon),
            };
            run_replication(&scn, rep)
        })
        .collect();
    Ok(aggregate(config, outcomes?))
}

/// One hand-placed job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedJob {
    pub release: f64,
    /// Class id (1-based).
    pub class: usize,
    /// VM id (1-based).
    pub vm: usize,
    pub compute_time: f64,
    pub network_time: f64,
}

/// Replays an exact scenario with fixed VMs and service times. Jobs on the
/// same VM with the same release start in list order. The returned result
/// carries every job's record.
pub fn scripted_arrivals(
    config: &SystemConfig,
    jobs: &[ScriptedJob],
    discipline: NetworkDiscipline,
) -> Result<SimResult> {
    for (i, j) in jobs.iter().enumerate() {
        if j.vm == 0 || j.vm > config.num_vms() {
            return Err(Error::UnknownVm { job: i + 1, vm: j.vm });
        }
        if j.class == 0 || j.class > config.num_classes() {
            return Err(Error::InvalidParameter(format!("scripted job {} has unknown class {}", i + 1, j.class)));
        }
    }
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by(|&a, &b| jobs[a].release.total_cmp(&jobs[b].release));
    let arrivals: Vec<Arrival> = order
        .iter()
        .map(|&i| Arrival {
            time: jobs[i].release,
            class: jobs[i].class - 1,
            vm: Some(jobs[i].vm - 1),
            compute_time: Some(jobs[i].compute_time),
            network_time: Some(jobs[i].network_time),
        })
        .collect();
    let sim = SimConfig {
        horizon: 1.0,
        warmup_fraction: 0.0,
        replications: 1,
        networking_discipline: discipline,
        service_mode: ServiceMode::Deterministic,
        record_events: true,
        ..SimConfig::default()
    };
    let p = ScheduleMatrix::uniform(config.num_classes(), config.num_vms());
    let plan = Plan::stationary(config, &p, discipline);
    run_plan(config, &plan, &arrivals, &sim, (f64::NEG_INFINITY, f64::INFINITY))
}
