//! Trace replay with window-based rate estimation.
//!
//! Time is cut into windows of length `W`. Arrivals in window `k >= 1` are
//! routed by the schedule optimized for the rates counted in window `k - 1`;
//! window 0 has no history, is routed uniformly and is not measured.
//!
//! Trace files are CSV with header `timestamp_ms,key`; further columns are
//! ignored. Keys become classes through an explicit `key,class` mapping file
//! or, by default, frequency-rank bucketing: distinct keys are sorted by
//! decreasing count (ties by key) and the key of rank `r` (0-based) out of
//! `K` goes to class `floor(r J / K) + 1`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::objective;
use crate::error::{Error, Result};
use crate::model::{ensure_valid, SystemConfig};
use crate::optimizer::{optimize_pps, OptimizerSettings};
use crate::schedule::{Matrix, ScheduleMatrix};
use crate::simulator::{poisson_arrivals, run_plan, Arrival, Plan, SimConfig, SimResult};

/// Windows are at least this long (ms).
pub const MIN_WINDOW_MS: f64 = 1e5;
/// Windows hold at least this many expected arrivals.
pub const MIN_WINDOW_ARRIVALS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp: f64,
    pub key: String,
    /// Class id (1-based).
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassMap {
    RankBucketing { classes: usize },
    Explicit(HashMap<String, usize>),
}

/// Reads a `key,class` mapping file.
pub fn read_class_map(path: impl AsRef<Path>) -> Result<HashMap<String, usize>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let mut map = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let err = |message: String| Error::Trace {
            path: path.to_path_buf(),
            line,
            message,
        };
        let key = rec.get(0).ok_or_else(|| err("missing key".into()))?.trim().to_string();
        let class = rec
            .get(1)
            .ok_or_else(|| err("missing class".into()))?
            .trim()
            .parse::<usize>()
            .map_err(|e| err(format!("bad class: {e}")))?;
        if class == 0 {
            return Err(err("class ids start at 1".into()));
        }
        map.insert(key, class);
    }
    Ok(map)
}

/// Key to class by frequency rank.
pub fn rank_buckets(keys: &[String], classes: usize) -> HashMap<String, usize> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for k in keys {
        *counts.entry(k.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let total = ranked.len();
    ranked
        .into_iter()
        .enumerate()
        .map(|(r, (k, _))| (k.to_string(), r * classes / total + 1))
        .collect()
}

/// Parses a trace and assigns classes. `label` names the source in errors.
pub fn parse_trace<R: std::io::Read>(input: R, label: &Path, map: &ClassMap) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ts_col), Some(key_col)) = (col("timestamp_ms"), col("key")) else {
        return Err(Error::Trace {
            path: label.to_path_buf(),
            line: 1,
            message: "header must contain timestamp_ms and key".into(),
        });
    };
    let mut raw = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let err = |message: String| Error::Trace {
            path: label.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let ts: f64 = rec
            .get(ts_col)
            .ok_or_else(|| err("missing timestamp".into()))?
            .trim()
            .parse()
            .map_err(|e| err(format!("bad timestamp: {e}")))?;
        if !(ts.is_finite() && ts >= 0.0) {
            return Err(err(format!("timestamp {ts} is not a nonnegative time")));
        }
        let key = rec.get(key_col).ok_or_else(|| err("missing key".into()))?.trim().to_string();
        raw.push((line, ts, key));
    }
    if raw.is_empty() {
        return Err(Error::Trace {
            path: label.to_path_buf(),
            line: 1,
            message: "trace has no records".into(),
        });
    }

    let ranked;
    let lookup = match map {
        ClassMap::RankBucketing { classes } => {
            let keys: Vec<String> = raw.iter().map(|r| r.2.clone()).collect();
            ranked = rank_buckets(&keys, *classes);
            &ranked
        }
        ClassMap::Explicit(m) => m,
    };
    let mut records = Vec::with_capacity(raw.len());
    for (line, timestamp, key) in raw {
        let class = *lookup.get(&key).ok_or_else(|| Error::Trace {
            path: label.to_path_buf(),
            line,
            message: format!("key {key:?} has no class in the mapping"),
        })?;
        records.push(TraceRecord { timestamp, key, class });
    }
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(records)
}

pub fn ingest_trace(path: impl AsRef<Path>, map: &ClassMap) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    parse_trace(file, path, map)
}

pub fn write_trace_csv<W: std::io::Write>(records: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp_ms", "key"])?;
    for r in records {
        w.write_record(&[r.timestamp.to_string(), r.key.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Poisson trace with the configured rates on `[0, duration)`; the key of
/// class `j` is `class-j`.
pub fn synthetic_trace(config: &SystemConfig, duration: f64, seed: u64) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    poisson_arrivals(config, duration, &mut rng)
        .into_iter()
        .map(|a| TraceRecord {
            timestamp: a.time,
            key: format!("class-{}", a.class + 1),
            class: a.class + 1,
        })
        .collect()
}

/// Explicit mapping matching the keys of [`synthetic_trace`].
pub fn synthetic_class_map(classes: usize) -> HashMap<String, usize> {
    (1..=classes).map(|j| (format!("class-{j}"), j)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceWindow {
    pub window_length: f64,
    pub index: usize,
    pub counts: Vec<usize>,
    /// `counts / window_length`.
    pub rates: Vec<f64>,
}

/// Rates counted over `[index W, (index + 1) W)`.
pub fn estimate_rates(records: &[TraceRecord], classes: usize, window_length: f64, index: usize) -> TraceWindow {
    let start = index as f64 * window_length;
    let end = start + window_length;
    let mut counts = vec![0; classes];
    let lo = records.partition_point(|r| r.timestamp < start);
    for r in records[lo..].iter().take_while(|r| r.timestamp < end) {
        if r.class >= 1 && r.class <= classes {
            counts[r.class - 1] += 1;
        }
    }
    let rates = counts.iter().map(|&c| c as f64 / window_length).collect();
    TraceWindow {
        window_length,
        index,
        counts,
        rates,
    }
}

/// `max(1e5 ms, time for 1000 expected arrivals)`.
pub fn default_window_length(records: &[TraceRecord]) -> f64 {
    let duration = records.last().map_or(0.0, |r| r.timestamp);
    let per_arrival = if records.is_empty() {
        0.0
    } else {
        duration / records.len() as f64
    };
    MIN_WINDOW_MS.max(MIN_WINDOW_ARRIVALS * per_arrival)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OnlineSettings {
    /// Defaults to [`default_window_length`].
    pub window_length: Option<f64>,
    pub optimizer: OptimizerSettings,
    /// Replications, seed, disciplines; the horizon is set by the trace.
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub index: usize,
    pub start: f64,
    /// Rates the window's schedule was solved for (previous window's counts).
    pub rates: Vec<f64>,
    pub schedule: ScheduleMatrix,
    /// Analytic objective of the schedule at the estimated rates.
    pub objective_estimate: Option<f64>,
    /// The solve failed and the previous schedule was kept.
    pub fallback: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineResult {
    pub window_length: f64,
    pub windows: Vec<WindowOutcome>,
    /// Jobs released from window 1 on.
    pub sim: SimResult,
    pub measure: (f64, f64),
}

impl OnlineResult {
    /// `window,objective_estimate,rate_1..rate_J` rows.
    pub fn write_windows_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let classes = self.windows.first().map_or(0, |x| x.rates.len());
        let mut header = vec!["window".to_string(), "objective_estimate".to_string()];
        header.extend((1..=classes).map(|j| format!("rate_{j}")));
        w.write_record(&header)?;
        for win in &self.windows {
            let mut rec = vec![
                win.index.to_string(),
                win.objective_estimate.map(|x| x.to_string()).unwrap_or_default(),
            ];
            rec.extend(win.rates.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn window_count(records: &[TraceRecord], window_length: f64) -> usize {
    let last = records.last().map_or(0.0, |r| r.timestamp);
    (last / window_length).floor() as usize + 1
}

fn arrivals_of(records: &[TraceRecord]) -> Vec<Arrival> {
    records
        .iter()
        .map(|r| Arrival {
            time: r.timestamp,
            class: r.class - 1,
            vm: None,
            compute_time: None,
            network_time: None,
        })
        .collect()
}

/// Priority order for estimated rates: positive-rate classes by decreasing
/// WSEPT key, then zero-rate classes by id.
fn priority_for(template: &SystemConfig, rates: &[f64]) -> Vec<usize> {
    let total: f64 = rates.iter().sum();
    let mut order: Vec<usize> = (0..rates.len()).collect();
    let key = |j: usize| {
        if rates[j] > 0.0 {
            rates[j] / total / template.classes[j].e_size
        } else {
            f64::NEG_INFINITY
        }
    };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    order
}

/// Solves the offline program for the positive-rate classes; the rest get
/// uniform rows.
fn solve_window(template: &SystemConfig, rates: &[f64], settings: &OptimizerSettings) -> Result<(ScheduleMatrix, f64)> {
    let active: Vec<usize> = (0..rates.len()).filter(|&j| rates[j] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::InvalidParameter("no arrivals in the estimation window".into()));
    }
    let mut sub = template.clone();
    sub.classes = active
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let mut c = template.classes[j].clone();
            c.id = i + 1;
            c.lambda = rates[j];
            c.info_set = None;
            c
        })
        .collect();
    ensure_valid(&sub)?;
    let trace = optimize_pps(&sub, settings)?;
    let value = objective(&trace.schedule, &sub)?;
    let nv = template.num_vms();
    let mut full = Matrix::filled(rates.len(), nv, 1.0 / nv as f64);
    for (i, &j) in active.iter().enumerate() {
        full.row_mut(j).copy_from_slice(trace.schedule.row(i));
    }
    Ok((ScheduleMatrix::new(full)?, value))
}

/// Re-solves per window on the previous window's estimates and replays the
/// trace under the resulting schedules.
pub fn online_driver(records: &[TraceRecord], template: &SystemConfig, settings: &OnlineSettings) -> Result<OnlineResult> {
    let nj = template.num_classes();
    if let Some(r) = records.iter().find(|r| r.class == 0 || r.class > nj) {
        return Err(Error::InvalidParameter(format!(
            "trace class {} outside 1..{nj}",
            r.class
        )));
    }
    let window_length = settings.window_length.unwrap_or_else(|| default_window_length(records));
    if !(window_length > 0.0) {
        return Err(Error::InvalidParameter("window length must be positive".into()));
    }
    let windows_total = window_count(records, window_length);
    if records.is_empty() || windows_total < 2 {
        return Err(Error::InvalidParameter(format!(
            "the trace spans {windows_total} window(s) of {window_length} ms; at least 2 are needed"
        )));
    }

    let nv = template.num_vms();
    let uniform = ScheduleMatrix::uniform(nj, nv);
    let equal_rates = vec![1.0; nj];
    let mut windows = vec![WindowOutcome {
        index: 0,
        start: 0.0,
        rates: vec![0.0; nj],
        schedule: uniform.clone(),
        objective_estimate: None,
        fallback: false,
        note: Some("no history; uniform routing, not measured".into()),
    }];
    let mut routing = vec![(f64::NEG_INFINITY, uniform.matrix().clone())];
    let mut priority = vec![(f64::NEG_INFINITY, priority_for(template, &equal_rates))];

    for k in 1..windows_total {
        let est = estimate_rates(records, nj, window_length, k - 1);
        let start = k as f64 * window_length;
        let previous = windows.last().expect("window 0 exists").schedule.clone();
        let outcome = match solve_window(template, &est.rates, &settings.optimizer) {
            Ok((schedule, value)) => WindowOutcome {
                index: k,
                start,
                rates: est.rates.clone(),
                schedule,
                objective_estimate: Some(value),
                fallback: false,
                note: None,
            },
            Err(e) => WindowOutcome {
                index: k,
                start,
                rates: est.rates.clone(),
                schedule: previous,
                objective_estimate: None,
                fallback: true,
                note: Some(format!("kept previous schedule: {e}")),
            },
        };
        routing.push((start, outcome.schedule.matrix().clone()));
        if !outcome.fallback {
            priority.push((start, priority_for(template, &est.rates)));
        }
        windows.push(outcome);
    }

    let plan = Plan {
        routing,
        priority,
        discipline: settings.sim.networking_discipline,
    };
    let end = windows_total as f64 * window_length;
    let measure = (window_length, end);
    let sim = SimConfig {
        horizon: end,
        ..settings.sim.clone()
    };
    let result = run_plan(template, &plan, &arrivals_of(records), &sim, measure)?;
    Ok(OnlineResult {
        window_length,
        windows,
        sim: result,
        measure,
    })
}

/// The same trace and measurement window under the single schedule that is
/// optimal for `truth`'s rates.
pub fn offline_reference(
    records: &[TraceRecord],
    truth: &SystemConfig,
    settings: &OnlineSettings,
    window_length: f64,
) -> Result<(ScheduleMatrix, SimResult)> {
    let schedule = optimize_pps(truth, &settings.optimizer)?.schedule;
    let plan = Plan::stationary(truth, &schedule, settings.sim.networking_discipline);
    let end = window_count(records, window_length) as f64 * window_length;
    let sim = SimConfig {
        horizon: end,
        ..settings.sim.clone()
    };
    let result = run_plan(truth, &plan, &arrivals_of(records), &sim, (window_length, end))?;
    Ok((schedule, result))
}

/// Template with each class rate replaced by its average over the trace.
pub fn empirical_rates(records: &[TraceRecord], template: &SystemConfig, window_length: f64) -> SystemConfig {
    let end = window_count(records, window_length) as f64 * window_length;
    let mut counts = vec![0usize; template.num_classes()];
    for r in records {
        counts[r.class - 1] += 1;
    }
    let mut cfg = template.clone();
    for (c, n) in cfg.classes.iter_mut().zip(counts) {
        c.lambda = n as f64 / end;
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AoiNetworkWeighting, JobClass, MomentMode, NetworkProfile, VmProfile};

    fn parse(text: &str, map: &ClassMap) -> Result<Vec<TraceRecord>> {
        parse_trace(text.as_bytes(), Path::new("mem.csv"), map)
    }

    #[test]
    fn records_are_sorted() {
        let recs = parse(
            "timestamp_ms,key,size\n5,a,100\n1,b,7\n3,a,1\n",
            &ClassMap::RankBucketing { classes: 2 },
        )
        .unwrap();
        let ts: Vec<f64> = recs.iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, [1.0, 3.0, 5.0]);
    }

    #[test]
    fn more_frequent_key_gets_class_one() {
        let recs = parse(
            "timestamp_ms,key\n1,rare\n2,common\n3,common\n",
            &ClassMap::RankBucketing { classes: 2 },
        )
        .unwrap();
        for r in &recs {
            assert_eq!(r.class, if r.key == "common" { 1 } else { 2 });
        }
    }

    #[test]
    fn rank_buckets_spread_keys_evenly() {
        let keys: Vec<String> = (0..6).flat_map(|k| vec![format!("k{k}"); 10 - k]).collect();
        let map = rank_buckets(&keys, 3);
        assert_eq!(map["k0"], 1);
        assert_eq!(map["k1"], 1);
        assert_eq!(map["k2"], 2);
        assert_eq!(map["k5"], 3);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let err = parse(
            "timestamp_ms,key\n1,a\nnope,b\n",
            &ClassMap::RankBucketing { classes: 1 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Trace { line: 3, .. }), "{err}");
        assert!(parse("timestamp_ms,key\n", &ClassMap::RankBucketing { classes: 1 }).is_err());
        let unmapped = ClassMap::Explicit(HashMap::from([("a".to_string(), 1)]));
        assert!(matches!(
            parse("timestamp_ms,key\n1,a\n2,b\n", &unmapped),
            Err(Error::Trace { line: 3, .. })
        ));
    }

    #[test]
    fn window_rate_is_count_over_length() {
        let records: Vec<TraceRecord> = (0..50)
            .map(|i| TraceRecord {
                timestamp: 1000.0 + i as f64 * 10.0,
                key: "x".into(),
                class: 1,
            })
            .collect();
        let w = estimate_rates(&records, 2, 1000.0, 1);
        assert_eq!(w.counts, [50, 0]);
        assert!((w.rates[0] - 0.05).abs() < 1e-15);
        let empty = estimate_rates(&records, 2, 1000.0, 5);
        assert_eq!(empty.rates, [0.0, 0.0]);
    }

    fn template() -> SystemConfig {
        SystemConfig {
            classes: vec![JobClass::new(1, 0.06, 1.0, 0.05), JobClass::new(2, 0.04, 1.5, 0.08)],
            vms: vec![VmProfile::new(1, 82.0, 10.0), VmProfile::new(2, 60.0, 16.0)],
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
    fn single_window_trace_is_rejected() {
        let trace = synthetic_trace(&template(), 5e4, 1);
        let settings = OnlineSettings {
            window_length: Some(1e5),
            ..Default::default()
        };
        assert!(online_driver(&trace, &template(), &settings).is_err());
    }

    #[test]
    fn rate_step_changes_the_schedule() {
        let cfg = template();
        let mut trace = synthetic_trace(&cfg, 2e5, 3);
        let heavier = cfg.with_scaled_rates(1.25);
        let later = synthetic_trace(&heavier, 2e5, 4);
        trace.extend(later.into_iter().map(|mut r| {
            r.timestamp += 2e5;
            r
        }));
        let settings = OnlineSettings {
            window_length: Some(1e5),
            sim: SimConfig {
                replications: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = online_driver(&trace, &cfg, &settings).unwrap();
        assert_eq!(out.windows.len(), 4);
        assert!(out.windows.iter().all(|w| !w.fallback));
        let delta = out.windows[3].schedule.max_abs_diff(out.windows[2].schedule.matrix());
        assert!(delta > 1e-6, "{delta}");
    }

    #[test]
    fn zero_rate_class_gets_uniform_row() {
        let cfg = template();
        let (s, _) = solve_window(&cfg, &[0.05, 0.0], &OptimizerSettings::default()).unwrap();
        assert_eq!(s.row(1), &[0.5, 0.5]);
        assert_eq!(priority_for(&cfg, &[0.0, 0.01]), vec![1, 0]);
    }

    #[test]
    fn infeasible_window_falls_back() {
        let cfg = template();
        let mut trace = synthetic_trace(&cfg, 1e5, 5);
        // a burst far beyond capacity in window 1
        let burst: Vec<TraceRecord> = (0..30_000)
            .map(|i| TraceRecord {
                timestamp: 1e5 + i as f64 * 3.0,
                key: "class-1".into(),
                class: 1,
            })
            .collect();
        trace.extend(burst);
        trace.push(TraceRecord {
            timestamp: 2.5e5,
            key: "class-2".into(),
            class: 2,
        });
        let settings = OnlineSettings {
            window_length: Some(1e5),
            sim: SimConfig {
                replications: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = online_driver(&trace, &cfg, &settings).unwrap();
        assert!(!out.windows[1].fallback);
        assert!(out.windows[2].fallback);
        assert_eq!(out.windows[2].schedule, out.windows[1].schedule);
    }
}
