use proptest::prelude::*;

use agesched_core::analytics::{
    analyze, compute_service_moments, stability_report, vm_arrival_rates, vm_waiting_time, wsept_order, Moments,
};
use agesched_core::model::sample_class_sizes;
use agesched_core::optimizer::{
    optimize_pps, project_feasible, project_simplex_row, project_simplex_rows, OptimizerSettings,
};
use agesched_core::scenarios::{random_instance, InstanceFamily};
use agesched_core::simulator::{run_simulation, SimConfig};
use agesched_core::{JobClass, Matrix, MomentMode, NetworkDiscipline, ParetoSpec, ScheduleMatrix, VmProfile};

fn row_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..=max_len)
}

fn schedule_for(rows: usize, cols: usize, raw: &[f64]) -> ScheduleMatrix {
    let m = Matrix::from_vec(rows, cols, raw[..rows * cols].to_vec()).unwrap();
    project_simplex_rows(&m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplex_projection_is_idempotent_and_feasible(row in row_strategy(8)) {
        let mut once = row.clone();
        project_simplex_row(&mut once);
        prop_assert!(once.iter().all(|&x| x >= 0.0));
        prop_assert!((once.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut twice = once.clone();
        project_simplex_row(&mut twice);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn simplex_projection_is_nearest_among_vertices_and_center(row in row_strategy(6)) {
        let mut proj = row.clone();
        project_simplex_row(&mut proj);
        let dist = |q: &[f64]| row.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let best = dist(&proj);
        let n = row.len();
        for k in 0..n {
            let mut vertex = vec![0.0; n];
            vertex[k] = 1.0;
            prop_assert!(best <= dist(&vertex) + 1e-12);
        }
        prop_assert!(best <= dist(&vec![1.0 / n as f64; n]) + 1e-12);
    }

    #[test]
    fn vm_arrivals_conserve_the_total_rate(seed in 0u64..10_000, raw in prop::collection::vec(-1.0f64..1.0, 30)) {
        let cfg = random_instance(&InstanceFamily::default(), seed).unwrap();
        let p = schedule_for(cfg.num_classes(), cfg.num_vms(), &raw);
        let total: f64 = vm_arrival_rates(&p, &cfg).iter().sum();
        prop_assert!((total - cfg.total_rate()).abs() <= 1e-12 * cfg.total_rate().max(1.0));
    }

    #[test]
    fn pk_wait_increases_with_arrival_rate(mean in 1.0f64..20.0, extra in 0.0f64..50.0, a in 0.01f64..0.98, b in 0.01f64..0.98) {
        let m = Moments { mean, second: mean * mean + extra };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let w_lo = vm_waiting_time(1, lo / mean, m).unwrap();
        let w_hi = vm_waiting_time(1, hi / mean, m).unwrap();
        prop_assert!(w_hi > w_lo);
    }

    #[test]
    fn exact_moments_scale_with_size(alpha in 1.0f64..100.0, beta in 0.0f64..30.0, d in 0.1f64..5.0, c in 0.1f64..10.0) {
        let vm = VmProfile::new(1, alpha, beta);
        let base = compute_service_moments(&vm, &JobClass::new(1, 0.1, d, 1.0), MomentMode::Exact);
        let scaled = compute_service_moments(&vm, &JobClass::new(1, 0.1, c * d, 1.0), MomentMode::Exact);
        prop_assert!((scaled.mean - c * base.mean).abs() <= 1e-12 * scaled.mean);
        prop_assert!((scaled.second - c * c * base.second).abs() <= 1e-12 * scaled.second);
    }

    #[test]
    fn pareto_sizes_respect_support_and_seed(shape in 1.1f64..5.0, scale in 0.01f64..500.0, cap in 1.0f64..10.0, seed in any::<u64>()) {
        let spec = ParetoSpec::new(shape, scale, cap).unwrap();
        let a = sample_class_sizes(&spec, 50, seed).unwrap();
        prop_assert_eq!(&a, &sample_class_sizes(&spec, 50, seed).unwrap());
        for &x in &a {
            prop_assert!(x >= scale && x <= spec.cap());
        }
    }

    #[test]
    fn objective_is_affine_in_theta(seed in 0u64..10_000, raw in prop::collection::vec(-1.0f64..1.0, 30), t in 0.0f64..1.0) {
        let cfg = random_instance(&InstanceFamily::default(), seed).unwrap();
        let p = project_feasible(&schedule_for(cfg.num_classes(), cfg.num_vms(), &raw), &cfg, 1e-2).unwrap();
        let f = |theta: f64| analyze(&p, &cfg.with_theta(theta), NetworkDiscipline::PriorityWsept).unwrap().objective;
        let expect = t * f(1.0) + (1.0 - t) * f(0.0);
        prop_assert!((f(t) - expect).abs() <= 1e-9 * expect.abs());
        prop_assert_eq!(wsept_order(&cfg.with_theta(0.0)), wsept_order(&cfg.with_theta(1.0)));
    }

    #[test]
    fn feasible_projection_is_stable(seed in 0u64..10_000, raw in prop::collection::vec(-3.0f64..3.0, 30)) {
        let cfg = random_instance(&InstanceFamily::default(), seed).unwrap();
        let m = Matrix::from_vec(cfg.num_classes(), cfg.num_vms(), raw[..cfg.num_classes() * cfg.num_vms()].to_vec()).unwrap();
        let p = project_feasible(&m, &cfg, 1e-3).unwrap();
        prop_assert!(stability_report(&p, &cfg, 1e-3).stable);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn descent_is_monotone_and_deterministic(seed in 0u64..10_000) {
        let cfg = random_instance(&InstanceFamily::default(), seed).unwrap();
        let settings = OptimizerSettings { seed, ..OptimizerSettings::default() };
        let trace = optimize_pps(&cfg, &settings).unwrap();
        for w in trace.objectives.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(stability_report(&trace.schedule, &cfg, settings.stability_margin).stable);
        let again = optimize_pps(&cfg, &settings).unwrap();
        prop_assert_eq!(trace, again);
    }

    #[test]
    fn simulated_jobs_obey_sample_path_rules(seed in 0u64..10_000) {
        let cfg = random_instance(&InstanceFamily::default(), seed).unwrap();
        let p = project_feasible(&ScheduleMatrix::uniform(cfg.num_classes(), cfg.num_vms()), &cfg, 1e-2).unwrap();
        let sim = SimConfig {
            horizon: 2e4,
            replications: 1,
            seed,
            record_events: true,
            ..SimConfig::default()
        };
        let result = run_simulation(&cfg, &p, &sim).unwrap();
        prop_assert_eq!(&result, &run_simulation(&cfg, &p, &sim).unwrap());
        let jobs = result.records.unwrap();
        prop_assert!(!jobs.is_empty());
        for j in &jobs {
            let parts = j.wait_compute() + j.service_compute() + j.wait_network() + j.service_network();
            prop_assert!((j.completion() - parts).abs() < 1e-9);
            prop_assert!(j.aoi() <= j.completion() + 1e-9);
            prop_assert!(j.wait_compute() >= 0.0 && j.wait_network() >= 0.0);
        }
        // Network service intervals never overlap, and never split.
        let mut net: Vec<_> = jobs.iter().map(|j| (j.net_start, j.net_end)).collect();
        net.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in net.windows(2) {
            prop_assert!(w[1].0 >= w[0].1 - 1e-9);
        }
        // Each VM serves one job at a time.
        for v in 1..=cfg.num_vms() {
            let mut on_vm: Vec<_> = jobs.iter().filter(|j| j.vm == v).map(|j| (j.compute_start, j.compute_end)).collect();
            on_vm.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in on_vm.windows(2) {
                prop_assert!(w[1].0 >= w[0].1 - 1e-9);
            }
        }
        // FIFO within a class at the network.
        for c in 1..=cfg.num_classes() {
            let mut class_jobs: Vec<_> = jobs.iter().filter(|j| j.class == c).collect();
            class_jobs.sort_by(|a, b| a.compute_end.total_cmp(&b.compute_end));
            for w in class_jobs.windows(2) {
                prop_assert!(w[1].net_start >= w[0].net_start);
            }
        }
    }
}

#[test]
fn literal_second_moment_is_not_quadratic_in_size() {
    let vm = VmProfile::new(1, 82.0, 10.0);
    let base = compute_service_moments(&vm, &JobClass::new(1, 0.1, 1.0, 1.0), MomentMode::PaperLiteral);
    let doubled = compute_service_moments(&vm, &JobClass::new(1, 0.1, 2.0, 1.0), MomentMode::PaperLiteral);
    assert!((doubled.mean - 2.0 * base.mean).abs() < 1e-12);
    assert!((doubled.second - 4.0 * base.second).abs() > 1.0);
}
