use gpumux::profiles::catalog_lookup;
use gpumux::simulator::*;
use proptest::prelude::*;

const C2: [(&str, f64); 2] = [("ResNet-50", 320.0), ("VGG-19", 160.0)];
const C4: [(&str, f64); 4] = [
    ("Alexnet", 700.0),
    ("Mobilenet", 700.0),
    ("ResNet-50", 320.0),
    ("VGG-19", 160.0),
];

fn scenario(models: &[(&str, f64)], scheduler: &str, duration_s: f64, extra: &str) -> Scenario {
    let ms: Vec<String> = models
        .iter()
        .map(|(n, r)| format!(r#"{{"name":"{n}","rate":{r}}}"#))
        .collect();
    Scenario::from_json(&format!(
        r#"{{"models":[{}],"duration_s":{duration_s},"scheduler":"{scheduler}","seed":7{extra}}}"#,
        ms.join(",")
    ))
    .unwrap()
}

fn reconfig(model: &str, pct: f64, mode: &str) -> String {
    format!(r#","reconfigurations":[{{"time_ms":5000,"model":"{model}","new_gpu_pct":{pct},"mode":"{mode}"}}]"#)
}

fn assert_causal_fifo(m: &SimMetrics) {
    for model in &m.models {
        let mut prev_newest = 0;
        for r in m.runs.iter().filter(|r| r.model == model.name) {
            assert!(r.newest_arrival_us <= r.start_us, "{} ran before arrival", r.model);
            assert!(r.oldest_arrival_us <= r.newest_arrival_us);
            assert!(r.oldest_arrival_us >= prev_newest, "{} out of FIFO order", r.model);
            prev_newest = r.newest_arrival_us;
        }
    }
}

fn assert_occupancy(m: &SimMetrics) {
    for g in &m.gpus {
        assert!(g.timeline.max() <= 100.0 + 1e-6, "occupancy {}", g.timeline.max());
    }
}

#[test]
fn zero_rate_gives_zero_metrics() {
    let m = run(&scenario(&[("Alexnet", 0.0), ("VGG-19", 0.0)], "dstack", 2.0, "")).unwrap();
    assert_eq!(m.arrived(), 0);
    assert_eq!(m.total_throughput(), 0.0);
    assert_eq!(m.violations(), 0);
    assert_eq!(m.mean_utilization(), 0.0);
    assert!(m.runs.is_empty());
    for x in &m.models {
        assert!(x.latency_histogram.is_empty());
    }
}

#[test]
fn two_models_meet_every_deadline() {
    let m = run(&scenario(&C2, "dstack", 10.0, "")).unwrap();
    assert!(m.is_conserved());
    assert_eq!(m.violations(), 0);
    assert_causal_fifo(&m);
    assert_occupancy(&m);
}

#[test]
fn every_scheduler_conserves_and_respects_capacity() {
    for kind in ["dstack", "temporal", "static_spatial", "wmax_min"] {
        let m = run(&scenario(&C4, kind, 3.0, "")).unwrap();
        assert!(m.is_conserved(), "{kind}");
        assert_causal_fifo(&m);
        assert_occupancy(&m);
    }
    let m = run(&scenario(&C4, "exclusive", 3.0, r#","gpu_count":4"#)).unwrap();
    assert!(m.is_conserved());
    assert_eq!(m.gpus.len(), 4);
    assert!(m.gpus.iter().all(|g| g.models.len() == 1));
}

#[test]
fn single_gpu_runs_one_schedule() {
    let m = run(&scenario(&C4, "dstack", 1.0, "")).unwrap();
    assert_eq!(m.gpus.len(), 1);
    assert_eq!(m.gpus[0].models.len(), 4);
}

#[test]
fn replicate_spreads_load_over_gpus() {
    let m = run(&scenario(
        &C4,
        "dstack",
        2.0,
        r#","gpu_count":2,"placement":"replicate""#,
    ))
    .unwrap();
    assert_eq!(m.gpus.len(), 2);
    assert!(m.is_conserved());
    for g in &m.gpus {
        assert_eq!(g.models.len(), 4);
        assert!(g.utilization > 0.0);
    }
    assert_occupancy(&m);
}

#[test]
fn overlap_reconfiguration_only_delays_by_switchover() {
    let sc = scenario(&C2, "dstack", 10.0, &reconfig("ResNet-50", 50.0, "overlap"));
    let m = run(&sc).unwrap();
    assert!(m.is_conserved());
    assert_eq!(m.reconfigurations.len(), 1);
    let rec = &m.reconfigurations[0];
    let ready = rec.requested_us + (DEFAULT_LOAD_TIME_MS * 1000.0) as u64;
    let gap = (DEFAULT_SWITCHOVER_MS * 1000.0) as u64;
    assert!(rec.effective_us >= ready + gap);
    let runs: Vec<&RunRecord> = m.runs.iter().filter(|r| r.model == "ResNet-50").collect();
    // the old instance keeps serving while the new one loads
    assert!(runs
        .iter()
        .any(|r| r.start_us > rec.requested_us + 1_000_000 && r.end_us < ready));
    // nothing runs inside the switchover gap
    assert!(runs
        .iter()
        .all(|r| r.end_us <= rec.effective_us - gap || r.start_us >= rec.effective_us));
    // runs before the switch use the old share, runs after it the new one
    for r in &runs {
        if r.start_us >= rec.effective_us {
            assert!(r.gpu_pct <= 50.0 + 1e-9);
        }
    }
    assert!(runs.iter().any(|r| r.start_us >= rec.effective_us && r.gpu_pct == 50.0));
    // at most one batch waits on the gap
    let base = run(&scenario(&C2, "dstack", 10.0, "")).unwrap();
    let batch = m.model("ResNet-50").unwrap().batch as u64;
    assert!(
        m.violations() <= base.violations() + batch,
        "{} vs {}",
        m.violations(),
        base.violations()
    );
    assert_causal_fifo(&m);
    assert_occupancy(&m);
}

#[test]
fn downtime_reconfiguration_loses_the_loading_window() {
    let sc = scenario(&C2, "dstack", 10.0, &reconfig("ResNet-50", 50.0, "downtime"));
    let m = run(&sc).unwrap();
    assert!(m.is_conserved());
    let down = (5_000_000u64, 9_000_000u64);
    assert!(m
        .runs
        .iter()
        .filter(|r| r.model == "ResNet-50")
        .all(|r| r.start_us < down.0 || r.start_us >= down.1));
    let res = sc.resolve().unwrap();
    let slo_us = (res[0].config.slo_ms * 1000.0) as u64;
    let arrivals = arrival_times(&sc, "ResNet-50", res[0].rate, stream_seed(sc.seed, 0, 0));
    let doomed = arrivals.iter().filter(|&&a| a >= down.0 && a + slo_us < down.1).count() as u64;
    assert!(doomed > 1000);
    assert!(m.model("ResNet-50").unwrap().violations() >= doomed);
}

#[test]
fn overlap_never_worse_than_downtime() {
    for (model, pct) in [("ResNet-50", 50.0), ("VGG-19", 40.0), ("Alexnet", 40.0)] {
        let o = run(&scenario(&C4, "dstack", 10.0, &reconfig(model, pct, "overlap"))).unwrap();
        let d = run(&scenario(&C4, "dstack", 10.0, &reconfig(model, pct, "downtime"))).unwrap();
        assert!(
            o.violations() <= d.violations(),
            "{model}: {} > {}",
            o.violations(),
            d.violations()
        );
    }
}

#[test]
fn identical_share_reconfiguration_is_a_no_op() {
    let base = run(&scenario(&C2, "dstack", 10.0, "")).unwrap();
    let same = run(&scenario(&C2, "dstack", 10.0, &reconfig("VGG-19", 50.0, "overlap"))).unwrap();
    assert_eq!(base, same);
}

#[test]
fn reconfiguring_an_absent_model_is_rejected() {
    let sc = scenario(&C2, "dstack", 10.0, &reconfig("Alexnet", 40.0, "overlap"));
    assert!(run(&sc).is_err());
}

fn phased(models: &[(&str, f64)], phases: &str) -> Scenario {
    scenario(models, "dstack", 9.0, &format!(r#","phases":{phases}"#))
}

#[test]
fn idle_model_frees_capacity_for_the_others() {
    // offered load above capacity so the others have a backlog to drain
    let heavy: Vec<(&str, f64)> = C4.iter().map(|&(n, r)| (n, r * 1.5)).collect();
    let sc = phased(
        &heavy,
        r#"[{"start_s":3,"multipliers":{"Alexnet":0}},{"start_s":6,"multipliers":{}}]"#,
    );
    let p = variable_rate_session(&sc).unwrap();
    assert_eq!(p.len(), 3);
    // only the backlog left at the boundary completes
    assert!(p[1].throughput["Alexnet"] < 0.02 * p[0].throughput["Alexnet"]);
    let others = |i: usize| -> f64 {
        p[i].throughput
            .iter()
            .filter(|(k, _)| k.as_str() != "Alexnet")
            .map(|(_, v)| v)
            .sum()
    };
    assert!(others(1) > others(0), "{} <= {}", others(1), others(0));
}

#[test]
fn utilization_stays_near_baseline_when_one_rate_changes() {
    let sc = phased(
        &C4,
        r#"[{"start_s":3,"multipliers":{"Alexnet":0.4}},{"start_s":6,"multipliers":{}}]"#,
    );
    let p = variable_rate_session(&sc).unwrap();
    for s in &p[1..] {
        assert!(
            (s.utilization - p[0].utilization).abs() <= 10.0,
            "{} vs {}",
            s.utilization,
            p[0].utilization
        );
    }
}

#[test]
fn constant_rates_give_steady_sessions() {
    let sc = phased(
        &C2,
        r#"[{"start_s":3,"multipliers":{}},{"start_s":6,"multipliers":{}}]"#,
    );
    let p = variable_rate_session(&sc).unwrap();
    for s in &p[1..] {
        for (k, v) in &s.throughput {
            let b = p[0].throughput[k];
            assert!((v - b).abs() <= 0.05 * b, "{k}: {v} vs {b}");
        }
        assert!((s.utilization - p[0].utilization).abs() <= 3.0);
    }
}

#[test]
fn knee_probe_runs_for_models_without_a_knee() {
    let mut sc = scenario(&[("Alexnet", 300.0), ("VGG-19", 80.0)], "dstack", 2.0, "");
    sc.models[0].probe_knee = true;
    let m = run(&sc).unwrap();
    let a = m.model("Alexnet").unwrap();
    assert!(!a.probes.is_empty());
    assert!(a.probes.len() <= 5);
    // the nominal start is measured for free; the first probe is the full GPU
    assert_eq!(a.probes[0].0, 100);
    assert!(m.model("VGG-19").unwrap().probes.is_empty());
}

#[test]
fn run_many_keeps_order_and_matches_serial() {
    let scs: Vec<Scenario> = [1u64, 2, 3]
        .iter()
        .map(|&s| {
            let mut sc = scenario(&C4, "dstack", 1.0, "");
            sc.seed = s;
            sc
        })
        .collect();
    let par = run_many(&scs, 3);
    for (sc, r) in scs.iter().zip(par) {
        assert_eq!(r.unwrap(), run(sc).unwrap());
    }
}

#[test]
fn csv_outputs_are_deterministic() {
    let sc = scenario(&C4, "dstack", 1.0, "");
    let write = || {
        let m = run(&sc).unwrap();
        let mut a = Vec::new();
        m.write_csv(&mut a).unwrap();
        let mut b = Vec::new();
        m.write_utilization_csv(&mut b).unwrap();
        (a, b)
    };
    assert_eq!(write(), write());
}

#[test]
fn scenario_json_round_trip() {
    let sc = scenario(&C4, "dstack", 1.0, &reconfig("Alexnet", 40.0, "downtime"));
    let back = Scenario::from_json(&sc.to_json().unwrap()).unwrap();
    assert_eq!(back.to_json().unwrap(), sc.to_json().unwrap());
}

fn catalog_names() -> Vec<&'static str> {
    vec![
        "Alexnet",
        "Mobilenet",
        "ResNet-18",
        "ResNet-50",
        "Inception",
        "ResNeXt-50",
        "VGG-19",
        "BERT",
    ]
}

fn random_scenario() -> impl Strategy<Value = Scenario> {
    (
        proptest::sample::subsequence(catalog_names(), 1..=4),
        proptest::collection::vec(0u32..=400, 4),
        0usize..4,
        any::<u64>(),
        prop::bool::ANY,
        prop::bool::ANY,
    )
        .prop_map(|(names, rates, k, seed, jitter, drop)| {
            let scheduler = ["dstack", "temporal", "static_spatial", "wmax_min"][k];
            let models: Vec<(&str, f64)> = names.iter().zip(&rates).map(|(&n, &r)| (n, r as f64)).collect();
            let arrival = if jitter { "uniform_jittered" } else { "deterministic" };
            let mut sc = scenario(
                &models,
                scheduler,
                1.0,
                &format!(r#","arrival":"{arrival}","drop_expired":{drop}"#),
            );
            sc.seed = seed;
            sc
        })
        .prop_filter("static partitions must fit", |sc| {
            sc.scheduler != SchedulerKind::StaticSpatial
                || sc
                    .models
                    .iter()
                    .map(|m| catalog_lookup(&m.name).unwrap().knee_pct)
                    .sum::<f64>()
                    <= 100.0
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn conservation_and_determinism(sc in random_scenario()) {
        let a = run(&sc);
        let b = run(&sc);
        match (&a, &b) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(x), Err(y)) => prop_assert_eq!(x.to_string(), y.to_string()),
            _ => prop_assert!(false, "runs disagree"),
        }
        if let Ok(m) = a {
            prop_assert!(m.is_conserved());
            let total: u64 = m.models.iter().map(|x| x.arrived).sum();
            let hist: u64 = m.models.iter().flat_map(|x| x.latency_histogram.values()).sum();
            let done: u64 = m.models.iter().map(|x| x.completed()).sum();
            prop_assert_eq!(hist, done);
            prop_assert!(done <= total);
            for g in &m.gpus {
                prop_assert!(g.timeline.max() <= 100.0 + 1e-6);
            }
            for model in &m.models {
                let mut prev = 0;
                for r in m.runs.iter().filter(|r| r.model == model.name) {
                    prop_assert!(r.newest_arrival_us <= r.start_us);
                    prop_assert!(r.oldest_arrival_us >= prev);
                    prev = r.newest_arrival_us;
                }
            }
        }
    }
}
