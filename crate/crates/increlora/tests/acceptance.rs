//! Acceptance gate: the ten guarantees this crate makes, each verified
//! end to end through the public API or the CLI command layer. Every test
//! prints one `PASS ...` line with its measured numbers (visible under
//! `cargo test -- --nocapture`); the test name doubles as the pass/fail
//! label in the default harness output.

use std::time::Instant;

use increlora::adapter::SvdAdapter;
use increlora::cli::commands::{
    cmd_check_grad, cmd_compare, cmd_replay, heterogeneous_config, run_to_dir,
};
use increlora::gradcheck::standard_battery;
use increlora::netgraph::{forward, forward_frozen};
use increlora::numkernel::Rng;
use increlora::optimsched::{AdamHyper, Optimizer, ParamField, ParamKey, ScheduleSpec};
use increlora::scoring::ImportanceState;
use increlora::trainer::{self, spearman, Mode, PlantedTask, TrainConfig};
use rand::rngs::StdRng;
use rand::{Rng as _, SeedableRng};

const PLANTED: [f64; 6] = [1.0, 1.0, 2.0, 2.0, 6.0, 12.0];

/// Builds the adapter bank the incremental mode starts from: one reserve
/// per module, nothing active.
fn reserve_bank(cfg: &TrainConfig, task: &PlantedTask) -> Vec<SvdAdapter> {
    let mut rng = Rng::substream(cfg.seed, 2);
    task.backbone
        .layer_shapes()
        .iter()
        .enumerate()
        .map(|(k, &(i, o))| {
            SvdAdapter::with_reserve(k, i, o, cfg.adapter_scale, &mut rng, cfg.init_std)
        })
        .collect()
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    // The user-facing command over ten seeds...
    cmd_check_grad(0, 10).expect("gradient check command must pass");
    // ...and the underlying battery, asserting the per-class maxima directly.
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        for report in standard_battery(seed, 1e-5) {
            assert!(
                report.pass(),
                "seed {seed}: gradient check failed:\n{report:?}"
            );
            for row in &report.rows {
                worst = worst.max(row.max_rel);
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}, budget 30s");
    println!("PASS c01 gradient-correctness: worst relative error {worst:.3e} over 10 seeds in {elapsed:.2?}");
}

#[test]
fn c02_zero_init_identity() {
    let cfg = heterogeneous_config(3, Mode::Increlora);
    let task = PlantedTask::build(&cfg);
    let mut adapters = reserve_bank(&cfg, &task);
    for ad in &mut adapters {
        ad.mask_reserve();
    }
    let mut rng = Rng::substream(99, 0);
    let mut checked = 0usize;
    for _ in 0..10 {
        let x = increlora::numkernel::gaussian_fill(&mut rng, 8, cfg.task.layer_dims[0], 1.0);
        let adapted = forward(&task.backbone, &adapters, &x).0;
        let frozen = forward_frozen(&task.backbone, &x);
        for (a, f) in adapted.as_slice().iter().zip(frozen.as_slice()) {
            assert_eq!(a.to_bits(), f.to_bits(), "masked model must equal the backbone bitwise");
            checked += 1;
        }
    }

    // The fixed baseline starts with every lambda at zero: same identity.
    let fixed = heterogeneous_config(3, Mode::FixedLora);
    let shapes = task.backbone.layer_shapes();
    let mut rng2 = Rng::substream(3, 2);
    let bank: Vec<SvdAdapter> = shapes
        .iter()
        .enumerate()
        .map(|(k, &(i, o))| {
            SvdAdapter::fixed_rank(k, i, o, fixed.adapter_scale, 3, &mut rng2, fixed.init_std)
        })
        .collect();
    let x = increlora::numkernel::gaussian_fill(&mut rng, 8, cfg.task.layer_dims[0], 1.0);
    let adapted = forward(&task.backbone, &bank, &x).0;
    let frozen = forward_frozen(&task.backbone, &x);
    for (a, f) in adapted.as_slice().iter().zip(frozen.as_slice()) {
        assert_eq!(a.to_bits(), f.to_bits(), "zero-lambda bank must equal the backbone bitwise");
        checked += 1;
    }
    println!("PASS c02 zero-init-identity: {checked} outputs bitwise-identical to the frozen backbone");
}

#[test]
fn c03_reserve_non_influence() {
    let cfg = heterogeneous_config(5, Mode::Increlora);
    let task = PlantedTask::build(&cfg);
    let with_reserve = reserve_bank(&cfg, &task);
    let mut masked = with_reserve.clone();
    for ad in &mut masked {
        ad.mask_reserve();
    }
    let mut rng = Rng::substream(123, 0);
    let x = increlora::numkernel::gaussian_fill(&mut rng, 100, cfg.task.layer_dims[0], 1.0);
    let y_with = forward(&task.backbone, &with_reserve, &x).0;
    let y_masked = forward(&task.backbone, &masked, &x).0;
    let cols = y_with.cols();
    let mut worst: f64 = 0.0;
    for r in 0..100 {
        let mut dist = 0.0;
        let mut norm = 0.0;
        for c in 0..cols {
            let d = y_with.get(r, c) - y_masked.get(r, c);
            dist += d * d;
            norm += y_masked.get(r, c) * y_masked.get(r, c);
        }
        let rel = (dist / norm.max(1e-300)).sqrt();
        worst = worst.max(rel);
        assert!(rel <= 1e-4, "input {r}: pinned reserves moved the output by {rel:.3e} (> 1e-4)");
    }
    println!("PASS c03 reserve-non-influence: worst relative output shift {worst:.3e} over 100 inputs");
}

#[test]
fn c04_budget_linearity() {
    let start = Instant::now();
    let mut draw = StdRng::seed_from_u64(4242);
    for case in 0..20 {
        let n: usize = draw.random_range(1..=5);
        let h: usize = draw.random_range(1..=n.min(3));
        let nu: u64 = draw.random_range(1..=8);
        let events: u64 = draw.random_range(1..=6);
        let warmup: u64 = draw.random_range(2..=5);
        let r_final = n as u64 + h as u64 * events;
        let close_step = nu * events;
        let dims: Vec<usize> = (0..=n).map(|_| draw.random_range(3..=5)).collect();
        let cfg = TrainConfig {
            mode: Mode::Increlora,
            seed: 1000 + case,
            total_steps: close_step + warmup + 2,
            warmup,
            base_lr: 1e-3,
            batch_size: 4,
            h: Some(h),
            nu: Some(nu),
            r_final: Some(r_final),
            fixed_rank: None,
            fixed_ranks: None,
            task: increlora::trainer::TaskSpec {
                layer_dims: dims,
                planted_ranks: vec![1; n],
                ..heterogeneous_config(0, Mode::Increlora).task
            },
            ..heterogeneous_config(0, Mode::Increlora)
        };
        let out = trainer::train(&cfg).expect("randomized config must train");
        assert_eq!(out.events.len() as u64, events, "case {case}: event count");
        let last = out.events.last().unwrap();
        assert_eq!(last.r_total, r_final, "case {case}: budget must close exactly at r_final");
        assert_eq!(last.step, close_step, "case {case}: close step");
        for m in &out.metrics {
            let expect = if m.step < close_step {
                n as u64 + h as u64 * (m.step / nu)
            } else {
                r_final - n as u64 // reserves masked the moment the budget filled
            };
            assert_eq!(
                m.r_total, expect,
                "case {case} (n={n} h={h} nu={nu}): rank sum at step {} is {}, expected {expect}",
                m.step, m.r_total
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 1min");
    println!("PASS c04 budget-linearity: rank sum exact at every step of 20 randomized runs in {elapsed:.2?}");
}

#[test]
fn c05_scoring_oracle_equivalence() {
    // Independent straight-line reimplementation of the smoothing.
    struct Oracle {
        i: Vec<f64>,
        u: Vec<f64>,
        b1: f64,
        b2: f64,
    }
    impl Oracle {
        fn update(&mut self, raw: &[f64]) -> Vec<f64> {
            for k in 0..raw.len() {
                self.i[k] = self.b1 * self.i[k] + (1.0 - self.b1) * raw[k];
                self.u[k] = self.b2 * self.u[k] + (1.0 - self.b2) * (self.i[k] - raw[k]).abs();
            }
            self.i.iter().zip(&self.u).map(|(i, u)| i * u).collect()
        }
        fn top_h(&self, s_hat: &[f64], h: usize) -> Vec<usize> {
            let mut idx: Vec<usize> = (0..s_hat.len()).collect();
            idx.sort_by(|&a, &b| s_hat[b].partial_cmp(&s_hat[a]).unwrap().then(a.cmp(&b)));
            let mut sel = idx[..h].to_vec();
            sel.sort_unstable();
            sel
        }
    }

    let mut draw = StdRng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m: usize = draw.random_range(1..=6);
        let len: usize = draw.random_range(1..=40);
        let b1: f64 = draw.random_range(0.05..0.95);
        let b2: f64 = draw.random_range(0.05..0.95);
        let mut state = ImportanceState::new(m, b1, b2);
        let mut oracle = Oracle { i: vec![0.0; m], u: vec![0.0; m], b1, b2 };
        for _ in 0..len {
            let raw: Vec<f64> = (0..m).map(|_| draw.random_range(0.0..1.0)).collect();
            state.update_all(&raw);
            let want = oracle.update(&raw);
            for k in 0..m {
                let di = (state.i()[k] - oracle.i[k]).abs();
                let du = (state.u()[k] - oracle.u[k]).abs();
                let ds = (state.s_hat()[k] - want[k]).abs();
                worst = worst.max(di).max(du).max(ds);
                assert!(di <= 1e-12 && du <= 1e-12 && ds <= 1e-12, "state diverged from oracle");
            }
            let h = draw.random_range(1..=m);
            assert_eq!(state.top_h(h), oracle.top_h(state.s_hat(), h), "selection mismatch");
        }
    }

    // Worked single-step value: cold start, beta 0.85, one raw score of 1.
    let mut state = ImportanceState::new(1, 0.85, 0.85);
    state.update_all(&[1.0]);
    let got = state.s_hat()[0];
    assert!(
        (got - 0.019125).abs() <= 1e-12,
        "one-step composite for a unit score must be 0.019125, got {got:.12}"
    );
    println!("PASS c05 scoring-oracle: 1000 streams within {worst:.2e} of brute force; one-step value {got:.6}");
}

#[test]
fn c06_replay_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = heterogeneous_config(7, Mode::Increlora);
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    run_to_dir(&cfg, &run_a).expect("run a");
    run_to_dir(&cfg, &run_b).expect("run b");
    for name in ["metrics.jsonl", "events.jsonl"] {
        let a = std::fs::read(run_a.join(name)).unwrap();
        let b = std::fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} must be byte-identical across identical-seed runs");
    }
    cmd_replay(&run_a).expect("replay must accept the incremental run");

    let fixed = heterogeneous_config(7, Mode::FixedLora);
    let run_f = dir.path().join("f");
    run_to_dir(&fixed, &run_f).expect("fixed run");
    cmd_replay(&run_f).expect("replay must accept the fixed-mode run");
    println!("PASS c06 replay-determinism: identical seeds reproduce logs byte-for-byte and replay accepts both modes");
}

#[test]
fn c07_orthogonality_dynamics() {
    let start = Instant::now();
    let mut votes = 0;
    let mut detail = String::new();
    for seed in 7..12 {
        let mut on = heterogeneous_config(seed, Mode::Increlora);
        on.h = Some(2);
        on.r_final = Some(30);
        on.total_steps = 1350;
        let mut off = on.clone();
        off.advance_learning = false;

        let run = |cfg: &TrainConfig| {
            let out = trainer::train(cfg).expect("orthogonality run");
            let max = out.metrics.iter().map(|m| m.regu_loss).fold(0.0, f64::max);
            let fin = out.metrics.last().unwrap().regu_loss;
            (max, fin)
        };
        let (max_on, fin_on) = run(&on);
        let (_, fin_off) = run(&off);
        let ratio = fin_on / max_on;
        let ok = ratio <= 0.10 && fin_off > fin_on;
        if ok {
            votes += 1;
        }
        detail.push_str(&format!(
            "\n  seed {seed}: trained residual ratio {ratio:.2e}, final {fin_on:.2e} vs ablated {fin_off:.2e} -> {}",
            if ok { "ok" } else { "FAIL" }
        ));
    }
    let elapsed = start.elapsed();
    assert!(votes >= 3, "majority vote failed ({votes}/5):{detail}");
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}, budget 10min");
    println!("PASS c07 orthogonality-dynamics: {votes}/5 seeds in {elapsed:.2?}{detail}");
}

#[test]
fn c08_allocation_quality() {
    let start = Instant::now();
    let mut rhos = Vec::new();
    for seed in 7..12 {
        let cfg = heterogeneous_config(seed, Mode::Increlora);
        let out = trainer::train(&cfg).expect("allocation run");
        let deployed: Vec<f64> = out.deployed_ranks.iter().map(|&r| r as f64).collect();
        let rho = spearman(&PLANTED, &deployed);
        rhos.push((seed, rho, out.deployed_ranks));
    }
    let mut sorted: Vec<f64> = rhos.iter().map(|r| r.1).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[2];
    let elapsed = start.elapsed();
    assert!(
        median >= 0.7,
        "median Spearman {median:.4} < 0.7; per-seed: {rhos:?}"
    );
    assert!(elapsed.as_secs_f64() < 900.0, "took {elapsed:?}, budget 15min");
    println!("PASS c08 allocation-quality: median Spearman {median:.4} over 5 seeds in {elapsed:.2?}");
    for (seed, rho, ranks) in &rhos {
        println!("  seed {seed}: deployed {ranks:?} rho {rho:.4}");
    }
}

#[test]
fn c09_efficiency_ordering() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let write = |cfg: &TrainConfig, name: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        p
    };
    let a = write(&heterogeneous_config(7, Mode::Increlora), "incremental.json");
    let b = write(&heterogeneous_config(7, Mode::FixedLora), "fixed.json");
    let report = cmd_compare(&a, &b, 5, &dir.path().join("cmp")).expect("compare");
    assert_eq!(report.deployed_a, report.deployed_b, "comparison must be budget-matched");
    let non_losses = report.wins_a + report.ties;
    let elapsed = start.elapsed();
    assert!(
        non_losses >= 4,
        "incremental mode must match or beat the fixed baseline on >= 4/5 seeds, got {}/5 \
         (evals a {:?} vs b {:?})",
        non_losses,
        report.evals_a,
        report.evals_b
    );
    assert!(elapsed.as_secs_f64() < 1800.0, "took {elapsed:?}, budget 30min");
    println!(
        "PASS c09 efficiency-ordering: {}/5 seeds at deployed rank {} (medians {:.6} vs {:.6}) in {elapsed:.2?}",
        non_losses, report.deployed_a, report.median_a, report.median_b
    );
}

#[test]
fn c10_schedule_contract() {
    let mut opt = Optimizer::new(AdamHyper::default());
    let spec = ScheduleSpec { warmup: 50, total: 500 };
    let base = 0.01;
    opt.register_group(vec![(ParamKey::new(0, 0, ParamField::Lambda), 1)], 0, spec, base);
    opt.register_group(vec![(ParamKey::new(1, 0, ParamField::Lambda), 1)], 300, spec, base);
    let g0 = &opt.groups()[0];
    let late = &opt.groups()[1];

    assert_eq!(g0.lr_at(0), 0.0, "warmup must start at zero");
    assert_eq!(g0.lr_at(50), base, "peak must be exactly the base rate at birth+warmup");
    assert_eq!(g0.lr_at(25), base * 25.0 / 50.0, "warmup ramp must be exactly linear");
    assert_eq!(g0.lr_at(500), 0.0, "rate must be exactly zero at the final step");
    assert_eq!(g0.lr_at(777), 0.0, "rate must stay zero past the final step");
    assert_eq!(late.lr_at(300), 0.0, "restarted group must begin again at zero");
    assert_eq!(late.lr_at(350), base, "restarted group must reach the same peak");
    for k in 0..=50 {
        assert_eq!(
            late.lr_at(300 + k),
            g0.lr_at(k),
            "warmup ramp must depend only on steps since birth (k={k})"
        );
    }
    println!("PASS c10 schedule-contract: warmup start/peak/final/restart values all exact");
}
