//! Command implementations behind the argument parser. Each returns a
//! `CommandError` whose variant fixes the process exit code: verification
//! failures exit 1, config problems 2, runtime failures 3.

use std::path::Path;
use std::time::Instant;

use crate::allocator::AllocEvent;
use crate::gradcheck;
use crate::netgraph::Activation;
use crate::trainer::{
    self, adapters_from_parts, evaluate_adapters, train, Mode, TaskKind, TrainConfig, TrainError,
    TrainOutcome,
};

use super::artifacts::{
    self, config_hash, load_checkpoint, load_config, load_resolved_config, read_events,
    read_metrics, write_checkpoint, write_jsonl, write_resolved_config, write_run_info,
    write_text, ArtifactError, Checkpoint,
};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    /// Exit 1: a verification command found a real discrepancy.
    #[error("{0}")]
    Verification(String),
    /// Exit 2: the config or input files are unusable.
    #[error("{0}")]
    Config(String),
    /// Exit 3: the run itself failed.
    #[error("{0}")]
    Runtime(String),
}

impl CommandError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CommandError::Verification(_) => 1,
            CommandError::Config(_) => 2,
            CommandError::Runtime(_) => 3,
        }
    }
}

impl From<ArtifactError> for CommandError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Io { .. } => CommandError::Runtime(e.to_string()),
            ArtifactError::Parse { .. } | ArtifactError::Checkpoint { .. } => {
                CommandError::Config(e.to_string())
            }
        }
    }
}

impl From<TrainError> for CommandError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CommandError::Config(e.to_string()),
            TrainError::Diverged { .. } => CommandError::Runtime(e.to_string()),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CommandError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CommandError::Runtime(format!("{}: {e}", dir.display())))
}

fn snapshot(cfg_hash: u64, step: u64, phase: crate::allocator::Phase, adapters: &[crate::adapter::SvdAdapter]) -> Checkpoint {
    Checkpoint {
        config_hash: cfg_hash,
        step,
        phase,
        modules: adapters
            .iter()
            .map(|a| (a.active().to_vec(), a.reserve().cloned()))
            .collect(),
    }
}

/// Trains one run and writes the full artifact set into `out`.
pub fn run_to_dir(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome, CommandError> {
    ensure_dir(out)?;
    let started = Instant::now();
    let mut resolved = cfg.clone();
    resolved.resolve();
    trainer::validate(&resolved)?;
    write_resolved_config(out, &resolved)?;
    let hash = config_hash(&resolved);

    let outcome = train(&resolved)?;

    write_jsonl(&out.join("metrics.jsonl"), &outcome.metrics)?;
    write_jsonl(&out.join("events.jsonl"), &outcome.events)?;
    write_checkpoint(
        &out.join("checkpoint.bin"),
        &snapshot(hash, resolved.total_steps, outcome.final_phase, &outcome.final_adapters),
    )?;
    write_checkpoint(
        &out.join("checkpoint_best.bin"),
        &snapshot(hash, outcome.best_step, outcome.best_phase, &outcome.best_adapters),
    )?;
    write_text(&out.join("rank_report.csv"), &artifacts::rank_report_csv(&outcome))?;
    write_text(
        &out.join("rank_trajectory.csv"),
        &artifacts::rank_trajectory_csv(&resolved, &outcome),
    )?;
    write_text(&out.join("lambda_hist.csv"), &artifacts::lambda_hist_csv(&outcome))?;
    write_run_info(out, hash, started.elapsed().as_secs_f64())?;
    Ok(outcome)
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CommandError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = run_to_dir(&cfg, out)?;
    log::info!(
        "run complete: final eval {:.6}, best eval {:.6} at step {}, deployed ranks {:?}",
        outcome.final_eval,
        outcome.best_eval,
        outcome.best_step,
        outcome.deployed_ranks
    );
    println!(
        "final_eval {:.12} best_eval {:.12} best_step {} deployed {:?}",
        outcome.final_eval, outcome.best_eval, outcome.best_step, outcome.deployed_ranks
    );
    Ok(())
}

/// Finite-difference audit over `count` seeds starting at `seed`. Prints
/// one table per fixture; any row at or above tolerance fails the command.
pub fn cmd_check_grad(seed: u64, count: u64) -> Result<(), CommandError> {
    assert!(count >= 1);
    let tol = gradcheck::DEFAULT_TOLERANCE;
    let mut offenders: Vec<String> = Vec::new();
    for s in seed..seed + count {
        for report in gradcheck::standard_battery(s, tol) {
            println!(
                "seed {} dims {:?} activation {:?} loss {:?}",
                report.seed, report.dims, report.activation, report.loss
            );
            println!("  {:<16} {:>12} {:>8}", "class", "max_rel", "entries");
            for row in &report.rows {
                println!("  {:<16} {:>12.3e} {:>8}", row.class, row.max_rel, row.entries);
                if row.max_rel >= tol {
                    offenders.push(format!(
                        "seed {} {:?}/{:?} {}: {:.3e}",
                        report.seed, report.activation, report.loss, row.class, row.max_rel
                    ));
                }
            }
            println!("  reserve-linearity {:>12.3e}", report.reserve_linearity_err);
            if report.reserve_linearity_err >= tol {
                offenders.push(format!(
                    "seed {} {:?}/{:?} reserve-linearity: {:.3e}",
                    report.seed, report.activation, report.loss, report.reserve_linearity_err
                ));
            }
        }
    }
    if offenders.is_empty() {
        println!("gradient check passed (tolerance {tol:.0e})");
        Ok(())
    } else {
        Err(CommandError::Verification(format!(
            "gradient check failed, worst offenders:\n  {}",
            offenders.join("\n  ")
        )))
    }
}

/// Reproduces the allocator's decisions from the logged score stream and
/// compares against the archived event log, field for field.
pub fn cmd_replay(run: &Path) -> Result<(), CommandError> {
    let cfg = load_resolved_config(run)?;
    trainer::validate(&cfg)?;
    let logged = read_events(&run.join("events.jsonl"))?;
    if cfg.mode != Mode::Increlora {
        if logged.is_empty() {
            println!("replay ok: fixed-rank run logs no events");
            return Ok(());
        }
        return Err(CommandError::Verification(format!(
            "fixed-rank run must log no events, found {}",
            logged.len()
        )));
    }

    let n = cfg.task.num_modules();
    let h = cfg.h.unwrap();
    let nu = cfg.nu_resolved();
    let r_final = cfg.r_final.unwrap();
    let mut ranks: Vec<u64> = vec![1; n];
    let mut r_total = n as u64;
    let mut regenerated: Vec<AllocEvent> = Vec::new();
    let mut next_step = nu;
    while r_total < r_final {
        let idx = regenerated.len();
        let Some(entry) = logged.get(idx) else {
            return Err(CommandError::Verification(format!(
                "event log ends after {idx} events but the budget needs another event at step {next_step}"
            )));
        };
        if entry.scores.len() != n {
            return Err(CommandError::Verification(format!(
                "event {idx}: {} scores logged for {n} modules",
                entry.scores.len()
            )));
        }
        // Independent selection: sort by score descending, index ascending.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            entry.scores[b]
                .partial_cmp(&entry.scores[a])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        let mut selected: Vec<usize> = order[..h].to_vec();
        selected.sort_unstable();
        for &k in &selected {
            ranks[k] += 1;
        }
        r_total += h as u64;
        regenerated.push(AllocEvent {
            step: next_step,
            selected,
            r_total,
            ranks: ranks.clone(),
            scores: entry.scores.clone(),
        });
        next_step += nu;
    }

    if regenerated.len() != logged.len() {
        return Err(CommandError::Verification(format!(
            "budget closes after {} events but the log has {}",
            regenerated.len(),
            logged.len()
        )));
    }
    for (i, (ours, theirs)) in regenerated.iter().zip(&logged).enumerate() {
        let a = serde_json::to_string(ours).unwrap();
        let b = serde_json::to_string(theirs).unwrap();
        if a != b {
            return Err(CommandError::Verification(format!(
                "first divergent event is #{i}:\n  replayed: {a}\n  logged:   {b}"
            )));
        }
    }
    println!("replay ok: {} events match", logged.len());
    Ok(())
}

/// Checks that two runs of the same config in the same directory layout
/// produced identical metric streams (used with cmd_train for audits).
pub fn metrics_identical(run_a: &Path, run_b: &Path) -> Result<bool, CommandError> {
    let a = read_metrics(&run_a.join("metrics.jsonl"))?;
    let b = read_metrics(&run_b.join("metrics.jsonl"))?;
    Ok(a == b)
}

#[derive(Debug, serde::Serialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub evals_a: Vec<f64>,
    pub evals_b: Vec<f64>,
    pub median_a: f64,
    pub median_b: f64,
    pub iqr_a: f64,
    pub iqr_b: f64,
    /// Seeds where side A is strictly better / strictly worse / equal,
    /// under the task's metric orientation.
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub deployed_a: u64,
    pub deployed_b: u64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Tukey-hinge interquartile range: median of the upper half minus median
/// of the lower half (halves exclude the middle element when n is odd).
fn iqr(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n < 2 {
        return 0.0;
    }
    let half = n / 2;
    median(&sorted[n - half..]) - median(&sorted[..half])
}

fn summarize(kind: TaskKind, seeds: Vec<u64>, evals_a: Vec<f64>, evals_b: Vec<f64>, deployed_a: u64, deployed_b: u64) -> CompareReport {
    let mut wins_a = 0;
    let mut wins_b = 0;
    let mut ties = 0;
    for (a, b) in evals_a.iter().zip(&evals_b) {
        if kind.better(*a, *b) {
            wins_a += 1;
        } else if kind.better(*b, *a) {
            wins_b += 1;
        } else {
            ties += 1;
        }
    }
    let mut sa = evals_a.clone();
    let mut sb = evals_b.clone();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    CompareReport {
        seeds,
        evals_a,
        evals_b,
        median_a: median(&sa),
        median_b: median(&sb),
        iqr_a: iqr(&sa),
        iqr_b: iqr(&sb),
        wins_a,
        wins_b,
        ties,
        deployed_a,
        deployed_b,
    }
}

/// Runs both configs across `seeds` consecutive seeds on the identical
/// task and summarizes the final eval metrics side by side.
pub fn cmd_compare(
    config_a: &Path,
    config_b: &Path,
    seeds: u64,
    out: &Path,
) -> Result<CompareReport, CommandError> {
    if seeds == 0 {
        return Err(CommandError::Config("--seeds must be at least 1".into()));
    }
    let cfg_a = load_config(config_a)?;
    let cfg_b = load_config(config_b)?;
    for (cfg, path) in [(&cfg_a, config_a), (&cfg_b, config_b)] {
        trainer::validate(cfg).map_err(|e| {
            CommandError::Config(format!("{}: {e}", path.display()))
        })?;
    }
    if cfg_a.task != cfg_b.task {
        return Err(CommandError::Config(
            "the two configs describe different tasks; the comparison would be meaningless".into(),
        ));
    }
    if (cfg_a.seed, cfg_a.total_steps, cfg_a.batch_size)
        != (cfg_b.seed, cfg_b.total_steps, cfg_b.batch_size)
    {
        return Err(CommandError::Config(
            "seed, total_steps and batch_size must match across the compared configs".into(),
        ));
    }
    ensure_dir(out)?;

    let mut seed_list = Vec::new();
    let mut evals_a = Vec::new();
    let mut evals_b = Vec::new();
    let mut deployed_a = 0;
    let mut deployed_b = 0;
    for i in 0..seeds {
        let seed = cfg_a.seed + i;
        seed_list.push(seed);
        let mut a = cfg_a.clone();
        a.seed = seed;
        let mut b = cfg_b.clone();
        b.seed = seed;
        let out_a = run_to_dir(&a, &out.join(format!("a-seed{seed}")))?;
        let out_b = run_to_dir(&b, &out.join(format!("b-seed{seed}")))?;
        log::info!(
            "seed {seed}: a {:.6} vs b {:.6}",
            out_a.final_eval,
            out_b.final_eval
        );
        deployed_a = out_a.deployed_ranks.iter().sum();
        deployed_b = out_b.deployed_ranks.iter().sum();
        evals_a.push(out_a.final_eval);
        evals_b.push(out_b.final_eval);
    }
    let report = summarize(cfg_a.task.kind, seed_list, evals_a, evals_b, deployed_a, deployed_b);
    if report.deployed_a != report.deployed_b {
        log::warn!(
            "deployed ranks differ ({} vs {}); the comparison is not budget-matched",
            report.deployed_a,
            report.deployed_b
        );
    }
    let path = out.join("compare-report.json");
    let mut text = serde_json::to_string_pretty(&report).unwrap();
    text.push('\n');
    write_text(&path, &text)?;
    println!(
        "a: median {:.6} iqr {:.6} | b: median {:.6} iqr {:.6} | wins a {} b {} ties {} (deployed {} vs {})",
        report.median_a,
        report.iqr_a,
        report.median_b,
        report.iqr_b,
        report.wins_a,
        report.wins_b,
        report.ties,
        report.deployed_a,
        report.deployed_b
    );
    Ok(report)
}

/// Sweeps the orthogonality penalty weight over the standard grid, holding
/// everything else fixed.
pub fn cmd_ablate(config: &Path, out: &Path) -> Result<(), CommandError> {
    let cfg = load_config(config)?;
    trainer::validate(&cfg)?;
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for gamma in [0.0, 0.01, 0.1, 1.0] {
        let mut c = cfg.clone();
        c.regu_weight = gamma;
        let dir = out.join(format!("gamma-{gamma}"));
        let outcome = run_to_dir(&c, &dir)?;
        let max_regu = outcome
            .metrics
            .iter()
            .map(|m| m.regu_loss)
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push(serde_json::json!({
            "gamma": gamma,
            "final_eval": outcome.final_eval,
            "final_regu_loss": outcome.metrics.last().unwrap().regu_loss,
            "max_regu_loss": max_regu,
        }));
        println!(
            "gamma {gamma}: final_eval {:.6} final_regu {:.6}",
            outcome.final_eval,
            outcome.metrics.last().unwrap().regu_loss
        );
    }
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Array(rows)).unwrap();
    text.push('\n');
    write_text(&out.join("ablate-report.json"), &text)?;
    Ok(())
}

/// Loads a run's checkpoint (refusing on config-hash mismatch) and prints
/// its eval metric on the run's own task.
pub fn cmd_eval(run: &Path, best: bool) -> Result<(), CommandError> {
    let cfg = load_resolved_config(run)?;
    trainer::validate(&cfg)?;
    let hash = config_hash(&cfg);
    let name = if best { "checkpoint_best.bin" } else { "checkpoint.bin" };
    let ck = load_checkpoint(&run.join(name), hash).map_err(|e| match e {
        // Integrity failure is a verification result, not a config typo.
        ArtifactError::Checkpoint { .. } => CommandError::Verification(e.to_string()),
        other => other.into(),
    })?;
    let adapters = adapters_from_parts(&cfg, ck.modules);
    let metric = evaluate_adapters(&cfg, &adapters);
    println!("step {} phase {:?} eval {:.12}", ck.step, ck.phase, metric);
    Ok(())
}

/// Standard heterogeneous planted fixture shared by docs and tests: a
/// six-layer funnel (96 inputs narrowing to 12 outputs) whose true update
/// ranks grow toward the output by an order of magnitude. The contracting
/// widths mirror where the demand sits, so a sound scorer has a real signal
/// to find: unit-norm candidate directions concentrate their entries in the
/// narrow late layers, exactly where the high-rank updates were planted.
pub fn heterogeneous_config(seed: u64, mode: Mode) -> TrainConfig {
    let increlora = mode == Mode::Increlora;
    TrainConfig {
        mode,
        seed,
        total_steps: 3000,
        warmup: 100,
        base_lr: 4e-3,
        batch_size: 32,
        h: increlora.then_some(3),
        nu: Some(100),
        r_final: increlora.then_some(12),
        beta1: 0.85,
        beta2: 0.85,
        regu_weight: 0.1,
        init_std: 0.02,
        adapter_scale: 1.0,
        advance_learning: true,
        fixed_rank: (!increlora).then_some(1),
        fixed_ranks: None,
        optimizer: Default::default(),
        task: crate::trainer::TaskSpec {
            kind: TaskKind::PlantedRegression,
            layer_dims: vec![96, 96, 64, 40, 24, 16, 12],
            activation: Activation::Tanh,
            planted_ranks: vec![1, 1, 2, 2, 6, 12],
            planted_magnitude: 0.5,
            noise_std: 0.01,
            w0_std: None,
            with_bias: false,
            eval_batches: 4,
        },
    }
}

/// Writes the standard fixture config pair for hand experimentation.
pub fn cmd_init_config(out: &Path, mode: Mode) -> Result<(), CommandError> {
    let cfg = heterogeneous_config(7, mode);
    let mut text = serde_json::to_string_pretty(&cfg).unwrap();
    text.push('\n');
    write_text(out, &text)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TaskSpec;

    fn tiny(mode: Mode) -> TrainConfig {
        let increlora = mode == Mode::Increlora;
        TrainConfig {
            mode,
            seed: 5,
            total_steps: 90,
            warmup: 15,
            base_lr: 5e-3,
            batch_size: 4,
            h: increlora.then_some(1),
            nu: Some(15),
            r_final: increlora.then_some(4),
            beta1: 0.85,
            beta2: 0.85,
            regu_weight: 0.1,
            init_std: 0.02,
            adapter_scale: 1.0,
            advance_learning: true,
            fixed_rank: (!increlora).then_some(2),
            fixed_ranks: None,
            optimizer: Default::default(),
            task: TaskSpec {
                kind: TaskKind::PlantedRegression,
                layer_dims: vec![5, 4, 3],
                activation: Activation::Tanh,
                planted_ranks: vec![1, 1],
                planted_magnitude: 0.4,
                noise_std: 0.01,
                w0_std: None,
                with_bias: false,
                eval_batches: 1,
            },
        }
    }

    #[test]
    fn run_to_dir_writes_the_full_artifact_set() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        run_to_dir(&tiny(Mode::Increlora), &out).unwrap();
        for name in [
            "resolved-config.json",
            "metrics.jsonl",
            "events.jsonl",
            "checkpoint.bin",
            "checkpoint_best.bin",
            "rank_report.csv",
            "rank_trajectory.csv",
            "lambda_hist.csv",
            "run-info.json",
        ] {
            assert!(out.join(name).exists(), "{name} missing");
        }
    }

    #[test]
    fn replay_accepts_archived_runs_and_flags_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        run_to_dir(&tiny(Mode::Increlora), &out).unwrap();
        cmd_replay(&out).unwrap();

        // Tamper with one selection: replay must point at that event.
        let events_path = out.join("events.jsonl");
        let mut events = read_events(&events_path).unwrap();
        events[1].selected = vec![1 - events[1].selected[0]];
        write_jsonl(&events_path, &events).unwrap();
        let err = cmd_replay(&out).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("#1"), "{err}");
    }

    #[test]
    fn replay_handles_fixed_runs_and_truncated_logs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fixed");
        run_to_dir(&tiny(Mode::FixedLora), &out).unwrap();
        cmd_replay(&out).unwrap();

        let out2 = dir.path().join("inc");
        run_to_dir(&tiny(Mode::Increlora), &out2).unwrap();
        let events_path = out2.join("events.jsonl");
        let mut events = read_events(&events_path).unwrap();
        events.pop();
        write_jsonl(&events_path, &events).unwrap();
        let err = cmd_replay(&out2).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("ends after"), "{err}");
    }

    #[test]
    fn identical_runs_produce_identical_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        run_to_dir(&tiny(Mode::Increlora), &a).unwrap();
        run_to_dir(&tiny(Mode::Increlora), &b).unwrap();
        assert!(metrics_identical(&a, &b).unwrap());
        for name in ["events.jsonl", "checkpoint.bin", "rank_report.csv", "lambda_hist.csv"] {
            let fa = std::fs::read(a.join(name)).unwrap();
            let fb = std::fs::read(b.join(name)).unwrap();
            assert_eq!(fa, fb, "{name} differs between identical runs");
        }
    }

    #[test]
    fn eval_command_round_trips_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let outcome = run_to_dir(&tiny(Mode::Increlora), &out).unwrap();
        cmd_eval(&out, false).unwrap();
        cmd_eval(&out, true).unwrap();

        // The checkpointed adapters reproduce the recorded final eval.
        let cfg = load_resolved_config(&out).unwrap();
        let ck = load_checkpoint(&out.join("checkpoint.bin"), config_hash(&cfg)).unwrap();
        let adapters = adapters_from_parts(&cfg, ck.modules);
        assert_eq!(evaluate_adapters(&cfg, &adapters), outcome.final_eval);

        // A config edit invalidates the hash and the load refuses.
        let mut cfg2 = cfg.clone();
        cfg2.seed += 1;
        let err = load_checkpoint(&out.join("checkpoint.bin"), config_hash(&cfg2)).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"), "{err}");
    }

    #[test]
    fn compare_enforces_matching_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.json");
        let pb = dir.path().join("b.json");
        let mut b = tiny(Mode::FixedLora);
        b.task.planted_magnitude = 0.9;
        std::fs::write(&pa, serde_json::to_string(&tiny(Mode::Increlora)).unwrap()).unwrap();
        std::fs::write(&pb, serde_json::to_string(&b).unwrap()).unwrap();
        let err = cmd_compare(&pa, &pb, 1, &dir.path().join("out")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn compare_summarizes_and_counts_wins() {
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.json");
        let pb = dir.path().join("b.json");
        std::fs::write(&pa, serde_json::to_string(&tiny(Mode::Increlora)).unwrap()).unwrap();
        std::fs::write(&pb, serde_json::to_string(&tiny(Mode::FixedLora)).unwrap()).unwrap();
        let report = cmd_compare(&pa, &pb, 2, &dir.path().join("out")).unwrap();
        assert_eq!(report.seeds, vec![5, 6]);
        assert_eq!(report.wins_a + report.wins_b + report.ties, 2);
        assert!(dir.path().join("out/compare-report.json").exists());
        assert!(dir.path().join("out/a-seed5/metrics.jsonl").exists());
        assert!(dir.path().join("out/b-seed6/metrics.jsonl").exists());
    }

    #[test]
    fn median_and_iqr_hand_values() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0]), 2.0);
        assert_eq!(iqr(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(iqr(&[2.0]), 0.0);
    }

    #[test]
    fn heterogeneous_fixture_validates_in_both_modes() {
        trainer::validate(&heterogeneous_config(7, Mode::Increlora)).unwrap();
        trainer::validate(&heterogeneous_config(7, Mode::FixedLora)).unwrap();
        // Budget-matched: deployed 30 - 6 == 6 * 4.
        let inc = heterogeneous_config(7, Mode::Increlora);
        let fixed = heterogeneous_config(7, Mode::FixedLora);
        assert_eq!(
            inc.r_final.unwrap() - inc.task.num_modules() as u64,
            u64::from(fixed.fixed_rank.unwrap()) * fixed.task.num_modules() as u64
        );
    }
}
