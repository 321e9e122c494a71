//! On-disk artifact formats: config files, the binary checkpoint, and the
//! JSONL/CSV reports a run writes.
//!
//! Everything here is byte-reproducible from (config, seed). The only
//! timestamps live in the run-info sidecar, which nothing re-reads.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::adapter::Component;
use crate::allocator::{AllocEvent, Phase};
use crate::numkernel::DenseMatrix;
use crate::trainer::{lambda_histogram, MetricsRecord, Mode, TrainConfig, TrainOutcome};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ILRA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ArtifactError {
    ArtifactError::Io { path: path.display().to_string(), source }
}

/// FNV-1a over the serialized resolved config; cheap, stable, and good
/// enough to catch a checkpoint paired with the wrong config.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub fn config_hash(cfg: &TrainConfig) -> u64 {
    fnv1a64(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// Parses a config file, rejecting unknown keys with the parser's own
/// diagnostics so typos point at themselves.
pub fn load_config(path: &Path) -> Result<TrainConfig, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| ArtifactError::Parse { path: path.display().to_string(), detail: e.to_string() })
}

pub fn write_resolved_config(dir: &Path, cfg: &TrainConfig) -> Result<(), ArtifactError> {
    let path = dir.join("resolved-config.json");
    let mut text = serde_json::to_string_pretty(cfg).expect("config serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn load_resolved_config(dir: &Path) -> Result<TrainConfig, ArtifactError> {
    load_config(&dir.join("resolved-config.json"))
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), ArtifactError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<AllocEvent>, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| ArtifactError::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| ArtifactError::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

// ---------------------------------------------------------------- checkpoint

/// Snapshot of the adapters at one step, with enough header to refuse a
/// load against the wrong config.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub phase: Phase,
    /// Per module: active components plus the optional reserve.
    pub modules: Vec<(Vec<Component>, Option<Component>)>,
}

fn push_component(buf: &mut Vec<u8>, c: &Component) {
    buf.extend_from_slice(&c.id.to_le_bytes());
    buf.push(u8::from(c.frozen));
    buf.extend_from_slice(&c.lambda.to_le_bytes());
    buf.extend_from_slice(&(c.a.cols() as u64).to_le_bytes());
    for v in c.a.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(c.b.rows() as u64).to_le_bytes());
    for v in c.b.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.config_hash.to_le_bytes());
    buf.extend_from_slice(&ck.step.to_le_bytes());
    buf.push(match ck.phase {
        Phase::Allocating => 0,
        Phase::Closed => 1,
    });
    buf.extend_from_slice(&(ck.modules.len() as u64).to_le_bytes());
    for (module, (active, reserve)) in ck.modules.iter().enumerate() {
        buf.extend_from_slice(&(module as u64).to_le_bytes());
        buf.extend_from_slice(&(active.len() as u64).to_le_bytes());
        for c in active {
            push_component(&mut buf, c);
        }
        buf.push(u8::from(reserve.is_some()));
        if let Some(c) = reserve {
            push_component(&mut buf, c);
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArtifactError> {
        if self.pos + n > self.buf.len() {
            return Err(ArtifactError::Checkpoint {
                path: self.path.clone(),
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ArtifactError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ArtifactError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ArtifactError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ArtifactError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn fail(&self, detail: String) -> ArtifactError {
        ArtifactError::Checkpoint { path: self.path.clone(), detail }
    }
}

fn read_component(r: &mut Reader) -> Result<Component, ArtifactError> {
    let id = r.u32()?;
    let frozen = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.fail(format!("bad frozen flag {other}"))),
    };
    let lambda = r.f64()?;
    let in_dim = r.u64()? as usize;
    let mut a = Vec::with_capacity(in_dim);
    for _ in 0..in_dim {
        a.push(r.f64()?);
    }
    let out_dim = r.u64()? as usize;
    let mut b = Vec::with_capacity(out_dim);
    for _ in 0..out_dim {
        b.push(r.f64()?);
    }
    Ok(Component {
        id,
        a: DenseMatrix::from_vec(1, in_dim, a),
        b: DenseMatrix::from_vec(out_dim, 1, b),
        lambda,
        frozen,
    })
}

/// Decodes and verifies a checkpoint. `expected_hash` is the hash of the
/// resolved config the caller intends to use it with; a mismatch refuses
/// the load rather than mixing weights with the wrong world.
pub fn parse_checkpoint(
    bytes: &[u8],
    path: &Path,
    expected_hash: u64,
) -> Result<Checkpoint, ArtifactError> {
    let mut r = Reader { buf: bytes, pos: 0, path: path.display().to_string() };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(r.fail(format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported format version {version}")));
    }
    let config_hash = r.u64()?;
    if config_hash != expected_hash {
        return Err(r.fail(format!(
            "config hash mismatch: checkpoint has {config_hash:016x}, resolved config hashes to {expected_hash:016x}"
        )));
    }
    let step = r.u64()?;
    let phase = match r.u8()? {
        0 => Phase::Allocating,
        1 => Phase::Closed,
        other => return Err(r.fail(format!("bad phase byte {other}"))),
    };
    let n = r.u64()? as usize;
    let mut modules = Vec::with_capacity(n);
    for expect in 0..n {
        let module = r.u64()? as usize;
        if module != expect {
            return Err(r.fail(format!("module {expect} recorded as {module}")));
        }
        let n_active = r.u64()? as usize;
        let mut active = Vec::with_capacity(n_active);
        for _ in 0..n_active {
            active.push(read_component(&mut r)?);
        }
        let reserve = match r.u8()? {
            0 => None,
            1 => Some(read_component(&mut r)?),
            other => return Err(r.fail(format!("bad reserve flag {other}"))),
        };
        modules.push((active, reserve));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config_hash, step, phase, modules })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), ArtifactError> {
    fs::write(path, checkpoint_bytes(ck)).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path, expected_hash: u64) -> Result<Checkpoint, ArtifactError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_checkpoint(&bytes, path, expected_hash)
}

// ------------------------------------------------------------------ reports

/// Final rank grid: one row per layer, deployed next to the budget the
/// module consumed (deployed plus its masked reserve).
pub fn rank_report_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("layer,deployed,budget\n");
    for (k, (d, b)) in outcome.deployed_ranks.iter().zip(&outcome.budget_ranks).enumerate() {
        s.push_str(&format!("{k},{d},{b}\n"));
    }
    s
}

/// Per-module live rank at every step where it changed: the start state,
/// each allocation event, the close, and the final step.
pub fn rank_trajectory_csv(cfg: &TrainConfig, outcome: &TrainOutcome) -> String {
    let n = cfg.task.num_modules();
    let mut header = String::from("step,r_total");
    for k in 0..n {
        header.push_str(&format!(",rank_{k}"));
    }
    header.push('\n');
    let mut s = header;

    let mut current: Vec<u64> = match cfg.mode {
        Mode::Increlora => vec![1; n],
        Mode::FixedLora => outcome.deployed_ranks.clone(),
    };
    let emit = |step: u64, ranks: &[u64], s: &mut String| {
        let total: u64 = ranks.iter().sum();
        s.push_str(&step.to_string());
        s.push_str(&format!(",{total}"));
        for r in ranks {
            s.push_str(&format!(",{r}"));
        }
        s.push('\n');
    };
    emit(0, &current, &mut s);
    for m in &outcome.metrics {
        if let Some(event) = outcome.events.iter().find(|e| e.step == m.step) {
            current = event.ranks.clone();
        }
        let live_sum: u64 = current.iter().sum();
        if m.r_total != live_sum {
            // The only other rank change is the close masking one reserve
            // per module in the same step.
            assert_eq!(
                m.r_total + n as u64,
                live_sum,
                "step {}: rank total {} does not match trajectory {}",
                m.step,
                m.r_total,
                live_sum
            );
            for r in &mut current {
                *r -= 1;
            }
        }
        if outcome.events.iter().any(|e| e.step == m.step)
            || m.r_total != live_sum
            || m.step == cfg.total_steps
        {
            emit(m.step, &current, &mut s);
        }
    }
    s
}

pub fn lambda_hist_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("bin,count\n");
    for (label, count) in lambda_histogram(&outcome.final_adapters) {
        s.push_str(&format!("{label},{count}\n"));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ArtifactError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// The one artifact allowed to vary between identical runs: wall-clock
/// context for humans, never re-read by any command.
pub fn write_run_info(dir: &Path, cfg_hash: u64, wall_secs: f64) -> Result<(), ArtifactError> {
    let path = dir.join("run-info.json");
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    writeln!(
        f,
        "{}",
        serde_json::json!({
            "finished_unix": now,
            "wall_seconds": wall_secs,
            "config_hash": format!("{cfg_hash:016x}"),
            "tool_version": env!("CARGO_PKG_VERSION"),
        })
    )
    .map_err(|e| io_err(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{train, TaskKind, TaskSpec};
    use crate::netgraph::Activation;
    use crate::optimsched::AdamHyper;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            mode: Mode::Increlora,
            seed: 11,
            total_steps: 120,
            warmup: 20,
            base_lr: 5e-3,
            batch_size: 4,
            h: Some(1),
            nu: Some(20),
            r_final: Some(4),
            beta1: 0.85,
            beta2: 0.85,
            regu_weight: 0.1,
            init_std: 0.02,
            adapter_scale: 1.0,
            advance_learning: true,
            fixed_rank: None,
            fixed_ranks: None,
            optimizer: AdamHyper::default(),
            task: TaskSpec {
                kind: TaskKind::PlantedRegression,
                layer_dims: vec![4, 3],
                activation: Activation::Tanh,
                planted_ranks: vec![1],
                planted_magnitude: 0.4,
                noise_std: 0.01,
                w0_std: None,
                with_bias: false,
                eval_batches: 1,
            },
        }
    }

    #[test]
    fn fnv1a64_known_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn config_hash_tracks_content() {
        let cfg = tiny_config();
        let mut other = cfg.clone();
        assert_eq!(config_hash(&cfg), config_hash(&other));
        other.seed = 12;
        assert_ne!(config_hash(&cfg), config_hash(&other));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        let ck = Checkpoint {
            config_hash: config_hash(&cfg),
            step: cfg.total_steps,
            phase: out.final_phase,
            modules: out
                .final_adapters
                .iter()
                .map(|a| (a.active().to_vec(), a.reserve().cloned()))
                .collect(),
        };
        let bytes = checkpoint_bytes(&ck);
        let parsed = parse_checkpoint(&bytes, Path::new("mem"), ck.config_hash).unwrap();
        assert_eq!(parsed, ck);
        assert_eq!(checkpoint_bytes(&parsed), bytes, "save(load(x)) == x");
    }

    #[test]
    fn checkpoint_refuses_corruption() {
        let ck = Checkpoint { config_hash: 7, step: 3, phase: Phase::Allocating, modules: vec![] };
        let good = checkpoint_bytes(&ck);

        let msg = parse_checkpoint(&good, Path::new("m"), 8).unwrap_err().to_string();
        assert!(msg.contains("config hash mismatch"), "{msg}");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let msg = parse_checkpoint(&bad_magic, Path::new("m"), 7).unwrap_err().to_string();
        assert!(msg.contains("bad magic"), "{msg}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let msg = parse_checkpoint(&bad_version, Path::new("m"), 7).unwrap_err().to_string();
        assert!(msg.contains("version"), "{msg}");

        let msg = parse_checkpoint(&good[..good.len() - 1], Path::new("m"), 7)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("truncated"), "{msg}");

        let mut trailing = good.clone();
        trailing.push(0);
        let msg = parse_checkpoint(&trailing, Path::new("m"), 7).unwrap_err().to_string();
        assert!(msg.contains("trailing"), "{msg}");
    }

    #[test]
    fn rank_reports_are_consistent() {
        let cfg = tiny_config(); // n=1, 3 events at 20/40/60, close at 60
        let out = train(&cfg).unwrap();
        let report = rank_report_csv(&out);
        assert_eq!(report, "layer,deployed,budget\n0,3,4\n");

        let traj = rank_trajectory_csv(&cfg, &out);
        let mut lines = traj.lines();
        assert_eq!(lines.next(), Some("step,r_total,rank_0"));
        assert_eq!(lines.next(), Some("0,1,1"));
        assert_eq!(lines.next(), Some("20,2,2"));
        assert_eq!(lines.next(), Some("40,3,3"));
        // Close masks the reserve in the same step as the last event.
        assert_eq!(lines.next(), Some("60,3,3"));
        assert_eq!(lines.next(), Some("120,3,3"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("metrics.jsonl");
        write_jsonl(&mpath, &out.metrics).unwrap();
        let back = read_metrics(&mpath).unwrap();
        assert_eq!(back, out.metrics);
        let epath = dir.path().join("events.jsonl");
        write_jsonl(&epath, &out.events).unwrap();
        let back = read_events(&epath).unwrap();
        assert_eq!(
            serde_json::to_string(&back).unwrap(),
            serde_json::to_string(&out.events).unwrap()
        );
    }

    #[test]
    fn unknown_config_keys_are_rejected_with_the_key_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut doc: serde_json::Value =
            serde_json::to_value(tiny_config()).unwrap();
        doc["warmup_steps"] = serde_json::json!(10);
        fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        let msg = load_config(&path).unwrap_err().to_string();
        assert!(msg.contains("warmup_steps"), "{msg}");
    }
}
