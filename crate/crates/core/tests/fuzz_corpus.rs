//! Replays the checked-in fuzz corpus through the parser entry points.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use unmask::decode::Trajectory;
use unmask::io::{backbone_from_checkpoint, planner_from_checkpoint, Checkpoint, RunConfig};
use unmask::planner::{decode_hidden_blob, encode_hidden_blob, parse_dataset_jsonl};
use unmask::tasks;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds() {
    let mut parsed = 0;
    for (_, data) in corpus("checkpoint") {
        if let Ok(ck) = Checkpoint::from_bytes(&data) {
            assert!(backbone_from_checkpoint(&ck).is_ok() || planner_from_checkpoint(&ck).is_ok());
            assert_eq!(ck.to_bytes().unwrap(), data);
            parsed += 1;
        }
    }
    assert!(parsed > 0);
}

#[test]
fn config_seeds() {
    let mut parsed = 0;
    for (p, data) in corpus("config") {
        if let Ok(cfg) = RunConfig::from_toml_str(std::str::from_utf8(&data).unwrap()) {
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg, "{}", p.display());
            parsed += 1;
        }
    }
    assert!(parsed > 0);
}

#[test]
fn trajectory_seeds() {
    let mut parsed = 0;
    for (_, data) in corpus("trajectory") {
        if let Ok(t) = Trajectory::read_jsonl(data.as_slice()) {
            assert_eq!(t.to_jsonl().as_bytes(), data.as_slice());
            parsed += 1;
        }
    }
    assert!(parsed > 0);
}

#[test]
fn hidden_blob_seeds() {
    let mut parsed = 0;
    for (_, data) in corpus("hidden_blob") {
        if let Ok(h) = decode_hidden_blob(&data) {
            assert_eq!(encode_hidden_blob(&h), data);
            parsed += 1;
        }
    }
    assert!(parsed > 0);
}

#[test]
fn dataset_seeds() {
    let mut parsed = 0;
    for (_, data) in corpus("dataset") {
        let (len, rest) = data.split_first_chunk::<4>().unwrap();
        let len = (u32::from_le_bytes(*len) as usize).min(rest.len());
        let (blob, records) = rest.split_at(len);
        let hidden = decode_hidden_blob(blob).unwrap_or_else(|_| Array2::zeros((64, 16)));
        if let Ok(ds) = parse_dataset_jsonl(records, hidden) {
            assert!(ds.relabel_mismatches().is_empty());
            parsed += 1;
        }
    }
    assert!(parsed > 0);
}

#[test]
fn task_seeds() {
    let mut parsed = 0;
    for (_, data) in corpus("tasks") {
        if let Ok(v) = tasks::from_jsonl(data.as_slice()) {
            for inst in &v {
                assert_eq!(inst.reward(&inst.gold), 1.0);
            }
            parsed += 1;
        }
    }
    assert!(parsed > 0);
}

#[test]
fn verifier_seeds() {
    for (_, data) in corpus("verifier") {
        let (&k, rest) = data.split_first().unwrap();
        let (seed, toks) = rest.split_first_chunk::<8>().unwrap();
        let kind = tasks::TaskKind::ALL[k as usize % tasks::TaskKind::ALL.len()];
        let d = tasks::Difficulty::default_for(kind);
        let inst = &tasks::generate(kind, &d, &mut unmask::rng::from_seed(u64::from_le_bytes(*seed)), 1).unwrap()[0];
        assert_eq!(inst.reward(&inst.gold), 1.0);
        let generated: Vec<usize> = toks.iter().map(|&b| b as usize).collect();
        assert!((0.0..=1.0).contains(&inst.reward(&generated)));
    }
}
