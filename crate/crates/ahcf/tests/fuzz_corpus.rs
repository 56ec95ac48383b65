//! Replays the fuzz seed corpora with the same checks as the fuzz targets.

use std::path::PathBuf;

use ahcf::harness::{checkpoint, config};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let b = std::fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (p, b) in seeds("config") {
        let cfg = config::parse_config(std::str::from_utf8(&b).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(config::parse_config(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn override_seeds_resolve() {
    for (p, b) in seeds("overrides") {
        let pairs = config::parse_overrides(std::str::from_utf8(&b).unwrap()).unwrap();
        config::resolve("", &pairs).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn checkpoint_seeds_decode_or_fail_cleanly() {
    let mut decoded = 0;
    for (_, b) in seeds("checkpoint") {
        if let Ok(traj) = checkpoint::decode(&b) {
            decoded += 1;
            let again = checkpoint::encode(&traj).unwrap();
            assert!(checkpoint::decode(&again).unwrap() == traj);
        }
    }
    assert!(decoded >= 1);
}
