//! End-to-end runs of the `tslab` binary on the tiny config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use proptest::prelude::*;
use tslab_cli::io::{backbone_hash, decode_checkpoint, encode_checkpoint, read_checkpoint, CsvTable};
use tslab_cli::report::{parse_decimal, Exact};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tiny() -> PathBuf {
    root().join("configs/tiny.toml")
}

fn tslab(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tslab"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("TSLAB_OUTPUT_ROOT", out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> PathBuf {
    let o = tslab(out, &tiny(), args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// datagen, pretrain and two finetunes under one root.
fn training_runs(out: &Path) {
    let data = ok(out, &["datagen"]);
    let pre = ok(out, &["pretrain", "--data", s(&data)]);
    let ckpt = pre.join("model.ckpt");
    ok(out, &["finetune", "--name", "ft_full", "--data", s(&data), "--init", s(&ckpt)]);
    ok(out, &["finetune", "--name", "ft_io", "--regime", "io-only", "--data", s(&data), "--init", s(&ckpt)]);
}

struct Shared {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        training_runs(&root);
        Shared { _dir: dir, root }
    })
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

// ----------------------------------------------------------------------------

#[test]
fn checkpoint_round_trips_bit_exact() {
    let path = shared().root.join("ft_full/model.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let ck = decode_checkpoint(&bytes, &path).unwrap();
    assert_eq!(encode_checkpoint(&ck.model, &ck.config), bytes);
}

#[test]
fn io_only_keeps_the_backbone() {
    let r = &shared().root;
    let pre = read_checkpoint(&r.join("pretrain/model.ckpt")).unwrap().model;
    let io = read_checkpoint(&r.join("ft_io/model.ckpt")).unwrap().model;
    let full = read_checkpoint(&r.join("ft_full/model.ckpt")).unwrap().model;
    assert_eq!(backbone_hash(&io), backbone_hash(&pre));
    assert_ne!(backbone_hash(&full), backbone_hash(&pre));
    assert_ne!(io, pre, "head and embedding should have moved");
}

#[test]
fn every_csv_has_a_schema_line() {
    for p in files(&shared().root) {
        if p.extension().is_some_and(|e| e == "csv") {
            let t = CsvTable::read(&p).unwrap();
            assert!(!t.schema.is_empty() && !t.header.is_empty(), "{}", p.display());
        }
    }
}

#[test]
fn artifacts_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    training_runs(dir.path());
    let a = files(&shared().root);
    let b = files(dir.path());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.strip_prefix(&shared().root).unwrap(), y.strip_prefix(dir.path()).unwrap());
        assert!(std::fs::read(x).unwrap() == std::fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(tiny()).unwrap().replace("[model]\n", "[model]\nwidth = 3\n");
    std::fs::write(&cfg, text).unwrap();
    let o = tslab(dir.path(), &cfg, &["datagen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tslab")).arg("datagen").env("TSLAB_OUTPUT_ROOT", dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = tslab(dir.path(), &tiny(), &["pretrain", "--data", s(&dir.path().join("nowhere"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn wrong_checkpoint_version_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let r = &shared().root;
    let mut bytes = std::fs::read(r.join("pretrain/model.ckpt")).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = tslab(dir.path(), &tiny(), &["evaluate", "--data", s(&r.join("datagen")), "--checkpoint", s(&bad)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 99"));
}

#[test]
fn pipeline_script_emits_alignment_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new("bash")
        .arg(root().join("scripts/pipeline.sh"))
        .arg(tiny())
        .arg(dir.path())
        .current_dir(root())
        .env("TSLAB_BIN", env!("CARGO_BIN_EXE_tslab"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    let t = CsvTable::read(&path).unwrap();
    assert_eq!(t.schema, "alignment/v1");
    let run = t.column("run").unwrap();
    for name in ["finetune_pretrained", "finetune_random"] {
        assert!(t.rows.iter().any(|r| r[run] == name), "{name}");
    }
    assert!(dir.path().join("report/alignment.svg").exists());
}

proptest! {
    #[test]
    fn decimal_parse_matches_integer_scaling(units in -10_i64.pow(12)..10_i64.pow(12), places in 0u32..6) {
        let scale = 10_i64.pow(places);
        let sign = if units < 0 { "-" } else { "" };
        let a = units.unsigned_abs();
        let text = if places == 0 {
            format!("{sign}{a}")
        } else {
            format!("{sign}{}.{:0w$}", a / scale as u64, a % scale as u64, w = places as usize)
        };
        prop_assert_eq!(parse_decimal(&text).unwrap(), Exact::new(units, scale));
    }
}
