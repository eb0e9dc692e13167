use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qmet_core::experiment::{EncoderConfig, ExperimentConfig, ExperimentKind};
use qmet_core::heads::{HeadFamily, HeadSpec};
use qmet_core::trainer::TrainConfig;

fn qmet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmet")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.display().to_string()
}

fn tiny_audit(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(ExperimentKind::Audit);
    c.out = out.to_path_buf();
    c.seeds = vec![0, 1];
    c.audit.families = vec![HeadFamily::IqeSum, HeadFamily::PqeLh, HeadFamily::DeepNormOrig];
    c.audit.pairs = 200;
    c.audit.triples = 500;
    c
}

#[test]
fn print_defaults_round_trips() {
    for (cmd, kind) in [
        ("train", ExperimentKind::Graph),
        ("audit", ExperimentKind::Audit),
        ("rl", ExperimentKind::Gridworld),
        ("ablate-kl", ExperimentKind::AblateKl),
        ("profile", ExperimentKind::Profile),
    ] {
        let o = qmet(&[cmd, "--print-defaults"]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        let parsed = ExperimentConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
        assert_eq!(parsed, ExperimentConfig::defaults(kind), "{cmd}");
    }
}

#[test]
fn empty_seed_list_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, "kind = \"graph\"\nseeds = []\n").unwrap();
    let o = qmet(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seeds"), "{}", stderr(&o));
}

#[test]
fn unknown_field_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, "kind = \"graph\"\n[graph]\nnodez = 3\n").unwrap();
    let o = qmet(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("graph.nodez"), "{}", stderr(&o));
}

#[test]
fn mismatched_kind_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_audit(dir.path()));
    let o = qmet(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_with_config_code() {
    let o = qmet(&["audit", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn audit_writes_capability_table_and_aggregate_rebuilds_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = write_config(dir.path(), &tiny_audit(&out));
    let o = qmet(&["audit", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cap = fs::read_to_string(out.join("capability.csv")).unwrap();
    let lines: Vec<&str> = cap.lines().collect();
    assert_eq!(lines.len(), 1 + 3, "{cap}");
    for fam in ["iqe-sum", "pqe-lh", "deep-norm-orig"] {
        assert!(lines.iter().any(|l| l.contains(fam)), "{fam} missing from {cap}");
    }

    let before = fs::read(out.join("aggregate.csv")).unwrap();
    fs::remove_file(out.join("aggregate.csv")).unwrap();
    fs::remove_file(out.join("capability.csv")).unwrap();
    let o = qmet(&["aggregate", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("aggregate.csv")).unwrap(), before);
    assert_eq!(fs::read_to_string(out.join("capability.csv")).unwrap(), cap);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = write_config(dir.path(), &tiny_audit(&out));
    let o = qmet(&["audit", "--config", &cfg, "--seed", "7", "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    let runs: Vec<&str> = agg.lines().skip(1).map(|l| l.split(',').nth(5).unwrap()).collect();
    assert!(runs.iter().all(|&r| r == "1"), "{agg}");
}

#[test]
fn train_runs_a_tiny_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let mut c = ExperimentConfig::defaults(ExperimentKind::Graph);
    c.out = out.clone();
    c.seeds = vec![0];
    c.graph.nodes = 12;
    c.graph.feature_dim = 8;
    c.graph.train_fraction = 0.5;
    c.encoder = Some(EncoderConfig { hidden: vec![16], batch_norm: false });
    c.heads = vec![HeadSpec::new(HeadFamily::IqeSum, 4, 2)];
    c.train = TrainConfig { epochs: 3, batch_size: 32, eval_every: 3, ..TrainConfig::default() };
    let cfg = write_config(dir.path(), &c);
    let o = qmet(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mse_milli"));
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 2, "{agg}");
}

#[test]
fn gen_graph_writes_graph_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::defaults(ExperimentKind::Graph);
    c.out = dir.path().join("graphs");
    c.seeds = vec![3];
    c.graph.nodes = 20;
    c.graph.feature_dim = 4;
    let cfg = write_config(dir.path(), &c);
    let o = qmet(&["gen-graph", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = c.out.join("dense-n20-s3");
    for f in ["graph.qgr", "train.csv", "val.csv"] {
        assert!(g.join(f).is_file(), "{f}");
    }
}
