use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedcl::config::RunConfig;
use fedcl::data::{generate_dataset, read_dump};

fn fedcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcl"))
        .args(args)
        .output()
        .expect("spawn fedcl")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A run small enough to pre-train in a second or two.
fn tiny(out: &Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_string_lossy().into_owned(),
        num_clients: 2,
        volumes_per_client: 5,
        rounds: 2,
        local_steps: 3,
        label_budgets: vec![1],
        probe_epochs: 20,
        folds: 2,
        eval_seeds: 1,
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_canonical()).unwrap();
    path
}

#[test]
fn shipped_configs_load() {
    let default = RunConfig::load(&configs_dir().join("default.toml")).unwrap();
    assert_eq!(default, RunConfig::default());
    let ten = RunConfig::load(&configs_dir().join("ten_clients.toml")).unwrap();
    assert_eq!(ten.num_clients, 10);
    assert_eq!(
        RunConfig {
            num_clients: 4,
            out_dir: default.out_dir.clone(),
            ..ten
        },
        default
    );
}

#[test]
fn generate_writes_dumps_matching_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let config = write_config(dir.path(), &cfg);
    let o = fedcl(&["--config", config.to_str().unwrap(), "generate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("within-partition"));

    let shards = generate_dataset(&cfg.experiment().unwrap().data_config()).unwrap();
    for shard in &shards {
        let path = dir
            .path()
            .join(format!("data/client_{}.fcld", shard.client_id()));
        let dump = read_dump(&mut fs::File::open(path).unwrap()).unwrap();
        assert_eq!(dump.client_id, shard.client_id());
        assert_eq!(dump.volumes, cfg.volumes_per_client);
        let first = shard.volumes()[0].slices()[0].iter().map(|&x| x as f32);
        assert!(first.eq(dump.pixels[..dump.pixels_per_slice].iter().copied()));
    }

    let manifest = fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains(&cfg.hash()));
    assert_eq!(RunConfig::parse(&manifest).unwrap(), cfg);
    let again = fedcl(&["--config", config.to_str().unwrap(), "generate"]);
    assert!(again.status.success());
    assert_eq!(
        fs::read_to_string(dir.path().join("manifest.toml")).unwrap(),
        manifest
    );
}

#[test]
fn missing_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny(dir.path())
        .to_canonical()
        .lines()
        .filter(|l| !l.starts_with("bank_capacity"))
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.path().join("partial.toml");
    fs::write(&path, text).unwrap();
    let o = fedcl(&["--config", path.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bank_capacity"), "{}", stderr(&o));
}

#[test]
fn zero_threads_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedcl(&[
        "--out",
        dir.path().to_str().unwrap(),
        "--threads",
        "0",
        "generate",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.fclp");
    fs::write(&ckpt, b"NOPE\x01\x00\x00\x00").unwrap();
    let config = write_config(dir.path(), &tiny(dir.path()));
    let o = fedcl(&[
        "--config",
        config.to_str().unwrap(),
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pretrain_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let config = write_config(dir.path(), &cfg);
    let config = config.to_str().unwrap();
    let o = fedcl(&["--config", config, "pretrain"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.fclp", "rounds.csv", "eval.csv", "manifest.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + cfg.rounds * cfg.num_clients);

    let report = fedcl(&["--config", config, "report"]);
    assert!(report.status.success(), "{}", stderr(&report));
    assert!(stdout(&report).contains("fe_gsm"));

    let ckpt = dir.path().join("checkpoint.fclp");
    let ckpt = ckpt.to_str().unwrap();
    let eval = fedcl(&["--config", config, "evaluate", "--checkpoint", ckpt]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert!(stdout(&eval).contains("checkpoint"));

    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    let wider = write_config(
        &other,
        &RunConfig {
            hidden_dim: cfg.hidden_dim + 1,
            ..cfg.clone()
        },
    );
    let o = fedcl(&[
        "--config",
        wider.to_str().unwrap(),
        "evaluate",
        "--checkpoint",
        ckpt,
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_without_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedcl(&["--out", dir.path().to_str().unwrap(), "report"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eval.csv"), "{}", stderr(&o));
}
