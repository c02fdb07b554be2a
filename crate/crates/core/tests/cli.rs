use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use hyperaug::augment::OpKind;
use hyperaug::cli::config::{from_table, load_config, set_override, DataSource, RunConfig};
use hyperaug::cli::metrics::{read_csv, read_json, read_metrics, EvolutionRow, MetricsWriter, PolicyFile, SweepRow};
use hyperaug::cli::{dedup_values, export_policy};
use hyperaug::models::load_checkpoint;
use hyperaug::Error;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hyperaug"));
    cmd.env_remove("RA_SEED");
    cmd
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SYNTH: &str = r#"
seed = 3
precision = "f64"

[data]
source = "synth"
synth_train = 200
synth_test = 60
validation_fraction = 0.2

[train]
epochs = 3
warmup_epochs = 1
batch_size = 32
inner_steps = 2
inner_lr = 0.02
baseline_augment = false
record_wall_time = false
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .args(["train", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn missing_config_exits_with_two() {
    let o = bin().args(["train", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot read"));
}

#[test]
fn unknown_or_mistyped_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochz = 3\n");
    let o = train(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "[train]\nepochs = \"many\"\n");
    let o = train(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));

    let o = train(&cfg, dir.path(), &["--set", "novalue"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_rejects_bad_hypergradient_settings() {
    for (set, key) in [("hypergrad.alpha=-0.1", "hypergrad.alpha"), ("hypergrad.neumann_terms=0", "hypergrad.neumann_terms")] {
        let o = bin().args(["verify", "--set", set]).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{set}");
        assert!(stderr(&o).contains(key));
    }
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let o = bin().arg("verify").output().unwrap();
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(!out.contains("FAIL"));
    assert!(out.contains("7 of 7 checks passed"));
}

#[test]
fn overrides_env_seed_and_precedence() {
    let mut table = toml::Table::new();
    set_override(&mut table, "train.epochs", "7").unwrap();
    set_override(&mut table, "method", "fixed-policy").unwrap();
    set_override(&mut table, "output_dir", "runs/x").unwrap();
    let cfg = from_table(table).unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.output_dir, PathBuf::from("runs/x"));

    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SYNTH);
    assert_eq!(load_config(Some(&path), &[], None).unwrap().seed, 3);
    assert_eq!(load_config(Some(&path), &[], Some("11")).unwrap().seed, 11);
    let ov = [("seed".to_string(), "12".to_string())];
    assert_eq!(load_config(Some(&path), &ov, Some("11")).unwrap().seed, 12);
    assert!(matches!(load_config(Some(&path), &[], Some("-4")), Err(Error::Config { key, .. }) if key == "RA_SEED"));

    let mut bad = toml::Table::new();
    set_override(&mut bad, "seed", "1").unwrap();
    assert!(set_override(&mut bad, "seed.inner", "1").is_err());
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml().unwrap();
    let back = from_table(toml::from_str(&text).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(cfg.data.source, DataSource::Synth);
}

#[test]
fn train_writes_all_artefacts_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    let o = train(&cfg, &a, &[]);
    assert!(start.elapsed().as_secs() < 60);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.toml", "metrics.jsonl", "policy.json", "checkpoint.bin", "checkpoint.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let records = read_metrics(&a.join("metrics.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2, 3]);

    let policy: PolicyFile = read_json(&a.join("policy.json")).unwrap();
    assert_eq!(policy.effective, records[3].policy_snapshot.clone());

    let (spec, params) = load_checkpoint(&a.join("checkpoint.bin")).unwrap();
    assert_eq!(spec.input, [1, 16, 16]);
    assert_eq!(params.total_dim(), spec.num_params());

    let o = train(&cfg, &b, &[]);
    assert_eq!(o.status.code(), Some(0));
    let read = |d: &Path| std::fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));

    let o = bin().env("RA_SEED", "9").args(["train", "--config"]).arg(&cfg).arg("--out").arg(&b).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(read(&a), read(&b));
    assert!(std::fs::read_to_string(b.join("config.toml")).unwrap().contains("seed = 9"));
}

#[test]
fn export_policy_rows_match_snapshots_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH);
    let run = dir.path().join("run");
    assert_eq!(train(&cfg, &run, &[]).status.code(), Some(0));
    let o = bin().arg("export-policy").arg(&run).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<EvolutionRow> = read_csv(&run.join("policy_evolution.csv")).unwrap();
    let records = read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(rows.len(), records.len() * 2 * 14);
    for row in &rows {
        let snap = &records[row.epoch].policy_snapshot.stages[row.stage];
        let kind: OpKind = row.op.parse().unwrap();
        assert_eq!(row.pi.to_bits(), snap.pi[kind.index()].to_bits());
        assert_eq!(row.p.to_bits(), snap.p[kind.index()].to_bits());
        assert_eq!(row.mu.map(f64::to_bits), snap.mu_of(kind).map(f64::to_bits));
    }
    // Epochs 0 and 1 are before any policy update.
    let at = |e: usize| rows.iter().filter(|r| r.epoch == e).cloned().map(|r| (r.stage, r.op, r.pi, r.p, r.mu)).collect::<Vec<_>>();
    assert_eq!(at(0), at(1));
    assert_ne!(at(1), at(3));

    let o = bin().arg("export-policy").arg(dir.path().join("nothing")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(matches!(export_policy(&dir.path().join("nothing"), None), Err(f) if f.exit_code() == 2));
}

#[test]
fn sweep_over_inner_steps() {
    let dir = tempfile::tempdir().unwrap();
    let text = SYNTH.replace("synth_train = 200", "synth_train = 1200").replace("epochs = 3", "epochs = 2");
    let cfg = write_config(dir.path(), &text);
    let run_sweep = |method: &str, out: &Path| {
        let o = bin()
            .args(["sweep", "--config"])
            .arg(&cfg)
            .args(["--param", "train.inner_steps", "--values", "1,5,30,5", "--seeds", "0,1,2"])
            .args(["--set", &format!("hypergrad.method={method}"), "--out"])
            .arg(out)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        read_csv::<SweepRow>(&out.join("sweep.csv")).unwrap()
    };
    let neumann = run_sweep("neumann_implicit", &dir.path().join("neumann"));
    assert_eq!(neumann.len(), 9);
    let values: Vec<&str> = neumann.iter().map(|r| r.param_value.as_str()).collect();
    assert_eq!(values, ["1", "1", "1", "5", "5", "5", "30", "30", "30"]);
    assert!(neumann.iter().all(|r| r.final_test_error.is_some_and(|e| (0.0..=1.0).contains(&e))));
    let proxy = |rows: &[SweepRow], v: &str| rows.iter().find(|r| r.param_value == v).unwrap().peak_memory_proxy.unwrap();
    assert_eq!(proxy(&neumann, "1"), proxy(&neumann, "30"));

    let unrolled = run_sweep("unrolled", &dir.path().join("unrolled"));
    assert!(proxy(&unrolled, "1") < proxy(&unrolled, "5"));
    assert!(proxy(&unrolled, "5") < proxy(&unrolled, "30"));
}

#[test]
fn sweep_rejects_bad_values_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH);
    let o = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--param", "train.inner_steps", "--values", "3,0", "--out"])
        .arg(dir.path().join("s"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("s").exists());
    assert_eq!(dedup_values(&["1".into(), " 5".into(), "1".into(), "".into()]), vec!["1", "5"]);
}

#[test]
fn metrics_file_stays_valid_when_a_run_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let data = hyperaug::data::synth_dataset(60, 2, 0).unwrap();
    let (train, val) = hyperaug::data::split(&data, &Default::default()).unwrap();
    let td = hyperaug::trainloop::TrainData {
        train,
        val,
        test: data.truncate(10),
        kind: hyperaug::data::DatasetKind::Digits,
    };
    let cfg = hyperaug::trainloop::TrainConfig {
        epochs: 3,
        batch_size: 16,
        record_wall_time: false,
        ..Default::default()
    };
    let mut writer = MetricsWriter::create(&path).unwrap();
    let res = hyperaug::trainloop::run(&cfg, &hyperaug::models::ModelSpec::smallcnn([1, 16, 16], 2), &td, |r| {
        writer.write(r)?;
        if r.epoch == 1 {
            return Err(Error::InvalidInput("interrupted".into()));
        }
        Ok(())
    });
    assert!(res.is_err());
    let records = read_metrics(&path).unwrap();
    assert_eq!(records.len(), 2);
    assert!(writer.write(&records[0]).is_err(), "epochs must increase");
}
