use std::fs;
use std::path::Path;
use std::process::Command;

use fedgp::config::{load_config, parse_config, ExperimentConfig, InitLengthscales, InitSpec, LengthscaleKeyword};
use fedgp::experiment::{
    build_scenario, execute, federation_config, load_csv_dataset, run_experiment, run_separate_baseline, Baseline,
    FAILED_MARKER, SUMMARY_FILE, TRACE_FILE,
};
use fedgp::federation::{run_federation, ClientState, Participation, ScheduleSpec};
use fedgp::{FedGpError, GradScaling};
use tempfile::TempDir;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn small(scenario: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_scenario(scenario);
    c.federation.rounds = 4;
    c.federation.local_steps = 2;
    c
}

fn fedgp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedgp"))
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

fn header(path: &Path) -> Vec<String> {
    csv::Reader::from_path(path).unwrap().headers().unwrap().iter().map(str::to_string).collect()
}

#[test]
fn minimal_config_gets_documented_defaults() {
    let c = parse_config("scenario = \"gp-homogeneous\"\n").unwrap();
    assert_eq!(c.repeats, 1);
    assert_eq!(c.seed, 0);
    assert_eq!(c.test_fraction, 0.2);
    assert_eq!(c.federation.rounds, 200);
    assert_eq!(c.federation.local_steps, 5);
    assert_eq!(c.federation.batch_size, 64);
    assert_eq!(c.federation.participation, Participation::Synchronous);
    assert_eq!(c.federation.lr_schedule, ScheduleSpec::InverseTime { beta1: 0.05 });
    assert_eq!(c.federation.scaling, GradScaling::disabled());
    assert_eq!(c.federation.clip_norm, None);
    assert_eq!(c.metrics.every, 1);
    c.resolve().unwrap();
}

#[test]
fn unknown_keys_are_rejected_with_a_suggestion() {
    let err = parse_config("scenario = \"currin\"\nlearningrate = 0.1\n").unwrap_err();
    assert!(err.contains("\"federation.lr_schedule\""), "{err}");
    assert!(err.contains("line 2"), "{err}");
    let err = parse_config("scenario = \"currin\"\n[federation]\nlearningrate = 0.1\n").unwrap_err();
    assert!(err.contains("\"lr_schedule\""), "{err}");
    let err = parse_config("scenario = \"currin\"\n[federation]\nround = 3\n").unwrap_err();
    assert!(err.contains("\"rounds\""), "{err}");
    let err = parse_config("scenario = \"currin\"\n[federation]\nrounds = \"many\"\n").unwrap_err();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn validation_names_the_field() {
    let dir = TempDir::new().unwrap();
    let p = write(
        dir.path(),
        "a.toml",
        "scenario = \"gp-homogeneous\"\n[federation.participation]\nmode = \"asynchronous\"\nsample_clients = 20\n",
    );
    let err = load_config(&p).unwrap_err().to_string();
    assert!(err.contains("sample_clients"), "{err}");
    let p = write(dir.path(), "b.toml", "scenario = \"gp-homogeneous\"\n[federation.participation]\nmode = \"asynchronous\"\nsample_clients = 10\n");
    load_config(&p).unwrap();

    let p = write(dir.path(), "c.toml", "scenario = \"currinn\"\n");
    let err = load_config(&p).unwrap_err().to_string();
    assert!(err.contains("currin"), "{err}");
    let p = write(dir.path(), "d.toml", "datasets = [\"missing.csv\"]\n");
    assert!(load_config(&p).is_err());
    let p = write(dir.path(), "e.toml", "scenario = \"currin\"\nrepeats = 0\n");
    assert!(load_config(&p).unwrap_err().to_string().contains("repeats"));
}

#[test]
fn config_round_trips_through_its_file_form() {
    let dir = TempDir::new().unwrap();
    let mut c = ExperimentConfig::for_scenario("gp-imbalanced").resolve().unwrap();
    c.repeats = 3;
    c.seed = 17;
    c.federation.participation = Participation::Asynchronous { sample_clients: 5 };
    c.federation.scaling = GradScaling::with_tau(10.0);
    c.federation.clip_norm = Some(2.5);
    c.federation.freeze_lengthscales = true;
    c.init = Some(InitSpec {
        theta1: Some(1.5),
        theta2: None,
        lengthscales: Some(InitLengthscales::Keyword(LengthscaleKeyword::Truth)),
    });
    c.options.clients = Some(12);
    let p = dir.path().join("round.toml");
    c.write(&p).unwrap();
    assert_eq!(load_config(&p).unwrap(), c);

    let mut c = ExperimentConfig::for_scenario("bad-init");
    c.init = Some(InitSpec { theta1: None, theta2: Some(0.5), lengthscales: Some(InitLengthscales::Values(vec![0.3])) });
    c.federation.lr_schedule = ScheduleSpec::Constant { eta: 0.01 };
    c.write(&p).unwrap();
    assert_eq!(load_config(&p).unwrap(), c);
}

#[test]
fn csv_loader_examples() {
    let dir = TempDir::new().unwrap();
    let d = load_csv_dataset(&write(dir.path(), "one.csv", "x1,y\n0.5,1.0\n")).unwrap();
    assert_eq!((d.len(), d.dim()), (1, 1));
    assert_eq!(d.outputs()[0], 1.0);

    let d = load_csv_dataset(&write(dir.path(), "three.csv", "x1,x2,y\n1,2,3\n4,5,6\n7,8,9\n")).unwrap();
    assert_eq!((d.len(), d.dim()), (3, 2));
    assert_eq!(d.inputs()[[1, 1]], 5.0);
    assert_eq!(d.outputs().to_vec(), vec![3.0, 6.0, 9.0]);

    let err = load_csv_dataset(&write(dir.path(), "nohdr.csv", "x1,x2\n1,2\n")).unwrap_err();
    assert!(matches!(err, FedGpError::Csv { line: 1, .. }), "{err}");

    let err = load_csv_dataset(&write(dir.path(), "bad.csv", "x1,y\n1,2\n3,abc\n")).unwrap_err();
    assert!(matches!(err, FedGpError::Csv { line: 3, column: 2, .. }), "{err}");

    let err = load_csv_dataset(&write(dir.path(), "ragged.csv", "x1,y\n1,2\n3\n")).unwrap_err();
    assert!(matches!(err, FedGpError::Csv { line: 3, .. }), "{err}");

    for cell in ["NaN", "inf", "-inf"] {
        let text = format!("x1,y\n1,{cell}\n");
        assert!(load_csv_dataset(&write(dir.path(), "nan.csv", &text)).is_err(), "{cell}");
    }
    assert!(load_csv_dataset(&write(dir.path(), "empty.csv", "x1,y\n")).is_err());
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let dir = TempDir::new().unwrap();
    let mut c = small("currin");
    c.repeats = 2;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&c, &a).unwrap();
    run_experiment(&c, &b).unwrap();
    for f in [TRACE_FILE, SUMMARY_FILE, "config.echo"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn repeat_r_uses_master_seed_plus_r() {
    let mut c = small("gp-heterogeneous");
    c.options.clients = Some(3);
    c.options.points_per_client = Some(10);
    c.seed = 5;
    c.repeats = 2;
    let both = execute(&c, None).unwrap();
    c.seed = 6;
    c.repeats = 1;
    let single = execute(&c, None).unwrap();
    let second: Vec<_> = both.run(Baseline::Fgpr, 1).into_iter().map(|r| (r.round, r.params.clone())).collect();
    let first: Vec<_> = single.run(Baseline::Fgpr, 0).into_iter().map(|r| (r.round, r.params.clone())).collect();
    assert_eq!(second, first);
}

#[test]
fn currin_summary_has_both_baselines() {
    let dir = TempDir::new().unwrap();
    let mut c = small("currin");
    c.repeats = 2;
    let out = run_experiment(&c, dir.path()).unwrap();
    let rows = csv_rows(&dir.path().join(SUMMARY_FILE));
    let labels: Vec<(&str, &str)> = rows.iter().map(|r| (&r[0], &r[1])).collect();
    for b in ["FGPR", "Separate"] {
        for rep in ["0", "1", "mean", "std"] {
            assert!(labels.contains(&(b, rep)), "missing {b}/{rep}");
        }
    }
    let trace = csv_rows(&dir.path().join(TRACE_FILE));
    assert_eq!(trace.len(), out.rows.len());
    assert_eq!(trace.len(), 2 * 2 * (c.federation.rounds + 1));
    let h = header(&dir.path().join(TRACE_FILE));
    let col = h.iter().position(|n| n == "theta1").unwrap();
    for (rec, row) in trace.iter().zip(&out.rows) {
        assert_eq!(rec[col].parse::<f64>().unwrap(), row.params.theta1);
    }
}

#[test]
fn park_baselines_give_finite_rmse() {
    let mut c = small("park");
    c.federation.rounds = 2;
    let out = execute(&c, None).unwrap();
    for row in out.finals() {
        let rmse = row.metrics.as_ref().unwrap().avg_rmse.unwrap();
        assert!(rmse.is_finite() && rmse >= 0.0, "{:?}", row.baseline);
    }
    assert_eq!(out.finals().len(), 2);
}

#[test]
fn separate_is_a_single_client_federation() {
    let c = small("currin").resolve().unwrap();
    let out = execute(&c, Some(Baseline::Separate)).unwrap();
    let scenario = build_scenario(&c, c.seed).unwrap();
    let spec = c.kernel.unwrap();
    let hf = scenario.hf_client.unwrap();
    let fed = federation_config(&c, spec.n_lengthscales(2), c.seed).unwrap();
    let init = fed.sample_initial();
    let mut clients =
        ClientState::from_datasets(vec![scenario.datasets[hf].clone()], c.federation.batch_size, &init).unwrap();
    let traces = run_federation(&spec, &mut clients, &fed).unwrap();
    let got: Vec<_> = out.run(Baseline::Separate, 0).iter().skip(1).map(|r| r.params.clone()).collect();
    let want: Vec<_> = traces.into_iter().map(|t| t.aggregated).collect();
    assert_eq!(got, want);
}

#[test]
fn separate_only_run_writes_its_label() {
    let dir = TempDir::new().unwrap();
    run_separate_baseline(&small("currin"), dir.path()).unwrap();
    let rows = csv_rows(&dir.path().join(TRACE_FILE));
    assert!(rows.iter().all(|r| &r[0] == "Separate"));
    assert!(run_separate_baseline(&small("bad-init"), &dir.path().join("x")).is_err());
}

#[test]
fn bad_init_trace_has_per_round_rmse() {
    let dir = TempDir::new().unwrap();
    let c = small("bad-init");
    run_experiment(&c, dir.path()).unwrap();
    let path = dir.path().join(TRACE_FILE);
    let col = header(&path).iter().position(|n| n == "avg_rmse").unwrap();
    let rows = csv_rows(&path);
    assert_eq!(rows.len(), c.federation.rounds + 1);
    for r in rows {
        assert!(r[col].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn csv_datasets_run_end_to_end() {
    let dir = TempDir::new().unwrap();
    for k in 0..2 {
        let mut text = String::from("x1,y\n");
        for i in 0..30 {
            let x = i as f64 / 10.0 + k as f64 * 0.05;
            text += &format!("{x},{}\n", x.sin());
        }
        write(dir.path(), &format!("c{k}.csv"), &text);
    }
    let cfg = write(
        dir.path(),
        "run.toml",
        "datasets = [\"c0.csv\", \"c1.csv\"]\n[federation]\nrounds = 3\n[metrics]\nevery = 0\n",
    );
    let c = load_config(&cfg).unwrap();
    let out = run_experiment(&c, &dir.path().join("out")).unwrap();
    let f = out.finals()[0].metrics.as_ref().unwrap();
    assert_eq!(f.per_client_rmse.len(), 2);
    let trace = csv_rows(&dir.path().join("out").join(TRACE_FILE));
    assert_eq!(trace.len(), 4);
}

#[test]
fn failures_leave_a_marker() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "flat.csv", "x1,y\n0,1\n1,1\n2,1\n3,1\n4,1\n");
    write(dir.path(), "ok.csv", "x1,y\n0,1\n1,2\n2,0\n3,1\n4,5\n");
    let cfg = write(dir.path(), "run.toml", "datasets = [\"ok.csv\", \"flat.csv\"]\nstandardize = true\n");
    let c = load_config(&cfg).unwrap();
    let out = dir.path().join("out");
    assert!(run_experiment(&c, &out).is_err());
    let marker = fs::read_to_string(out.join(FAILED_MARKER)).unwrap();
    assert!(marker.contains("variance"), "{marker}");

    let status = fedgp().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("cli")).output().unwrap();
    assert!(!status.status.success());
    assert!(dir.path().join("cli").join(FAILED_MARKER).exists());
    assert!(String::from_utf8_lossy(&status.stderr).starts_with("error:"));
}

#[test]
fn binary_commands() {
    let out = fedgp().arg("list-scenarios").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["gp-homogeneous", "bad-init", "sin-mirror", "currin", "borehole"] {
        assert!(text.contains(key), "{key}");
    }

    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", "scenario = \"currin\"\n[federation]\nrounds = 2\nlocal_steps = 1\n");
    let out_dir = dir.path().join("o");
    let st = fedgp()
        .args(["run"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--repeats", "2", "--seed", "9"])
        .status()
        .unwrap();
    assert!(st.success());
    let echo = load_config(&out_dir.join("config.echo")).unwrap();
    assert_eq!((echo.repeats, echo.seed), (2, 9));
    assert_eq!(csv_rows(&out_dir.join(TRACE_FILE)).len(), 2 * 2 * 3);

    let sep = dir.path().join("s");
    let st = fedgp().arg("eval").arg(&cfg).args(["--baseline", "separate", "--out"]).arg(&sep).status().unwrap();
    assert!(st.success());
    assert!(csv_rows(&sep.join(TRACE_FILE)).iter().all(|r| &r[0] == "Separate"));

    let bad = write(dir.path(), "bad.toml", "scenario = \"currin\"\nlearningrate = 1\n");
    let out = fedgp().arg("run").arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_schedule"));
}
