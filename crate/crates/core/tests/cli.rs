use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use onestep_sysid::cli::{parse_dataset, SCHEMA_LINE, SUMMARY_HEADER, TRACE_HEADER};

const SMALL: &[&str] = &[
    "--set", "n=12", "--set", "n_total=300", "--set", "n_warmup=100", "--set", "snr=5",
];

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onestep-sysid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, command: &str, extra: &[&str]) -> Output {
    let mut args = vec![command, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    cli(&args)
}

fn data_rows(text: &str) -> Vec<Vec<String>> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(SCHEMA_LINE));
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn unknown_method_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "single", &["--methods", "bb,newton"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("methods"), "{err}");
    assert!(err.contains("newton"), "{err}");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_key_and_bad_value_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "single", &["--set", "colour=blue"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = run_in(dir.path(), "single", &["--set", "snr=loud"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("snr"));
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# small run\nmethods = em2\nnk = 25\nrecord_timing = false\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = run_in(&out_dir, "single", &["--config", cfg.to_str().unwrap(), "--nk", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&fs::read_to_string(out_dir.join("single_trace.csv")).unwrap());
    assert_eq!(rows.len(), 200 / 50);
    assert!(rows.iter().all(|r| r[1] == "EM2" && r[3] == "50" && r[10] == "0"));
}

#[test]
fn output_is_byte_identical_without_timing() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let extra = ["--methods", "bb,sgp,bfgs,em,opt", "--set", "record_timing=false"];
    for dir in [&a, &b] {
        let out = run_in(dir.path(), "single", &extra);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["single_trace.csv", "system.csv", "data.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn montecarlo_row_accounting_over_a_batch_size_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "montecarlo", &["--runs", "2", "--methods", "sgp,em1", "--nk", "1,10,50"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&fs::read_to_string(dir.path().join("runs.csv")).unwrap());
    let per_stream = |nk: usize| 200 / nk;
    assert_eq!(rows.len(), 2 * 2 * (per_stream(1) + per_stream(10) + per_stream(50)));
    for run in ["0", "1"] {
        for method in ["SGP", "EM1"] {
            for nk in [1usize, 10, 50] {
                let group: Vec<_> = rows
                    .iter()
                    .filter(|r| r[0] == run && r[1] == method && r[3] == nk.to_string())
                    .collect();
                assert_eq!(group.len(), per_stream(nk));
                for (b, r) in group.iter().enumerate() {
                    assert_eq!(r[4], b.to_string());
                    assert_eq!(r[5], (100 + (b + 1) * nk).to_string());
                    assert!(!r[6].is_empty());
                }
            }
        }
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let summary_rows: Vec<_> = summary.lines().skip(2).collect();
    assert_eq!(summary.lines().nth(1), Some(SUMMARY_HEADER));
    assert_eq!(summary_rows.len(), 2 * 3);
    assert!(summary_rows.iter().all(|l| l.split(',').nth(3) == Some("2")));
}

#[test]
fn stream_reproduces_single_on_its_own_data() {
    let dir = tempfile::tempdir().unwrap();
    let extra = ["--methods", "bb,sgp:lambda,em,opt", "--nk", "7", "--set", "record_timing=false"];
    let out = run_in(dir.path(), "single", &extra);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.path().join("data.csv");
    let (u, y) = parse_dataset(&fs::read_to_string(&data).unwrap()).unwrap();
    assert_eq!((u.len(), y.len()), (300, 300));

    let mut args = vec!["stream", data.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&extra);
    let out = cli(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let single = data_rows(&fs::read_to_string(dir.path().join("single_trace.csv")).unwrap());
    let stream = data_rows(&fs::read_to_string(dir.path().join("stream_trace.csv")).unwrap());
    assert_eq!(single.len(), stream.len());
    assert_eq!(single.len(), 4 * (200 / 7));
    for (a, b) in single.iter().zip(&stream) {
        assert!(!a[6].is_empty());
        assert!(b[6].is_empty());
        let drop_fit = |r: &Vec<String>| [&r[..6], &r[7..]].concat();
        assert_eq!(drop_fit(a), drop_fit(b));
    }
}

#[test]
fn malformed_dataset_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let mut text = String::from("u,y\n");
    for i in 2..=200 {
        if i == 17 {
            text.push_str("0.5,oops\n");
        } else {
            text.push_str(&format!("{},{}\n", (i as f64).sin(), (i as f64).cos()));
        }
    }
    fs::write(&path, text).unwrap();
    let out = cli(&["stream", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 17"), "{err}");
    assert!(!dir.path().join("stream_trace.csv").exists());
}

#[test]
fn empty_or_short_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = cli(&["stream", empty.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let short = dir.path().join("short.csv");
    fs::write(&short, "u,y\n1,2\n3,4\n").unwrap();
    let out = cli(&["stream", short.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_warmup"));

    let missing = dir.path().join("missing.csv");
    let out = cli(&["stream", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&["single", "--mode", "sometimes"]).status.code(), Some(2));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}
