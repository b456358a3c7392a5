// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vtpmctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtpmctl"))
        .args(args)
        .env_remove("VTPM_STATE_DIR")
        .output()
        .unwrap()
}

fn check(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = vtpmctl(&["bench", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = vtpmctl(&["bench", "--scenario", "custom"]);
    assert_eq!(out.status.code(), Some(2), "custom without --total");
}

#[test]
fn bench_writes_all_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = vtpmctl(&[
        "bench",
        "--scenario",
        "custom",
        "--total",
        "8",
        "--concurrency",
        "2",
        "--rounds",
        "10",
        "--out",
        p(dir.path()),
        "--state-dir",
        p(dir.path()),
    ]);
    check(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("Type,p95,p95_change,stddev\nbaseline,"));
    for name in [
        "boottime_custom.csv",
        "cdf_custom_baseline.csv",
        "cdf_custom_ondemand.csv",
        "cdf_custom_pool.csv",
        "memoverhead.csv",
        "samples_custom_pool.csv",
    ] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let samples = fs::read_to_string(dir.path().join("samples_custom_pool.csv")).unwrap();
    assert_eq!(samples.lines().count(), 9);
    assert!(samples.lines().skip(1).all(|l| l.contains(",pool,") && l.contains(",true,")));
}

#[test]
fn report_recomputes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    check(&vtpmctl(&[
        "bench", "--scenario", "custom", "--total", "5", "--rounds", "10", "--out", p(dir.path()),
    ]));
    let again = tempfile::tempdir().unwrap();
    check(&vtpmctl(&["report", "--in", p(dir.path()), "--out", p(again.path())]));
    for name in ["boottime_custom.csv", "cdf_custom_ondemand.csv", "memoverhead.csv"] {
        assert_eq!(
            fs::read(dir.path().join(name)).unwrap(),
            fs::read(again.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn pool_only_bench_skips_the_table() {
    let dir = tempfile::tempdir().unwrap();
    check(&vtpmctl(&[
        "bench", "--scenario", "custom", "--total", "3", "--setup", "pool", "--rounds", "10", "--out",
        p(dir.path()),
    ]));
    assert!(dir.path().join("cdf_custom_pool.csv").exists());
    assert!(!dir.path().join("boottime_custom.csv").exists());
}

#[test]
fn run_vm_from_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("vm.toml");
    fs::write(&cfg, "mem_size = 268435456\nsetup = \"ondemand\"\nqueue_size = 16\n").unwrap();
    let out = vtpmctl(&["run-vm", "--config", cfg.to_str().unwrap(), "--rounds", "10"]);
    check(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "vm_id,setup,t_total_ns,t_internal_ns,tpm_rc_ok,bytes_overhead");
    assert!(lines[1].starts_with("0,ondemand,") && lines[1].contains(",true,"));
    assert!(lines[2].starts_with("pcr11=") && lines[2].len() == 6 + 64);

    fs::write(&cfg, "setup = \"pool\"\nbogus = 1\n").unwrap();
    assert_eq!(vtpmctl(&["run-vm", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn provision_then_serve() {
    use std::io::{BufRead, BufReader};
    use vtpm_core::swtpm::connect_ctrl;

    let dir = tempfile::tempdir().unwrap();
    let out = vtpmctl(&["provision", "--count", "2", "--state-dir", p(dir.path()), "--rounds", "10"]);
    check(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let ids: Vec<&str> = stdout.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(ids.len(), 2);
    assert_ne!(ids[0], ids[1]);

    let mut child = Command::new(env!("CARGO_BIN_EXE_vtpmctl"))
        .args(["serve", "--instance", ids[0], "--state-dir", p(dir.path())])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let mut c = connect_ctrl(line.trim()).unwrap();
    assert_eq!(c.ctrl_get_capability().unwrap(), 0x7);
    c.ctrl_shutdown().unwrap();
    drop(c);
    assert!(child.wait().unwrap().success());
}
