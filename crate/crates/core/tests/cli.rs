use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[experiment]
rounds = 2
clients_per_round = 3
eta = 0.05
seed = 4

[problem]
targets = [[0.0, 1.0], [2.0, -1.0], [1.0, 1.0]]

[[population.group]]
first = 0
steps = [1, 4]
failure = [0.0, 0.3]
per_round = true

[[algorithm]]
kind = "fedacs"
"#;

fn fedhet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhet"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout_lines(o: &Output) -> Vec<String> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn one_replicate_two_rounds_gives_three_lines() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("o.csv");
    let o = fedhet(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_lines(&o).len(), 1);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "replicate,round,algorithm,dist_true,dist_surrogate,grad_norm_sq,chi_square,eta_eff,t_eff"
    );
    assert!(lines[1].starts_with("0,1,fedacs,"));
    assert!(lines[2].starts_with("0,2,fedacs,"));
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 9);
        for f in &fields[3..] {
            let v: f64 = f.parse().unwrap();
            assert_eq!(v.to_string(), *f);
        }
    }
}

#[test]
fn replay_is_byte_identical_across_job_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &SMALL.replace("rounds = 2", "rounds = 40"),
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    for (path, jobs) in [(&a, "1"), (&b, "1"), (&c, "4")] {
        let o = fedhet(&[
            "simulate",
            "--config",
            &cfg,
            "--replicates",
            "3",
            "--jobs",
            jobs,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let a = fs::read(a).unwrap();
    assert_eq!(a, fs::read(b).unwrap());
    assert_eq!(a, fs::read(c).unwrap());

    let d = dir.path().join("d.csv");
    fedhet(&[
        "simulate",
        "--config",
        &cfg,
        "--replicates",
        "3",
        "--seed",
        "99",
        "--out",
        d.to_str().unwrap(),
    ]);
    assert_ne!(a, fs::read(d).unwrap());
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o.csv");
    let out = out.to_str().unwrap();

    let bad = write(
        dir.path(),
        "bad.toml",
        &SMALL.replace("eta = 0.05", "eta = 0.05\nlerning_rate = 1"),
    );
    let o = fedhet(&["simulate", "--config", &bad, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("experiment.lerning_rate"));
    assert!(o.stdout.is_empty());

    let o = fedhet(&["simulate", "--preset", "fig7", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fig7"));

    let broken = write(dir.path(), "broken.toml", "[experiment\nrounds = 1\n");
    let o = fedhet(&["simulate", "--config", &broken, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));

    let o = fedhet(&[
        "simulate",
        "--config",
        &bad.replace("bad", "missing"),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn blowup_exits_three() {
    let dir = TempDir::new().unwrap();
    let text = SMALL
        .replace("eta = 0.05", "eta = 5.0")
        .replace("rounds = 2", "rounds = 500");
    let cfg = write(dir.path(), "c.toml", &text);
    let o = fedhet(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(o.stdout.is_empty());
}

#[test]
fn analyze_codesign_reports_fig4_probabilities() {
    let o = fedhet(&["analyze", "codesign", "--preset", "fig4-codesign"]);
    assert!(o.status.success());
    let line = &stdout_lines(&o)[0];
    let q: Vec<f64> = line
        .split("q=[")
        .nth(1)
        .unwrap()
        .split(']')
        .next()
        .unwrap()
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(q.len(), 30);
    assert!(q[..20].iter().all(|v| (v - 0.01).abs() < 1e-12));
    assert!(q[20..].iter().all(|v| (v - 0.34).abs() < 1e-12));
}

#[test]
fn analyze_calibrate_two_client_map() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[experiment]\neta = 0.001\n[problem]\ntargets = [[0.0], [1.0]]\n\
         [[population.group]]\nfirst = 0\ncount = 1\nsteps = 1\nfailure = 0.5\n\
         [[population.group]]\nfirst = 1\nsteps = 3\nfailure = 0.0\n",
    );
    let o = fedhet(&["analyze", "calibrate", "--config", &cfg]);
    assert!(o.status.success());
    let line = &stdout_lines(&o)[0];
    let get = |name: &str| -> f64 {
        line.split_whitespace()
            .find_map(|kv| kv.strip_prefix(&format!("{name}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((get("fedavg") - 0.001).abs() < 1e-15);
    assert!((get("fedacs") - 0.001 * 1.75 * 7.0 / 6.0).abs() < 1e-15);
    assert!((get("ca-fedavg") - 0.000875).abs() < 1e-15);
    assert!((get("fedvarp") - 0.000875).abs() < 1e-15);
}

#[test]
fn fedacs_distance_trend_decreases() {
    let dir = TempDir::new().unwrap();
    let overlay = write(dir.path(), "o.toml", "[experiment]\nrounds = 2000\n");
    let out = dir.path().join("o.csv");
    let o = fedhet(&[
        "simulate",
        "--preset",
        "example2-static",
        "--config",
        &overlay,
        "--jobs",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    let mut per_round = vec![0.0; 2000];
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[2] == "fedacs" {
            per_round[f[1].parse::<usize>().unwrap() - 1] += f[3].parse::<f64>().unwrap() / 32.0;
        }
    }
    let window = 50;
    let smoothed: Vec<f64> = per_round
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    assert!(
        smoothed.windows(2).all(|p| p[1] <= p[0]),
        "smoothed distance increased"
    );
    assert!(smoothed.last().unwrap() < &(smoothed[0] / 3.0));
}
