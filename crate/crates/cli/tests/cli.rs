use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MASKING: &str = r#"
kind = "rhm_masking"
seed = 3
[grammar]
v = 8
m = 2
s = 2
L = 3
[noise]
grid = [0.2, 0.6]
horizon = 100
[ensemble]
n_data = 3
n_traj = 6
write_trajectories = true
"#;

const EPSILON: &str = r#"
kind = "rhm_epsilon"
seed = 3
[grammar]
v = 8
m = 2
s = 2
L = 3
[noise]
grid = [0.5, 0.9]
[ensemble]
n_data = 3
n_traj = 6
"#;

const MEANFIELD: &str = r#"
kind = "meanfield"
[grammar]
v = 16
m = 4
s = 2
L = 5
[noise]
grid = [0.5, 0.8]
"#;

const GRF: &str = r#"
kind = "grf"
seed = 2
[grf]
n = 16
n_samples = 4
times = [0.2, 0.8]
"#;

fn rhm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rhm")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_ok(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = rhm(&args);
    assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn every_subcommand_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let masking = write_config(d, "masking.toml", MASKING);
    let files = run_ok("generate", &masking, &d.join("gen"), &[]);
    assert!(files.iter().any(|f| f.ends_with("grammar.json")));
    assert!(d.join("gen/data.jsonl").exists());

    run_ok("diffuse", &masking, &d.join("masking"), &[]);
    for f in ["profiles.csv", "susceptibility.csv", "reconstruction.csv", "trajectories.jsonl", "summary.json"] {
        assert!(d.join("masking").join(f).exists(), "{f}");
    }
    let eps = write_config(d, "eps.toml", EPSILON);
    run_ok("diffuse", &eps, &d.join("eps"), &[]);
    assert!(d.join("eps/profiles.csv").exists());

    let mf = write_config(d, "mf.toml", MEANFIELD);
    run_ok("meanfield", &mf, &d.join("mf"), &[]);
    let phase = fs::read_to_string(d.join("mf/phase.csv")).unwrap();
    assert!(phase.lines().nth(1).unwrap().contains("eps_star"), "{phase}");

    let grf = write_config(d, "grf.toml", GRF);
    run_ok("grf", &grf, &d.join("grf"), &[]);
    assert!(d.join("grf/summary.json").exists());

    let analyze = write_config(d, "analyze.toml", "kind = \"transcripts\"\n[transcripts]\npath = \"masking/trajectories.jsonl\"\n");
    let files = run_ok("analyze", &analyze, &d.join("tr"), &[]);
    assert!(!files.is_empty());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "masking.toml", MASKING);
    run_ok("diffuse", &cfg, &d.join("a"), &[]);
    run_ok("diffuse", &cfg, &d.join("b"), &["--seed", "3"]);
    run_ok("diffuse", &cfg, &d.join("c"), &["--seed", "99"]);
    let read = |s: &str| fs::read_to_string(d.join(s).join("trajectories.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let head = read("c").lines().next().unwrap().to_owned();
    assert!(head.contains("99"), "{head}");
}

#[test]
fn sequential_flag_gives_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "masking.toml", MASKING);
    run_ok("diffuse", &cfg, &d.join("par"), &["--threads", "2"]);
    run_ok("diffuse", &cfg, &d.join("seq"), &["--sequential"]);
    for f in ["profiles.csv", "susceptibility.csv", "trajectories.jsonl"] {
        assert_eq!(fs::read(d.join("par").join(f)).unwrap(), fs::read(d.join("seq").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn kind_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grf.toml", GRF);
    let o = rhm(&["diffuse", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grf"));
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.toml", "kind = \"grf\"\nbogus = 1\n");
    assert_eq!(rhm(&["grf", "--config", unknown.to_str().unwrap()]).status.code(), Some(2));
    let bad = write_config(dir.path(), "b.toml", &MASKING.replace("m = 2", "m = 40"));
    assert_eq!(rhm(&["diffuse", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_config_is_an_io_error() {
    let o = rhm(&["grf", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn malformed_transcripts_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("t.jsonl"), "{\"source\": \"x\", \"t_over_T\": 0.5, \"x0\": [1, 2]}\nnot json\n").unwrap();
    let cfg = write_config(d, "a.toml", "kind = \"transcripts\"\n[transcripts]\npath = \"t.jsonl\"\n");
    let o = rhm(&["analyze", "--config", cfg.to_str().unwrap(), "--out", d.join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_arguments_fail() {
    assert!(!rhm(&["diffuse"]).status.success());
    assert!(!rhm(&["nonsense"]).status.success());
}
