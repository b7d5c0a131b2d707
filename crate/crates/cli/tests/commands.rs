use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[market]
b = 0.3
sigma = 0.5
horizon = 1.0

[utility]
p = 0.5
a_terminal = 1.0

[grid]
n_y = 201
n_t = 100
n_x = 120
sensitivity_check = false

[sim]
n_paths = 4000
dt_sim = 0.01
seed = 3
"#;

fn dualhjb(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualhjb"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn setup(text: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.cfg");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn solve_writes_full_grid_with_metadata() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    let res = dualhjb(&["solve"], &cfg, &out);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let csv = fs::read_to_string(out.join("dual.csv")).unwrap();
    let meta: Vec<&str> = csv.lines().filter(|l| l.starts_with('#')).collect();
    for key in ["schema", "grid", "model_hash", "residual"] {
        assert!(
            meta.iter().any(|l| l.starts_with(&format!("# {key}:"))),
            "missing {key}"
        );
    }
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 101 * 201);
    let manifest = fs::read_to_string(out.join("manifest_solve.json")).unwrap();
    let hash = meta
        .iter()
        .find_map(|l| l.strip_prefix("# model_hash: "))
        .unwrap();
    assert!(manifest.contains(hash));
    assert!(!out.read_dir().unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .ends_with(".tmp")));
}

#[test]
fn simulate_is_reproducible_for_a_seed() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    for cmd in ["solve", "recover"] {
        assert!(dualhjb(&[cmd], &cfg, &out).status.success());
    }
    let run = |threads: &str| {
        let res = dualhjb(
            &[
                "simulate",
                "--seed",
                "7",
                "--threads",
                threads,
                "--dump-paths",
            ],
            &cfg,
            &out,
        );
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        (
            fs::read(out.join("sim_report.json")).unwrap(),
            fs::read(out.join("paths.csv")).unwrap(),
        )
    };
    let first = run("1");
    let second = run("2");
    assert_eq!(first, second);
    let json = String::from_utf8(first.0).unwrap();
    assert!(json.contains("\"seed\": 7"));
    assert!(String::from_utf8(first.1)
        .unwrap()
        .lines()
        .any(|l| l == "path,t,X,c,pi"));
}

#[test]
fn verify_passes_on_a_reduced_merton_model() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    let res = dualhjb(&["verify"], &cfg, &out);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let report = fs::read_to_string(out.join("verify_report.json")).unwrap();
    assert!(report.contains("\"passed\": true"));
    assert!(report.contains("oracle.dual_value"));
}

#[test]
fn exit_codes_follow_error_class() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    assert_eq!(dualhjb(&["recover"], &cfg, &out).status.code(), Some(5));

    let (bad, bad_cfg) = setup("[market]\nb = 0.3\n");
    assert_eq!(
        dualhjb(&["solve"], &bad_cfg, &bad.path().join("out"))
            .status
            .code(),
        Some(3)
    );

    let invalid = SMALL.replace("sigma = 0.5", "sigma = [[0.0, 0.5], [1.0, 0.0]]");
    let (inv, inv_cfg) = setup(&invalid);
    assert_eq!(
        dualhjb(&["solve"], &inv_cfg, &inv.path().join("out"))
            .status
            .code(),
        Some(4)
    );

    assert_eq!(dualhjb(&["app"], &cfg, &out).status.code(), Some(3));
}

#[test]
fn bundled_configs_parse() {
    for name in [
        "merton.cfg",
        "wealth.cfg",
        "random_horizon.cfg",
        "illiquid.cfg",
    ] {
        let text = fs::read_to_string(bundled(name)).unwrap();
        dualhjb_core::config::ModelConfig::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
