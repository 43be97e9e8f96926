use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toolwear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toolwear"))
        .args(args)
        .env_remove("TOOLWEAR_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sample_controls() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/sample/controls.csv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &["--chains", "2", "--warmup", "150", "--samples", "150"];

#[test]
fn taylor_two_point() {
    let o = toolwear(&["taylor", "--pair", "20,255", "--pair", "58,10"]);
    assert_eq!(code(&o), 0);
    let n: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("n = "))
        .unwrap()
        .parse()
        .unwrap();
    let closed = (58.0f64 / 20.0).ln() / (255.0f64 / 10.0).ln();
    assert!((n - closed).abs() < 1e-12);
}

#[test]
fn malformed_input_exits_one() {
    assert_eq!(code(&toolwear(&["taylor", "--pair", "20"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 1\nbogus = 2\n[paths]\ncontrols = \"c.csv\"\nseries = \"s\"\noutput = \"o\"\n").unwrap();
    assert_eq!(code(&toolwear(&["run", "--config", s(&cfg)])), 1);
    let missing = dir.path().join("nope.csv");
    assert_eq!(code(&toolwear(&["taylor", "--controls", s(&missing)])), 1);
}

#[test]
fn design_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = toolwear(&["design", "--n-initial", "5", "--n-reserve", "3", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("design.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().filter(|r| r.ends_with("initial")).count(), 5);
}

#[test]
fn life_fit_diagnose_predict() {
    let dir = tempfile::tempdir().unwrap();
    let controls = sample_controls();
    let mut args = vec!["fit", "--controls", s(&controls), "--channel", "life", "--out", s(dir.path())];
    args.extend_from_slice(TINY);
    let o = toolwear(&args);
    assert!(matches!(code(&o), 0 | 2), "{}", String::from_utf8_lossy(&o.stderr));
    let draws = dir.path().join("draws_life.csv");
    assert!(draws.exists());

    let o = toolwear(&["diagnose", "--draws", s(&draws)]);
    assert!(matches!(code(&o), 0 | 2));
    assert!(stdout(&o).contains("rho1"));

    let o = toolwear(&["predict", "--draws", s(&draws), "--controls", s(&controls), "--channel", "life", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let surface = std::fs::read_to_string(dir.path().join("surface_life.csv")).unwrap();
    assert_eq!(surface.lines().count(), 401);

    let far = toolwear(&[
        "predict", "--draws", s(&draws), "--controls", s(&controls), "--channel", "life",
        "--grid", "100:200:3,20:50:3", "--out", s(dir.path()),
    ]);
    assert_eq!(code(&far), 1);
    assert!(String::from_utf8_lossy(&far.stderr).contains("cutting speed"));
}

#[test]
fn simulate_then_run() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = toolwear(&["simulate", "--experiments", "6", "--out", s(&sim)]);
    assert_eq!(code(&o), 0);
    for f in ["controls.csv", "run.toml", "truth.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let out = dir.path().join("run");
    let o = toolwear(&[
        "run", "--config", s(&sim.join("run.toml")), "--out", s(&out),
        "--set", "sampler.chains=2", "--set", "sampler.warmup=150", "--set", "sampler.samples=150",
        "--set", "model.channels=[\"Ft\", \"life\"]",
    ]);
    assert!(matches!(code(&o), 0 | 2), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["seed"], 20);
    let outputs = manifest["outputs"].as_object().unwrap();
    assert!(outputs.contains_key("surface_Ft.csv"));
    assert!(outputs.contains_key("taylor.json"));
    assert!(!outputs.contains_key("draws_Ff.csv"));
    let warned = String::from_utf8_lossy(&o.stderr).contains("PSRF above threshold");
    assert_eq!(code(&o) == 2, warned);
}
