use std::fs;
use std::path::PathBuf;

use crscombine::cli::run_with;

fn fixture() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/panel6.csv")
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["crscombine"];
    argv.extend_from_slice(args);
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn test_subcommand_emits_outcome_json() {
    let f = fixture();
    let (code, out, err) = run(&[
        "test", "--data", &f, "--controls", "1,2,3", "--treated", "4,5,6",
        "--grouping", "1:4,2:5,3:6", "--c", "0,1", "--lambda", "0", "--alpha", "0.05",
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["header"]["tool"], "crscombine");
    assert_eq!(v["header"]["args"][0], "test");
    assert_eq!(v["result"]["outcome"]["q"], 3);
    assert_eq!(v["result"]["outcome"]["reject"], false);
}

#[test]
fn exit_codes() {
    let f = fixture();
    assert_eq!(run(&["test", "--bogus"]).0, 2);
    assert_eq!(run(&["test", "--data", &f, "--c", "0,1", "--grouping", "1:4"]).0, 2);
    let (code, _, err) = run(&[
        "test", "--data", &f, "--controls", "1,2,3", "--treated", "4,5,6",
        "--grouping", "1:4,2:4,3:6", "--c", "0,1",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("cluster 4"), "{err}");
    let (code, _, _) = run(&[
        "test", "--data", "/no/such.csv", "--controls", "1", "--treated", "2",
        "--grouping", "1:2", "--c", "1", "--formula", "y ~ x",
    ]);
    assert_eq!(code, 1);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn combine_writes_diagnostics_and_is_replayable() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let diag = dir.path().join("diag.csv");
    let args = [
        "combine", "--data", &f, "--controls", "1,2,3", "--treated", "4,5,6", "--c", "0,1",
        "--delta", "-31.0", "--A", "50", "--diagnostics", diag.to_str().unwrap(),
    ];
    let (code, first, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(&diag).unwrap();
    assert!(text.starts_with("# crscombine"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 51);
    let (_, second, _) = run(&args);
    assert_eq!(first, second);
}

#[test]
fn seeded_simulation_is_byte_identical() {
    let args = [
        "simulate", "--dgp", "1", "--h", "1", "--betas", "0,2", "--policy", "crs_data,crs_random",
        "--reps", "100", "--seed", "5",
    ];
    let (code, a, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let mut with_threads = vec!["--threads", "1"];
    with_threads.extend_from_slice(&args);
    let (_, b, _) = run(&with_threads);
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("# args")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&a), strip(&b));
    assert!(a.contains("# seed: 5"));
    assert_eq!(a.lines().filter(|l| l.starts_with("dgp1,")).count(), 4);
}

#[test]
fn missing_seed_is_drawn_and_reported() {
    let (code, out, err) = run(&["generate", "--dgp", "2", "--h", "2"]);
    assert_eq!(code, 0);
    let seed = err.lines().find_map(|l| l.strip_prefix("seed: ")).unwrap();
    assert!(out.contains(&format!("# seed: {seed}")));
}

#[test]
fn config_file_supplies_flags() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("data = {f}\ncontrols = 1,2,3\ntreated = 4,5,6\nc = 0,1\nalpha = 0.3\n")).unwrap();
    let (code, out, err) = run(&["--config", cfg.to_str().unwrap(), "test", "--grouping", "1:4,2:5,3:6", "--alpha", "0.25"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["result"]["outcome"]["alpha"], 0.25);
}

/// Four clusters over 60 periods with AR(1) errors from a fixed xorshift
/// stream; clusters 3 and 4 are treated from period 30.
fn long_panel() -> String {
    let mut state = 0x9e37_79b9_7f4a_7c15_u64;
    let mut uniform = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut text = String::from("cluster,time,y,x1\n");
    for j in 1..=4 {
        let mut u = 0.0;
        for t in 1..=60 {
            let e: f64 = (0..12).map(|_| uniform()).sum::<f64>() - 6.0;
            u = 0.5 * u + e;
            let x = if j > 2 && t >= 30 { 1.0 } else { 0.0 };
            let y = 1.0 + 0.5 * x + 0.3 * j as f64 + u;
            text.push_str(&format!("{j},{t},{y},{x}\n"));
        }
    }
    text
}

#[test]
fn calibrate_then_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("panel.csv");
    let params = dir.path().join("params.json");
    let curve = dir.path().join("curve.csv");
    fs::write(&data, long_panel()).unwrap();
    let (code, _, err) = run(&[
        "calibrate", "--data", data.to_str().unwrap(), "--formula", "y ~ x1 + fe(cluster)",
        "--controls", "1,2", "--treated", "3,4", "--out", params.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&params).unwrap()).unwrap();
    let rho = v["result"]["rho_hat"].as_array().unwrap();
    assert_eq!(rho.len(), 4);
    let (code, _, err) = run(&[
        "simulate", "--calibrated", params.to_str().unwrap(), "--betas", "0", "--policy",
        "crs_data,crs_random", "--alpha", "0.5", "--reps", "100", "--seed", "1",
        "--out", curve.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(&curve).unwrap();
    assert!(text.lines().any(|l| l.starts_with("calibrated,,0.0,crs_random,100,")), "{text}");
}

#[test]
fn generated_panel_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("panel.csv");
    let (code, _, err) = run(&["generate", "--dgp", "1", "--h", "1", "--seed", "4", "--out", data.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = run(&[
        "test", "--data", data.to_str().unwrap(), "--formula", "y ~ d + i_t + x1 + x2 + x3",
        "--controls", "7,8,9,10,11,12", "--treated", "1,2,3,4,5,6",
        "--grouping", "7:1,8:2,9:3,10:4,11:5,12:6", "--c", "1,0,0,0,0",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("\"q\": 6") || out.contains("\"q\":6"), "{out}");
}

#[test]
fn power_from_limits() {
    let (code, out, err) = run(&[
        "power", "--xi", "0.5,0.5", "--sigma", "1,1", "--delta", "2", "--alpha", "0.75",
        "--power-method", "k1",
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let phi = 0.158_655_253_931_457_05_f64;
    let want = phi * phi + (1.0 - phi) * (1.0 - phi);
    assert!((v["result"]["value"].as_f64().unwrap() - want).abs() < 1e-12);
    assert!(v["header"]["seed"].is_null());
}
