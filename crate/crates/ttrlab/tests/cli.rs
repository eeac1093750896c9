//! End-to-end checks of the command-line surface: output determinism,
//! provenance headers, exit codes, and the documented CSV/JSON schemas.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ttrlab"))
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ttrlab_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn manifold_csv_is_byte_deterministic_with_header() {
    let dir = tmpdir("manifold");
    let run = |path: &PathBuf| {
        let st = bin()
            .args([
                "--out",
                path.to_str().unwrap(),
                "--override",
                "manifold.n=128",
                "--override",
                "manifold.ranks=2,4",
                "--override",
                "manifold.scales=0.05,0.2",
                "--override",
                "manifold.trials=3",
                "manifold",
            ])
            .output()
            .unwrap();
        assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
        std::fs::read_to_string(path).unwrap()
    };
    let a = run(&dir.join("a.csv"));
    let b = run(&dir.join("b.csv"));
    assert_eq!(a, b, "manifold csv must be byte-identical across runs");
    let mut lines = a.lines();
    let provenance = lines.next().unwrap();
    assert!(provenance.starts_with("# ttrlab manifold"));
    assert!(provenance.contains("config_hash="));
    assert_eq!(
        lines.next().unwrap(),
        "rank,scale,trials,h1_norm_mean,h1_norm_std,h1_unnorm_mean,h1_unnorm_std,mean_nonzero_eig"
    );
    assert_eq!(lines.count(), 4, "grid size = |ranks| x |scales|");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_error_exits_with_code_2() {
    let st = bin().args(["--override", "bogus.key=1", "manifold"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = bin().args(["--override", "train.steps=abc", "manifold"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn attack_sweep_writes_raw_and_summary() {
    let dir = tmpdir("sweep");
    let out = dir.join("sweep.csv");
    let args = [
        "--out".to_string(),
        out.to_str().unwrap().to_string(),
        "--seeds".to_string(),
        "0,1".to_string(),
        "--override".to_string(),
        "net.dims=8,16,16,2".to_string(),
        "--override".to_string(),
        "data.dims=8".to_string(),
        "--override".to_string(),
        "data.n_train_per_class=15".to_string(),
        "--override".to_string(),
        "data.n_pretrain_per_class=15".to_string(),
        "--override".to_string(),
        "data.n_test_per_class=20".to_string(),
        "--override".to_string(),
        "train.steps=25".to_string(),
        "--override".to_string(),
        "train.pretrain_steps=10".to_string(),
        "attack-sweep".to_string(),
    ];
    let st = bin().args(&args).output().unwrap();
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let raw = std::fs::read_to_string(&out).unwrap();
    let summary = std::fs::read_to_string(dir.join("sweep_summary.csv")).unwrap();
    assert!(raw.lines().nth(1).unwrap().starts_with("seed,method,rank,var_scale,init,attack,rho,step"));
    assert!(summary.lines().nth(1).unwrap().starts_with("method,rank,var_scale,attack,rho,n_seeds"));
    // determinism across invocations
    let out2 = dir.join("sweep2.csv");
    let mut args2 = args.clone();
    args2[1] = out2.to_str().unwrap().to_string();
    let st2 = bin().args(&args2).output().unwrap();
    assert!(st2.status.success());
    assert_eq!(raw, std::fs::read_to_string(&out2).unwrap());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ntk_report_is_valid_json() {
    let dir = tmpdir("ntk");
    let out = dir.join("ntk.json");
    let st = bin()
        .args([
            "--out",
            out.to_str().unwrap(),
            "--override",
            "net.dims=6,12,12,2",
            "--override",
            "lora.layers=1",
            "--override",
            "ntk.pairs=2",
            "ntk",
        ])
        .output()
        .unwrap();
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["pairs"].as_array().unwrap().len(), 2);
    assert!(doc["pairs"][0]["lora"]["entries"]
        .as_array()
        .unwrap()
        .iter()
        .any(|e| e.get("delta").is_some()));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_file_with_preset_and_overrides() {
    let dir = tmpdir("cfg");
    let cfg_path = dir.join("exp.cfg");
    std::fs::write(
        &cfg_path,
        "preset = bpa-default\nmanifold.n = 64\nmanifold.ranks = 2\nmanifold.scales = 0.1\nmanifold.trials = 2\n",
    )
    .unwrap();
    let out = dir.join("m.csv");
    let st = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "manifold"])
        .output()
        .unwrap();
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
    std::fs::remove_dir_all(&dir).ok();
}
