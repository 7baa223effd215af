use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use posehair::backends::ToyBackend;
use posehair::fixtures::toy_pair;
use posehair::persist;
use posehair::pipeline::PipelineConfig;
use tempfile::TempDir;

const QUICK: &str = "wplus_steps = 30\nfs_steps = 8\nalign_steps = 6\ninpaint_steps = 6\nblend_steps = 6\n";

fn posehair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posehair")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let cfg = PipelineConfig::default();
        let backend = ToyBackend::new(cfg.toy_config()).unwrap();
        let pair = toy_pair(&backend, cfg.split).unwrap();
        persist::write_png(&dir.path().join("src.png"), &pair.source).unwrap();
        persist::write_png(&dir.path().join("trg.png"), &pair.target).unwrap();
        fs::write(dir.path().join("quick.toml"), QUICK).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

#[test]
fn help_lists_all_verbs() {
    let out = posehair(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for verb in ["transfer", "eval-reconstruction", "stratify", "invert"] {
        assert!(text.contains(verb), "{verb}");
    }
}

#[test]
fn transfer_writes_final_image_and_honours_ablation_flags() {
    let ws = Workspace::new();
    let out = posehair(&[
        "transfer",
        &ws.s("src.png"),
        &ws.s("trg.png"),
        "--config",
        &ws.s("quick.toml"),
        "--out",
        &ws.s("run"),
        "--no-lsm",
        "--no-reg",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(Path::new(printed.trim()).exists());
    let header = persist::read_losses_header(&ws.path("run/align/losses.csv")).unwrap();
    assert_eq!(header, ["step", "pose", "total"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["no_lsm"], true);
    assert_eq!(manifest["config"]["align_steps"], 6);
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.toml"), "align_stepz = 3\n").unwrap();
    let out = posehair(&["transfer", &ws.s("src.png"), &ws.s("trg.png"), "--config", &ws.s("bad.toml")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("align_stepz"));

    let out = posehair(&[
        "transfer",
        &ws.s("src.png"),
        &ws.s("trg.png"),
        "--backend",
        "external",
        "--out",
        &ws.s("run"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_input_exits_4() {
    let ws = Workspace::new();
    let out = posehair(&[
        "transfer",
        &ws.s("src.png"),
        &ws.s("missing.png"),
        "--config",
        &ws.s("quick.toml"),
        "--out",
        &ws.s("run"),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn divergence_exits_3() {
    let ws = Workspace::new();
    fs::write(ws.path("wild.toml"), format!("{QUICK}learning_rate = 1e308\n")).unwrap();
    let out = posehair(&[
        "transfer",
        &ws.s("src.png"),
        &ws.s("trg.png"),
        "--config",
        &ws.s("wild.toml"),
        "--out",
        &ws.s("run"),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn stratify_splits_terciles() {
    let ws = Workspace::new();
    let rows: String = (0..6).map(|i| format!("s{i}.png,t{i}.png,{}\n", [5.0, 1.0, 3.0, 6.0, 2.0, 4.0][i])).collect();
    fs::write(ws.path("pairs.csv"), format!("path_src,path_trg,pd\n{rows}")).unwrap();
    let out = posehair(&["stratify", &ws.s("pairs.csv"), "--out", &ws.s("strata.csv")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(ws.path("strata.csv")).unwrap();
    let strata: Vec<(String, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[3].to_string())
        })
        .collect();
    for (src, expected) in [("s1.png", "Easy"), ("s4.png", "Easy"), ("s2.png", "Medium"), ("s5.png", "Medium"), ("s0.png", "Difficult"), ("s3.png", "Difficult")] {
        let got = &strata.iter().find(|(s, _)| s == src).unwrap().1;
        assert_eq!(got, expected, "{src}");
    }
}

#[test]
fn stratify_computes_missing_pose_difference() {
    let ws = Workspace::new();
    fs::write(ws.path("pairs.csv"), "path_src,path_trg\nsrc.png,src.png\nsrc.png,trg.png\ntrg.png,trg.png\n").unwrap();
    let out = posehair(&["stratify", &ws.s("pairs.csv")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(ws.path("pairs_stratified.csv")).unwrap();
    let pds: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(pds.iter().filter(|&&pd| pd == 0.0).count(), 2);
    assert!(pds.iter().any(|&pd| pd > 0.0));
}

#[test]
fn eval_reconstruction_rejects_empty_and_malformed_lists() {
    let ws = Workspace::new();
    fs::write(ws.path("empty.csv"), "path_src,path_trg\n").unwrap();
    assert_eq!(code(&posehair(&["eval-reconstruction", &ws.s("empty.csv"), "--out", &ws.s("e")])), 2);
    fs::write(ws.path("bad.csv"), "path_src,path_trg,pd\na,b,x\n").unwrap();
    let out = posehair(&["eval-reconstruction", &ws.s("bad.csv"), "--out", &ws.s("e")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn invert_writes_latent_and_reconstruction() {
    let ws = Workspace::new();
    let out = posehair(&["invert", &ws.s("src.png"), "--config", &ws.s("quick.toml"), "--out", &ws.s("inv")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for p in ["inv/w/header.json", "inv/f/data.bin", "inv/reconstruction.png", "inv/invert.json"] {
        assert!(ws.path(p).exists(), "{p}");
    }
}
