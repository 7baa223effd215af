use std::fs;
use std::path::{Path, PathBuf};

use posehair::backends::ToyBackend;
use posehair::fixtures::toy_pair;
use posehair::persist::{self, read_losses_header};
use posehair::pipeline::{
    run_reconstruction_eval, run_transfer, PipelineConfig, RunManifest, MANIFEST_FILE, REQUIRED_ARTIFACTS,
};
use posehair::Error;
use tempfile::TempDir;

fn quick_config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        wplus_steps: 30,
        fs_steps: 8,
        align_steps: 6,
        inpaint_steps: 6,
        blend_steps: 6,
        out_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn write_fixture_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = PipelineConfig::default();
    let backend = ToyBackend::new(cfg.toy_config()).unwrap();
    let pair = toy_pair(&backend, cfg.split).unwrap();
    let (src, trg) = (dir.join("src.png"), dir.join("trg.png"));
    persist::write_png(&src, &pair.source).unwrap();
    persist::write_png(&trg, &pair.target).unwrap();
    (src, trg)
}

fn tensor_bytes(out: &Path, rel: &str) -> Vec<u8> {
    fs::read(out.join(rel).join("data.bin")).unwrap()
}

fn resumed(m: &RunManifest) -> Vec<(String, bool)> {
    m.stages.iter().map(|s| (s.name.clone(), s.resumed)).collect()
}

#[test]
fn completed_run_lists_all_artifacts() {
    let tmp = TempDir::new().unwrap();
    let (src, trg) = write_fixture_pair(tmp.path());
    let out = tmp.path().join("run");
    let cfg = PipelineConfig {
        save_every: 3,
        ..quick_config(&out)
    };
    let m = run_transfer(&src, &trg, &cfg).unwrap();
    assert_eq!(m.status, "completed");
    for name in REQUIRED_ARTIFACTS {
        let rel = m.artifacts.get(name).unwrap_or_else(|| panic!("{name} not listed"));
        assert!(out.join(rel).exists(), "{name} missing");
    }
    let on_disk: RunManifest = persist::read_json(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk, m);
    assert_eq!(on_disk.config, cfg);
    assert!(out.join("align/regions/step_0003.png").exists());
    assert_eq!(
        m.stages.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
        ["embed", "align", "inpaint", "blend"]
    );
    assert_eq!(read_losses_header(&out.join("align/losses.csv")).unwrap(), ["step", "lsm", "pose", "reg", "total"]);
    assert_eq!(
        read_losses_header(&out.join("blend/losses.csv")).unwrap(),
        ["step", "hair_percept", "hair_style", "keep_percept", "total"]
    );
}

#[test]
fn resume_skips_finished_stages_and_recomputes_downstream() {
    let tmp = TempDir::new().unwrap();
    let (src, trg) = write_fixture_pair(tmp.path());
    let out = tmp.path().join("run");
    let cfg = quick_config(&out);
    run_transfer(&src, &trg, &cfg).unwrap();
    let first = tensor_bytes(&out, "blend/f_final");

    let again = run_transfer(&src, &trg, &cfg).unwrap();
    assert!(again.stages.iter().all(|s| s.resumed));

    fs::remove_file(out.join("blend/i_final.png")).unwrap();
    let m = run_transfer(&src, &trg, &cfg).unwrap();
    assert_eq!(
        resumed(&m),
        [("embed".into(), true), ("align".into(), true), ("inpaint".into(), true), ("blend".into(), false)]
    );
    assert_eq!(tensor_bytes(&out, "blend/f_final"), first);

    fs::remove_dir_all(out.join("align/w_align")).unwrap();
    let m = run_transfer(&src, &trg, &cfg).unwrap();
    assert_eq!(
        resumed(&m),
        [("embed".into(), true), ("align".into(), false), ("inpaint".into(), false), ("blend".into(), false)]
    );
    assert_eq!(tensor_bytes(&out, "blend/f_final"), first);
}

#[test]
fn config_change_invalidates_from_the_affected_stage() {
    let tmp = TempDir::new().unwrap();
    let (src, trg) = write_fixture_pair(tmp.path());
    let out = tmp.path().join("run");
    let cfg = quick_config(&out);
    run_transfer(&src, &trg, &cfg).unwrap();
    let changed = PipelineConfig {
        no_lsm: true,
        no_reg: true,
        ..cfg
    };
    let m = run_transfer(&src, &trg, &changed).unwrap();
    assert_eq!(
        resumed(&m),
        [("embed".into(), true), ("align".into(), false), ("inpaint".into(), false), ("blend".into(), false)]
    );
    assert_eq!(read_losses_header(&out.join("align/losses.csv")).unwrap(), ["step", "pose", "total"]);
}

#[test]
fn blend_setting_change_reruns_blend_only() {
    let tmp = TempDir::new().unwrap();
    let (src, trg) = write_fixture_pair(tmp.path());
    let out = tmp.path().join("run");
    let cfg = quick_config(&out);
    run_transfer(&src, &trg, &cfg).unwrap();
    let m = run_transfer(&src, &trg, &PipelineConfig { blend_steps: 4, ..cfg }).unwrap();
    assert_eq!(
        resumed(&m),
        [("embed".into(), true), ("align".into(), true), ("inpaint".into(), true), ("blend".into(), false)]
    );
    assert_eq!(m.config.blend_steps, 4);
}

#[test]
fn same_seed_gives_identical_tensors() {
    let tmp = TempDir::new().unwrap();
    let (src, trg) = write_fixture_pair(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_transfer(&src, &trg, &quick_config(&a)).unwrap();
    run_transfer(&src, &trg, &quick_config(&b)).unwrap();
    for t in ["embed/w_src", "embed/w_trg", "embed/f_src", "align/w_align", "inpaint/w_inpaint", "blend/w_weight", "blend/f_final"] {
        assert_eq!(tensor_bytes(&a, t), tensor_bytes(&b, t), "{t}");
    }
}

#[test]
fn missing_input_is_io_error() {
    let tmp = TempDir::new().unwrap();
    let (src, _) = write_fixture_pair(tmp.path());
    let cfg = quick_config(&tmp.path().join("run"));
    let err = run_transfer(&src, &tmp.path().join("nope.png"), &cfg).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

#[test]
fn divergence_is_recorded_in_manifest() {
    let tmp = TempDir::new().unwrap();
    let (src, trg) = write_fixture_pair(tmp.path());
    let out = tmp.path().join("run");
    let cfg = PipelineConfig {
        learning_rate: 1e308,
        ..quick_config(&out)
    };
    let err = run_transfer(&src, &trg, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    let m: RunManifest = persist::read_json(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, "failed");
    assert_eq!(m.failed_stage.as_deref(), Some("embed"));
    assert!(m.error.is_some());
}

fn schema_validator() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/reconstruction_report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

#[test]
fn reconstruction_report_conforms_to_schema() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    write_fixture_pair(&data);
    let csv = data.join("pairs.csv");
    fs::write(&csv, "path_src,path_trg\nsrc.png,src.png\n").unwrap();
    let out = tmp.path().join("eval");
    let report = run_reconstruction_eval(&csv, &quick_config(&out), None).unwrap();
    assert_eq!(report.n_pairs, 1);
    assert_eq!(report.ssim_std, 0.0);

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("reconstruction.json")).unwrap()).unwrap();
    let validator = schema_validator();
    assert!(validator.is_valid(&json), "{:?}", validator.iter_errors(&json).map(|e| e.to_string()).collect::<Vec<_>>());

    let mut bad = json.clone();
    bad.as_object_mut().unwrap().remove("ssim_std");
    assert!(!validator.is_valid(&bad));
}

#[test]
fn empty_pair_list_is_argument_error() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("pairs.csv");
    fs::write(&csv, "path_src,path_trg\n").unwrap();
    let err = run_reconstruction_eval(&csv, &quick_config(tmp.path()), None).unwrap_err();
    assert!(matches!(err, Error::Argument(_)), "{err:?}");
}

#[test]
fn malformed_pair_csv_reports_line() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("pairs.csv");
    fs::write(&csv, "path_src,path_trg,pd\na.png,b.png,1.0\nc.png,d.png,oops\n").unwrap();
    let err = run_reconstruction_eval(&csv, &quick_config(tmp.path()), None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
}
