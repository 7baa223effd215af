//! Run configuration and the four-stage transfer driver with per-stage
//! persistence and resume.
//!
//! Output layout of one run:
//!
//! ```text
//! <out>/embed/{w_src,w_trg,f_src}/            tensors
//! <out>/align/{w_align}/, i_align.png, hair_align.png, losses.csv
//! <out>/inpaint/{w_inpaint}/, s_obj.png, s_obj.json, i_inpaint.png, losses.csv
//! <out>/blend/{w_weight,w_blend,f_final}/, masks/{hair,blend,keep}.png, i_final.png, losses.csv
//! <out>/manifest.json
//! ```
//!
//! Each stage directory also holds a `done.json` recording the key the stage
//! ran under. Every stage reads its inputs back from disk, so a resumed run
//! sees exactly the values a fresh one does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{align_target_hair, extract_hair_mask, AlignStep, AlignmentConfig};
use crate::backends::{Ports, ToyBackend, ToyConfig};
use crate::blending::{optimize_blend, BlendConfig, BlendInputs, BlendMode};
use crate::domain::{partition_masks, Image};
use crate::embedding::{embed_fs, invert_wplus, EmbeddingResult};
use crate::error::{Error, Result};
use crate::inpainting::{build_objective_label, inpaint_source, InpaintConfig};
use crate::losses::LossBreakdown;
use crate::metrics::{
    pose_difference, read_pairs_csv, ssim, stratify_pairs, write_pairs_csv, PairRecord, PerceptualDistance,
};
use crate::persist::{self, label_table};
use crate::superpixels::SlicParams;

pub const TOOL_NAME: &str = "posehair";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    External,
}

/// Flat run configuration. Every key is optional in the file; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendKind,
    pub seed: u64,
    pub resolution: usize,
    pub layers: usize,
    pub latent_dim: usize,
    pub split: usize,
    pub num_classes: usize,
    pub hair_class: u16,
    pub background_class: u16,

    pub wplus_steps: usize,
    pub fs_steps: usize,
    pub align_steps: usize,
    pub inpaint_steps: usize,
    pub blend_steps: usize,
    pub learning_rate: f64,

    pub lambda_lsm: f64,
    pub lambda_reg: f64,
    pub lambda_hair_percept: f64,
    pub lambda_hair_style: f64,

    pub slic_regions: usize,
    pub slic_compactness: f64,
    pub slic_iters: usize,

    pub no_lsm: bool,
    pub no_reg: bool,
    pub rematch_target: bool,
    pub strict_reg: bool,
    pub lsm_crop: bool,
    pub convex_blend: bool,
    pub per_layer_weight: bool,
    pub inpaint_region_only: bool,

    pub out_dir: PathBuf,
    /// Dump alignment images and region overlays every N steps (0: never).
    pub save_every: usize,

    pub toy_channels: usize,
    pub toy_keypoint_sigma: f64,
    pub toy_feature_scale: f64,
    pub toy_seg_temperature: f64,
    pub toy_mean_latent_samples: usize,

    pub generator_checkpoint: Option<PathBuf>,
    pub features_checkpoint: Option<PathBuf>,
    pub keypoints_checkpoint: Option<PathBuf>,
    pub segmenter_checkpoint: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let toy = ToyConfig::default();
        let align = AlignmentConfig::default();
        let blend = BlendConfig::default();
        let slic = SlicParams::default();
        PipelineConfig {
            backend: BackendKind::Toy,
            seed: toy.seed,
            resolution: toy.resolution,
            layers: toy.layers,
            latent_dim: toy.dim,
            split: 3,
            num_classes: toy.num_classes,
            hair_class: toy.hair_class,
            background_class: toy.background_class,
            wplus_steps: 1100,
            fs_steps: 250,
            align_steps: align.steps,
            inpaint_steps: InpaintConfig::default().steps,
            blend_steps: blend.steps,
            learning_rate: crate::optim::DEFAULT_LEARNING_RATE,
            lambda_lsm: align.lambda_lsm,
            lambda_reg: align.lambda_reg,
            lambda_hair_percept: blend.lambda_hair_percept,
            lambda_hair_style: blend.lambda_hair_style,
            slic_regions: slic.n_regions,
            slic_compactness: slic.compactness,
            slic_iters: slic.iters,
            no_lsm: false,
            no_reg: false,
            rematch_target: false,
            strict_reg: false,
            lsm_crop: true,
            convex_blend: false,
            per_layer_weight: false,
            inpaint_region_only: false,
            out_dir: PathBuf::from("out"),
            save_every: 0,
            toy_channels: toy.channels,
            toy_keypoint_sigma: toy.keypoint_sigma,
            toy_feature_scale: toy.feature_scale,
            toy_seg_temperature: toy.seg_temperature,
            toy_mean_latent_samples: toy.mean_latent_samples,
            generator_checkpoint: None,
            features_checkpoint: None,
            keypoints_checkpoint: None,
            segmenter_checkpoint: None,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.split == 0 || self.split >= self.layers {
            return Err(config_err(format!("split {} must lie in [1, {})", self.split, self.layers)));
        }
        for (name, steps) in [
            ("wplus_steps", self.wplus_steps),
            ("align_steps", self.align_steps),
            ("inpaint_steps", self.inpaint_steps),
            ("blend_steps", self.blend_steps),
        ] {
            if steps == 0 {
                return Err(config_err(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err("learning_rate must be positive"));
        }
        for (name, l) in [
            ("lambda_lsm", self.lambda_lsm),
            ("lambda_reg", self.lambda_reg),
            ("lambda_hair_percept", self.lambda_hair_percept),
            ("lambda_hair_style", self.lambda_hair_style),
        ] {
            if !(l.is_finite() && l >= 0.0) {
                return Err(config_err(format!("{name} must be finite and non-negative")));
            }
        }
        if self.slic_regions == 0 || self.slic_iters == 0 || !(self.slic_compactness > 0.0) {
            return Err(config_err("slic parameters must be positive"));
        }
        if self.hair_class as usize >= self.num_classes || self.background_class as usize >= self.num_classes {
            return Err(config_err("hair/background class outside the class range"));
        }
        if self.hair_class == self.background_class {
            return Err(config_err("hair and background classes must differ"));
        }
        if self.backend == BackendKind::Toy {
            self.toy_config().validate()?;
        }
        Ok(())
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            seed: self.seed,
            resolution: self.resolution,
            layers: self.layers,
            dim: self.latent_dim,
            channels: self.toy_channels,
            keypoint_sigma: self.toy_keypoint_sigma,
            feature_scale: self.toy_feature_scale,
            seg_temperature: self.toy_seg_temperature,
            num_classes: self.num_classes,
            hair_class: self.hair_class,
            background_class: self.background_class,
            mean_latent_samples: self.toy_mean_latent_samples,
        }
    }

    pub fn build_ports(&self) -> Result<Ports> {
        match self.backend {
            BackendKind::Toy => Ok(Ports::toy(ToyBackend::new(self.toy_config())?)),
            BackendKind::External => Err(config_err(
                "backend \"external\" needs pretrained-model adapters, which this build does not include",
            )),
        }
    }

    pub fn alignment_config(&self) -> AlignmentConfig {
        AlignmentConfig {
            steps: self.align_steps,
            lambda_lsm: self.lambda_lsm,
            lambda_reg: self.lambda_reg,
            learning_rate: self.learning_rate,
            slic: SlicParams {
                n_regions: self.slic_regions,
                compactness: self.slic_compactness,
                iters: self.slic_iters,
                seed: self.seed,
            },
            hair_class: self.hair_class,
            no_lsm: self.no_lsm,
            no_reg: self.no_reg,
            rematch_target: self.rematch_target,
            strict_reg: self.strict_reg,
            lsm_crop: self.lsm_crop,
        }
    }

    pub fn inpaint_config(&self) -> InpaintConfig {
        InpaintConfig {
            steps: self.inpaint_steps,
            learning_rate: self.learning_rate,
            inpaint_region_only: self.inpaint_region_only,
        }
    }

    pub fn blend_config(&self) -> BlendConfig {
        BlendConfig {
            steps: self.blend_steps,
            learning_rate: self.learning_rate,
            lambda_hair_percept: self.lambda_hair_percept,
            lambda_hair_style: self.lambda_hair_style,
            mode: if self.convex_blend { BlendMode::Convex } else { BlendMode::Additive },
            per_layer_weight: self.per_layer_weight,
            hair_class: self.hair_class,
        }
    }

    /// Hash of every setting that affects results (output location and
    /// debug dumps excluded).
    pub fn result_hash(&self) -> String {
        self.hash_keys(|_| true)
    }

    /// Hash of the settings that `stage` and the stages before it read.
    /// Settings not owned by a particular stage count for all of them.
    pub fn stage_hash(&self, stage: &str) -> Result<String> {
        let upto = STAGE_KEYS
            .iter()
            .position(|(name, _)| *name == stage)
            .ok_or_else(|| Error::arg(format!("unknown stage {stage:?}")))?;
        Ok(self.hash_keys(|key| match STAGE_KEYS.iter().position(|(_, keys)| keys.contains(&key)) {
            Some(owner) => owner <= upto,
            None => true,
        }))
    }

    fn hash_keys(&self, include: impl Fn(&str) -> bool) -> String {
        let serde_json::Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        let picked: serde_json::Map<_, _> = map
            .into_iter()
            .filter(|(k, _)| !OUTPUT_ONLY_KEYS.contains(&k.as_str()) && include(k))
            .collect();
        hex(&Sha256::digest(serde_json::to_vec(&picked).expect("config serializes")))
    }
}

const OUTPUT_ONLY_KEYS: [&str; 2] = ["out_dir", "save_every"];

/// Settings read by one stage only, in stage order.
const STAGE_KEYS: [(&str, &[&str]); 4] = [
    ("embed", &["wplus_steps", "fs_steps"]),
    (
        "align",
        &[
            "align_steps",
            "lambda_lsm",
            "lambda_reg",
            "slic_regions",
            "slic_compactness",
            "slic_iters",
            "no_lsm",
            "no_reg",
            "rematch_target",
            "strict_reg",
            "lsm_crop",
        ],
    ),
    ("inpaint", &["inpaint_steps", "inpaint_region_only"]),
    (
        "blend",
        &["blend_steps", "lambda_hair_percept", "lambda_hair_style", "convex_blend", "per_layer_weight"],
    ),
];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub resumed: bool,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub source: PathBuf,
    pub target: PathBuf,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const DONE_FILE: &str = "done.json";

/// The nine artifacts every completed run lists.
pub const REQUIRED_ARTIFACTS: [&str; 9] = [
    "w_src", "w_trg", "f_src", "w_align", "w_inpaint", "w_weight", "s_obj", "masks", "i_final",
];

#[derive(Debug, Serialize, Deserialize)]
struct DoneMarker {
    stage: String,
    key: String,
    losses: BTreeMap<String, f64>,
}

struct Stage {
    name: &'static str,
    artifacts: Vec<(&'static str, &'static str)>,
}

fn stages() -> [Stage; 4] {
    [
        Stage {
            name: "embed",
            artifacts: vec![("w_src", "w_src"), ("w_trg", "w_trg"), ("f_src", "f_src")],
        },
        Stage {
            name: "align",
            artifacts: vec![
                ("w_align", "w_align"),
                ("i_align", "i_align.png"),
                ("hair_align", "hair_align.png"),
                ("align_losses", "losses.csv"),
            ],
        },
        Stage {
            name: "inpaint",
            artifacts: vec![
                ("w_inpaint", "w_inpaint"),
                ("s_obj", "s_obj.png"),
                ("s_obj_labels", "s_obj.json"),
                ("i_inpaint", "i_inpaint.png"),
                ("inpaint_losses", "losses.csv"),
            ],
        },
        Stage {
            name: "blend",
            artifacts: vec![
                ("w_weight", "w_weight"),
                ("w_blend", "w_blend"),
                ("f_final", "f_final"),
                ("masks", "masks"),
                ("i_final", "i_final.png"),
                ("blend_losses", "losses.csv"),
            ],
        },
    ]
}

fn breakdown_map(l: &LossBreakdown) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = l.terms().iter().map(|(k, t)| (k.clone(), t.value)).collect();
    m.insert("total".into(), l.total());
    m
}

/// Errors raised inside a stage, tagged with the stage name.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: String,
    pub error: Error,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    ports: &'a Ports,
    out: &'a Path,
    /// Hashes of the two input files.
    inputs: String,
    upstream_recomputed: bool,
    manifest: RunManifest,
}

impl Run<'_> {
    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn key(&self, stage: &str) -> String {
        let config = self.cfg.stage_hash(stage).expect("known stage");
        hex(&Sha256::digest(format!("{config}:{}:{stage}", self.inputs)))
    }

    /// Completed earlier under the same key with all artifacts present.
    fn can_resume(&self, stage: &Stage) -> Option<DoneMarker> {
        if self.upstream_recomputed {
            return None;
        }
        let dir = self.stage_dir(stage.name);
        let done: DoneMarker = persist::read_json(&dir.join(DONE_FILE)).ok()?;
        let present = stage.artifacts.iter().all(|(_, f)| dir.join(f).exists());
        (done.key == self.key(stage.name) && done.stage == stage.name && present).then_some(done)
    }

    fn execute(
        &mut self,
        stage: &Stage,
        body: impl FnOnce(&Path) -> Result<BTreeMap<String, f64>>,
    ) -> std::result::Result<(), StageFailure> {
        let fail = |error: Error| StageFailure {
            stage: stage.name.to_string(),
            error,
        };
        let dir = self.stage_dir(stage.name);
        let t = Instant::now();
        let (losses, resumed) = match self.can_resume(stage) {
            Some(done) => {
                info!("{}: resuming from {}", stage.name, dir.display());
                (done.losses, true)
            }
            None => {
                self.upstream_recomputed = true;
                let _ = fs::remove_file(dir.join(DONE_FILE));
                fs::create_dir_all(&dir).map_err(|e| fail(Error::io(&dir, e)))?;
                let losses = body(&dir).map_err(fail)?;
                let done = DoneMarker {
                    stage: stage.name.into(),
                    key: self.key(stage.name),
                    losses: losses.clone(),
                };
                persist::write_json(&dir.join(DONE_FILE), &done).map_err(fail)?;
                (losses, false)
            }
        };
        for (name, file) in &stage.artifacts {
            self.manifest.artifacts.insert(name.to_string(), Path::new(stage.name).join(file));
        }
        self.manifest.stages.push(StageRecord {
            name: stage.name.into(),
            seconds: t.elapsed().as_secs_f64(),
            resumed,
            losses,
        });
        Ok(())
    }
}

fn embedding_losses(prefix: &str, r: &EmbeddingResult, out: &mut BTreeMap<String, f64>) {
    out.insert(format!("{prefix}_initial"), r.initial_loss);
    out.insert(format!("{prefix}_final"), r.final_loss);
}

/// Runs embed, align, inpaint and blend on one pair and writes the run
/// manifest. Stages whose `done.json` matches the current configuration and
/// inputs, and whose artifacts are all present, are skipped; once a stage
/// is recomputed every later stage is too.
pub fn run_transfer(src_path: &Path, trg_path: &Path, cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let ports = cfg.build_ports()?;
    run_transfer_with(src_path, trg_path, cfg, &ports)
}

/// [`run_transfer`] with caller-provided ports.
pub fn run_transfer_with(src_path: &Path, trg_path: &Path, cfg: &PipelineConfig, ports: &Ports) -> Result<RunManifest> {
    let res = ports.generator.resolution();
    let i_src = persist::read_png(src_path, res)?;
    let i_trg = persist::read_png(trg_path, res)?;
    let (src_hash, trg_hash) = (file_hash(src_path)?, file_hash(trg_path)?);
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_hash = cfg.result_hash();
    let mut run = Run {
        cfg,
        ports,
        out,
        inputs: format!("{src_hash}:{trg_hash}"),
        upstream_recomputed: false,
        manifest: RunManifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            seed: cfg.seed,
            status: "running".into(),
            failed_stage: None,
            error: None,
            source: src_path.to_path_buf(),
            target: trg_path.to_path_buf(),
            config_hash,
            config: cfg.clone(),
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
        },
    };
    let outcome = run_stages(&mut run, &i_src, &i_trg, src_hash == trg_hash);
    let mut manifest = run.manifest;
    match outcome {
        Ok(()) => {
            for (name, rel) in &manifest.artifacts {
                if !out.join(rel).exists() {
                    return Err(Error::Artifact {
                        path: out.join(rel),
                        message: format!("artifact {name} missing at run end"),
                    });
                }
            }
            manifest.status = "completed".into();
            persist::write_json(&out.join(MANIFEST_FILE), &manifest)?;
            Ok(manifest)
        }
        Err(failure) => {
            manifest.status = "failed".into();
            manifest.failed_stage = Some(failure.stage.clone());
            manifest.error = Some(failure.error.to_string());
            persist::write_json(&out.join(MANIFEST_FILE), &manifest)?;
            Err(failure.error)
        }
    }
}

fn run_stages(run: &mut Run<'_>, i_src: &Image, i_trg: &Image, same_input: bool) -> std::result::Result<(), StageFailure> {
    let [embed, align, inpaint, blend] = stages();
    let cfg = run.cfg;
    let ports = run.ports;
    let m = cfg.split;
    let g = ports.generator.as_ref();
    let feat = ports.features.as_ref();
    let read_fail = |stage: &str| {
        let stage = stage.to_string();
        move |error| StageFailure { stage, error }
    };

    run.execute(&embed, |dir| {
        let inv_src = invert_wplus(i_src, g, feat, m, cfg.wplus_steps, cfg.learning_rate)?;
        let inv_trg = if same_input {
            inv_src.clone()
        } else {
            invert_wplus(i_trg, g, feat, m, cfg.wplus_steps, cfg.learning_rate)?
        };
        let fs = embed_fs(i_src, &inv_src.w, g, feat, cfg.fs_steps, cfg.learning_rate)?;
        persist::write_latent(dir, "w_src", &inv_src.w)?;
        persist::write_latent(dir, "w_trg", &inv_trg.w)?;
        persist::write_tensor(dir, "f_src", fs.f.as_ref().expect("FS result carries F").data())?;
        let mut losses = BTreeMap::new();
        embedding_losses("wplus_src", &inv_src, &mut losses);
        embedding_losses("wplus_trg", &inv_trg, &mut losses);
        embedding_losses("fs_src", &fs, &mut losses);
        Ok(losses)
    })?;
    let embed_dir = run.stage_dir("embed");
    let w_src = persist::read_latent(&embed_dir.join("w_src"), m).map_err(read_fail("embed"))?;
    let w_trg = persist::read_latent(&embed_dir.join("w_trg"), m).map_err(read_fail("embed"))?;
    let f_src = persist::read_f(&embed_dir.join("f_src")).map_err(read_fail("embed"))?;

    run.execute(&align, |dir| {
        let h_src = ports.keypoints.extract(i_src)?;
        let acfg = cfg.alignment_config();
        let mut dump_err = None;
        let mut observer = |s: AlignStep<'_>| {
            if cfg.save_every == 0 || s.step % cfg.save_every != 0 || dump_err.is_some() {
                return;
            }
            let r = persist::write_png(&dir.join("steps").join(format!("step_{:04}.png", s.step)), s.image).and_then(|_| match s.regions {
                Some(regions) => persist::write_region_overlay(
                    &dir.join("regions").join(format!("step_{:04}.png", s.step)),
                    s.image,
                    regions,
                ),
                None => Ok(()),
            });
            if let Err(e) = r {
                dump_err = Some(e);
            }
        };
        let result = align_target_hair(&w_trg, i_trg, &h_src, ports, &acfg, Some(&mut observer))?;
        if let Some(e) = dump_err {
            return Err(e);
        }
        persist::write_latent(dir, "w_align", &result.w_align)?;
        persist::write_png(&dir.join("i_align.png"), &result.i_align)?;
        persist::write_mask_png(&dir.join("hair_align.png"), &result.hair_mask)?;
        let mut rows = result.trace.clone();
        rows.push(result.final_losses.clone());
        persist::write_losses_csv(&dir.join("losses.csv"), &rows)?;
        let mut losses = breakdown_map(&result.final_losses);
        losses.insert("initial_total".into(), result.initial_total());
        Ok(losses)
    })?;
    let align_dir = run.stage_dir("align");
    let w_align = persist::read_latent(&align_dir.join("w_align"), m).map_err(read_fail("align"))?;
    let aligned_hair = persist::read_mask_png(&align_dir.join("hair_align.png")).map_err(read_fail("align"))?;

    let s_src = ports.segmenter.segment_labels(i_src).map_err(read_fail("inpaint"))?;
    let src_hair = s_src.mask_of(cfg.hair_class);
    run.execute(&inpaint, |dir| {
        let s_obj = build_objective_label(&s_src, &src_hair, &aligned_hair, cfg.hair_class, cfg.background_class)?;
        let result = inpaint_source(&w_src, &s_obj, ports, &cfg.inpaint_config())?;
        persist::write_label_png(
            &dir.join("s_obj.png"),
            &s_obj.label,
            &label_table(s_obj.label.classes(), cfg.hair_class, cfg.background_class),
        )?;
        persist::write_latent(dir, "w_inpaint", &result.w)?;
        persist::write_png(&dir.join("i_inpaint.png"), &result.image)?;
        let mut rows: Vec<LossBreakdown> = result
            .trace
            .iter()
            .map(|&ce| {
                let mut l = LossBreakdown::new();
                l.add("ce", 1.0, ce);
                l
            })
            .collect();
        let mut last = LossBreakdown::new();
        last.add("ce", 1.0, result.final_ce);
        rows.push(last);
        persist::write_losses_csv(&dir.join("losses.csv"), &rows)?;
        Ok(BTreeMap::from([
            ("ce_initial".to_string(), result.initial_ce),
            ("ce_final".to_string(), result.final_ce),
        ]))
    })?;
    let w_inpaint = persist::read_latent(&run.stage_dir("inpaint").join("w_inpaint"), m).map_err(read_fail("inpaint"))?;

    run.execute(&blend, |dir| {
        let masks = partition_masks(&src_hair, &aligned_hair)?;
        let i_align = g.synthesize(&w_align)?;
        let trg_hair = extract_hair_mask(i_trg, ports.segmenter.as_ref(), cfg.hair_class)?;
        let inputs = BlendInputs {
            w_inpaint: &w_inpaint,
            w_align: &w_align,
            f_src: &f_src,
            i_src,
            i_align: &i_align,
            i_trg,
            trg_hair: &trg_hair,
            masks: &masks,
        };
        let result = optimize_blend(inputs, ports, &cfg.blend_config())?;
        persist::write_tensor(dir, "w_weight", &result.w_weight)?;
        persist::write_latent(dir, "w_blend", &result.w_blend)?;
        persist::write_tensor(dir, "f_final", result.f_final.data())?;
        let mdir = dir.join("masks");
        persist::write_mask_png(&mdir.join("hair.png"), &masks.hair)?;
        persist::write_mask_png(&mdir.join("blend.png"), &masks.blend)?;
        persist::write_mask_png(&mdir.join("keep.png"), &masks.keep)?;
        persist::write_png(&dir.join("i_final.png"), &result.i_final)?;
        let mut rows = result.trace.clone();
        rows.push(result.final_losses.clone());
        persist::write_losses_csv(&dir.join("losses.csv"), &rows)?;
        let mut losses = breakdown_map(&result.final_losses);
        losses.insert("initial_total".into(), result.initial_total());
        Ok(losses)
    })?;
    Ok(())
}

/// Result image of a completed run, at full precision from its tensors.
pub fn final_image(out_dir: &Path, cfg: &PipelineConfig, ports: &Ports) -> Result<Image> {
    let blend = out_dir.join("blend");
    let f = persist::read_f(&blend.join("f_final"))?;
    let w = persist::read_latent(&blend.join("w_blend"), cfg.split)?;
    ports.generator.synthesize_from(&f, w.tail())
}

/// Inverts one image and writes `w` (and `f` when `fs_steps > 0`) under
/// `out_dir`.
pub fn run_invert(img_path: &Path, cfg: &PipelineConfig) -> Result<EmbeddingResult> {
    cfg.validate()?;
    let ports = cfg.build_ports()?;
    let g = ports.generator.as_ref();
    let feat = ports.features.as_ref();
    let img = persist::read_png(img_path, g.resolution())?;
    let inv = invert_wplus(&img, g, feat, cfg.split, cfg.wplus_steps, cfg.learning_rate)?;
    persist::write_latent(&cfg.out_dir, "w", &inv.w)?;
    let mut report = BTreeMap::from([
        ("wplus_initial".to_string(), inv.initial_loss),
        ("wplus_final".to_string(), inv.final_loss),
    ]);
    let result = if cfg.fs_steps > 0 {
        let fs = embed_fs(&img, &inv.w, g, feat, cfg.fs_steps, cfg.learning_rate)?;
        persist::write_tensor(&cfg.out_dir, "f", fs.f.as_ref().expect("FS result carries F").data())?;
        report.insert("fs_initial".into(), fs.initial_loss);
        report.insert("fs_final".into(), fs.final_loss);
        fs
    } else {
        inv
    };
    persist::write_png(&cfg.out_dir.join("reconstruction.png"), &match &result.f {
        Some(f) => g.synthesize_from(f, result.w.tail())?,
        None => g.synthesize(&result.w)?,
    })?;
    persist::write_json(&cfg.out_dir.join("invert.json"), &report)?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source: String,
    pub target: String,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub n_pairs: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips_mean: Option<f64>,
    pub per_pair: Vec<PairReport>,
}

pub const RECONSTRUCTION_REPORT_FILE: &str = "reconstruction.json";

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Transfers each pair's target hair onto its source and scores the result
/// against the source (SSIM; LPIPS when an evaluator is given). Relative
/// paths in the CSV are resolved against the CSV's directory. Each pair runs
/// under `<out>/pairs/NNNN`; the report is written to
/// `<out>/reconstruction.json`.
pub fn run_reconstruction_eval(
    pairs_csv: &Path,
    cfg: &PipelineConfig,
    lpips: Option<&dyn PerceptualDistance>,
) -> Result<ReconstructionReport> {
    cfg.validate()?;
    let pairs = read_pairs_csv(pairs_csv)?;
    if pairs.is_empty() {
        return Err(Error::arg(format!("{} lists no pairs", pairs_csv.display())));
    }
    let ports = cfg.build_ports()?;
    let base = pairs_csv.parent().unwrap_or(Path::new("."));
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (i, (pair, _, _)) in pairs.iter().enumerate() {
        let src = resolve(base, &pair.source);
        let trg = resolve(base, &pair.target);
        let run_dir = cfg.out_dir.join("pairs").join(format!("{i:04}"));
        let pair_cfg = PipelineConfig {
            out_dir: run_dir.clone(),
            ..cfg.clone()
        };
        run_transfer_with(&src, &trg, &pair_cfg, &ports)?;
        let truth = persist::read_png(&src, ports.generator.resolution())?;
        let out = final_image(&run_dir, &pair_cfg, &ports)?;
        per_pair.push(PairReport {
            source: pair.source.clone(),
            target: pair.target.clone(),
            ssim: ssim(&out, &truth)?,
            lpips: lpips.map(|d| d.distance(&out, &truth)).transpose()?,
            run_dir,
        });
    }
    let n = per_pair.len() as f64;
    let ssim_mean = per_pair.iter().map(|p| p.ssim).sum::<f64>() / n;
    let ssim_std = (per_pair.iter().map(|p| (p.ssim - ssim_mean).powi(2)).sum::<f64>() / n).sqrt();
    let lpips_mean = lpips.map(|_| per_pair.iter().filter_map(|p| p.lpips).sum::<f64>() / n);
    let report = ReconstructionReport {
        n_pairs: per_pair.len(),
        ssim_mean,
        ssim_std,
        lpips_mean,
        per_pair,
    };
    persist::write_json(&cfg.out_dir.join(RECONSTRUCTION_REPORT_FILE), &report)?;
    Ok(report)
}

/// Splits the pairs in `pairs_csv` into Easy/Medium/Difficult terciles of
/// pose difference and writes them to `out_csv`. Rows without a `pd` value
/// get one from the keypoint port; the backend is only built if needed.
pub fn run_stratify(pairs_csv: &Path, out_csv: &Path, cfg: &PipelineConfig) -> Result<Vec<PairRecord>> {
    let rows = read_pairs_csv(pairs_csv)?;
    if rows.is_empty() {
        return Err(Error::arg(format!("{} lists no pairs", pairs_csv.display())));
    }
    let base = pairs_csv.parent().unwrap_or(Path::new("."));
    let mut ports = None;
    let mut inputs = Vec::with_capacity(rows.len());
    for (mut pair, _, has_pd) in rows {
        if !has_pd {
            if ports.is_none() {
                cfg.validate()?;
                ports = Some(cfg.build_ports()?);
            }
            let p = ports.as_ref().expect("ports built above");
            let res = p.generator.resolution();
            let k_src = p.keypoints.extract(&persist::read_png(&resolve(base, &pair.source), res)?)?;
            let k_trg = p.keypoints.extract(&persist::read_png(&resolve(base, &pair.target), res)?)?;
            pair.pd = pose_difference(k_src.keypoints3d.view(), k_trg.keypoints3d.view())?;
        }
        inputs.push(pair);
    }
    let records = stratify_pairs(&inputs)?;
    write_pairs_csv(out_csv, &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn stage_step_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(
            (c.wplus_steps, c.fs_steps, c.align_steps, c.inpaint_steps, c.blend_steps),
            (1100, 250, 100, 140, 400)
        );
        assert_eq!((c.lambda_lsm, c.lambda_reg, c.lambda_hair_percept, c.lambda_hair_style), (1.0, 1.0, 1.0, 1.0));
        assert_eq!((c.slic_regions, c.slic_compactness, c.slic_iters), (5, 10.0, 10));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml_str("blend_stepz = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("blend_stepz")));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["split = 0", "split = 8", "align_steps = 0", "learning_rate = -1.0", "hair_class = 0", "lambda_lsm = -2.0"] {
            assert!(matches!(PipelineConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn external_backend_is_a_config_error() {
        let cfg = PipelineConfig::from_toml_str("backend = \"external\"").unwrap();
        assert!(matches!(cfg.build_ports(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            out_dir: "elsewhere".into(),
            save_every: 5,
            ..a.clone()
        };
        let c = PipelineConfig { seed: 1, ..a.clone() };
        assert_eq!(a.result_hash(), b.result_hash());
        assert_ne!(a.result_hash(), c.result_hash());
    }

    #[test]
    fn stage_hash_covers_upstream_settings_only() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { blend_steps: 7, ..a.clone() };
        let c = PipelineConfig { no_lsm: true, ..a.clone() };
        let d = PipelineConfig { learning_rate: 0.02, ..a.clone() };
        for stage in ["embed", "align", "inpaint"] {
            assert_eq!(a.stage_hash(stage).unwrap(), b.stage_hash(stage).unwrap());
        }
        assert_ne!(a.stage_hash("blend").unwrap(), b.stage_hash("blend").unwrap());
        assert_eq!(a.stage_hash("embed").unwrap(), c.stage_hash("embed").unwrap());
        for stage in ["align", "inpaint", "blend"] {
            assert_ne!(a.stage_hash(stage).unwrap(), c.stage_hash(stage).unwrap());
        }
        assert_ne!(a.stage_hash("embed").unwrap(), d.stage_hash("embed").unwrap());
        assert!(a.stage_hash("nope").is_err());
    }
}
