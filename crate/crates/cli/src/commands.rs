use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use semiconv::backbone::Backbone;
use semiconv::dilemma;
use semiconv::gradsuite::gradient_suite;
use semiconv::kernels::SeedMode;
use semiconv::optim::OptimizerKind;
use semiconv::render::{render_arrows, render_overlay, RgbImage};
use semiconv::seedcut::{evaluate_boxes, instance_boxes, rle_encode, train_seedcut, Rect, SeedcutConfig};
use semiconv::semiconv::{attach_coords, displacement_field, endpoint_spread};
use semiconv::synth::{
    decode_kmeans, embed_dense, generate_scene, score, train, Mode, Scene, SceneConfig, TrainConfig,
};
use semiconv::tensor::{PaddingMode, Tape, Tensor};
use semiconv::InstanceLabeling;

use crate::args::*;
use crate::output::{read_json, Outcome};
use crate::CliError;

const MODEL_FILE: &str = "model.scnv";
const TRAIN_FILE: &str = "train.json";
const SCENE_FILE: &str = "scene.json";

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Conv => Mode::Conv,
            ModeArg::Semiconv => Mode::Semiconv,
        }
    }
}

impl From<PaddingArg> for PaddingMode {
    fn from(p: PaddingArg) -> Self {
        match p {
            PaddingArg::Zero => PaddingMode::Zero,
            PaddingArg::Circular => PaddingMode::Circular,
        }
    }
}

pub fn dilemma(a: &DilemmaArgs, out: &mut Outcome) -> Result<(), CliError> {
    let report = dilemma::run(a.half_extent, a.step, a.stacks, a.common.seed)?;
    out.write_json(&out_path(&a.common, "dilemma.json"), &report)?;
    out.seeds = vec![a.common.seed];
    out.summary = json!({
        "max_conv_spread": report.max_conv_spread,
        "max_semiconv_error": report.max_semiconv_error,
    });
    Ok(())
}

fn scene_config(s: &SceneArgs, seed: u64) -> SceneConfig {
    SceneConfig {
        rows: s.rows,
        cols: s.cols,
        dot_radius: s.radius,
        spacing: s.spacing,
        noise_std: s.noise,
        seed,
    }
}

pub fn synth_gen(a: &SynthGenArgs, out: &mut Outcome) -> Result<(), CliError> {
    let scene = generate_scene(&scene_config(&a.scene, a.common.seed))?;
    out.write_json(&out_path(&a.common, SCENE_FILE), &scene.to_json())?;
    if let Some(path) = &a.render {
        out.write_bytes(path, &RgbImage::from_labels(&scene.gt).to_ppm())?;
    }
    out.seeds = vec![a.common.seed];
    out.summary = json!({ "instances": scene.gt.count(), "h": scene.height(), "w": scene.width() });
    Ok(())
}

fn load_scene(path: &Path) -> Result<Scene, CliError> {
    Ok(Scene::from_json(read_json(path)?)?)
}

fn scene_or_default(path: &Option<PathBuf>, seed: u64) -> Result<Scene, CliError> {
    match path {
        Some(p) => load_scene(p),
        None => Ok(generate_scene(&SceneConfig {
            seed,
            ..SceneConfig::default()
        })?),
    }
}

fn train_config(t: &TrainingArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: t.mode.into(),
        dims: t.dims,
        epochs: t.epochs,
        lr: t.lr,
        optimizer: match t.optimizer {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::SgdMomentum => OptimizerKind::SgdMomentum,
        },
        momentum: t.momentum,
        seed,
        include_background: t.include_background,
        padding: t.padding.into(),
        grad_scale: t.grad_scale,
        ..TrainConfig::default()
    }
}

/// Contents of `train.json` in a run directory.
#[derive(Debug, Serialize, Deserialize)]
struct TrainRecord {
    config: TrainConfig,
    losses: Vec<f64>,
    initial_loss: f64,
    final_loss: f64,
}

fn save_model(out: &mut Outcome, dir: &Path, backbone: &Backbone) -> Result<(), CliError> {
    out.write_bytes(&dir.join(MODEL_FILE), &backbone.to_bytes())
}

pub fn train_cmd(a: &TrainArgs, out: &mut Outcome) -> Result<(), CliError> {
    let scene = scene_or_default(&a.training.scene, a.common.seed)?;
    let cfg = train_config(&a.training, a.common.seed);
    let result = train(&scene, &cfg)?;
    let dir = out_path(&a.common, "run");
    save_model(out, &dir, &result.backbone)?;
    out.write_json(&dir.join(SCENE_FILE), &scene.to_json())?;
    let record = TrainRecord {
        config: cfg,
        initial_loss: result.initial_loss(),
        final_loss: result.final_loss(),
        losses: result.losses,
    };
    out.write_json(&dir.join(TRAIN_FILE), &record)?;
    out.seeds = vec![a.common.seed, scene.config.seed];
    out.summary = json!({ "initial_loss": record.initial_loss, "final_loss": record.final_loss });
    Ok(())
}

struct Run {
    record: TrainRecord,
    backbone: Backbone,
    scene: Scene,
}

fn load_run(dir: &Path) -> Result<Run, CliError> {
    let record: TrainRecord = serde_json::from_value(read_json(&dir.join(TRAIN_FILE))?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", dir.join(TRAIN_FILE).display())))?;
    let backbone = Backbone::load(&dir.join(MODEL_FILE), record.config.padding)?;
    let scene = load_scene(&dir.join(SCENE_FILE))?;
    Ok(Run {
        record,
        backbone,
        scene,
    })
}

fn cluster_scene(
    backbone: &Backbone,
    scene: &Scene,
    mode: Mode,
    k: usize,
    seed: u64,
) -> Result<(InstanceLabeling, semiconv::synth::Score), CliError> {
    let values = embed_dense(backbone, &scene.image, mode)?;
    let tape = Tape::new();
    let field = semiconv::semiconv::EmbeddingField::convolutional(tape.constant(values))?;
    let pred = decode_kmeans(&field, &scene.gt.foreground(), k, seed)?;
    let s = score(&pred, &scene.gt)?;
    Ok((pred, s))
}

/// Largest difference of the network output `Φ` between pixels one grid
/// period apart.
fn corresponding_pixel_gap(phi: &Tensor, scene: &Scene) -> f64 {
    let c = &scene.config;
    let (h, w) = (scene.height(), scene.width());
    let plane = h * w;
    let mut worst: f64 = 0.0;
    for p in scene.gt.foreground() {
        let (x, y) = (p % w, p / w);
        let (x0, y0) = (x % c.spacing, y % c.spacing);
        let base = y0 * w + x0;
        for ch in 0..phi.shape()[0] {
            worst = worst.max((phi.data()[ch * plane + p] - phi.data()[ch * plane + base]).abs());
        }
    }
    worst
}

#[derive(Serialize)]
struct Metrics {
    mode: Mode,
    k: usize,
    mean_iou: f64,
    purity: f64,
    final_loss: f64,
    corresponding_pixel_gap: f64,
    heldout: Option<Value>,
}

pub fn cluster(a: &ClusterArgs, out: &mut Outcome) -> Result<(), CliError> {
    let run = load_run(&a.run)?;
    let mode = a.mode.map(Mode::from).unwrap_or(run.record.config.mode);
    let k = a.k.unwrap_or(run.scene.gt.count());
    let (pred, s) = cluster_scene(&run.backbone, &run.scene, mode, k, a.common.seed)?;
    let phi = run.backbone.forward(&run.scene.image)?;
    let heldout = match a.heldout_seed {
        Some(seed) => {
            let scene = generate_scene(&SceneConfig {
                seed,
                noise_std: a.heldout_noise,
                ..run.scene.config.clone()
            })?;
            let (_, hs) = cluster_scene(&run.backbone, &scene, mode, scene.gt.count(), a.common.seed)?;
            Some(json!({ "seed": seed, "noise_std": a.heldout_noise, "mean_iou": hs.mean_iou, "purity": hs.purity }))
        }
        None => None,
    };
    let metrics = Metrics {
        mode,
        k,
        mean_iou: s.mean_iou,
        purity: s.purity,
        final_loss: run.record.final_loss,
        corresponding_pixel_gap: corresponding_pixel_gap(&phi, &run.scene),
        heldout,
    };
    out.write_json(&out_path(&a.common, "metrics.json"), &metrics)?;
    if let Some(path) = &a.render {
        out.write_bytes(path, &RgbImage::from_labels(&pred).to_ppm())?;
    }
    out.seeds = vec![a.common.seed];
    out.summary = json!({ "mean_iou": s.mean_iou, "purity": s.purity });
    Ok(())
}

#[derive(Serialize)]
struct MaskRecord {
    #[serde(flatten)]
    rect: Rect,
    seed: [usize; 2],
    instance: u16,
    iou: f64,
    counts: Vec<usize>,
}

pub fn seedcut(a: &SeedcutArgs, out: &mut Outcome) -> Result<(), CliError> {
    let scene = scene_or_default(&a.training.scene, a.common.seed)?;
    let boxes: Vec<Rect> = match &a.boxes {
        Some(p) => serde_json::from_value(read_json(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => instance_boxes(&scene.gt, a.box_pad),
    };
    let cfg = SeedcutConfig {
        train: train_config(&a.training, a.common.seed),
        bce_weight: a.bce_weight,
        sigma_init: a.sigma_init,
        learn_sigma: !a.fixed_sigma,
        threshold: a.threshold,
        box_pad: a.box_pad,
    };
    let result = train_seedcut(&scene, &boxes, &cfg)?;
    let field = embed_dense(&result.backbone, &scene.image, cfg.train.mode)?;
    let mode = match a.seed_mode {
        SeedModeArg::Hard => SeedMode::Hard,
        SeedModeArg::Soft => SeedMode::Soft,
    };
    let cuts = evaluate_boxes(&scene, &field, &boxes, &result.kernel, mode, a.threshold)?;
    let w = scene.width();
    let mut masks = Vec::new();
    let mut records = Vec::new();
    for c in &cuts {
        let pixels = c.rect.pixels(w);
        masks.push(
            pixels
                .iter()
                .zip(&c.cut.mask)
                .filter(|(_, &m)| m)
                .map(|(&p, _)| p)
                .collect::<Vec<_>>(),
        );
        let s = pixels[c.cut.seed_index];
        records.push(MaskRecord {
            rect: c.rect,
            seed: [s % w, s / w],
            instance: c.instance,
            iou: c.iou,
            counts: rle_encode(&c.cut.mask),
        });
    }
    let mean_iou = cuts.iter().map(|c| c.iou).sum::<f64>() / cuts.len().max(1) as f64;
    let dir = out_path(&a.common, "seedcut");
    save_model(out, &dir, &result.backbone)?;
    out.write_json(&dir.join("boxes.json"), &boxes)?;
    out.write_json(&dir.join("masks.json"), &records)?;
    out.write_bytes(&dir.join("overlay.ppm"), &render_overlay(&scene.image, &masks)?.to_ppm())?;
    let summary = json!({
        "mean_iou": mean_iou,
        "sigma": result.kernel.sigma(),
        "kernel": result.kernel,
        "losses": result.losses,
        "config": cfg,
    });
    out.write_json(&dir.join("seedcut.json"), &summary)?;
    out.seeds = vec![a.common.seed];
    out.summary = json!({ "mean_iou": mean_iou, "sigma": result.kernel.sigma() });
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut Outcome) -> Result<(), CliError> {
    let reports = gradient_suite(a.instances, a.common.seed)?;
    let passed = reports.iter().all(|r| r.max_rel_error < a.tolerance);
    out.write_json(
        &out_path(&a.common, "gradcheck.json"),
        &json!({ "tolerance": a.tolerance, "passed": passed, "ops": reports }),
    )?;
    out.seeds = vec![a.common.seed];
    out.summary = json!({ "passed": passed });
    if !passed {
        let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        return Err(CliError::Numeric(format!(
            "gradient check failed: worst relative error {worst:e} >= {:e}",
            a.tolerance
        )));
    }
    Ok(())
}

pub fn render_arrows_cmd(a: &RenderArrowsArgs, out: &mut Outcome) -> Result<(), CliError> {
    let run = load_run(&a.run)?;
    if run.record.config.mode != Mode::Semiconv {
        return Err(CliError::Usage(
            "arrows need a run trained in semiconv mode".into(),
        ));
    }
    let phi = run.backbone.forward(&run.scene.image)?;
    let tape = Tape::new();
    let field = attach_coords(tape.constant(phi))?;
    let disp = displacement_field(&field)?;
    let img = render_arrows(&disp, &run.scene.gt, a.stride)?;
    out.write_bytes(&out_path(&a.common, "arrows.ppm"), &img.to_ppm())?;
    out.summary = json!({ "endpoint_spread": endpoint_spread(&field, &run.scene.gt)? });
    Ok(())
}
