//! `viewsynth`: synthesize datasets, train, render, evaluate and inspect
//! plane-sweep view-synthesis models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use viewsynth::autodiff::{op_suite, GradCheckReport, SUITE_OPS};
use viewsynth::geometry::{read_cameras, save_gray16_png, save_gray8_png, Camera, RgbaImage};
use viewsynth::network::end_to_end_gradcheck;
use viewsynth::psv::{PosedImage, Region};
use viewsynth::render::{render_region, tensor_to_image, Rendering};
use viewsynth::run::{evaluate_view, sources_for, synthesize, train_run, RunConfig, RunError};
use viewsynth::synthdata::{Dataset, SceneData};
use viewsynth::training::{choose_sources, Checkpoint, TrainingScene};

#[derive(Parser, Debug)]
#[command(name = "viewsynth", version, about = "Learned view synthesis from plane-sweep volumes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
        /// Views per scene (default: sources + 1).
        #[arg(long)]
        views: Option<usize>,
        /// Image width and height in pixels.
        #[arg(long)]
        size: Option<u32>,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Total step count (including steps before a resume).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a novel view.
    Render {
        #[command(flatten)]
        view: ViewArgs,
        /// Source images (PNG), one per line of --cameras.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        sources: Vec<PathBuf>,
        /// Cameras of the source images, one JSON object per line.
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Cameras file whose first line is the target camera.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Write per-patch timings to patch_timings.csv.
        #[arg(long)]
        timings: bool,
    },
    /// Render a withheld dataset view and compare it with the stored image.
    Eval {
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Dump selection maps, plane colors and the selection argmax.
    Inspect {
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Finite-difference checks of every op and of the whole network.
    Gradcheck {
        /// Maximum relative error per check.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Check a single op ("network" for the whole-network check only).
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        points: Option<usize>,
    },
}

#[derive(Args, Debug, Clone)]
struct ViewArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Scene id or index within the dataset.
    #[arg(long)]
    scene: Option<String>,
    /// View index within the scene.
    #[arg(long)]
    view: Option<usize>,
    /// Pixel rectangle x,y,width,height (default: the whole view).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    region: Option<Vec<i64>>,
    /// Output patch size.
    #[arg(long)]
    tile: Option<usize>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        match e.downcast_ref::<RunError>() {
            Some(RunError::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn base_config(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn finish(cfg: RunConfig) -> Outcome<RunConfig> {
    cfg.resolve().map_err(usage)
}

fn out_dir(cfg: &RunConfig) -> Outcome<PathBuf> {
    cfg.out.clone().ok_or_else(|| usage("--out is required"))
}

fn run(cli: Cli) -> Outcome<()> {
    let mut cfg = base_config(&cli.common)?;
    match cli.command {
        Command::Synth { scenes, views, size } => {
            if let Some(n) = scenes {
                cfg.synth.scenes = n;
            }
            if views.is_some() {
                cfg.synth.views = views;
            }
            if let Some(s) = size {
                cfg.synth.width = s;
                cfg.synth.height = s;
                cfg.synth.focal = s as f64;
            }
            let cfg = finish(cfg)?;
            let out = out_dir(&cfg)?;
            let manifest = synthesize(&cfg, &out)?;
            log::info!("{} scenes, {} views each", manifest.scenes.len(), cfg.views_per_scene());
            println!("{}", out.join(viewsynth::synthdata::MANIFEST_NAME).display());
        }
        Command::Train { dataset, steps, batch_size, learning_rate, checkpoint_every, resume } => {
            let resume = resume.map(|p| Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))).transpose()?;
            if let Some(c) = &resume {
                // A resumed run continues with the configuration it started with.
                if cli.common.config.is_some() {
                    return Err(usage("--config cannot be combined with --resume; the checkpoint carries its configuration"));
                }
                cfg = match &c.meta.run {
                    Some(run) => serde_json::from_value(run.clone()).context("checkpoint run configuration")?,
                    None => RunConfig { training: c.meta.training.clone(), ..RunConfig::default() },
                };
                cfg.model = c.meta.model.clone();
                cfg.sampling = c.meta.sampling;
                cfg.seed = c.meta.seed;
                cfg.out = cli.common.out.clone();
                if cli.common.seed.is_some_and(|s| s != c.meta.seed) {
                    return Err(usage("--seed cannot change on resume"));
                }
            }
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            let t = &mut cfg.training;
            if let Some(v) = steps {
                t.steps = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = learning_rate {
                t.learning_rate = v;
            }
            if let Some(v) = checkpoint_every {
                t.checkpoint_every = v;
            }
            let cfg = finish(cfg)?;
            let out = out_dir(&cfg)?;
            let dataset = cfg.dataset.clone().ok_or_else(|| usage("--dataset is required"))?;
            let data = Dataset::load(&dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
            let scenes = TrainingScene::from_dataset(&data);
            let outcome = train_run(&cfg, &scenes, resume, &out)?;
            if let Some((step, loss)) = outcome.losses.last() {
                log::info!("step {step}: loss {loss:.4}");
            }
            println!("{}", outcome.final_path.display());
        }
        Command::Render { view, sources, cameras, target, timings } => {
            let ckpt = load_checkpoint(&view)?;
            adopt_checkpoint(&mut cfg, &ckpt);
            let cfg = finish(cfg)?;
            let out = out_dir(&cfg)?;
            let (posed, target_cam) = if let Some(cameras) = cameras {
                explicit_inputs(&ckpt, &sources, &cameras, target.as_deref())?
            } else {
                let (scene, index) = dataset_view(&view)?;
                let src = sources_for(&scene, index, ckpt.meta.model.sources)?;
                (src.iter().map(|&i| posed(&scene, i)).collect(), scene.views[index].camera)
            };
            let rendering = render(&ckpt, &posed, &target_cam, &view, &cfg)?;
            cfg.write_to(&out)?;
            let path = out.join("render.png");
            tensor_to_image(&rendering.image).save_rgb_png(&path)?;
            if timings {
                let mut csv = String::from("x0,y0,micros\n");
                for t in &rendering.timings {
                    csv += &format!("{},{},{}\n", t.x0, t.y0, t.micros);
                }
                fs::write(out.join("patch_timings.csv"), csv)?;
            }
            println!("{}", path.display());
        }
        Command::Eval { view } => {
            let ckpt = load_checkpoint(&view)?;
            adopt_checkpoint(&mut cfg, &ckpt);
            let cfg = finish(cfg)?;
            let out = out_dir(&cfg)?;
            let (scene, index) = dataset_view(&view)?;
            let tile = view.tile.unwrap_or(cfg.render.tile);
            let ev = evaluate_view(&ckpt, &scene, index, tile)?;
            cfg.write_to(&out)?;
            let report = serde_json::json!({
                "scene": ev.scene,
                "view": ev.view,
                "sources": ev.sources,
                "mean_l1": ev.metrics.mean_l1,
                "mse": ev.metrics.mse,
                "psnr": ev.metrics.psnr,
                "argmax_agreement": ev.argmax_agreement.map(|a| a.0),
                "unoccluded_pixels": ev.argmax_agreement.map(|a| a.1),
            });
            fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            ev.prediction.save_rgb_png(out.join("prediction.png"))?;
            side_by_side(&ev.prediction, &scene.views[index].image).save_rgb_png(out.join("side_by_side.png"))?;
            println!("L1 {:.6} PSNR {:.2} dB", ev.metrics.mean_l1, ev.metrics.psnr);
        }
        Command::Inspect { view } => {
            let ckpt = load_checkpoint(&view)?;
            adopt_checkpoint(&mut cfg, &ckpt);
            let cfg = finish(cfg)?;
            let out = out_dir(&cfg)?;
            let (scene, index) = dataset_view(&view)?;
            let src = sources_for(&scene, index, ckpt.meta.model.sources)?;
            let posed: Vec<PosedImage> = src.iter().map(|&i| posed(&scene, i)).collect();
            let rendering = render(&ckpt, &posed, &scene.views[index].camera, &view, &cfg)?;
            cfg.write_to(&out)?;
            write_inspection(&rendering, &out)?;
            println!("{}", out.display());
        }
        Command::Gradcheck { tolerance, op, points } => {
            if let Some(t) = tolerance {
                cfg.gradcheck.tolerance = t;
            }
            if let Some(p) = points {
                cfg.gradcheck.points = p;
            }
            let cfg = finish(cfg)?;
            if let Some(op) = op.as_deref() {
                if op != "network" && !SUITE_OPS.contains(&op) {
                    return Err(usage(format!("unknown op {op:?}; choose one of {}, network", SUITE_OPS.join(", "))));
                }
            }
            gradcheck(&cfg, op.as_deref())?;
        }
    }
    Ok(())
}

fn load_checkpoint(view: &ViewArgs) -> Outcome<Checkpoint> {
    let path = view.checkpoint.as_ref().ok_or_else(|| usage("--checkpoint is required"))?;
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn adopt_checkpoint(cfg: &mut RunConfig, ckpt: &Checkpoint) {
    cfg.model = ckpt.meta.model.clone();
    cfg.sampling = ckpt.meta.sampling;
}

fn dataset_view(view: &ViewArgs) -> Outcome<(SceneData, usize)> {
    let path = view.dataset.as_ref().ok_or_else(|| usage("--dataset (or --cameras with --sources) is required"))?;
    let scene = view.scene.as_deref().ok_or_else(|| usage("--scene is required"))?;
    let index = view.view.ok_or_else(|| usage("--view is required"))?;
    let data = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let found = data
        .scenes
        .iter()
        .position(|s| s.id == scene)
        .or_else(|| scene.parse::<usize>().ok().filter(|&i| i < data.scenes.len()))
        .ok_or_else(|| anyhow!("scene {scene:?} is not in {}", path.display()))?;
    let scene = data.scenes.into_iter().nth(found).expect("index is in range");
    if index >= scene.views.len() {
        return Err(anyhow!("view {index} is not in scene {} ({} views)", scene.id, scene.views.len()).into());
    }
    Ok((scene, index))
}

fn posed(scene: &SceneData, i: usize) -> PosedImage {
    PosedImage { image: scene.views[i].image.clone(), camera: scene.views[i].camera }
}

/// Source images from files, reordered nearest-first relative to the target.
fn explicit_inputs(ckpt: &Checkpoint, sources: &[PathBuf], cameras: &Path, target: Option<&Path>) -> Outcome<(Vec<PosedImage>, Camera)> {
    let target = target.ok_or_else(|| usage("--target is required with --cameras"))?;
    let missing: Vec<String> = sources.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(anyhow!("missing source images: {}", missing.join(", ")).into());
    }
    let cams = read_cameras(cameras)?;
    if cams.len() != sources.len() {
        return Err(usage(format!("{} cameras for {} source images", cams.len(), sources.len())));
    }
    let k = ckpt.meta.model.sources;
    if sources.len() < k {
        return Err(usage(format!("the model needs {k} sources, got {}", sources.len())));
    }
    let target_cam = *read_cameras(target)?.first().ok_or_else(|| usage(format!("{} has no camera", target.display())))?;
    let mut all = cams.clone();
    all.push(target_cam);
    let order = choose_sources(&all, cams.len(), k, None).expect("enough sources were checked above");
    let posed = order
        .into_iter()
        .map(|i| {
            let image = RgbaImage::load_png(&sources[i])?;
            if (image.width(), image.height()) != (cams[i].width(), cams[i].height()) {
                bail!("{} does not match its camera size", sources[i].display());
            }
            Ok(PosedImage { image, camera: cams[i] })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((posed, target_cam))
}

fn render(ckpt: &Checkpoint, posed: &[PosedImage], target: &Camera, view: &ViewArgs, cfg: &RunConfig) -> Outcome<Rendering> {
    let region = match &view.region {
        Some(r) if r.len() != 4 => return Err(usage("--region takes x,y,width,height")),
        Some(r) => {
            let (w, h) = (u32::try_from(r[2]), u32::try_from(r[3]));
            match (w, h) {
                (Ok(w), Ok(h)) if w > 0 && h > 0 => Region::new(r[0], r[1], w, h),
                _ => return Err(usage("--region needs a positive width and height")),
            }
        }
        None => Region::full(target),
    };
    let tile = view.tile.unwrap_or(cfg.render.tile);
    if tile == 0 {
        return Err(usage("--tile must be at least 1"));
    }
    Ok(render_region(posed, target, &ckpt.meta.sampling, &ckpt.params, &ckpt.meta.model, region, tile)?)
}

fn side_by_side(left: &RgbaImage, right: &RgbaImage) -> RgbaImage {
    let w = left.width();
    RgbaImage::from_fn(w + right.width(), left.height().max(right.height()), |x, y| {
        let (img, x) = if x < w { (left, x) } else { (right, x - w) };
        if y < img.height() {
            img.pixel(x, y)
        } else {
            [0.0, 0.0, 0.0, 1.0]
        }
    })
    .expect("pixels come from valid images")
}

/// Selection maps as 16-bit grayscale (`select_z{z}.png`), plane colors
/// (`color_z{z}.png`) and the per-pixel argmax plane as 8-bit levels
/// `round(255 z / (D - 1))` (`depth_argmax.png`).
fn write_inspection(r: &Rendering, out: &Path) -> anyhow::Result<()> {
    let (d, h, w) = (r.selection.shape()[0], r.selection.shape()[1], r.selection.shape()[2]);
    let hw = h * w;
    let sel = r.selection.data();
    for z in 0..d {
        save_gray16_png(&sel[z * hw..(z + 1) * hw], w as u32, h as u32, out.join(format!("select_z{z}.png")))?;
        let plane = r.colors.slice_axis(0, z, 1)?.reshaped(&[3, h, w])?;
        tensor_to_image(&plane).save_rgb_png(out.join(format!("color_z{z}.png")))?;
    }
    let levels = (0..hw)
        .map(|p| {
            let best = (0..d).fold(0, |b, z| if sel[z * hw + p] > sel[b * hw + p] { z } else { b });
            ((255 * best) as f64 / (d - 1).max(1) as f64).round() as u8
        })
        .collect();
    save_gray8_png(levels, w as u32, h as u32, out.join("depth_argmax.png"))?;
    Ok(())
}

fn gradcheck(cfg: &RunConfig, op: Option<&str>) -> Outcome<()> {
    let g = &cfg.gradcheck;
    let mut reports: Vec<GradCheckReport> = Vec::new();
    if op != Some("network") {
        reports.extend(op_suite(cfg.seed, g.points, g.step, op)?);
    }
    if op.is_none() || op == Some("network") {
        reports.extend(end_to_end_gradcheck(cfg.seed, g.network_points, g.network_step, g.min_kink_margin)?);
    }
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed(g.tolerance);
        failed += usize::from(!ok);
        println!("{} {:<18} max rel error {:.3e} over {} elements", if ok { "ok  " } else { "FAIL" }, r.op, r.max_rel_error, r.checked);
    }
    if let Some(out) = &cfg.out {
        cfg.write_to(out)?;
        let rows: Vec<_> = reports
            .iter()
            .map(|r| serde_json::json!({"op": r.op, "max_rel_error": r.max_rel_error, "checked": r.checked, "passed": r.passed(g.tolerance)}))
            .collect();
        fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} of {} checks exceed tolerance {:e}", reports.len(), g.tolerance)));
    }
    Ok(())
}

