//! The `roadsplat` command line.
//!
//! Every command that produces a directory finishes by writing a checksum
//! manifest into it, so two runs can be compared byte for byte.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{
    fit_scene, test_time_optimize, FitConfig, FitResult, FitTrace, Frame, OptimizerConfig,
};
use crate::image::Image;
use crate::io;
use crate::objective::{psnr_masked, ssim_masked_with_grad, MetricReport, DEFAULT_SEGMENTS};
use crate::scene::ElevationMap;
use crate::splat::{render_with, RenderConfig};
use crate::synth::{read_dataset, read_recipe, write_dataset, SceneRecipe};

pub const SCENE_FILE: &str = "scene.ggrd";
pub const ELEVATION_FILE: &str = "elevation.elev";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(
    name = "roadsplat",
    version,
    about = "Grid-Gaussian splatting for road surfaces"
)]
pub struct Cli {
    /// Worker threads (defaults to the number of available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for scene generation; overrides the recipe and config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a recipe.
    Gen(GenArgs),
    /// Render a scene through one camera.
    Render(RenderArgs),
    /// Test-time optimization of a scene against one frame.
    Opt(OptArgs),
    /// Fit elevation and texture to a dataset.
    Fit(FitArgs),
    /// Compare predicted elevation and images with ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON recipe; the default scene when omitted.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Scene file (.ggrd).
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera file.
    #[arg(long)]
    pub camera: PathBuf,
    /// Output PPM image.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write accumulated alpha as an 8-bit PGM.
    #[arg(long)]
    pub alpha: Option<PathBuf>,
    /// Also write expected depth as a float PFM.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Append a timing line to this CSV file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptArgs {
    /// Initial scene file (.ggrd).
    #[arg(long)]
    pub scene: PathBuf,
    /// Training image (PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// Camera of the training image.
    #[arg(long)]
    pub camera: PathBuf,
    /// Held-out image whose quality goes into the trace.
    #[arg(long, requires = "eval_camera")]
    pub eval_image: Option<PathBuf>,
    /// Camera of the held-out image.
    #[arg(long, requires = "eval_image")]
    pub eval_camera: Option<PathBuf>,
    /// Iteration count; overrides the config file.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output directory for the optimized scene and trace.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory as written by `gen`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Iteration count; overrides the config file.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output directory for the fitted scene, elevation, trace and metrics.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted elevation map (.elev).
    #[arg(long, requires = "gt_elevation")]
    pub pred_elevation: Option<PathBuf>,
    /// Ground-truth elevation map (.elev).
    #[arg(long, requires = "pred_elevation")]
    pub gt_elevation: Option<PathBuf>,
    /// Predicted images, paired in order with `--gt-image`.
    #[arg(long)]
    pub pred_image: Vec<PathBuf>,
    /// Ground-truth images (PPM).
    #[arg(long)]
    pub gt_image: Vec<PathBuf>,
    /// Number of longitudinal segments for the per-segment AAE.
    #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
    pub segments: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Contents of the `--config` file. Absent keys keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    /// Settings of `opt`.
    pub opt: OptimizerConfig,
    /// Settings of `fit`.
    pub fit: FitConfig,
}

impl CliConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let config: CliConfig =
            toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        config.opt.validate()?;
        config.fit.optimizer.validate()?;
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Wall time and coverage of one render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderReport {
    pub width: usize,
    pub height: usize,
    pub gaussians: usize,
    pub covered: usize,
    pub ms: f64,
}

impl RenderReport {
    pub const CSV_HEADER: &'static str = "width,height,gaussians,covered,ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.width, self.height, self.gaussians, self.covered, self.ms
        )
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the dataset of `recipe` into `out` and returns the manifest.
pub fn cmd_gen(recipe: &SceneRecipe, out: &Path) -> Result<String> {
    recipe.validate()?;
    write_dataset(recipe, out)?;
    io::write_manifest(out)
}

pub fn cmd_render(
    scene: &Path,
    camera: &Path,
    out: &Path,
    alpha: Option<&Path>,
    depth: Option<&Path>,
) -> Result<RenderReport> {
    let grid = io::read_grid(scene)?;
    let cam = io::read_camera(camera)?;
    let start = Instant::now();
    let rendered = render_with(&grid, &cam, &RenderConfig::default())?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    rendered.rgb.write_ppm(out)?;
    if let Some(p) = alpha {
        rendered.alpha.write_pgm(p)?;
    }
    if let Some(p) = depth {
        rendered.depth.write_pfm(p)?;
    }
    Ok(RenderReport {
        width: cam.width,
        height: cam.height,
        gaussians: grid.len(),
        covered: rendered.covered_count(),
        ms,
    })
}

fn read_frame(image: &Path, camera: &Path) -> Result<Frame> {
    let camera = io::read_camera(camera)?;
    let image = Image::read_ppm(image)?;
    if (image.width, image.height) != (camera.width, camera.height) {
        return Err(Error::shape(
            format!("{}x{} image for the camera", camera.width, camera.height),
            format!("{}x{}", image.width, image.height),
        ));
    }
    Ok(Frame { image, camera })
}

fn write_trace(dir: &Path, trace: &FitTrace) -> Result<()> {
    io::write_bytes(&dir.join(TRACE_FILE), trace.to_csv().as_bytes())
}

/// Optimizes the scene in `scene` against one frame and writes the refined
/// scene, its trace and a manifest into `out`.
pub fn cmd_opt(
    scene: &Path,
    frame: (&Path, &Path),
    eval: Option<(&Path, &Path)>,
    config: &OptimizerConfig,
    out: &Path,
) -> Result<FitTrace> {
    let grid = io::read_grid(scene)?;
    let frame = read_frame(frame.0, frame.1)?;
    let eval = eval.map(|(i, c)| read_frame(i, c)).transpose()?;
    let (mut refined, trace) = test_time_optimize(&grid, &frame, eval.as_ref(), config)?;
    io::quantize_grid(&mut refined);
    create_dir(out)?;
    io::write_grid(&out.join(SCENE_FILE), &refined)?;
    write_trace(out, &trace)?;
    io::write_manifest(out)?;
    Ok(trace)
}

/// Fits a scene to the dataset in `dataset`. When the dataset carries ground
/// truth the elevation metrics are returned and written alongside.
pub fn cmd_fit(
    dataset: &Path,
    config: &FitConfig,
    out: &Path,
) -> Result<(FitResult, Option<MetricReport>)> {
    let ds = read_dataset(dataset)?;
    let mut result = fit_scene(&ds.spec, &ds.frames, config)?;
    io::quantize_grid(&mut result.grid);
    let (lo, hi) = (ds.spec.h_min_m, ds.spec.h_max_m);
    result
        .elevation
        .values
        .mapv_inplace(|h| io::to_f32_within(h, lo, hi));
    let report = match &ds.gt_elevation {
        Some(gt) => {
            let mut r =
                MetricReport::empty().with_elevation(&result.elevation, gt, DEFAULT_SEGMENTS)?;
            // Image quality of the stored scene on the evaluation view.
            let frame = &ds.frames[config.eval_frame];
            let view = render_with(&result.grid, &frame.camera, &config.optimizer.render)?;
            r.psnr_db = psnr_masked(&view.rgb, &frame.image, &view.coverage)?;
            r.ssim =
                ssim_masked_with_grad(&view.rgb, &frame.image, &view.coverage)?.map(|(s, _)| s);
            Some(r)
        }
        None => None,
    };

    create_dir(out)?;
    io::write_grid(&out.join(SCENE_FILE), &result.grid)?;
    io::write_elevation(&out.join(ELEVATION_FILE), &result.elevation)?;
    write_trace(out, &result.trace)?;
    if let Some(r) = &report {
        io::write_bytes(&out.join(METRICS_FILE), r.to_json().as_bytes())?;
    }
    io::write_manifest(out)?;
    Ok((result, report))
}

pub fn cmd_eval(
    elevation: Option<(&ElevationMap, &ElevationMap)>,
    images: (&[Image], &[Image]),
    segments: usize,
) -> Result<MetricReport> {
    if elevation.is_none() && images.0.is_empty() {
        return Err(Error::invalid(
            "eval inputs",
            "nothing to compare; pass elevations or images",
        ));
    }
    let mut report = MetricReport::empty();
    if let Some((pred, gt)) = elevation {
        report = report.with_elevation(pred, gt, segments)?;
    }
    if !images.0.is_empty() || !images.1.is_empty() {
        report = report.with_images(images.0, images.1)?;
    }
    Ok(report)
}

fn read_images(paths: &[PathBuf]) -> Result<Vec<Image>> {
    paths.iter().map(|p| Image::read_ppm(p)).collect()
}

/// Runs the parsed command line, writing human-readable results to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let config = match &cli.config {
        Some(p) => CliConfig::read(p)?,
        None => CliConfig::default(),
    };
    let threads = cli.threads.or(config.threads);
    if threads == Some(0) {
        return Err(Error::config("threads", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    let text = pool.install(|| dispatch(cli, &config))?;
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Runs the command and returns the text to print.
fn dispatch(cli: &Cli, config: &CliConfig) -> Result<String> {
    match &cli.command {
        Command::Gen(a) => {
            let mut recipe = match &a.recipe {
                Some(p) => read_recipe(p)?,
                None => SceneRecipe::default(),
            };
            if let Some(seed) = cli.seed.or(config.seed) {
                recipe.seed = seed;
            }
            let manifest = cmd_gen(&recipe, &a.out)?;
            Ok(manifest)
        }
        Command::Render(a) => {
            let report = cmd_render(
                &a.scene,
                &a.camera,
                &a.out,
                a.alpha.as_deref(),
                a.depth.as_deref(),
            )?;
            if let Some(p) = &a.trace {
                let mut text = if p.exists() {
                    std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?
                } else {
                    format!("{}\n", RenderReport::CSV_HEADER)
                };
                text.push_str(&report.csv_line());
                text.push('\n');
                io::write_bytes(p, text.as_bytes())?;
            }
            Ok(format!(
                "gaussians={}\ncovered={}\nrender_ms={:.3}\n",
                report.gaussians, report.covered, report.ms
            ))
        }
        Command::Opt(a) => {
            let mut opt = config.opt;
            if let Some(n) = a.iters {
                opt.iterations = n;
            }
            let eval = a.eval_image.as_deref().zip(a.eval_camera.as_deref());
            let trace = cmd_opt(&a.scene, (&a.image, &a.camera), eval, &opt, &a.out)?;
            let last = trace.len() - 1;
            Ok(format!(
                    "iterations={last}\nloss_initial={}\nloss_final={}\npsnr_initial_db={}\npsnr_final_db={}\n",
                    trace.loss[0], trace.loss[last], trace.psnr[0], trace.psnr[last]
            ))
        }
        Command::Fit(a) => {
            let mut fit = config.fit;
            if let Some(n) = a.iters {
                fit.optimizer.iterations = n;
            }
            let (result, report) = cmd_fit(&a.dataset, &fit, &a.out)?;
            let last = result.trace.len() - 1;
            let mut text = format!(
                "iterations={last}\nloss_final={}\n",
                result.trace.loss[last]
            );
            if let Some(r) = report {
                text.push_str(&r.to_key_value());
            }
            Ok(text)
        }
        Command::Eval(a) => {
            let elevations = match (&a.pred_elevation, &a.gt_elevation) {
                (Some(p), Some(g)) => Some((io::read_elevation(p)?, io::read_elevation(g)?)),
                _ => None,
            };
            let pred = read_images(&a.pred_image)?;
            let gt = read_images(&a.gt_image)?;
            let report = cmd_eval(
                elevations.as_ref().map(|(p, g)| (p, g)),
                (&pred, &gt),
                a.segments,
            )?;
            if let Some(p) = &a.json {
                io::write_bytes(p, report.to_json().as_bytes())?;
            }
            Ok(report.to_key_value())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from([
            "roadsplat",
            "gen",
            "--out",
            "d",
            "--threads",
            "2",
            "--seed",
            "7",
        ])
        .unwrap();
        assert_eq!(cli.threads, Some(2));
        assert_eq!(cli.seed, Some(7));
        assert!(matches!(cli.command, Command::Gen(_)));
    }

    #[test]
    fn eval_image_needs_its_camera() {
        let args = [
            "roadsplat",
            "opt",
            "--scene",
            "s",
            "--image",
            "i",
            "--camera",
            "c",
            "--out",
            "o",
            "--eval-image",
            "e",
        ];
        assert!(Cli::try_parse_from(args).is_err());
    }

    #[test]
    fn config_defaults_match_library_defaults() {
        let c = CliConfig::parse("", Path::new("c.toml")).unwrap();
        assert_eq!(c.opt, OptimizerConfig::default());
        assert_eq!(c.fit, FitConfig::default());
        assert_eq!(c.threads, None);
    }

    #[test]
    fn config_overrides_and_rejects() {
        let c = CliConfig::parse(
            "seed = 4\n[opt]\niterations = 3\n[opt.lr]\nsh0 = 0.2\n[fit]\nelevation_warmup = 2\n",
            Path::new("c.toml"),
        )
        .unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.opt.iterations, 3);
        assert_eq!(c.opt.lr.sh0, 0.2);
        assert_eq!(c.fit.elevation_warmup, 2);

        let err = CliConfig::parse("[opt]\nitrations = 3\n", Path::new("c.toml"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("itrations"), "{err}");
        let err = CliConfig::parse("[opt.lr]\nopacity = -1.0\n", Path::new("c.toml"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("lr.opacity"), "{err}");
    }

    #[test]
    fn eval_needs_some_input() {
        assert!(cmd_eval(None, (&[], &[]), DEFAULT_SEGMENTS).is_err());
    }

    #[test]
    fn render_report_csv() {
        let r = RenderReport {
            width: 4,
            height: 2,
            gaussians: 9,
            covered: 3,
            ms: 1.23456,
        };
        assert_eq!(r.csv_line(), "4,2,9,3,1.235");
    }
}
