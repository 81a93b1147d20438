//! Command-line surface: `gen`, `train`, `ablate`, `eval`, `render`.
//!
//! Every run parameter is a `key=value` config entry overridable by the
//! flag of the same name (underscores become hyphens); see `--help` per
//! subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use moedepth::cloud::{
    confidence_mask, detect_flying_points, estimate_normals, recon_metrics, unproject, write_ply,
};
use moedepth::config::RunConfig;
use moedepth::error::Error;
use moedepth::eval::{boundary_metrics, depth_metrics, extract_edges};
use moedepth::grid::{export_color_image, ColorMode, Grid, GridStack};
use moedepth::mixture::combine;
use moedepth::net::{forward, ForwardTrace, ParamStore};
use moedepth::scene::{load_scene, make_dataset, save_scene, split_train_test, Scene};
use moedepth::train::{ablate_entropy, format_log, train};

#[derive(Parser)]
#[command(
    name = "moedepth",
    version,
    about = "Mixture-of-experts depth head: synthetic scenes, training, ablation, evaluation, rendering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset
    Gen(GenArgs),
    /// Train a model and write checkpoint, log, and a gate image
    Train(TrainArgs),
    /// Train once per entropy weight and tabulate gate statistics
    Ablate(TrainArgs),
    /// Evaluate a checkpoint on the test split of a dataset
    Eval(EvalArgs),
    /// Export depth / gate images and point clouds for chosen scenes
    Render(RenderArgs),
}

/// Config file plus per-key override flags (flag = key with hyphens).
#[derive(Args, Default)]
struct ConfigArgs {
    /// Plain-text key=value config applied over the defaults
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    objects_min: Option<usize>,
    #[arg(long)]
    objects_max: Option<usize>,
    #[arg(long)]
    depth_near: Option<f64>,
    #[arg(long)]
    depth_far: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    edge_floor: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    input_channels: Option<usize>,
    #[arg(long)]
    feature_channels: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_e: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    tau_start: Option<f64>,
    #[arg(long)]
    tau_decay: Option<f64>,
    #[arg(long)]
    tau_floor: Option<f64>,
    #[arg(long)]
    freeze_encoder: Option<bool>,
    #[arg(long)]
    edge_threshold: Option<f64>,
    #[arg(long)]
    sobel_scale: Option<bool>,
    #[arg(long)]
    median_scale: Option<bool>,
    #[arg(long)]
    fly_k: Option<usize>,
    #[arg(long)]
    fly_ratio: Option<f64>,
    /// Percentile of lowest-confidence pixels masked during evaluation
    #[arg(long)]
    confidence_mask: Option<f64>,
    /// Comma-separated entropy weights for `ablate`
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory written by `gen`
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, log, and images
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint written by `train`
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory written by `gen`
    #[arg(long)]
    data: PathBuf,
    /// Output directory for reports
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint written by `train`
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory written by `gen`
    #[arg(long)]
    data: PathBuf,
    /// Output directory for images and clouds
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated scene indices to render
    #[arg(long)]
    scenes: String,
}

enum CliError {
    /// Bad arguments or config; exit code 2.
    Usage(String),
    /// Runtime failure; exit code 1.
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(Error::io(path, e)))?;
            cfg.apply_text(&text)?;
        }
        macro_rules! apply {
            ($($field:ident),+ $(,)?) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })+
            };
        }
        apply!(
            height, width, objects_min, objects_max, depth_near, depth_far, noise_std, edge_floor,
            count, input_channels, feature_channels, experts, kernel_size, encoder_layers, sigma,
            lambda_d, lambda_e, steps, lr, weight_decay, tau_start, tau_decay, tau_floor,
            freeze_encoder, edge_threshold, sobel_scale, median_scale, fly_k, fly_ratio,
            confidence_mask, seed,
        );
        if let Some(list) = &self.lambdas {
            cfg.set("lambdas", list)?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    moedepth::parallel::configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 on usage errors and 0 for --help/--version.
            e.exit();
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Render(args) => cmd_render(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            eprintln!("run `moedepth --help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:05}")
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(args: GenArgs) -> CliResult {
    let cfg = args.cfg.build()?;
    if cfg.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if cfg.objects_min > cfg.objects_max {
        return Err(usage("--objects-min must not exceed --objects-max"));
    }
    let scenes = make_dataset(&cfg.scene_spec(), cfg.count, cfg.seed)?;
    create_dir(&args.out)?;
    let mut manifest = format!("count={}\nseed={}\n", cfg.count, cfg.seed);
    for (i, scene) in scenes.iter().enumerate() {
        let name = scene_dir_name(i);
        save_scene(scene, &args.out.join(&name))?;
        let _ = writeln!(manifest, "{name}");
    }
    write_text(&args.out.join("manifest.txt"), &manifest)?;
    write_text(&args.out.join("gen.config"), &cfg.to_text())?;
    println!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Scene>, CliError> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Runtime(Error::io(&manifest_path, e)))?;
    let mut scenes = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.contains('=') {
            continue;
        }
        scenes.push(load_scene(&dir.join(line))?);
    }
    if scenes.is_empty() {
        return Err(CliError::Runtime(Error::format(
            manifest_path,
            "manifest lists no scenes",
        )));
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> CliResult {
    let cfg = args.cfg.build()?;
    let scenes = load_dataset(&args.data)?;
    let (train_split, test_split) = split_train_test(&scenes);
    let train_scenes: Vec<Scene> = train_split.into_iter().cloned().collect();

    let result = train(&cfg.train_config(), &train_scenes)?;
    create_dir(&args.out)?;
    result.params.save_checkpoint(&args.out.join("checkpoint.mdc"))?;
    write_text(&args.out.join("train_log.tsv"), &format_log(&result.log))?;
    write_text(&args.out.join("run.config"), &cfg.to_text())?;

    // Gate-argmax visualization of the first test scene (first train scene
    // when the dataset has no test split).
    let preview = test_split.first().copied().unwrap_or(&train_scenes[0]);
    let trace = forward(&result.params, &preview.input, result.final_tau)?;
    export_color_image(
        trace.output().gate().weights(),
        ColorMode::GateArgmax,
        &args.out.join("gate_argmax.ppm"),
    )?;
    println!(
        "trained {} steps; final loss {:.6}; wrote {}",
        result.log.len(),
        result.log.last().map_or(f64::NAN, |r| r.total),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn cmd_ablate(args: TrainArgs) -> CliResult {
    let cfg = args.cfg.build()?;
    if cfg.lambdas.is_empty() {
        return Err(usage("--lambdas needs at least one value"));
    }
    let scenes = load_dataset(&args.data)?;
    let (train_split, test_split) = split_train_test(&scenes);
    let train_scenes: Vec<Scene> = train_split.into_iter().cloned().collect();
    let heldout = test_split.first().copied().unwrap_or(&train_scenes[0]);

    let entries = ablate_entropy(&cfg.train_config(), &train_scenes, heldout, &cfg.lambdas)?;
    create_dir(&args.out)?;
    let mut table = String::from("lambda_e\tfinal_loss\tmean_gate_entropy\teffective_experts\n");
    for entry in &entries {
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}",
            entry.lambda_e, entry.final_loss, entry.mean_gate_entropy, entry.effective_experts
        );
        let trace = forward(&entry.result.params, &heldout.input, entry.result.final_tau)?;
        export_color_image(
            trace.output().gate().weights(),
            ColorMode::GateArgmax,
            &args.out.join(format!("gate_argmax_lambda_{}.ppm", entry.lambda_e)),
        )?;
    }
    write_text(&args.out.join("ablation.tsv"), &table)?;
    write_text(&args.out.join("run.config"), &cfg.to_text())?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Hard-argmax inference at the annealing floor temperature; the soft gate
/// weights at that temperature provide the per-pixel confidence proxy
/// (maximum gate weight).
fn predict(params: &ParamStore, scene: &Scene, tau: f64) -> Result<(Grid, ForwardTrace), Error> {
    let trace = forward(params, &scene.input, tau)?;
    let hard = combine(trace.output().expert_depths(), trace.output().gate(), true)?;
    Ok((hard, trace))
}

struct SceneEval {
    index: usize,
    values: Vec<f64>,
    report_text: String,
}

/// Column order of `eval_summary.tsv` (documented here; the file itself has
/// exactly one row per scene plus the final dataset-mean row).
const EVAL_COLUMNS: [&str; 17] = [
    "scene", "miou", "precision", "recall", "f1", "abs_rel", "delta_1", "delta_2", "delta_3",
    "acc_mean", "acc_median", "comp_mean", "comp_median", "nc_mean", "nc_median", "flying",
    "flying_masked",
];

fn eval_scene(
    params: &ParamStore,
    scene: &Scene,
    index: usize,
    cfg: &RunConfig,
) -> Result<SceneEval, Error> {
    let edge_cfg = cfg.edge_config();
    let (pred, trace) = predict(params, scene, cfg.tau_floor)?;

    let pred_edges = extract_edges(&pred, &edge_cfg)?;
    let gt_edges = extract_edges(&scene.gt_depth, &edge_cfg)?;
    let boundary = boundary_metrics(&pred_edges, &gt_edges)?;
    let depth = depth_metrics(&pred, &scene.gt_depth, cfg.median_scale)?;

    let pred_cloud = estimate_normals(&unproject(&pred, &scene.intrinsics)?)?;
    let gt_cloud = estimate_normals(&unproject(&scene.gt_depth, &scene.intrinsics)?)?;
    let recon = recon_metrics(&pred_cloud, &gt_cloud)?;

    let (fly_mask, fly_count) = detect_flying_points(&pred_cloud, cfg.fly_k, cfg.fly_ratio)?;
    let confidence = trace.output().gate().max_weight();
    let masked_depth = confidence_mask(&pred, &confidence, cfg.confidence_mask)?;
    // Flying points that survive confidence masking.
    let source = pred_cloud.source().expect("unprojection keeps grid provenance");
    let fly_masked = fly_mask
        .iter()
        .enumerate()
        .filter(|&(i, &f)| f && !masked_depth.data()[source.pixel_index[i]].is_nan())
        .count();

    let mut report = format!("scene={index}\n");
    report.push_str(&boundary.kv_lines("boundary_"));
    report.push_str(&depth.kv_lines("depth_"));
    report.push_str(&recon.kv_lines("recon_"));
    let _ = writeln!(report, "flying={fly_count}");
    let _ = writeln!(report, "flying_masked={fly_masked}");
    let _ = writeln!(report, "confidence_mask_percentile={}", cfg.confidence_mask);

    Ok(SceneEval {
        index,
        values: vec![
            boundary.miou,
            boundary.precision,
            boundary.recall,
            boundary.f1,
            depth.abs_rel,
            depth.delta_1,
            depth.delta_2,
            depth.delta_3,
            recon.acc_mean,
            recon.acc_median,
            recon.comp_mean,
            recon.comp_median,
            recon.nc_mean.unwrap_or(f64::NAN),
            recon.nc_median.unwrap_or(f64::NAN),
            fly_count as f64,
            fly_masked as f64,
        ],
        report_text: report,
    })
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let cfg = args.cfg.build()?;
    let params = ParamStore::load_checkpoint(&args.ckpt)?;
    let scenes = load_dataset(&args.data)?;
    let (_, test_split) = split_train_test(&scenes);
    if test_split.is_empty() {
        return Err(usage("dataset has no test scenes (need count >= 2)"));
    }
    create_dir(&args.out)?;

    // Parallel over scenes; rows collect back in dataset order.
    let rows: Vec<SceneEval> = test_split
        .par_iter()
        .enumerate()
        .map(|(t, scene)| eval_scene(&params, scene, 2 * t + 1, &cfg))
        .collect::<Result<_, Error>>()?;

    let mut summary = String::new();
    for row in &rows {
        let _ = write!(summary, "{}", row.index);
        for v in &row.values {
            let _ = write!(summary, "\t{v}");
        }
        summary.push('\n');
        write_text(
            &args.out.join(format!("eval_scene_{:05}.txt", row.index)),
            &row.report_text,
        )?;
    }
    summary.push_str("mean");
    let n = rows.len() as f64;
    for c in 0..EVAL_COLUMNS.len() - 1 {
        let mean = rows.iter().map(|r| r.values[c]).sum::<f64>() / n;
        let _ = write!(summary, "\t{mean}");
    }
    summary.push('\n');
    write_text(&args.out.join("eval_summary.tsv"), &summary)?;
    println!("evaluated {} test scenes; summary at {}", rows.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

fn cmd_render(args: RenderArgs) -> CliResult {
    let cfg = args.cfg.build()?;
    let params = ParamStore::load_checkpoint(&args.ckpt)?;
    let scenes = load_dataset(&args.data)?;
    let ids: Vec<usize> = args
        .scenes
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad scene id `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    if ids.is_empty() {
        return Err(usage("--scenes needs at least one id"));
    }
    for &id in &ids {
        if id >= scenes.len() {
            return Err(usage(format!(
                "unknown scene id {id}: dataset has {} scenes",
                scenes.len()
            )));
        }
    }
    create_dir(&args.out)?;
    for &id in &ids {
        let scene = &scenes[id];
        let (pred, trace) = predict(&params, scene, cfg.tau_floor)?;
        let weights = trace.output().gate().weights();
        export_color_image(
            &GridStack::from_grid(pred.clone()),
            ColorMode::DepthColormap,
            &args.out.join(format!("depth_{id:05}.ppm")),
        )?;
        export_color_image(
            weights,
            ColorMode::GateArgmax,
            &args.out.join(format!("gate_argmax_{id:05}.ppm")),
        )?;
        export_color_image(
            weights,
            ColorMode::GateBlend,
            &args.out.join(format!("gate_blend_{id:05}.ppm")),
        )?;
        let cloud = estimate_normals(&unproject(&pred, &scene.intrinsics)?)?;
        write_ply(&cloud, &args.out.join(format!("cloud_{id:05}.ply")))?;
    }
    println!("rendered {} scenes to {}", ids.len(), args.out.display());
    Ok(())
}
