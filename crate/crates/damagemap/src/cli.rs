//! The `damagemap` command line: `prepare`, `train`, `eval`, `infer`, and
//! `synth` subcommands over the library pipeline.
//!
//! Every subcommand resolves its configuration (file, then `DAMAGEMAP_*`
//! environment overrides, then explicit flags), writes a
//! [`RunManifest`](crate::manifest::RunManifest) into the output directory
//! before doing any work, and finalizes it on exit. The process exits 0 only
//! when the full requested artifact set was written. All randomness flows
//! from explicit seeds; nothing is seeded from the clock.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, PipelineConfig};
use crate::datapipe::{
    normalize, tile_scene, DatasetIndex, DEFAULT_MEAN, DEFAULT_STD, MANIFEST_FILE, MASK_DIR,
    POST_DIR, PRE_DIR,
};
use crate::error::{Error, Result};
use crate::inference::{
    format_class_counts, predict_scene, predict_tile, render_overlay, write_rgb8_png,
    OverlaySpec, TilingPlan,
};
use crate::manifest::{RunManifest, RunStatus, MANIFEST_NAME};
use crate::metrics::{export_report, write_metrics_csv, EpochRecord, MetricReport};
use crate::schema::{
    compute_class_weights, read_rgb_png, write_mask_png, write_rgb_png, DamageClass,
};
use crate::synthgen::{generate_dataset, SceneSpec, PROVENANCE_FILE};
use crate::trainer::{
    class_weights_from_masks, evaluate, load_val_batches, run_multi, split_for_seed,
};

/// Name of the per-dataset statistics report `prepare` writes.
pub const STATS_FILE: &str = "stats.csv";

#[derive(Parser, Debug)]
#[command(
    name = "damagemap",
    version,
    about = "Typology-based building damage mapping from pre/post-disaster image pairs",
    after_help = "Config fields can be overridden via environment variables with the \
                  DAMAGEMAP_ prefix, e.g. DAMAGEMAP_TRAIN__LR0=5e-4 sets train.lr0."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Print only errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tile aligned pre/post/mask scene rasters into the triplet dataset
    /// layout and report class statistics.
    Prepare(PrepareArgs),
    /// Train one run per seed; write checkpoints, logs, and the metrics
    /// report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset and write the
    /// metrics CSV.
    Eval(EvalArgs),
    /// Predict a pre/post image pair; write the class mask, color overlay,
    /// and per-class pixel counts.
    Infer(InferArgs),
    /// Generate a deterministic synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Directory holding pre/, post/, mask/ aligned scene rasters.
    #[arg(long)]
    pub input: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Tile side in pixels; edge remainders are discarded.
    #[arg(long, default_value_t = 512)]
    pub side: usize,
    /// Optional TOML config recorded in the run manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory in the triplet layout.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for checkpoints, logs, and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file; omitted sections fall back to defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seed list overriding the config's `train.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory in the triplet layout.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Which part of the seeded partition to score.
    #[arg(long, value_enum, default_value_t = SplitName::Val)]
    pub split: SplitName,
    /// Output directory for the metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file (split mode and batch size are honored here).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split seed; must agree with the seed recorded in the checkpoint.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Pre-disaster image (PNG).
    #[arg(long)]
    pub pre: PathBuf,
    /// Post-disaster image (PNG), aligned with --pre.
    #[arg(long)]
    pub post: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; files are named after the post image's stem.
    #[arg(long)]
    pub out: PathBuf,
    /// Sliding-window stride for scenes larger than the model tile
    /// (clamped to the tile side).
    #[arg(long, default_value_t = 256)]
    pub stride: usize,
    /// Overlay opacity in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Skip the per-class pixel-count sidecar.
    #[arg(long)]
    pub no_counts: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of triplets to generate.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Base seed; scene i derives its own stream from seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Scene side in pixels.
    #[arg(long, default_value_t = 128)]
    pub side: usize,
    /// Buildings per scene.
    #[arg(long, default_value_t = 6)]
    pub buildings: usize,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version here as "errors" with exit 0.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one parsed invocation.
pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(args, cli.quiet),
        Command::Train(args) => cmd_train(args, cli.quiet),
        Command::Eval(args) => cmd_eval(args, cli.quiet),
        Command::Infer(args) => cmd_infer(args, cli.quiet),
        Command::Synth(args) => cmd_synth(args, cli.quiet),
    }
}

fn note(quiet: bool, msg: std::fmt::Arguments) {
    if !quiet {
        println!("{msg}");
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Writes the manifest in `running` state, runs the body, then finalizes the
/// manifest with the artifact list or the error.
fn run_with_manifest(
    out: &Path,
    mut manifest: RunManifest,
    body: impl FnOnce(&mut Vec<String>) -> Result<()>,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    manifest.write(out)?;
    let mut artifacts = vec![MANIFEST_NAME.to_string()];
    match body(&mut artifacts) {
        Ok(()) => {
            manifest.finalize(artifacts, RunStatus::Ok);
            manifest.write(out)?;
            Ok(())
        }
        Err(e) => {
            manifest.finalize(artifacts, RunStatus::Error(e.to_string()));
            // Best effort: the original error is what the operator needs.
            let _ = manifest.write(out);
            Err(e)
        }
    }
}

fn cmd_prepare(args: &PrepareArgs, quiet: bool) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    if args.side == 0 {
        return Err(Error::Config("side must be positive".into()));
    }
    // Validate the input tree before creating any output.
    let index = DatasetIndex::scan(&args.input)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("input".to_string(), path_str(&args.input));
    let manifest = RunManifest::begin("prepare", config, inputs, vec![]);

    run_with_manifest(&args.out, manifest, |artifacts| {
        for dir in [PRE_DIR, POST_DIR, MASK_DIR] {
            let p = args.out.join(dir);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut tile_ids = Vec::new();
        let mut counts: BTreeMap<DamageClass, u64> =
            DamageClass::DAMAGE.iter().map(|&c| (c, 0)).collect();
        for id in index.ids() {
            let scene = index.load_triplet(&id)?;
            for tile in tile_scene(&scene.pre, &scene.post, &scene.mask, args.side, &id)? {
                write_rgb_png(&args.out.join(PRE_DIR).join(format!("{}.png", tile.id)), &tile.pre)?;
                write_rgb_png(&args.out.join(POST_DIR).join(format!("{}.png", tile.id)), &tile.post)?;
                write_mask_png(&args.out.join(MASK_DIR).join(format!("{}.png", tile.id)), &tile.mask)?;
                for &v in tile.mask.iter() {
                    let class = DamageClass::from_id(v)?;
                    if class != DamageClass::Background {
                        *counts.get_mut(&class).unwrap() += 1;
                    }
                }
                tile_ids.push(tile.id);
            }
        }
        if tile_ids.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no scene yields a full {0}x{0} tile; reduce --side",
                args.side
            )));
        }
        let manifest_path = args.out.join(MANIFEST_FILE);
        let mut listing = tile_ids.join("\n");
        listing.push('\n');
        std::fs::write(&manifest_path, listing).map_err(|e| Error::io(&manifest_path, e))?;
        write_stats(&args.out.join(STATS_FILE), &counts)?;

        artifacts.extend(
            [PRE_DIR, POST_DIR, MASK_DIR, MANIFEST_FILE, STATS_FILE]
                .iter()
                .map(|s| s.to_string()),
        );
        note(
            quiet,
            format_args!("prepared {} tiles into {}", tile_ids.len(), args.out.display()),
        );
        Ok(())
    })
}

/// Writes per-class pixel counts, frequency shares, and the derived loss
/// weights. Classes absent from the dataset are reported with count 0 and an
/// empty weight column.
fn write_stats(path: &Path, counts: &BTreeMap<DamageClass, u64>) -> Result<()> {
    let weights = if counts.values().all(|&c| c > 0) {
        Some(compute_class_weights(counts)?)
    } else {
        None
    };
    let total: u64 = counts.values().sum();
    let mut out = String::from("class,name,pixels,share,weight\n");
    for (&class, &n) in counts {
        let share = if total == 0 { 0.0 } else { n as f64 / total as f64 };
        let weight = weights
            .as_ref()
            .map(|w| format!("{:.6}", w.weight_of(class)))
            .unwrap_or_default();
        out.push_str(&format!("{},{},{},{:.6},{}\n", class.id(), class, n, share, weight));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn summarize(summary: &crate::metrics::RunSummary) -> String {
    let mut lines = Vec::new();
    for (class, scores) in &summary.per_class {
        lines.push(format!(
            "  {class}: iou {:.3} ± {:.3}, f1 {:.3} ± {:.3}",
            scores.iou.mean, scores.iou.std, scores.f1.mean, scores.f1.std
        ));
    }
    lines.push(format!(
        "  macro: iou {:.3} ± {:.3}, f1 {:.3} ± {:.3} (n = {})",
        summary.macro_avg.iou.mean,
        summary.macro_avg.iou.std,
        summary.macro_avg.f1.mean,
        summary.macro_avg.f1.std,
        summary.n_runs
    ));
    lines.join("\n")
}

fn cmd_train(args: &TrainArgs, quiet: bool) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seeds) = &args.seeds {
        config.train.seeds = seeds.clone();
    }
    config.validate()?;
    let index = DatasetIndex::scan(&args.dataset)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".to_string(), path_str(&args.dataset));
    let seeds = config.train.seeds.clone();
    let manifest = RunManifest::begin("train", config.clone(), inputs, seeds);

    run_with_manifest(&args.out, manifest, |artifacts| {
        let (outcomes, summary) =
            run_multi(&index, &config.model, &config.train, &config.augment)?;

        let ckpt_dir = args.out.join("checkpoints");
        let log_dir = args.out.join("logs");
        for dir in [&ckpt_dir, &log_dir] {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for outcome in &outcomes {
            let ckpt = ckpt_dir.join(format!("{}.ckpt", outcome.run_id));
            crate::checkpoint::save(&ckpt, &outcome.result.model, &outcome.result.meta)?;
            let log = log_dir.join(format!("{}.jsonl", outcome.run_id));
            outcome.result.log.write_jsonl(&log)?;
            artifacts.push(format!("checkpoints/{}.ckpt", outcome.run_id));
            artifacts.push(format!("logs/{}.jsonl", outcome.run_id));
            note(
                quiet,
                format_args!(
                    "{}: best epoch {} (val loss {:.6}) after {} epochs",
                    outcome.run_id,
                    outcome.result.meta.epoch,
                    outcome.result.meta.val_loss,
                    outcome.result.log.records.len()
                ),
            );
        }

        let finals: Vec<MetricReport> =
            outcomes.iter().map(|o| o.final_report.clone()).collect();
        let histories: Vec<Vec<EpochRecord>> =
            outcomes.iter().map(|o| o.result.history.clone()).collect();
        let report_dir = args.out.join("report");
        let written = export_report(&report_dir, &summary, &finals, &histories)?;
        for p in written {
            if let Ok(rel) = p.strip_prefix(&args.out) {
                artifacts.push(rel.to_string_lossy().into_owned());
            }
        }
        note(quiet, format_args!("validation summary:\n{}", summarize(&summary)));
        Ok(())
    })
}

fn cmd_eval(args: &EvalArgs, quiet: bool) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let (model, meta) = crate::checkpoint::load::<f32>(&args.checkpoint)?;
    let index = DatasetIndex::scan(&args.dataset)?;

    let recorded: Option<u64> =
        meta.extras.get("split_seed").and_then(|s| s.parse().ok());
    let seed = match (args.seed, recorded) {
        (Some(flag), Some(ckpt)) if flag != ckpt => {
            return Err(Error::Config(format!(
                "--seed {flag} does not match the checkpoint's split seed {ckpt}; \
                 evaluating on a different partition than the model trained against \
                 would contaminate the held-out sets"
            )));
        }
        (Some(flag), _) => flag,
        (None, Some(ckpt)) => ckpt,
        (None, None) => {
            return Err(Error::Config(
                "checkpoint records no split seed; pass --seed explicitly".into(),
            ));
        }
    };

    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".to_string(), path_str(&args.dataset));
    inputs.insert("checkpoint".to_string(), path_str(&args.checkpoint));
    let manifest = RunManifest::begin("eval", config.clone(), inputs, vec![seed]);

    run_with_manifest(&args.out, manifest, |artifacts| {
        let split = split_for_seed(&index, &config.train, seed)?;
        let (name, ids) = match args.split {
            SplitName::Train => ("train", &split.train_ids),
            SplitName::Val => ("val", &split.val_ids),
            SplitName::Test => ("test", &split.test_ids),
        };
        if ids.is_empty() {
            return Err(Error::Config(format!(
                "{name} split is empty under split mode {:?}",
                config.train.split_mode
            )));
        }
        // Deterministic grid cropping at the checkpoint's native tile size;
        // evaluation never augments.
        let policy = crate::datapipe::AugmentationPolicy::identity(model.config().input_side);
        let weights = class_weights_from_masks(&index, &split.train_ids)?;
        let batches = load_val_batches(&index, ids, &config.train, &policy, seed)?;
        let run_id = meta
            .extras
            .get("run_id")
            .cloned()
            .unwrap_or_else(|| format!("seed{seed}"));
        let (loss, report) = evaluate(
            &model,
            &batches,
            &weights,
            config.train.dice_smoothing,
            &run_id,
            meta.epoch,
        )?;
        let csv = args.out.join("metrics.csv");
        write_metrics_csv(&csv, &[report.clone()])?;
        artifacts.push("metrics.csv".to_string());
        note(
            quiet,
            format_args!(
                "{name} split of seed {seed}: loss {loss:.6}, macro f1 {:.4}, macro iou {:.4}",
                report.macro_avg.f1, report.macro_avg.iou
            ),
        );
        Ok(())
    })
}

fn cmd_infer(args: &InferArgs, quiet: bool) -> Result<()> {
    if !(args.alpha > 0.0 && args.alpha <= 1.0) {
        return Err(Error::Config(format!(
            "alpha must lie in (0, 1], got {}",
            args.alpha
        )));
    }
    if args.stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let (model, _meta) = crate::checkpoint::load::<f32>(&args.checkpoint)?;
    let pre_raw = read_rgb_png(&args.pre)?;
    let post_raw = read_rgb_png(&args.post)?;
    if pre_raw.dim() != post_raw.dim() {
        return Err(Error::InvalidInput(format!(
            "pre {:?} and post {:?} images must be aligned to the same size",
            pre_raw.dim(),
            post_raw.dim()
        )));
    }

    let mut inputs = BTreeMap::new();
    inputs.insert("pre".to_string(), path_str(&args.pre));
    inputs.insert("post".to_string(), path_str(&args.post));
    inputs.insert("checkpoint".to_string(), path_str(&args.checkpoint));
    let manifest = RunManifest::begin("infer", PipelineConfig::default(), inputs, vec![]);

    run_with_manifest(&args.out, manifest, |artifacts| {
        let pre = normalize(&pre_raw, DEFAULT_MEAN, DEFAULT_STD)?;
        let post = normalize(&post_raw, DEFAULT_MEAN, DEFAULT_STD)?;
        let (_, h, w) = pre.dim();
        let window = model.config().input_side;
        let mask = if (h, w) == (window, window) {
            predict_tile(&model, pre.view(), post.view())?
        } else {
            let stride = args.stride.min(window);
            let plan = TilingPlan::new(h, w, window, stride)?;
            predict_scene(&model, pre.view(), post.view(), &plan)?
        };

        let name = args
            .post
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".to_string());
        let mask_path = args.out.join(format!("{name}_mask.png"));
        write_mask_png(&mask_path, &mask)?;
        artifacts.push(format!("{name}_mask.png"));

        let spec = OverlaySpec { alpha: args.alpha, ..OverlaySpec::default() };
        let overlay = render_overlay(post_raw.view(), mask.view(), &spec)?;
        let overlay_path = args.out.join(format!("{name}_overlay.png"));
        write_rgb8_png(&overlay_path, &overlay)?;
        artifacts.push(format!("{name}_overlay.png"));

        if !args.no_counts {
            let counts_path = args.out.join(format!("{name}_counts.txt"));
            std::fs::write(&counts_path, format_class_counts(mask.view())?)
                .map_err(|e| Error::io(&counts_path, e))?;
            artifacts.push(format!("{name}_counts.txt"));
        }
        let damaged = mask.iter().filter(|&&v| v != 0).count();
        note(
            quiet,
            format_args!(
                "predicted {}x{} scene: {damaged} damage pixels ({:.2}% of area)",
                h,
                w,
                100.0 * damaged as f64 / (h * w) as f64
            ),
        );
        Ok(())
    })
}

fn cmd_synth(args: &SynthArgs, quiet: bool) -> Result<()> {
    let spec = SceneSpec {
        seed: args.seed,
        side: args.side,
        n_buildings: args.buildings,
        ..SceneSpec::default()
    };
    spec.validate()?;
    let manifest =
        RunManifest::begin("synth", PipelineConfig::default(), BTreeMap::new(), vec![args.seed]);
    run_with_manifest(&args.out, manifest, |artifacts| {
        let index = generate_dataset(args.n, args.seed, &spec, &args.out)?;
        artifacts.extend(
            [PRE_DIR, POST_DIR, MASK_DIR, MANIFEST_FILE, PROVENANCE_FILE]
                .iter()
                .map(|s| s.to_string()),
        );
        note(
            quiet,
            format_args!(
                "generated {} synthetic triplets at side {} in {}",
                index.len(),
                args.side,
                args.out.display()
            ),
        );
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn cli(cmd: Command) -> Cli {
        Cli { command: cmd, quiet: true }
    }

    fn synth_into(dir: &Path, n: usize, side: usize, seed: u64) {
        let args = SynthArgs { n, seed, out: dir.to_path_buf(), side, buildings: 3 };
        dispatch(&cli(Command::Synth(args))).unwrap();
    }

    fn fixture_config(dir: &Path, side: usize, epochs: usize) -> PathBuf {
        let path = dir.join("config.toml");
        let text = format!(
            r#"
[model]
input_side = {side}
stage_channels = [4, 8]
diff_block_levels = 1
attn_layers_per_diff_block = 1
attn_heads = 1
attn_ff_expansion = 2
stem_channels = 2

[train]
max_epochs = {epochs}
seeds = [7]
split_mode = "overfit"

[augment]
crop_side = {side}
hflip_prob = 0.0
vflip_prob = 0.0
blur_prob = 0.0
"#
        );
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn synth_writes_dataset_manifest_and_run_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("set");
        synth_into(&out, 3, 32, 11);
        assert!(out.join(PRE_DIR).join("00000.png").is_file());
        assert!(out.join(PROVENANCE_FILE).is_file());
        let manifest = RunManifest::read(&out.join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest.subcommand, "synth");
        assert_eq!(manifest.status, RunStatus::Ok);
        assert!(manifest.artifacts.contains(&MANIFEST_FILE.to_string()));
        assert_eq!(manifest.seeds, vec![11]);
    }

    #[test]
    fn prepare_tiles_scenes_and_reports_stats() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        // One 70x70 scene tiled at 32 → 4 tiles, remainders discarded.
        for sub in [PRE_DIR, POST_DIR, MASK_DIR] {
            std::fs::create_dir_all(raw.join(sub)).unwrap();
        }
        let image = Array3::from_shape_fn((3, 70, 70), |(c, r, col)| {
            ((c + r + col) % 17) as f32 / 16.0
        });
        let mut mask = Array2::<u8>::zeros((70, 70));
        mask[(3, 4)] = 1;
        mask[(40, 40)] = 4;
        write_rgb_png(&raw.join(PRE_DIR).join("scene.png"), &image).unwrap();
        write_rgb_png(&raw.join(POST_DIR).join("scene.png"), &image).unwrap();
        crate::schema::write_mask_png(&raw.join(MASK_DIR).join("scene.png"), &mask).unwrap();

        let out = dir.path().join("tiled");
        let args = PrepareArgs { input: raw.clone(), out: out.clone(), side: 32, config: None };
        dispatch(&cli(Command::Prepare(args))).unwrap();

        let index = DatasetIndex::scan(&out).unwrap();
        assert_eq!(index.len(), 4);
        assert_eq!(index.ids()[0], "scene_r000c000");
        let stats = std::fs::read_to_string(out.join(STATS_FILE)).unwrap();
        assert!(stats.starts_with("class,name,pixels,share,weight\n"), "got:\n{stats}");
        assert!(stats.contains("1,partial_roof_damage,1,"), "got:\n{stats}");
        // Absent classes appear with zero pixels and no weight.
        assert!(stats.contains("2,total_roof_damage,0,0.000000,\n"), "got:\n{stats}");

        // Rerun reproduces the same bytes for the dataset artifacts.
        let pre_bytes = std::fs::read(out.join(PRE_DIR).join("scene_r000c000.png")).unwrap();
        let stats_bytes = std::fs::read(out.join(STATS_FILE)).unwrap();
        let out2 = dir.path().join("tiled2");
        let args = PrepareArgs { input: raw, out: out2.clone(), side: 32, config: None };
        dispatch(&cli(Command::Prepare(args))).unwrap();
        assert_eq!(
            std::fs::read(out2.join(PRE_DIR).join("scene_r000c000.png")).unwrap(),
            pre_bytes
        );
        assert_eq!(std::fs::read(out2.join(STATS_FILE)).unwrap(), stats_bytes);
    }

    #[test]
    fn prepare_empty_input_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        std::fs::create_dir_all(raw.join(PRE_DIR)).unwrap();
        let out = dir.path().join("tiled");
        let args = PrepareArgs { input: raw, out: out.clone(), side: 32, config: None };
        assert!(dispatch(&cli(Command::Prepare(args))).is_err());
        assert!(!out.exists(), "failed prepare must not leave partial output");
    }

    #[test]
    fn train_writes_checkpoints_logs_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("set");
        synth_into(&data, 4, 32, 5);
        let config = fixture_config(dir.path(), 32, 2);
        let out = dir.path().join("run");
        let args = TrainArgs {
            dataset: data.clone(),
            out: out.clone(),
            config: Some(config.clone()),
            seeds: None,
        };
        dispatch(&cli(Command::Train(args))).unwrap();

        assert!(out.join("checkpoints/seed7.ckpt").is_file());
        assert!(out.join("logs/seed7.jsonl").is_file());
        assert!(out.join("report/metrics.csv").is_file());
        assert!(out.join("report/curve_macro_f1.svg").is_file());
        let manifest = RunManifest::read(&out.join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest.status, RunStatus::Ok);
        assert_eq!(manifest.config.train.max_epochs, 2);
        let log = crate::trainer::TrainLog::read_jsonl(&out.join("logs/seed7.jsonl")).unwrap();
        assert_eq!(log.records.len(), 2);

        // Evaluating that checkpoint reproduces a byte-identical CSV across
        // runs, and a mismatched --seed is rejected.
        let eval_out = dir.path().join("eval1");
        let eval_args = EvalArgs {
            dataset: data.clone(),
            checkpoint: out.join("checkpoints/seed7.ckpt"),
            split: SplitName::Val,
            out: eval_out.clone(),
            config: Some(config.clone()),
            seed: None,
        };
        dispatch(&cli(Command::Eval(eval_args))).unwrap();
        let csv1 = std::fs::read(eval_out.join("metrics.csv")).unwrap();
        let eval_out2 = dir.path().join("eval2");
        let eval_args = EvalArgs {
            dataset: data.clone(),
            checkpoint: out.join("checkpoints/seed7.ckpt"),
            split: SplitName::Val,
            out: eval_out2.clone(),
            config: Some(config.clone()),
            seed: None,
        };
        dispatch(&cli(Command::Eval(eval_args))).unwrap();
        assert_eq!(std::fs::read(eval_out2.join("metrics.csv")).unwrap(), csv1);

        let bad = EvalArgs {
            dataset: data.clone(),
            checkpoint: out.join("checkpoints/seed7.ckpt"),
            split: SplitName::Val,
            out: dir.path().join("eval3"),
            config: Some(config.clone()),
            seed: Some(9999),
        };
        let err = dispatch(&cli(Command::Eval(bad))).unwrap_err();
        assert!(err.to_string().contains("split seed"), "got {err}");

        // Inference on one of the fixture pairs emits the full artifact set.
        let infer_out = dir.path().join("pred");
        let infer_args = InferArgs {
            pre: data.join(PRE_DIR).join("00000.png"),
            post: data.join(POST_DIR).join("00000.png"),
            checkpoint: out.join("checkpoints/seed7.ckpt"),
            out: infer_out.clone(),
            stride: 256,
            alpha: 0.5,
            no_counts: false,
        };
        dispatch(&cli(Command::Infer(infer_args))).unwrap();
        assert!(infer_out.join("00000_mask.png").is_file());
        assert!(infer_out.join("00000_overlay.png").is_file());
        let counts = std::fs::read_to_string(infer_out.join("00000_counts.txt")).unwrap();
        assert!(counts.starts_with("class,name,pixels,percent\n"));
    }

    #[test]
    fn train_rejects_invalid_lr_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("set");
        synth_into(&data, 3, 32, 5);
        let config = dir.path().join("bad.toml");
        std::fs::write(&config, "[train]\nlr0 = 0.0\n").unwrap();
        let args = TrainArgs {
            dataset: data,
            out: dir.path().join("run"),
            config: Some(config),
            seeds: None,
        };
        let err = dispatch(&cli(Command::Train(args))).unwrap_err();
        assert!(err.to_string().contains("lr0"), "got {err}");
    }

    #[test]
    fn unknown_flag_exits_nonzero_and_usage_is_exit_zero() {
        assert_ne!(main_from_args(["damagemap", "synth", "--bogus"]), 0);
        assert_eq!(main_from_args(["damagemap", "--help"]), 0);
    }
}
