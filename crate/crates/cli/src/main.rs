//! `nowcast`: batch command-line surface for the experiment pipeline.
//!
//! Subcommands cover the full loop: synthesize data, build the split plan,
//! optionally patchify maps, train, predict, evaluate and plot. Every
//! subcommand writes a provenance record beside its outputs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Array4};
use sha2::{Digest, Sha256};

use nowcast_core::config::ExperimentConfig;
use nowcast_core::grid::{read_dataset, write_dataset, Channel};
use nowcast_core::models::{Model, ModelKind};
use nowcast_core::partition::{build_split, enumerate_windows, SplitId, SplitPlan};
use nowcast_core::patchwork::{resize_full_map, tile_map, PatchSpec};
use nowcast_core::plot::{plot_curve, plot_scores};
use nowcast_core::synth::{generate_scene, Scene};
use nowcast_core::trainer::{
    self, dataset_from_scene, read_curve_csv, write_curve_csv, CheckpointMeta, Dataset,
};
use nowcast_core::verify::{score_run, ScoreTable};

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Precipitation nowcasting experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PatchMode {
    /// Ring-interpolated context patches.
    Patch,
    /// Downsample the full map to the target size.
    Resize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth {
        /// Experiment config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and persist a train/val/test split plan.
    Split {
        #[arg(long)]
        data: PathBuf,
        /// Frames per block.
        #[arg(long, default_value_t = 47)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut precipitation maps into model-sized inputs.
    Patchify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        isize: usize,
        #[arg(long, default_value_t = 128)]
        tsize: usize,
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[arg(long, default_value_t = 20)]
        freq: usize,
        #[arg(long, value_enum, default_value_t = PatchMode::Patch)]
        mode: PatchMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured model kind (unet|convlstm|svg_lp).
        #[arg(long)]
        model: Option<String>,
        /// Overrides the configured width multiplier.
        #[arg(long)]
        scale: Option<f64>,
        /// Overrides the configured step budget.
        #[arg(long)]
        steps: Option<usize>,
        /// Reuses an existing split plan instead of building one.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference from a checkpoint and write mm/h stacks.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit metric-vs-lead-time and learning-curve figures.
    Plot {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nowcast: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { config, out } => cmd_synth(config.as_deref(), &out),
        Cmd::Split { data, k, seed, out } => cmd_split(&data, k, seed, &out),
        Cmd::Patchify {
            data,
            isize,
            tsize,
            step,
            freq,
            mode,
            out,
        } => cmd_patchify(&data, isize, tsize, step, freq, mode, &out),
        Cmd::Train {
            config,
            data,
            model,
            scale,
            steps,
            plan,
            out,
        } => cmd_train(
            config.as_deref(),
            &data,
            model.as_deref(),
            scale,
            steps,
            plan.as_deref(),
            &out,
        ),
        Cmd::Predict {
            ckpt,
            data,
            plan,
            split,
            batch,
            out,
        } => cmd_predict(&ckpt, &data, &plan, &split, batch, &out),
        Cmd::Evaluate { pred, truth, out } => cmd_evaluate(&pred, &truth, &out),
        Cmd::Plot { scores, curve, out } => cmd_plot(scores.as_deref(), curve.as_deref(), &out),
    }
}

// ---- provenance ----

fn write_provenance(dir: &Path, command: &str, config_text: &str, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    let record = serde_json::json!({
        "command": command,
        "config_sha256": format!("{:x}", hasher.finalize()),
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        dir.join("provenance.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(())
}

// ---- shared helpers ----

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, String)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            Ok((cfg, text))
        }
        None => {
            let cfg = ExperimentConfig::default();
            let text = cfg.to_toml_string();
            Ok((cfg, text))
        }
    }
}

fn load_scene(data: &Path) -> Result<Scene> {
    let sequences = read_dataset(data)?;
    let find = |ch: Channel| {
        sequences
            .iter()
            .find(|s| s.frames.first().map(|f| f.channel) == Some(ch))
            .cloned()
            .with_context(|| format!("dataset at {} lacks channel {}", data.display(), ch.dir_name()))
    };
    Ok(Scene {
        precipitation: find(Channel::PrecipMmPerH)?,
        temp_profile: find(Channel::TempProfileType)?,
        relief: find(Channel::ReliefM)?,
    })
}

fn read_plan(path: &Path) -> Result<SplitPlan> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading plan {}", path.display()))?;
    let plan: SplitPlan = serde_json::from_str(&text).context("parsing split plan")?;
    plan.validate()?;
    Ok(plan)
}

/// (samples, leads, H, W) mm/h stack: a JSON header plus one raw f32 blob.
fn write_stack(dir: &Path, arr: &Array4<f64>, cadence_min: i64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::json!({
        "shape": arr.shape(),
        "cadence_min": cadence_min,
        "dtype": "f32le",
        "units": "mm/h",
    });
    std::fs::write(dir.join("stack.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut bytes = Vec::with_capacity(arr.len() * 4);
    for v in arr.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(dir.join("data.raw"), bytes)?;
    Ok(())
}

fn read_stack(dir: &Path) -> Result<(Array4<f64>, i64)> {
    let text = std::fs::read_to_string(dir.join("stack.json"))
        .with_context(|| format!("reading {}/stack.json", dir.display()))?;
    let meta: serde_json::Value = serde_json::from_str(&text)?;
    let shape: Vec<usize> = serde_json::from_value(meta["shape"].clone())?;
    if shape.len() != 4 {
        bail!("stack at {} is not 4-dimensional", dir.display());
    }
    let cadence = meta["cadence_min"].as_i64().unwrap_or(15);
    let bytes = std::fs::read(dir.join("data.raw"))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        bail!(
            "stack at {}: expected {} bytes, found {}",
            dir.display(),
            n * 4,
            bytes.len()
        );
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let arr = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data)?;
    Ok((arr, cadence))
}

// ---- subcommands ----

fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let (cfg, text) = load_config(config)?;
    let scene = generate_scene(&cfg.scene)?;
    write_dataset(&scene.sequences(), out)?;
    write_provenance(out, "synth", &text, cfg.scene.seed)?;
    println!(
        "wrote {} frames ({}x{}) to {}",
        cfg.scene.frame_count,
        cfg.scene.rows,
        cfg.scene.cols,
        out.display()
    );
    Ok(())
}

fn cmd_split(data: &Path, k: usize, seed: u64, out: &Path) -> Result<()> {
    let scene = load_scene(data)?;
    let total = scene.precipitation.frames.len();
    let plan = build_split(total, k, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, serde_json::to_string_pretty(&plan)?)?;
    println!(
        "split {} frames into {} block sequences ({} discarded) -> {}",
        total,
        plan.n_sequences(),
        plan.discarded_frames,
        out.display()
    );
    Ok(())
}

fn cmd_patchify(
    data: &Path,
    i_size: usize,
    t_size: usize,
    step: usize,
    freq: usize,
    mode: PatchMode,
    out: &Path,
) -> Result<()> {
    let scene = load_scene(data)?;
    let spec = PatchSpec::new(i_size, t_size, step, freq);
    if mode == PatchMode::Patch {
        spec.validate()?;
    }
    let data_dir = out.join("data");
    std::fs::create_dir_all(&data_dir)?;
    let mut entries = Vec::new();
    for frame in &scene.precipitation.frames {
        let src: Array2<f64> = frame.values.mapv(|v| v as f64);
        match mode {
            PatchMode::Patch => {
                let tiles = tile_map(&src.view(), &spec)?;
                for (k, (patch, rect)) in tiles.iter().enumerate() {
                    let name = format!("f{}_p{}.raw", frame.timestamp, k);
                    write_raw_f32(&data_dir.join(&name), &patch.values)?;
                    entries.push(serde_json::json!({
                        "file": name,
                        "timestamp": frame.timestamp,
                        "rows": patch.values.nrows(),
                        "cols": patch.values.ncols(),
                        "target_rect": [rect.row, rect.col, rect.rows, rect.cols],
                        "origin": [patch.spec.origin.0, patch.spec.origin.1],
                    }));
                }
            }
            PatchMode::Resize => {
                let resized = resize_full_map(&src.view(), t_size, t_size);
                let name = format!("f{}_resized.raw", frame.timestamp);
                write_raw_f32(&data_dir.join(&name), &resized)?;
                entries.push(serde_json::json!({
                    "file": name,
                    "timestamp": frame.timestamp,
                    "rows": t_size,
                    "cols": t_size,
                    "source_rows": src.nrows(),
                    "source_cols": src.ncols(),
                }));
            }
        }
    }
    let index = serde_json::json!({
        "mode": match mode { PatchMode::Patch => "patch", PatchMode::Resize => "resize" },
        "i_size": i_size,
        "t_size": t_size,
        "step": step,
        "freq": freq,
        "entries": entries,
    });
    std::fs::write(out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    write_provenance(
        out,
        "patchify",
        &format!("isize={i_size} tsize={t_size} step={step} freq={freq} mode={mode:?}"),
        0,
    )?;
    println!("wrote {} entries to {}", count_entries(&index), out.display());
    Ok(())
}

fn count_entries(index: &serde_json::Value) -> usize {
    index["entries"].as_array().map(|a| a.len()).unwrap_or(0)
}

fn write_raw_f32(path: &Path, values: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    model_kind: Option<&str>,
    scale: Option<f64>,
    steps: Option<usize>,
    plan_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (mut cfg, _) = load_config(config)?;
    if let Some(kind) = model_kind {
        cfg.model.kind = kind.parse::<ModelKind>()?;
    }
    if let Some(s) = scale {
        cfg.model.base_width = s;
    }
    if let Some(n) = steps {
        cfg.train.max_steps = n;
    }

    let scene = load_scene(data)?;
    let plan = match plan_path {
        Some(p) => read_plan(p)?,
        None => build_split(
            scene.precipitation.frames.len(),
            cfg.split.block_size,
            cfg.split.seed,
        )?,
    };
    let ds = dataset_from_scene(&scene, &plan)?;
    let (h, w) = ds.spatial();
    if h != w {
        bail!("training expects square maps, got {h}x{w}");
    }
    cfg.model.spatial = h;
    cfg.model.dyn_channels = ds.dyn_channels();
    cfg.model.static_channels = 1;
    cfg.validate()?;
    let effective = cfg.to_toml_string();

    let mut model = Model::new(cfg.model.clone())?;
    println!(
        "training {} ({} parameters) for up to {} steps",
        cfg.model.kind,
        model.n_params(),
        cfg.train.max_steps
    );
    let ckpt = out.join("checkpoint");
    let report = trainer::train(&mut model, &ds, &plan, &cfg.loss, &cfg.train, &ckpt)?;
    std::fs::create_dir_all(out)?;
    write_curve_csv(&out.join("curve.csv"), &report.curve)?;
    std::fs::write(
        out.join("plan.json"),
        serde_json::to_string_pretty(&plan)?,
    )?;
    std::fs::write(out.join("config.toml"), &effective)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "best_val_loss": report.best_val_loss,
            "best_step": report.best_step,
            "steps_run": report.steps_run,
            "initial_train_loss": report.initial_train_loss,
            "final_train_loss": report.final_train_loss,
        }))?,
    )?;
    write_provenance(out, "train", &effective, cfg.train.seed)?;
    println!(
        "done: best validation loss {:.6} at step {}",
        report.best_val_loss, report.best_step
    );
    Ok(())
}

fn cmd_predict(
    ckpt: &Path,
    data: &Path,
    plan_path: &Path,
    split: &str,
    batch: usize,
    out: &Path,
) -> Result<()> {
    let split: SplitId = split.parse()?;
    let mut model = Model::load(ckpt)?;
    let meta = CheckpointMeta::read(ckpt)?;
    let scene = load_scene(data)?;
    let plan = read_plan(plan_path)?;
    let ds: Dataset = dataset_from_scene(&scene, &plan)?;
    if (ds.precip_stats.mean - meta.precip_stats.mean).abs() > 1e-9
        || (ds.precip_stats.stdev - meta.precip_stats.stdev).abs() > 1e-9
    {
        bail!(
            "checkpoint normalization stats do not match this dataset/plan \
             (checkpoint mean {:.6}, dataset mean {:.6})",
            meta.precip_stats.mean,
            ds.precip_stats.mean
        );
    }
    let windows = enumerate_windows(
        &plan,
        split,
        model.cfg.in_frames,
        model.cfg.out_frames,
        1,
    )?;
    let (pred, truth) = trainer::predict(&mut model, &ds, &windows, batch, meta.best_step as u64)?;
    write_stack(&out.join("pred"), &pred, ds.cadence_min)?;
    write_stack(&out.join("truth"), &truth, ds.cadence_min)?;
    write_provenance(out, "predict", &format!("ckpt={}", ckpt.display()), 0)?;
    println!(
        "wrote {} windows x {} lead times to {}",
        pred.shape()[0],
        pred.shape()[1],
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(pred: &Path, truth: &Path, out: &Path) -> Result<()> {
    let (p, cadence) = read_stack(pred)?;
    let (t, _) = read_stack(truth)?;
    if p.shape() != t.shape() {
        bail!(
            "prediction stack {:?} does not match truth stack {:?}",
            p.shape(),
            t.shape()
        );
    }
    let table = score_run(&p.view(), &t.view(), cadence)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    table.write_csv(out)?;
    for row in &table.rows {
        println!(
            "+{} min: mae {:.4} mm/h, f1@0.1 {:.3}, f1@1.0 {:.3}",
            row.lead_time_min, row.mae, row.f1_low, row.f1_high
        );
    }
    Ok(())
}

fn cmd_plot(scores: Option<&Path>, curve: Option<&Path>, out: &Path) -> Result<()> {
    if scores.is_none() && curve.is_none() {
        bail!("nothing to plot: pass --scores and/or --curve");
    }
    std::fs::create_dir_all(out)?;
    if let Some(path) = scores {
        let table = ScoreTable::read_csv(path)?;
        let made = plot_scores(&table, out, "scores")?;
        for p in made {
            println!("wrote {}", p.display());
        }
    }
    if let Some(path) = curve {
        let points = read_curve_csv(path)?;
        let target = out.join("curve.png");
        plot_curve(&points, &target)?;
        println!("wrote {}", target.display());
    }
    Ok(())
}