//! Optimization loop: Adam over the tape gradients, validation-driven early
//! stopping, best-checkpoint persistence and learning-curve emission, plus
//! the dataset assembly and inference paths shared with the CLI.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Array5, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autodiff::Tape;
use crate::losses::{self, LossConfig};
use crate::models::{BatchInput, Mode, Model};
use crate::partition::{enumerate_windows, SplitId, SplitPlan, WindowSample};
use crate::synth::{Scene, TEMP_PROFILE_CATEGORIES};
use crate::transform::{precip_inverse, zscore, NormStats};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps between validation evaluations and curve points.
    pub eval_interval: usize,
    /// Evaluations without validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    /// Global-norm gradient clipping; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Upper bound on validation batches per evaluation.
    pub val_batch_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 4,
            max_steps: 200,
            eval_interval: 25,
            patience: 10,
            grad_clip: None,
            val_batch_cap: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_steps == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "max_steps and eval_interval must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// In-memory dataset in both physical and transformed units.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// (frames, H, W) rain rate, mm/h.
    pub precip_mm: Array3<f64>,
    /// (frames, H, W) log-transformed and standardized rain rate.
    pub precip: Array3<f64>,
    /// (frames, categories, H, W) one-hot temperature profile type.
    pub onehot: Array4<f64>,
    /// (H, W) standardized relief.
    pub relief: Array2<f64>,
    pub precip_stats: NormStats,
    pub relief_stats: NormStats,
    pub cadence_min: i64,
}

impl Dataset {
    pub fn n_frames(&self) -> usize {
        self.precip.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.precip.shape()[1], self.precip.shape()[2])
    }

    /// Dynamic channels per frame: precipitation plus the one-hot categories.
    pub fn dyn_channels(&self) -> usize {
        1 + self.onehot.shape()[1]
    }
}

/// Builds the transformed dataset from a synthetic scene. Normalization
/// statistics are fitted on the training frames of `plan` only.
pub fn dataset_from_scene(scene: &Scene, plan: &SplitPlan) -> Result<Dataset> {
    let frames = &scene.precipitation.frames;
    let n = frames.len();
    let (h, w) = frames[0].values.dim();
    if scene.temp_profile.frames.len() != n {
        return Err(Error::Data(
            "precipitation and temperature frame counts differ".into(),
        ));
    }

    let mut precip_mm = Array3::<f64>::zeros((n, h, w));
    for (i, f) in frames.iter().enumerate() {
        precip_mm
            .index_axis_mut(Axis(0), i)
            .assign(&f.values.mapv(|v| v as f64));
    }
    let logp: Vec<Array2<f64>> = (0..n)
        .map(|i| crate::transform::log1p_forward(&precip_mm.index_axis(Axis(0), i).to_owned()))
        .collect::<Result<_>>()?;
    let train_idx = plan.frame_indices(SplitId::Train);
    let precip_stats = NormStats::fit(train_idx.iter().map(|&i| logp[i].view()))?;
    let mut precip = Array3::<f64>::zeros((n, h, w));
    for i in 0..n {
        precip
            .index_axis_mut(Axis(0), i)
            .assign(&zscore(&logp[i], &precip_stats)?);
    }

    let cats = TEMP_PROFILE_CATEGORIES;
    let mut onehot = Array4::<f64>::zeros((n, cats, h, w));
    for (i, f) in scene.temp_profile.frames.iter().enumerate() {
        for ((r, c), v) in f.values.indexed_iter() {
            let k = *v as usize;
            if k >= cats {
                return Err(Error::Data(format!(
                    "temperature category {k} out of range at frame {i}"
                )));
            }
            onehot[(i, k, r, c)] = 1.0;
        }
    }

    let relief_raw = scene.relief.frames[0].values.mapv(|v| v as f64);
    let relief_stats = NormStats::fit([relief_raw.view()])?;
    let relief = zscore(&relief_raw, &relief_stats)?;

    Ok(Dataset {
        precip_mm,
        precip,
        onehot,
        relief,
        precip_stats,
        relief_stats,
        cadence_min: scene.precipitation.cadence,
    })
}

/// Stacks a set of windows into model input tensors (transformed units).
pub fn assemble_batch(ds: &Dataset, samples: &[WindowSample]) -> Result<BatchInput> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (h, w) = ds.spatial();
    let s_in = samples[0].input_frames.len();
    let s_out = samples[0].target_frames.len();
    let n = samples.len();
    let cd = ds.dyn_channels();
    let mut dynamic = Array5::<f64>::zeros((n, s_in, cd, h, w));
    let mut statics = Array4::<f64>::zeros((n, 1, h, w));
    let mut target = Array4::<f64>::zeros((n, s_out, h, w));
    for (b, sample) in samples.iter().enumerate() {
        if sample.input_frames.len() != s_in || sample.target_frames.len() != s_out {
            return Err(Error::Data("ragged window batch".into()));
        }
        for (t, &f) in sample.input_frames.iter().enumerate() {
            dynamic
                .slice_mut(ndarray::s![b, t, 0, .., ..])
                .assign(&ds.precip.index_axis(Axis(0), f));
            for c in 0..cd - 1 {
                dynamic
                    .slice_mut(ndarray::s![b, t, 1 + c, .., ..])
                    .assign(&ds.onehot.slice(ndarray::s![f, c, .., ..]));
            }
        }
        statics.slice_mut(ndarray::s![b, 0, .., ..]).assign(&ds.relief);
        for (t, &f) in sample.target_frames.iter().enumerate() {
            target
                .slice_mut(ndarray::s![b, t, .., ..])
                .assign(&ds.precip.index_axis(Axis(0), f));
        }
    }
    Ok(BatchInput {
        dynamic,
        statics,
        target: Some(target),
    })
}

/// Rejects windows that touch frames outside the stated split.
pub fn check_no_leakage(
    plan: &SplitPlan,
    split: SplitId,
    windows: &[WindowSample],
) -> Result<()> {
    let allowed: HashSet<usize> = plan.frame_indices(split).into_iter().collect();
    for (i, wnd) in windows.iter().enumerate() {
        for f in wnd.input_frames.iter().chain(wnd.target_frames.iter()) {
            if !allowed.contains(f) {
                return Err(Error::Data(format!(
                    "window {i} reads frame {f} outside the {} split",
                    split.as_str()
                )));
            }
        }
    }
    Ok(())
}

// ---- optimizer ----

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = model.store.get_mut(name);
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn clip_gradients(grads: &mut BTreeMap<String, ArrayD<f64>>, max_norm: f64) {
    let norm_sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

// ---- curve ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub split: SplitId,
    pub loss_total: f64,
    pub loss_wssim: f64,
    pub loss_wmse: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("creating {}: {e}", path.display())))?;
    w.write_record(["step", "split", "loss_total", "loss_wssim", "loss_wmse"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for p in curve {
        w.write_record([
            p.step.to_string(),
            p.split.as_str().to_string(),
            format!("{:.17e}", p.loss_total),
            format!("{:.17e}", p.loss_wssim),
            format!("{:.17e}", p.loss_wmse),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("opening {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Data(format!("short curve row in {}", path.display())))
        };
        out.push(CurvePoint {
            step: field(0)?
                .parse()
                .map_err(|e| Error::Data(format!("bad step: {e}")))?,
            split: field(1)?.parse()?,
            loss_total: field(2)?
                .parse()
                .map_err(|e| Error::Data(format!("bad loss: {e}")))?,
            loss_wssim: field(3)?
                .parse()
                .map_err(|e| Error::Data(format!("bad loss: {e}")))?,
            loss_wmse: field(4)?
                .parse()
                .map_err(|e| Error::Data(format!("bad loss: {e}")))?,
        });
    }
    Ok(out)
}

// ---- checkpoint metadata ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub precip_stats: NormStats,
    pub relief_stats: NormStats,
    pub cadence_min: i64,
    pub best_val_loss: f64,
    pub best_step: usize,
}

impl CheckpointMeta {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("meta.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).unwrap())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad meta.json: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

/// Mean loss terms over a list of windows in inference mode.
fn eval_split(
    model: &mut Model,
    ds: &Dataset,
    windows: &[WindowSample],
    loss_cfg: &LossConfig,
    batch_size: usize,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let mut totals = (0.0, 0.0, 0.0);
    let mut batches = 0usize;
    for chunk in windows.chunks(batch_size).take(cap.max(1)) {
        let input = assemble_batch(ds, chunk)?;
        let target = input.target.clone().unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &input, Mode::Eval, rng)?;
        let terms = losses::batch_loss(&mut tape, &target, fwd.pred, loss_cfg)?;
        totals.0 += tape.scalar(terms.total);
        totals.1 += tape.scalar(terms.wssim_loss);
        totals.2 += tape.scalar(terms.wmse_loss);
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::Data("no validation windows".into()));
    }
    let l2 = loss_cfg.beta * model.store.l2_norm_sq();
    Ok((
        totals.0 / batches as f64 + l2,
        totals.1 / batches as f64,
        totals.2 / batches as f64,
    ))
}

/// Atomic checkpoint write: save to a scratch directory, then rename into
/// place.
fn save_checkpoint(model: &Model, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("ckpt")
    ));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    model.save(&tmp)?;
    meta.write(&tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(())
}

/// Runs the optimization loop and persists the best-validation checkpoint
/// under `ckpt_dir`.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    plan: &SplitPlan,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    ckpt_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let s_in = model.cfg.in_frames;
    let s_out = model.cfg.out_frames;
    let train_windows = enumerate_windows(plan, SplitId::Train, s_in, s_out, 1)?;
    let val_windows = enumerate_windows(plan, SplitId::Val, s_in, s_out, 1)?;
    check_no_leakage(plan, SplitId::Train, &train_windows)?;
    check_no_leakage(plan, SplitId::Val, &val_windows)?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Data("empty train or validation split".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;

    let mut curve = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0usize;
    let mut evals_since_best = 0usize;
    let mut acc = (0.0, 0.0, 0.0);
    let mut acc_n = 0usize;
    let mut initial_train = f64::NAN;
    let mut final_train = f64::NAN;
    let mut steps_run = 0usize;

    for step in 1..=cfg.max_steps {
        if cursor + cfg.batch_size > order.len() {
            order = (0..train_windows.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += cfg.batch_size;
        let batch: Vec<WindowSample> = idx.iter().map(|&i| train_windows[i].clone()).collect();
        let input = assemble_batch(ds, &batch)?;
        let target = input.target.clone().unwrap();

        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &input, Mode::Train, &mut rng)?;
        let params: Vec<_> = fwd.binding.values().copied().collect();
        let terms = losses::total_loss_var(&mut tape, &target, fwd.pred, &params, loss_cfg)?;
        let mut total = terms.total;
        if let Some(kl) = fwd.kl {
            let weighted = tape.mul_scalar(kl, model.cfg.kl_weight);
            total = tape.add(total, weighted);
        }
        let loss_val = tape.scalar(total);
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        acc.0 += loss_val;
        acc.1 += tape.scalar(terms.wssim_loss);
        acc.2 += tape.scalar(terms.wmse_loss);
        acc_n += 1;
        if initial_train.is_nan() {
            initial_train = loss_val;
        }
        final_train = loss_val;

        let grads = tape.backward(total);
        let mut named: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        for (name, var) in &fwd.binding {
            if let Some(g) = grads.get(*var) {
                named.insert(name.clone(), g.clone());
            }
        }
        if let Some(clip) = cfg.grad_clip {
            clip_gradients(&mut named, clip);
        }
        adam.step(model, &named);
        steps_run = step;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            curve.push(CurvePoint {
                step,
                split: SplitId::Train,
                loss_total: acc.0 / acc_n as f64,
                loss_wssim: acc.1 / acc_n as f64,
                loss_wmse: acc.2 / acc_n as f64,
            });
            acc = (0.0, 0.0, 0.0);
            acc_n = 0;

            let (vt, vw, vm) = eval_split(
                model,
                ds,
                &val_windows,
                loss_cfg,
                cfg.batch_size,
                cfg.val_batch_cap,
                &mut rng,
            )?;
            if !vt.is_finite() {
                return Err(Error::NonFinite(format!("validation loss at step {step}")));
            }
            curve.push(CurvePoint {
                step,
                split: SplitId::Val,
                loss_total: vt,
                loss_wssim: vw,
                loss_wmse: vm,
            });
            if vt < best_val {
                best_val = vt;
                best_step = step;
                evals_since_best = 0;
                let meta = CheckpointMeta {
                    precip_stats: ds.precip_stats.clone(),
                    relief_stats: ds.relief_stats.clone(),
                    cadence_min: ds.cadence_min,
                    best_val_loss: best_val,
                    best_step,
                };
                save_checkpoint(model, &meta, ckpt_dir)?;
            } else {
                evals_since_best += 1;
                if cfg.patience > 0 && evals_since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    Ok(TrainReport {
        curve,
        best_val_loss: best_val,
        best_step,
        steps_run,
        initial_train_loss: initial_train,
        final_train_loss: final_train,
    })
}

/// Inference over a set of windows; returns (predictions, truths) as
/// (samples, out_frames, H, W) stacks in mm/h.
pub fn predict(
    model: &mut Model,
    ds: &Dataset,
    windows: &[WindowSample],
    batch_size: usize,
    seed: u64,
) -> Result<(Array4<f64>, Array4<f64>)> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to predict".into()));
    }
    let (h, w) = ds.spatial();
    let s_out = model.cfg.out_frames;
    let mut pred_mm = Array4::<f64>::zeros((windows.len(), s_out, h, w));
    let mut truth_mm = Array4::<f64>::zeros((windows.len(), s_out, h, w));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let input = assemble_batch(ds, chunk)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &input, Mode::Eval, &mut rng)?;
        let out = tape.value(fwd.pred).clone();
        for (b, sample) in chunk.iter().enumerate() {
            for t in 0..s_out {
                let plane = out
                    .slice(ndarray::s![b, t, .., ..])
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                pred_mm
                    .slice_mut(ndarray::s![row, t, .., ..])
                    .assign(&precip_inverse(&plane, &ds.precip_stats));
                truth_mm
                    .slice_mut(ndarray::s![row, t, .., ..])
                    .assign(&ds.precip_mm.index_axis(Axis(0), sample.target_frames[t]));
            }
            row += 1;
        }
    }
    Ok((pred_mm, truth_mm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, ModelKind};
    use crate::partition::build_split;
    use crate::synth::{generate_scene, SceneConfig};
    use approx::assert_abs_diff_eq;
    use tempfile::TempDir;

    fn toy_scene() -> Scene {
        generate_scene(&SceneConfig {
            seed: 3,
            n_cells: 5,
            velocity: (0.8, 0.3),
            velocity_jitter: 0.1,
            frame_count: 96,
            rows: 16,
            cols: 16,
            ..Default::default()
        })
        .unwrap()
    }

    fn toy_setup() -> (Dataset, SplitPlan) {
        let scene = toy_scene();
        let plan = build_split(96, 8, 42).unwrap();
        let ds = dataset_from_scene(&scene, &plan).unwrap();
        (ds, plan)
    }

    fn toy_model(seed: u64) -> Model {
        Model::new(ModelConfig {
            kind: ModelKind::UNet,
            in_frames: 2,
            out_frames: 2,
            dyn_channels: 5,
            static_channels: 1,
            base_width: 1.0 / 32.0,
            spatial: 16,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_steps: 6,
            eval_interval: 3,
            val_batch_cap: 1,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn toy_loss_cfg() -> LossConfig {
        LossConfig {
            window: crate::losses::WindowConfig {
                size: 7,
                kernel: crate::losses::WindowKernel::Gaussian { sigma: 1.5 },
            },
            ..LossConfig::default()
        }
    }

    #[test]
    fn dataset_shapes_and_stats() {
        let (ds, plan) = toy_setup();
        assert_eq!(ds.n_frames(), 96);
        assert_eq!(ds.spatial(), (16, 16));
        assert_eq!(ds.dyn_channels(), 5);
        // train frames standardize to mean 0 / stdev 1 under the fitted stats
        let train_idx = plan.frame_indices(SplitId::Train);
        let vals: Vec<f64> = train_idx
            .iter()
            .flat_map(|&i| ds.precip.index_axis(Axis(0), i).into_iter().copied().collect::<Vec<_>>())
            .collect();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-9);
        // one-hot planes sum to 1 at every pixel
        for i in [0, 50, 95] {
            let frame = ds.onehot.index_axis(Axis(0), i);
            let sums = frame.sum_axis(Axis(0));
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn leakage_guard_rejects_foreign_frames() {
        let (_, plan) = toy_setup();
        let good = enumerate_windows(&plan, SplitId::Train, 2, 2, 1).unwrap();
        assert!(check_no_leakage(&plan, SplitId::Train, &good).is_ok());
        let test_frames = plan.frame_indices(SplitId::Test);
        let mut forged = good[0].clone();
        forged.input_frames[0] = test_frames[0];
        assert!(check_no_leakage(&plan, SplitId::Train, &[forged]).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (ds, plan) = toy_setup();
        let mut model = toy_model(1);
        let before: Vec<ArrayD<f64>> = model.store.iter().map(|p| p.value.clone()).collect();
        let dir = TempDir::new().unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..toy_train_cfg()
        };
        train(
            &mut model,
            &ds,
            &plan,
            &toy_loss_cfg(),
            &cfg,
            &dir.path().join("ckpt"),
        )
        .unwrap();
        for (p, b) in model.store.iter().filter(|p| p.trainable).zip(
            model
                .store
                .iter()
                .zip(before.iter())
                .filter(|(p, _)| p.trainable)
                .map(|(_, b)| b),
        ) {
            assert_eq!(&p.value, b, "{} changed", p.name);
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_best() {
        let (ds, plan) = toy_setup();
        let mut reports = Vec::new();
        let mut dirs = Vec::new();
        for _ in 0..2 {
            let mut model = toy_model(1);
            let dir = TempDir::new().unwrap();
            let report = train(
                &mut model,
                &ds,
                &plan,
                &toy_loss_cfg(),
                &toy_train_cfg(),
                &dir.path().join("ckpt"),
            )
            .unwrap();
            reports.push(report);
            dirs.push(dir);
        }
        assert_eq!(reports[0].curve, reports[1].curve);

        // checkpointed weights bit-identical across runs
        let a = Model::load(&dirs[0].path().join("ckpt")).unwrap();
        let b = Model::load(&dirs[1].path().join("ckpt")).unwrap();
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            for (x, y) in pa.value.iter().zip(pb.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", pa.name);
            }
        }

        // best-checkpoint property: recorded best equals the curve minimum
        let meta = CheckpointMeta::read(&dirs[0].path().join("ckpt")).unwrap();
        let min_val = reports[0]
            .curve
            .iter()
            .filter(|p| p.split == SplitId::Val)
            .map(|p| p.loss_total)
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(meta.best_val_loss, min_val, epsilon = 1e-12);
        assert_eq!(meta.best_val_loss, reports[0].best_val_loss);
    }

    #[test]
    fn curve_csv_round_trip() {
        let curve = vec![
            CurvePoint {
                step: 3,
                split: SplitId::Train,
                loss_total: 0.5,
                loss_wssim: 0.4,
                loss_wmse: 0.1,
            },
            CurvePoint {
                step: 3,
                split: SplitId::Val,
                loss_total: 0.6,
                loss_wssim: 0.45,
                loss_wmse: 0.15,
            },
        ];
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("curve.csv");
        write_curve_csv(&path, &curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,split,loss_total,loss_wssim,loss_wmse"));
        let back = read_curve_csv(&path).unwrap();
        assert_eq!(back, curve);
    }

    #[test]
    fn predict_applies_inverse_transform_and_clamps() {
        let (ds, plan) = toy_setup();
        let mut model = toy_model(2);
        let windows = enumerate_windows(&plan, SplitId::Test, 2, 2, 1).unwrap();
        let (pred, truth) = predict(&mut model, &ds, &windows[..3], 2, 7).unwrap();
        assert_eq!(pred.dim(), (3, 2, 16, 16));
        assert_eq!(truth.dim(), (3, 2, 16, 16));
        assert!(pred.iter().all(|v| v.is_finite() && *v >= 0.0));
        // truth stack is the raw mm/h data for the target frames
        let f = windows[0].target_frames[0];
        assert_eq!(
            truth.slice(ndarray::s![0, 0, .., ..]),
            ds.precip_mm.index_axis(Axis(0), f)
        );
        // manual composition oracle on one pixel row: forward then inverse
        // returns the transformed prediction mapped through the same stats
        let input = assemble_batch(&ds, &windows[..1]).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fwd = model.forward(&mut tape, &input, Mode::Eval, &mut rng).unwrap();
        let raw = tape.value(fwd.pred).clone();
        let plane = raw
            .slice(ndarray::s![0, 0, .., ..])
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let manual = precip_inverse(&plane, &ds.precip_stats);
        for (a, b) in pred.slice(ndarray::s![0, 0, .., ..]).iter().zip(manual.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn train_rejects_bad_config() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
