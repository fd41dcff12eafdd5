//! SSIM, weighted SSIM, weighted MSE and the combined training objective.
//!
//! Two routes are provided and cross-checked in tests:
//!
//! - a scalar reference route that evaluates the luminance/contrast/structure
//!   product window by window, and
//! - a differentiable route built on [`crate::autodiff`] that computes the
//!   algebraically equivalent combined form through Gaussian (or uniform)
//!   window convolutions, used for training.
//!
//! The reference image X supplies the WSSIM window weights and the WMSE
//! rain/no-rain weights, so all weights are constants with respect to the
//! prediction Y.

use ndarray::{Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WindowKernel {
    /// Plain window statistics; every cell weighs the same.
    Uniform,
    /// Gaussian-weighted window statistics.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub size: usize,
    pub kernel: WindowKernel,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            size: 11,
            kernel: WindowKernel::Gaussian { sigma: 1.5 },
        }
    }
}

impl WindowConfig {
    /// Window weights, normalized to sum 1.
    pub fn weights(&self) -> Array2<f64> {
        match self.kernel {
            WindowKernel::Uniform => {
                Array2::from_elem((self.size, self.size), 1.0 / (self.size * self.size) as f64)
            }
            WindowKernel::Gaussian { sigma } => {
                let half = (self.size as f64 - 1.0) / 2.0;
                let mut w = Array2::from_shape_fn((self.size, self.size), |(i, j)| {
                    let di = i as f64 - half;
                    let dj = j as f64 - half;
                    (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
                });
                let total = w.sum();
                w /= total;
                w
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// WSSIM vs WMSE combination weight.
    pub alpha: f64,
    /// L2 regularization coefficient.
    pub beta: f64,
    /// Rain/no-rain threshold for WMSE weights, in the units of the tensors
    /// entering the loss (transformed/standardized by default).
    pub threshold: f64,
    /// WMSE weight on rain pixels (reference >= threshold).
    pub wmse_rain_weight: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of pixel values.
    pub dynamic_range: f64,
    pub window: WindowConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.84,
            beta: 1e-3,
            threshold: 0.1,
            wmse_rain_weight: 3.0,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            window: WindowConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0, 1]".into()));
        }
        if self.beta < 0.0 || self.threshold < 0.0 {
            return Err(Error::Config("beta and threshold must be >= 0".into()));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::Config("k1, k2 and dynamic range must be > 0".into()));
        }
        if self.window.size < 2 {
            return Err(Error::Config("window size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }
}

/// Weighted first and second moments of one window pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_xy: f64,
}

/// Raw weighted moments of one window pair; the reference SSIM works on
/// these directly so that identical inputs cancel exactly.
#[derive(Debug, Clone, Copy)]
struct Moments {
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn window_moments(x: &ArrayView2<f64>, y: &ArrayView2<f64>, kernel: &Array2<f64>) -> Moments {
    let mut mu_x = 0.0;
    let mut mu_y = 0.0;
    for ((xv, yv), w) in x.iter().zip(y.iter()).zip(kernel.iter()) {
        mu_x += w * xv;
        mu_y += w * yv;
    }
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for ((xv, yv), w) in x.iter().zip(y.iter()).zip(kernel.iter()) {
        let dx = xv - mu_x;
        let dy = yv - mu_y;
        var_x += w * dx * dx;
        var_y += w * dy * dy;
        cov += w * dx * dy;
    }
    Moments {
        mu_x,
        mu_y,
        var_x: var_x.max(0.0),
        var_y: var_y.max(0.0),
        cov,
    }
}

fn ssim_from_moments(m: &Moments, cfg: &LossConfig) -> f64 {
    let (c1, c2, c3) = (cfg.c1(), cfg.c2(), cfg.c3());
    let l = (2.0 * m.mu_x * m.mu_y + c1) / (m.mu_x * m.mu_x + m.mu_y * m.mu_y + c1);
    let sigma_prod = (m.var_x * m.var_y).sqrt();
    let c = (2.0 * sigma_prod + c2) / (m.var_x + m.var_y + c2);
    let s = (m.cov + c3) / (sigma_prod + c3);
    l * c * s
}

/// Kernel-weighted window statistics.
pub fn window_stats(x: &ArrayView2<f64>, y: &ArrayView2<f64>, kernel: &Array2<f64>) -> WindowStats {
    let m = window_moments(x, y, kernel);
    WindowStats {
        mu_x: m.mu_x,
        mu_y: m.mu_y,
        sigma_x: m.var_x.sqrt(),
        sigma_y: m.var_y.sqrt(),
        sigma_xy: m.cov,
    }
}

/// SSIM of one window pair: the luminance * contrast * structure product.
pub fn ssim_window(x: &ArrayView2<f64>, y: &ArrayView2<f64>, cfg: &LossConfig) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "windows {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let kernel = uniform_like(x.dim());
    Ok(ssim_from_moments(&window_moments(x, y, &kernel), cfg))
}

fn uniform_like(dim: (usize, usize)) -> Array2<f64> {
    Array2::from_elem(dim, 1.0 / (dim.0 * dim.1) as f64)
}

pub fn ssim_from_stats(st: &WindowStats, cfg: &LossConfig) -> f64 {
    let (c1, c2, c3) = (cfg.c1(), cfg.c2(), cfg.c3());
    let l = (2.0 * st.mu_x * st.mu_y + c1) / (st.mu_x * st.mu_x + st.mu_y * st.mu_y + c1);
    let c = (2.0 * st.sigma_x * st.sigma_y + c2)
        / (st.sigma_x * st.sigma_x + st.sigma_y * st.sigma_y + c2);
    let s = (st.sigma_xy + c3) / (st.sigma_x * st.sigma_y + c3);
    l * c * s
}

fn window_origins(dim: (usize, usize), size: usize) -> Result<Vec<(usize, usize)>> {
    if dim.0 < size || dim.1 < size {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than {}x{} window",
            dim.0, dim.1, size, size
        )));
    }
    let mut out = Vec::with_capacity((dim.0 - size + 1) * (dim.1 - size + 1));
    for i in 0..=dim.0 - size {
        for j in 0..=dim.1 - size {
            out.push((i, j));
        }
    }
    Ok(out)
}

/// Uniformly weighted average of the per-window SSIM scores (stride-1 valid
/// windows).
pub fn mean_ssim(x: &ArrayView2<f64>, y: &ArrayView2<f64>, cfg: &LossConfig) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape("mean_ssim image shapes differ".into()));
    }
    let kernel = cfg.window.weights();
    let size = cfg.window.size;
    let origins = window_origins(x.dim(), size)?;
    let mut total = 0.0;
    for (i, j) in &origins {
        let xs = x.slice(ndarray::s![*i..*i + size, *j..*j + size]);
        let ys = y.slice(ndarray::s![*i..*i + size, *j..*j + size]);
        total += ssim_from_moments(&window_moments(&xs, &ys, &kernel), cfg);
    }
    Ok(total / origins.len() as f64)
}

/// SSIM averaged with reference-window standard-deviation weights
/// w_j = (1 + sigma_x_j) / sum_i (1 + sigma_x_i). X is the reference image.
pub fn weighted_ssim(x: &ArrayView2<f64>, y: &ArrayView2<f64>, cfg: &LossConfig) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape("weighted_ssim image shapes differ".into()));
    }
    let kernel = cfg.window.weights();
    let size = cfg.window.size;
    let origins = window_origins(x.dim(), size)?;
    let mut scores = Vec::with_capacity(origins.len());
    let mut weights = Vec::with_capacity(origins.len());
    for (i, j) in &origins {
        let xs = x.slice(ndarray::s![*i..*i + size, *j..*j + size]);
        let ys = y.slice(ndarray::s![*i..*i + size, *j..*j + size]);
        let m = window_moments(&xs, &ys, &kernel);
        scores.push(ssim_from_moments(&m, cfg));
        weights.push(1.0 + m.var_x.sqrt());
    }
    let denom: f64 = weights.iter().sum();
    Ok(scores
        .iter()
        .zip(&weights)
        .map(|(s, w)| s * w / denom)
        .sum())
}

/// Weight-normalized MSE with `wmse_rain_weight` on reference pixels at or
/// above the threshold. X is the reference image.
pub fn weighted_mse(x: &ArrayView2<f64>, y: &ArrayView2<f64>, cfg: &LossConfig) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape("weighted_mse image shapes differ".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, q) in x.iter().zip(y.iter()) {
        let w = if *p < cfg.threshold {
            1.0
        } else {
            cfg.wmse_rain_weight
        };
        let d = p - q;
        num += w * d * d;
        den += w;
    }
    Ok(num / den)
}

/// Reference-route combined objective for one image pair:
/// alpha * (1 - WSSIM) + (1 - alpha) * WMSE + beta * theta_sq_sum.
pub fn total_loss(
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    theta_sq_sum: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let wssim = weighted_ssim(x, y, cfg)?;
    let wmse = weighted_mse(x, y, cfg)?;
    Ok(cfg.alpha * (1.0 - wssim) + (1.0 - cfg.alpha) * wmse + cfg.beta * theta_sq_sum)
}

/// Differentiable loss terms for a batch of frames, each averaged over the
/// batch. `total` excludes the regularization term, which depends on the
/// model parameters and is added by the caller.
pub struct BatchLoss {
    /// alpha * l_WSSIM + (1 - alpha) * l_WMSE.
    pub total: Var,
    pub wssim_loss: Var,
    pub wmse_loss: Var,
}

/// Builds the differentiable WSSIM + WMSE objective for predictions `pred`
/// against constant ground truth `truth`, both (N,T,H,W); the loss is the mean
/// over the N*T frames.
pub fn batch_loss(
    tape: &mut Tape,
    truth: &Array4<f64>,
    pred: Var,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    cfg.validate()?;
    let (n, t, h, w) = {
        let s = truth.shape();
        (s[0], s[1], s[2], s[3])
    };
    if tape.shape(pred) != truth.shape() {
        return Err(Error::Shape(format!(
            "pred {:?} vs truth {:?}",
            tape.shape(pred),
            truth.shape()
        )));
    }
    let size = cfg.window.size;
    if h < size || w < size {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than {size}x{size} window"
        )));
    }
    let m = n * t;
    let x = truth
        .clone()
        .into_shape_with_order((m, 1, h, w))
        .unwrap()
        .into_dyn();
    let y = tape.reshape(pred, &[m, 1, h, w]);

    // window moments of the constant reference
    let kernel = cfg.window.weights();
    let kernel4 = kernel
        .clone()
        .into_shape_with_order((1, 1, size, size))
        .unwrap();
    let mu_x = crate::autodiff::conv_forward(
        &x.view().into_dimensionality().unwrap(),
        &kernel4.view(),
        1,
        0,
    );
    let x2 = &x * &x;
    let ex2 = crate::autodiff::conv_forward(
        &x2.view().into_dimensionality().unwrap(),
        &kernel4.view(),
        1,
        0,
    );
    let var_x = (&ex2 - &(&mu_x * &mu_x)).mapv(|v| v.max(0.0));
    let sigma_x = var_x.mapv(f64::sqrt);

    // WSSIM window weights from the reference only, folded with the 1/m
    // batch average into one constant weight map
    let mut wmap = sigma_x.mapv(|s| 1.0 + s);
    for i in 0..m {
        let total = wmap.index_axis(Axis(0), i).sum();
        wmap.index_axis_mut(Axis(0), i).mapv_inplace(|v| v / total);
    }
    wmap.mapv_inplace(|v| v / m as f64);

    // prediction-side moments on the tape
    let kconst = tape.constant(kernel4.into_dyn());
    let xconst = tape.constant(x.clone());
    let mu_y = tape.conv2d(y, kconst, 1, 0);
    let y2 = tape.square(y);
    let ey2 = tape.conv2d(y2, kconst, 1, 0);
    let mu_y2 = tape.square(mu_y);
    let var_y = tape.sub(ey2, mu_y2);
    let xy = tape.mul(xconst, y);
    let exy = tape.conv2d(xy, kconst, 1, 0);
    let mu_x_c = tape.constant(mu_x.clone().into_dyn());
    let mu_x_mu_y = tape.mul(mu_x_c, mu_y);
    let cov = tape.sub(exy, mu_x_mu_y);

    // combined SSIM map: (2 mu_x mu_y + C1)(2 cov + C2) /
    //                    ((mu_x^2 + mu_y^2 + C1)(var_x + var_y + C2))
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let two_mu = tape.mul_scalar(mu_x_mu_y, 2.0);
    let a1 = tape.add_scalar(two_mu, c1);
    let two_cov = tape.mul_scalar(cov, 2.0);
    let a2 = tape.add_scalar(two_cov, c2);
    let mu_x2_c = tape.constant((&mu_x * &mu_x).into_dyn());
    let b1_pre = tape.add(mu_x2_c, mu_y2);
    let b1 = tape.add_scalar(b1_pre, c1);
    let var_x_c = tape.constant(var_x.into_dyn());
    let b2_pre = tape.add(var_x_c, var_y);
    let b2 = tape.add_scalar(b2_pre, c2);
    let num = tape.mul(a1, a2);
    let den = tape.mul(b1, b2);
    let ssim_map = tape.div(num, den);

    let wconst = tape.constant(wmap.into_dyn());
    let weighted = tape.mul(ssim_map, wconst);
    let wssim = tape.sum(weighted);
    let one_minus = tape.neg(wssim);
    let wssim_loss = tape.add_scalar(one_minus, 1.0);

    // WMSE with per-image weight normalization folded into a constant map
    let mut mse_w = x.mapv(|p| {
        if p < cfg.threshold {
            1.0
        } else {
            cfg.wmse_rain_weight
        }
    });
    for i in 0..m {
        let total = mse_w.index_axis(Axis(0), i).sum();
        mse_w.index_axis_mut(Axis(0), i).mapv_inplace(|v| v / total);
    }
    mse_w.mapv_inplace(|v| v / m as f64);
    let diff = tape.sub(xconst, y);
    let sq = tape.square(diff);
    let mse_w_c = tape.constant(mse_w);
    let weighted_sq = tape.mul(sq, mse_w_c);
    let wmse_loss = tape.sum(weighted_sq);

    let a_part = tape.mul_scalar(wssim_loss, cfg.alpha);
    let b_part = tape.mul_scalar(wmse_loss, 1.0 - cfg.alpha);
    let total = tape.add(a_part, b_part);
    Ok(BatchLoss {
        total,
        wssim_loss,
        wmse_loss,
    })
}

/// Convenience wrapper: the full differentiable objective including the L2
/// penalty over the given parameter tensors.
pub fn total_loss_var(
    tape: &mut Tape,
    truth: &Array4<f64>,
    pred: Var,
    params: &[Var],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let base = batch_loss(tape, truth, pred, cfg)?;
    if cfg.beta == 0.0 || params.is_empty() {
        return Ok(base);
    }
    let mut l2: Option<Var> = None;
    for p in params {
        let sq = tape.square(*p);
        let s = tape.sum(sq);
        l2 = Some(match l2 {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    let penalty = tape.mul_scalar(l2.unwrap(), cfg.beta);
    let total = tape.add(base.total, penalty);
    Ok(BatchLoss {
        total,
        wssim_loss: base.wssim_loss,
        wmse_loss: base.wmse_loss,
    })
}

/// Scalar total loss over an (N,T,H,W) batch via the reference route; the
/// independent check for the differentiable path.
pub fn batch_total_loss_reference(
    truth: &Array4<f64>,
    pred: &Array4<f64>,
    theta_sq_sum: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    let s = truth.shape();
    let (n, t) = (s[0], s[1]);
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..t {
            let x = truth.index_axis(Axis(0), i);
            let x = x.index_axis(Axis(0), j);
            let y = pred.index_axis(Axis(0), i);
            let y = y.index_axis(Axis(0), j);
            let wssim = weighted_ssim(&x, &y, cfg)?;
            let wmse = weighted_mse(&x, &y, cfg)?;
            acc += cfg.alpha * (1.0 - wssim) + (1.0 - cfg.alpha) * wmse;
        }
    }
    Ok(acc / (n * t) as f64 + cfg.beta * theta_sq_sum)
}
