//! Model zoo: encoder/decoder U-net, ConvLSTM encoder/forecaster and a
//! stochastic latent-variable video predictor, all expressed on the reverse
//! mode tape from [`crate::autodiff`].
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names. Each
//! forward pass binds the trainable tensors onto a fresh tape and returns the
//! name-to-node mapping so the optimizer can route gradients back.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{Array1, Array4, Array5, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

const LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "unet")]
    UNet,
    #[serde(rename = "convlstm")]
    ConvLstm,
    #[serde(rename = "svg_lp")]
    SvgLp,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::UNet => "unet",
            ModelKind::ConvLstm => "convlstm",
            ModelKind::SvgLp => "svg_lp",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(ModelKind::UNet),
            "convlstm" => Ok(ModelKind::ConvLstm),
            "svg_lp" | "svg" => Ok(ModelKind::SvgLp),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of conditioning frames.
    pub in_frames: usize,
    /// Number of forecast frames.
    pub out_frames: usize,
    /// Channels carried per frame (precipitation plus one-hot covariates).
    pub dyn_channels: usize,
    /// Time-invariant channels appended once (relief).
    pub static_channels: usize,
    /// Multiplier on every layer width; 1.0 reproduces the full models.
    pub base_width: f64,
    /// Square input extent in pixels.
    pub spatial: usize,
    /// Latent frame-vector size before width scaling (stochastic model).
    pub latent_h: usize,
    /// Latent noise size before width scaling (stochastic model).
    pub latent_z: usize,
    /// Recurrent width before width scaling (stochastic model).
    pub lstm_width: usize,
    /// Weight on the KL term (stochastic model).
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::UNet,
            in_frames: 6,
            out_frames: 6,
            dyn_channels: 5,
            static_channels: 1,
            base_width: 1.0,
            spatial: 256,
            latent_h: 512,
            latent_z: 256,
            lstm_width: 256,
            kl_weight: 1e-4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_frames == 0 || self.out_frames == 0 {
            return Err(Error::Config("frame counts must be positive".into()));
        }
        if self.dyn_channels == 0 {
            return Err(Error::Config("dyn_channels must be positive".into()));
        }
        if self.base_width <= 0.0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        let divisor = match self.kind {
            ModelKind::UNet => 16,
            ModelKind::ConvLstm | ModelKind::SvgLp => 8,
        };
        if self.spatial == 0 || self.spatial % divisor != 0 {
            return Err(Error::Config(format!(
                "spatial extent must be a positive multiple of {divisor}"
            )));
        }
        Ok(())
    }

    /// A layer width after applying the global multiplier.
    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.base_width).round() as usize).max(1)
    }

    /// Channels seen by a model that consumes one frame at a time.
    pub fn frame_channels(&self) -> usize {
        self.dyn_channels + self.static_channels
    }

    /// Channels seen by a model that consumes all input frames stacked.
    pub fn stacked_channels(&self) -> usize {
        self.in_frames * self.dyn_channels + self.static_channels
    }
}

/// One named tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Ordered collection of named tensors, including non-trainable running
/// statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.params[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.params[i].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Sum of squares over the trainable tensors (for the L2 penalty value).
    pub fn l2_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// One forward pass: prediction, optional KL term and the parameter binding
/// that maps store names to tape leaves.
pub struct Forward {
    /// (N, out_frames, H, W) prediction in transformed units.
    pub pred: Var,
    /// KL divergence term (stochastic model only), already frame-normalized
    /// but not yet multiplied by `kl_weight`.
    pub kl: Option<Var>,
    pub binding: BTreeMap<String, Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One training or inference batch.
#[derive(Debug, Clone)]
pub struct BatchInput {
    /// (N, in_frames, dyn_channels, H, W).
    pub dynamic: Array5<f64>,
    /// (N, static_channels, H, W).
    pub statics: Array4<f64>,
    /// (N, out_frames, H, W); required when training the stochastic model.
    pub target: Option<Array4<f64>>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

// ---- initialization ----

struct InitCtx<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl InitCtx<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Convolution weight (cout, cin, k, k) with He-uniform fan-in scaling,
    /// plus a zero bias.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = self.uniform(&[cout, cin, k, k], bound);
        self.store.insert(&format!("{name}.weight"), w, true);
        self.store
            .insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])), true);
    }

    /// Transposed-convolution weight (cin, cout, k, k) plus a zero bias.
    fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = self.uniform(&[cin, cout, k, k], bound);
        self.store.insert(&format!("{name}.weight"), w, true);
        self.store
            .insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])), true);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.store
            .insert(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), 1.0), true);
        self.store
            .insert(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), true);
        self.store.insert(
            &format!("{name}.running_mean"),
            ArrayD::zeros(IxDyn(&[c])),
            false,
        );
        self.store.insert(
            &format!("{name}.running_var"),
            ArrayD::from_elem(IxDyn(&[c]), 1.0),
            false,
        );
    }

    /// Dense weight stored (din, dout) plus a zero bias.
    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let bound = (6.0 / din as f64).sqrt();
        let w = self.uniform(&[din, dout], bound);
        self.store.insert(&format!("{name}.weight"), w, true);
        self.store
            .insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dout])), true);
    }

    /// ConvLSTM cell: one 3x3 convolution from [x, h] to the four gates, with
    /// the forget-gate bias lifted to 1.
    fn conv_lstm(&mut self, name: &str, cin: usize, hidden: usize) {
        let k = 3;
        let bound = (6.0 / ((cin + hidden) * k * k) as f64).sqrt();
        let w = self.uniform(&[4 * hidden, cin + hidden, k, k], bound);
        self.store.insert(&format!("{name}.weight"), w, true);
        let mut b = Array1::<f64>::zeros(4 * hidden);
        b.slice_mut(ndarray::s![hidden..2 * hidden]).fill(1.0);
        self.store.insert(&format!("{name}.bias"), b.into_dyn(), true);
    }

    /// Dense LSTM cell: input and recurrent weights to the four gates, with
    /// the forget-gate bias lifted to 1.
    fn lstm(&mut self, name: &str, din: usize, hidden: usize) {
        let bx = (6.0 / din as f64).sqrt();
        let bh = (6.0 / hidden as f64).sqrt();
        let wx = self.uniform(&[din, 4 * hidden], bx);
        let wh = self.uniform(&[hidden, 4 * hidden], bh);
        self.store.insert(&format!("{name}.wx"), wx, true);
        self.store.insert(&format!("{name}.wh"), wh, true);
        let mut b = Array1::<f64>::zeros(4 * hidden);
        b.slice_mut(ndarray::s![hidden..2 * hidden]).fill(1.0);
        self.store.insert(&format!("{name}.bias"), b.into_dyn(), true);
    }
}

const UNET_ENC_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const UNET_ENC_CONVS: [usize; 5] = [2, 2, 3, 3, 3];
const UNET_DEC_WIDTHS: [usize; 4] = [512, 256, 128, 64];
const UNET_DEC_CONVS: [usize; 4] = [3, 3, 2, 3];
const CONVLSTM_WIDTHS: [usize; 3] = [64, 192, 192];
const SVG_ENC_WIDTHS: [usize; 3] = [64, 128, 256];

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut ctx = InitCtx {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        match cfg.kind {
            ModelKind::UNet => init_unet(&cfg, &mut ctx),
            ModelKind::ConvLstm => init_convlstm(&cfg, &mut ctx),
            ModelKind::SvgLp => init_svg(&cfg, &mut ctx),
        }
        Ok(Model { cfg, store })
    }

    pub fn n_params(&self) -> usize {
        self.store.n_trainable()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: &BatchInput,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward> {
        let s = input.dynamic.shape();
        if s[1] != self.cfg.in_frames
            || s[2] != self.cfg.dyn_channels
            || s[3] != self.cfg.spatial
            || s[4] != self.cfg.spatial
        {
            return Err(Error::Shape(format!(
                "dynamic input {:?} does not match model config",
                s
            )));
        }
        let mut binding = BTreeMap::new();
        for p in self.store.iter() {
            if p.trainable {
                binding.insert(p.name.clone(), tape.leaf(p.value.clone()));
            }
        }
        let mut fc = ForwardCtx {
            tape,
            binding: &binding,
            store: &self.store,
            mode,
            bn_updates: Vec::new(),
        };
        let out = match self.cfg.kind {
            ModelKind::UNet => forward_unet(&self.cfg, &mut fc, input)?,
            ModelKind::ConvLstm => forward_convlstm(&self.cfg, &mut fc, input)?,
            ModelKind::SvgLp => forward_svg(&self.cfg, &mut fc, input, rng)?,
        };
        let updates = std::mem::take(&mut fc.bn_updates);
        for (name, mean, var) in updates {
            let rm = self.store.get_mut(&format!("{name}.running_mean"));
            for (r, m) in rm.iter_mut().zip(mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.store.get_mut(&format!("{name}.running_var"));
            for (r, v) in rv.iter_mut().zip(var.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(Forward {
            pred: out.0,
            kl: out.1,
            binding,
        })
    }

    // ---- checkpointing ----

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut blob: Vec<u8> = Vec::new();
        for p in self.store.iter() {
            entries.push(serde_json::json!({
                "name": p.name,
                "shape": p.value.shape(),
                "trainable": p.trainable,
                "offset": offset,
            }));
            for v in p.value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += p.value.len();
        }
        let index = serde_json::json!({
            "format": 1,
            "config": self.cfg,
            "params": entries,
        });
        let index_path = dir.join("index.json");
        std::fs::write(&index_path, serde_json::to_string_pretty(&index).unwrap()).map_err(
            |e| Error::Io {
                path: index_path.display().to_string(),
                source: e,
            },
        )?;
        let weights_path = dir.join("weights.bin");
        let mut f = std::fs::File::create(&weights_path).map_err(|e| Error::Io {
            path: weights_path.display().to_string(),
            source: e,
        })?;
        f.write_all(&blob).map_err(|e| Error::Io {
            path: weights_path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::Io {
            path: index_path.display().to_string(),
            source: e,
        })?;
        let index: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad index.json: {e}")))?;
        let cfg: ModelConfig = serde_json::from_value(index["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint config: {e}")))?;
        let weights_path = dir.join("weights.bin");
        let mut blob = Vec::new();
        std::fs::File::open(&weights_path)
            .and_then(|mut f| f.read_to_end(&mut blob))
            .map_err(|e| Error::Io {
                path: weights_path.display().to_string(),
                source: e,
            })?;
        let mut store = ParamStore::new();
        let entries = index["params"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint("missing params list".into()))?;
        for e in entries {
            let name = e["name"]
                .as_str()
                .ok_or_else(|| Error::Checkpoint("param without name".into()))?;
            let shape: Vec<usize> = serde_json::from_value(e["shape"].clone())
                .map_err(|err| Error::Checkpoint(format!("bad shape for {name}: {err}")))?;
            let trainable = e["trainable"].as_bool().unwrap_or(true);
            let offset = e["offset"].as_u64().unwrap_or(0) as usize;
            let n: usize = shape.iter().product();
            let start = offset * 8;
            let end = start + n * 8;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "weights.bin too short for {name}"
                )));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap(), trainable);
        }
        Ok(Model { cfg, store })
    }
}

// ---- forward helpers ----

struct ForwardCtx<'a> {
    tape: &'a mut Tape,
    binding: &'a BTreeMap<String, Var>,
    store: &'a ParamStore,
    mode: Mode,
    bn_updates: Vec<(String, Array1<f64>, Array1<f64>)>,
}

impl ForwardCtx<'_> {
    fn var(&self, name: &str) -> Var {
        *self
            .binding
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        let y = self.tape.conv2d(x, w, stride, pad);
        self.tape.add_bias(y, b)
    }

    fn deconv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        let y = self.tape.conv_transpose2d(x, w, stride, pad);
        self.tape.add_bias(y, b)
    }

    fn bn(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.var(&format!("{name}.gamma"));
        let beta = self.var(&format!("{name}.beta"));
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batch_norm(x, gamma, beta, BN_EPS);
                self.bn_updates.push((name.to_string(), mean, var));
                y
            }
            Mode::Eval => {
                let rm = as1(self.store.get(&format!("{name}.running_mean")));
                let rv = as1(self.store.get(&format!("{name}.running_var")));
                self.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }

    /// 3x3 convolution, batch norm, leaky ReLU.
    fn conv_block(&mut self, name: &str, x: Var) -> Var {
        let y = self.conv(name, x, 1, 1);
        let y = self.bn(&format!("{name}.bn"), y);
        self.tape.leaky_relu(y, LEAKY_SLOPE)
    }

    fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    /// One ConvLSTM step; returns (h, c).
    fn conv_lstm_step(&mut self, name: &str, x: Var, h: Var, c: Var, hidden: usize) -> (Var, Var) {
        let xh = self.tape.concat(&[x, h], 1);
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        let gates = self.tape.conv2d(xh, w, 1, 1);
        let gates = self.tape.add_bias(gates, b);
        let i = self.tape.slice_axis(gates, 1, 0, hidden);
        let f = self.tape.slice_axis(gates, 1, hidden, hidden);
        let g = self.tape.slice_axis(gates, 1, 2 * hidden, hidden);
        let o = self.tape.slice_axis(gates, 1, 3 * hidden, hidden);
        let i = self.tape.sigmoid(i);
        let f = self.tape.sigmoid(f);
        let g = self.tape.tanh(g);
        let o = self.tape.sigmoid(o);
        let fc_ = self.tape.mul(f, c);
        let ig = self.tape.mul(i, g);
        let c_new = self.tape.add(fc_, ig);
        let tc = self.tape.tanh(c_new);
        let h_new = self.tape.mul(o, tc);
        (h_new, c_new)
    }

    /// One dense LSTM step on (N, din); returns (h, c).
    fn lstm_step(&mut self, name: &str, x: Var, h: Var, c: Var, hidden: usize) -> (Var, Var) {
        let wx = self.var(&format!("{name}.wx"));
        let wh = self.var(&format!("{name}.wh"));
        let b = self.var(&format!("{name}.bias"));
        let gx = self.tape.matmul(x, wx);
        let gh = self.tape.matmul(h, wh);
        let gsum = self.tape.add(gx, gh);
        let gates = self.tape.add_bias(gsum, b);
        let i = self.tape.slice_axis(gates, 1, 0, hidden);
        let f = self.tape.slice_axis(gates, 1, hidden, hidden);
        let g = self.tape.slice_axis(gates, 1, 2 * hidden, hidden);
        let o = self.tape.slice_axis(gates, 1, 3 * hidden, hidden);
        let i = self.tape.sigmoid(i);
        let f = self.tape.sigmoid(f);
        let g = self.tape.tanh(g);
        let o = self.tape.sigmoid(o);
        let fc_ = self.tape.mul(f, c);
        let ig = self.tape.mul(i, g);
        let c_new = self.tape.add(fc_, ig);
        let tc = self.tape.tanh(c_new);
        let h_new = self.tape.mul(o, tc);
        (h_new, c_new)
    }

    fn zeros(&mut self, shape: &[usize]) -> Var {
        self.tape.constant(ArrayD::zeros(IxDyn(shape)))
    }
}

fn as1(a: &ArrayD<f64>) -> Array1<f64> {
    a.clone()
        .into_shape_with_order(IxDyn(&[a.len()]))
        .unwrap()
        .into_dimensionality()
        .unwrap()
}

// ---- U-net ----

fn init_unet(cfg: &ModelConfig, ctx: &mut InitCtx) {
    let mut cin = cfg.stacked_channels();
    for (i, (&w, &n)) in UNET_ENC_WIDTHS.iter().zip(UNET_ENC_CONVS.iter()).enumerate() {
        let cout = cfg.width(w);
        for j in 0..n {
            let name = format!("unet.enc{i}.conv{j}");
            ctx.conv(&name, cout, cin, 3);
            ctx.bn(&format!("{name}.bn"), cout);
            cin = cout;
        }
    }
    for (j, (&w, &n)) in UNET_DEC_WIDTHS.iter().zip(UNET_DEC_CONVS.iter()).enumerate() {
        let skip = cfg.width(UNET_ENC_WIDTHS[3 - j]);
        let cout = cfg.width(w);
        let mut c = cin + skip;
        for k in 0..n {
            let name = format!("unet.dec{j}.conv{k}");
            ctx.conv(&name, cout, c, 3);
            ctx.bn(&format!("{name}.bn"), cout);
            c = cout;
        }
        cin = cout;
    }
    ctx.conv("unet.head", cfg.out_frames, cin, 1);
}

fn forward_unet(cfg: &ModelConfig, fc: &mut ForwardCtx, input: &BatchInput) -> Result<(Var, Option<Var>)> {
    let s = input.dynamic.shape();
    let (n, h, w) = (s[0], s[3], s[4]);
    let stacked = input
        .dynamic
        .clone()
        .into_shape_with_order((n, cfg.in_frames * cfg.dyn_channels, h, w))
        .unwrap();
    let xd = fc.tape.constant(stacked.into_dyn());
    let xs = fc.tape.constant(input.statics.clone().into_dyn());
    let mut x = fc.tape.concat(&[xd, xs], 1);

    let mut skips = Vec::new();
    for (i, &nconv) in UNET_ENC_CONVS.iter().enumerate() {
        for j in 0..nconv {
            x = fc.conv_block(&format!("unet.enc{i}.conv{j}"), x);
        }
        if i < 4 {
            skips.push(x);
            x = fc.tape.avg_pool2(x);
        }
    }
    for (j, &nconv) in UNET_DEC_CONVS.iter().enumerate() {
        x = fc.tape.upsample_nearest2(x);
        let skip = skips[3 - j];
        x = fc.tape.concat(&[x, skip], 1);
        for k in 0..nconv {
            x = fc.conv_block(&format!("unet.dec{j}.conv{k}"), x);
        }
    }
    let head = fc.conv("unet.head", x, 1, 0);
    let pred = fc.tape.reshape(head, &[n, cfg.out_frames, h, w]);
    Ok((pred, None))
}

// ---- ConvLSTM ----

fn init_convlstm(cfg: &ModelConfig, ctx: &mut InitCtx) {
    let widths: Vec<usize> = CONVLSTM_WIDTHS.iter().map(|&w| cfg.width(w)).collect();
    let mut cin = cfg.frame_channels();
    for (i, &w) in widths.iter().enumerate() {
        ctx.conv(&format!("convlstm.enc.conv{i}"), w, cin, 4);
        ctx.conv_lstm(&format!("convlstm.enc.lstm{i}"), w, w);
        cin = w;
    }
    // decoder mirrors the encoder: states arrive from the matching encoder
    // depth, so hidden sizes run 192, 192, 64
    ctx.conv_lstm("convlstm.dec.lstm0", widths[2], widths[2]);
    ctx.deconv("convlstm.dec.deconv0", widths[2], widths[1], 4);
    ctx.conv_lstm("convlstm.dec.lstm1", widths[1], widths[1]);
    ctx.deconv("convlstm.dec.deconv1", widths[1], widths[0], 4);
    ctx.conv_lstm("convlstm.dec.lstm2", widths[0], widths[0]);
    ctx.deconv("convlstm.dec.deconv2", widths[0], widths[0], 4);
    ctx.conv("convlstm.dec.conv", widths[0], widths[0], 3);
    ctx.conv("convlstm.head", 1, widths[0], 1);
}

fn forward_convlstm(
    cfg: &ModelConfig,
    fc: &mut ForwardCtx,
    input: &BatchInput,
) -> Result<(Var, Option<Var>)> {
    let s = input.dynamic.shape();
    let (n, h, w) = (s[0], s[3], s[4]);
    let widths: Vec<usize> = CONVLSTM_WIDTHS.iter().map(|&wd| cfg.width(wd)).collect();
    let spatials = [h / 2, h / 4, h / 8];
    let xs = fc.tape.constant(input.statics.clone().into_dyn());

    let mut states: Vec<(Var, Var)> = (0..3)
        .map(|i| {
            let shape = [n, widths[i], spatials[i], spatials[i]];
            (fc.zeros(&shape), fc.zeros(&shape))
        })
        .collect();

    for t in 0..cfg.in_frames {
        let frame = input.dynamic.index_axis(Axis(1), t).to_owned();
        let xd = fc.tape.constant(frame.into_dyn());
        let mut x = fc.tape.concat(&[xd, xs], 1);
        for i in 0..3 {
            let y = fc.conv(&format!("convlstm.enc.conv{i}"), x, 2, 1);
            let y = fc.tape.leaky_relu(y, LEAKY_SLOPE);
            let (hh, cc) = fc.conv_lstm_step(
                &format!("convlstm.enc.lstm{i}"),
                y,
                states[i].0,
                states[i].1,
                widths[i],
            );
            states[i] = (hh, cc);
            x = hh;
        }
    }

    // forecaster states start from the matching encoder depths
    let mut dstates = [states[2], states[1], states[0]];
    let dwidths = [widths[2], widths[1], widths[0]];
    let mut frames = Vec::with_capacity(cfg.out_frames);
    for _ in 0..cfg.out_frames {
        // the deepest forecaster cell is driven by its own previous hidden
        let (h0, c0) = fc.conv_lstm_step(
            "convlstm.dec.lstm0",
            dstates[0].0,
            dstates[0].0,
            dstates[0].1,
            dwidths[0],
        );
        dstates[0] = (h0, c0);
        let y = fc.deconv("convlstm.dec.deconv0", h0, 2, 1);
        let y = fc.tape.leaky_relu(y, LEAKY_SLOPE);
        let (h1, c1) = fc.conv_lstm_step("convlstm.dec.lstm1", y, dstates[1].0, dstates[1].1, dwidths[1]);
        dstates[1] = (h1, c1);
        let y = fc.deconv("convlstm.dec.deconv1", h1, 2, 1);
        let y = fc.tape.leaky_relu(y, LEAKY_SLOPE);
        let (h2, c2) = fc.conv_lstm_step("convlstm.dec.lstm2", y, dstates[2].0, dstates[2].1, dwidths[2]);
        dstates[2] = (h2, c2);
        let y = fc.deconv("convlstm.dec.deconv2", h2, 2, 1);
        let y = fc.tape.leaky_relu(y, LEAKY_SLOPE);
        let y = fc.conv("convlstm.dec.conv", y, 1, 1);
        let y = fc.tape.leaky_relu(y, LEAKY_SLOPE);
        let y = fc.conv("convlstm.head", y, 1, 0);
        frames.push(y);
    }
    let pred = fc.tape.concat(&frames, 1);
    let pred = fc.tape.reshape(pred, &[n, cfg.out_frames, h, w]);
    Ok((pred, None))
}

// ---- stochastic latent-variable predictor ----

fn init_svg(cfg: &ModelConfig, ctx: &mut InitCtx) {
    let widths: Vec<usize> = SVG_ENC_WIDTHS.iter().map(|&w| cfg.width(w)).collect();
    let h_dim = cfg.width(cfg.latent_h);
    let z_dim = cfg.width(cfg.latent_z);
    let lstm = cfg.width(cfg.lstm_width);
    let bottom = cfg.spatial / 8;

    let mut cin = cfg.frame_channels();
    for (i, &w) in widths.iter().enumerate() {
        let name = format!("svg.enc.conv{i}");
        ctx.conv(&name, w, cin, 3);
        ctx.bn(&format!("{name}.bn"), w);
        cin = w;
    }
    ctx.conv("svg.enc.full", h_dim, widths[2], bottom);
    ctx.bn("svg.enc.full.bn", h_dim);

    ctx.deconv("svg.dec.full", h_dim, widths[2], bottom);
    ctx.bn("svg.dec.full.bn", widths[2]);
    let dec_in = [widths[2] * 2, widths[1] * 2, widths[0] * 2];
    let dec_out = [widths[1], widths[0], widths[0]];
    for i in 0..3 {
        let name = format!("svg.dec.conv{i}");
        ctx.conv(&name, dec_out[i], dec_in[i], 3);
        ctx.bn(&format!("{name}.bn"), dec_out[i]);
    }
    ctx.conv("svg.dec.head", 1, widths[0], 1);

    ctx.linear("svg.pred.embed", h_dim + z_dim, lstm);
    ctx.lstm("svg.pred.lstm0", lstm, lstm);
    ctx.lstm("svg.pred.lstm1", lstm, lstm);
    ctx.linear("svg.pred.out", lstm, h_dim);
    for branch in ["post", "prior"] {
        ctx.linear(&format!("svg.{branch}.embed"), h_dim, lstm);
        ctx.lstm(&format!("svg.{branch}.lstm"), lstm, lstm);
        ctx.linear(&format!("svg.{branch}.mu"), lstm, z_dim);
        ctx.linear(&format!("svg.{branch}.logvar"), lstm, z_dim);
    }
}

struct SvgEncoded {
    h: Var,
    skips: [Var; 3],
}

fn svg_encode(fc: &mut ForwardCtx, frame: Var) -> SvgEncoded {
    let mut x = frame;
    let mut skips = Vec::with_capacity(3);
    for i in 0..3 {
        x = fc.conv_block(&format!("svg.enc.conv{i}"), x);
        skips.push(x);
        x = fc.tape.avg_pool2(x);
    }
    let y = fc.conv("svg.enc.full", x, 1, 0);
    let y = fc.bn("svg.enc.full.bn", y);
    let h = fc.tape.tanh(y);
    SvgEncoded {
        h,
        skips: [skips[0], skips[1], skips[2]],
    }
}

fn svg_decode(fc: &mut ForwardCtx, g: Var, skips: &[Var; 3]) -> Var {
    let y = fc.deconv("svg.dec.full", g, 1, 0);
    let y = fc.bn("svg.dec.full.bn", y);
    let mut x = fc.tape.leaky_relu(y, LEAKY_SLOPE);
    for i in 0..3 {
        x = fc.tape.upsample_nearest2(x);
        let skip = skips[2 - i];
        x = fc.tape.concat(&[x, skip], 1);
        x = fc.conv_block(&format!("svg.dec.conv{i}"), x);
    }
    fc.conv("svg.dec.head", x, 1, 0)
}

fn forward_svg(
    cfg: &ModelConfig,
    fc: &mut ForwardCtx,
    input: &BatchInput,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Option<Var>)> {
    let s = input.dynamic.shape();
    let (n, h, w) = (s[0], s[3], s[4]);
    let h_dim = cfg.width(cfg.latent_h);
    let z_dim = cfg.width(cfg.latent_z);
    let lstm = cfg.width(cfg.lstm_width);
    let total = cfg.in_frames + cfg.out_frames;
    let train = fc.mode == Mode::Train;
    if train && input.target.is_none() {
        return Err(Error::Data(
            "stochastic model training requires target frames".into(),
        ));
    }

    // per-frame inputs: dynamic channels plus the static channels; generated
    // and target frames reuse the covariates of the last conditioning frame
    let xs = input.statics.clone();
    let last_cov = input
        .dynamic
        .index_axis(Axis(1), cfg.in_frames - 1)
        .to_owned();
    let frame_array = |precip_only: Option<&Array4<f64>>, t: usize| -> Array4<f64> {
        match precip_only {
            None => {
                let f = input.dynamic.index_axis(Axis(1), t).to_owned();
                ndarray::concatenate(Axis(1), &[f.view(), xs.view()]).unwrap()
            }
            Some(p) => {
                let mut f = last_cov.clone();
                f.index_axis_mut(Axis(1), 0)
                    .assign(&p.index_axis(Axis(1), t - cfg.in_frames));
                ndarray::concatenate(Axis(1), &[f.view(), xs.view()]).unwrap()
            }
        }
    };

    let mut pred_states = [
        (fc.zeros(&[n, lstm]), fc.zeros(&[n, lstm])),
        (fc.zeros(&[n, lstm]), fc.zeros(&[n, lstm])),
    ];
    let mut post_state = (fc.zeros(&[n, lstm]), fc.zeros(&[n, lstm]));
    let mut prior_state = (fc.zeros(&[n, lstm]), fc.zeros(&[n, lstm]));

    let mut skips: Option<[Var; 3]> = None;
    let mut preds: Vec<Var> = Vec::with_capacity(cfg.out_frames);
    let mut kl_terms: Vec<Var> = Vec::new();
    let mut last_pred_frame: Option<ArrayD<f64>> = None;

    for t in 1..total {
        // representation of the frame feeding the predictor
        let prev_arr: Array4<f64> = if t - 1 < cfg.in_frames {
            frame_array(None, t - 1)
        } else if train {
            frame_array(input.target.as_ref(), t - 1)
        } else {
            let p = last_pred_frame.clone().expect("previous prediction");
            let mut f = last_cov.clone();
            f.index_axis_mut(Axis(1), 0).assign(
                &p.into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .insert_axis(Axis(0))
                    .index_axis(Axis(0), 0),
            );
            ndarray::concatenate(Axis(1), &[f.view(), xs.view()]).unwrap()
        };
        let prev = fc.tape.constant(prev_arr.into_dyn());
        let enc_prev = svg_encode(fc, prev);
        if t - 1 == cfg.in_frames - 1 {
            skips = Some(enc_prev.skips);
        }
        let h_prev = fc.tape.reshape(enc_prev.h, &[n, h_dim]);

        // latent sample
        let z = if train {
            let tgt_arr = if t < cfg.in_frames {
                frame_array(None, t)
            } else {
                frame_array(input.target.as_ref(), t)
            };
            let tgt = fc.tape.constant(tgt_arr.into_dyn());
            let enc_tgt = svg_encode(fc, tgt);
            let h_tgt = fc.tape.reshape(enc_tgt.h, &[n, h_dim]);

            let e = fc.linear("svg.post.embed", h_tgt);
            let e = fc.tape.tanh(e);
            let (hh, cc) = fc.lstm_step("svg.post.lstm", e, post_state.0, post_state.1, lstm);
            post_state = (hh, cc);
            let mu_q = fc.linear("svg.post.mu", hh);
            let lv_q = fc.linear("svg.post.logvar", hh);

            let e = fc.linear("svg.prior.embed", h_prev);
            let e = fc.tape.tanh(e);
            let (hp, cp) = fc.lstm_step("svg.prior.lstm", e, prior_state.0, prior_state.1, lstm);
            prior_state = (hp, cp);
            let mu_p = fc.linear("svg.prior.mu", hp);
            let lv_p = fc.linear("svg.prior.logvar", hp);

            // KL(q || p) for diagonal Gaussians
            let lv_diff = fc.tape.sub(lv_p, lv_q);
            let var_q = fc.tape.exp(lv_q);
            let dmu = fc.tape.sub(mu_q, mu_p);
            let dmu2 = fc.tape.square(dmu);
            let num = fc.tape.add(var_q, dmu2);
            let var_p = fc.tape.exp(lv_p);
            let ratio = fc.tape.div(num, var_p);
            let inner = fc.tape.add(lv_diff, ratio);
            let inner = fc.tape.add_scalar(inner, -1.0);
            let half = fc.tape.mul_scalar(inner, 0.5);
            kl_terms.push(fc.tape.sum(half));

            let noise: Vec<f64> = (0..n * z_dim).map(|_| gauss(rng)).collect();
            let eps = fc
                .tape
                .constant(ArrayD::from_shape_vec(IxDyn(&[n, z_dim]), noise).unwrap());
            let half_lv = fc.tape.mul_scalar(lv_q, 0.5);
            let sigma = fc.tape.exp(half_lv);
            let se = fc.tape.mul(sigma, eps);
            fc.tape.add(mu_q, se)
        } else {
            let e = fc.linear("svg.prior.embed", h_prev);
            let e = fc.tape.tanh(e);
            let (hp, cp) = fc.lstm_step("svg.prior.lstm", e, prior_state.0, prior_state.1, lstm);
            prior_state = (hp, cp);
            let mu_p = fc.linear("svg.prior.mu", hp);
            let lv_p = fc.linear("svg.prior.logvar", hp);
            let noise: Vec<f64> = (0..n * z_dim).map(|_| gauss(rng)).collect();
            let eps = fc
                .tape
                .constant(ArrayD::from_shape_vec(IxDyn(&[n, z_dim]), noise).unwrap());
            let half_lv = fc.tape.mul_scalar(lv_p, 0.5);
            let sigma = fc.tape.exp(half_lv);
            let se = fc.tape.mul(sigma, eps);
            fc.tape.add(mu_p, se)
        };

        // deterministic frame predictor
        let hz = fc.tape.concat(&[h_prev, z], 1);
        let e = fc.linear("svg.pred.embed", hz);
        let e = fc.tape.tanh(e);
        let (h0, c0) = fc.lstm_step("svg.pred.lstm0", e, pred_states[0].0, pred_states[0].1, lstm);
        pred_states[0] = (h0, c0);
        let (h1, c1) = fc.lstm_step("svg.pred.lstm1", h0, pred_states[1].0, pred_states[1].1, lstm);
        pred_states[1] = (h1, c1);
        let g = fc.linear("svg.pred.out", h1);
        let g = fc.tape.tanh(g);

        if t >= cfg.in_frames {
            let g4 = fc.tape.reshape(g, &[n, h_dim, 1, 1]);
            let skip = skips.as_ref().expect("conditioning skips");
            let frame = svg_decode(fc, g4, skip);
            if !train {
                last_pred_frame = Some(fc.tape.value(frame).clone());
            }
            preds.push(frame);
        }
    }

    let pred = fc.tape.concat(&preds, 1);
    let pred = fc.tape.reshape(pred, &[n, cfg.out_frames, h, w]);
    let kl = if kl_terms.is_empty() {
        None
    } else {
        let mut acc = kl_terms[0];
        for k in &kl_terms[1..] {
            acc = fc.tape.add(acc, *k);
        }
        let norm = 1.0 / (n * (total - 1)) as f64;
        Some(fc.tape.mul_scalar(acc, norm))
    };
    Ok((pred, kl))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller transform on two open-interval uniforms
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use tempfile::TempDir;

    fn tiny_cfg(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            in_frames: 2,
            out_frames: 2,
            dyn_channels: 3,
            static_channels: 1,
            base_width: 1.0 / 32.0,
            spatial: 16,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn tiny_input(cfg: &ModelConfig, with_target: bool) -> BatchInput {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 2;
        let dynamic = Array5::from_shape_fn(
            (n, cfg.in_frames, cfg.dyn_channels, cfg.spatial, cfg.spatial),
            |_| rng.gen_range(-1.0..1.0),
        );
        let statics = Array4::from_shape_fn((n, cfg.static_channels, cfg.spatial, cfg.spatial), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let target = with_target.then(|| {
            Array4::from_shape_fn((n, cfg.out_frames, cfg.spatial, cfg.spatial), |_| {
                rng.gen_range(-1.0..1.0)
            })
        });
        BatchInput {
            dynamic,
            statics,
            target,
        }
    }

    fn forward_shape_and_grads(kind: ModelKind) {
        let cfg = tiny_cfg(kind);
        let mut model = Model::new(cfg.clone()).unwrap();
        let input = tiny_input(&cfg, true);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fwd = model
            .forward(&mut tape, &input, Mode::Train, &mut rng)
            .unwrap();
        assert_eq!(
            tape.shape(fwd.pred),
            &[2, cfg.out_frames, cfg.spatial, cfg.spatial]
        );
        assert!(tape.value(fwd.pred).iter().all(|v| v.is_finite()));

        let mut root = tape.sum(fwd.pred);
        if let Some(kl) = fwd.kl {
            root = tape.add(root, kl);
        }
        let grads = tape.backward(root);
        for (name, var) in &fwd.binding {
            let g = grads
                .get(*var)
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            assert_eq!(g.shape(), model.store.get(name).shape(), "{name}");
            assert!(g.iter().all(|v| v.is_finite()), "{name}");
        }
    }

    #[test]
    fn unet_forward_shapes_and_gradient_coverage() {
        forward_shape_and_grads(ModelKind::UNet);
    }

    #[test]
    fn convlstm_forward_shapes_and_gradient_coverage() {
        forward_shape_and_grads(ModelKind::ConvLstm);
    }

    #[test]
    fn svg_forward_shapes_and_gradient_coverage() {
        forward_shape_and_grads(ModelKind::SvgLp);
    }

    #[test]
    fn svg_eval_runs_without_target() {
        let cfg = tiny_cfg(ModelKind::SvgLp);
        let mut model = Model::new(cfg.clone()).unwrap();
        let input = tiny_input(&cfg, false);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fwd = model
            .forward(&mut tape, &input, Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(
            tape.shape(fwd.pred),
            &[2, cfg.out_frames, cfg.spatial, cfg.spatial]
        );
        assert!(fwd.kl.is_none());
    }

    #[test]
    fn svg_train_requires_target() {
        let cfg = tiny_cfg(ModelKind::SvgLp);
        let mut model = Model::new(cfg.clone()).unwrap();
        let input = tiny_input(&cfg, false);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(model
            .forward(&mut tape, &input, Mode::Train, &mut rng)
            .is_err());
    }

    #[test]
    fn unet_param_count_closed_form() {
        // width multiplier 1/32 shrinks the stages to 2,4,8,16,16 and the
        // decoder to 16,8,4,2
        let cfg = tiny_cfg(ModelKind::UNet);
        let model = Model::new(cfg).unwrap();
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let bn = |c: usize| 2 * c;
        let mut expect = 0;
        // encoder: input channels 2*3+1 = 7
        let enc_w = [2, 4, 8, 16, 16];
        let enc_n = [2, 2, 3, 3, 3];
        let mut cin = 7;
        for (w, n) in enc_w.iter().zip(enc_n.iter()) {
            for _ in 0..*n {
                expect += conv(*w, cin, 3) + bn(*w);
                cin = *w;
            }
        }
        let dec_w = [16, 8, 4, 2];
        let dec_n = [3, 3, 2, 3];
        let skip_w = [16, 8, 4, 2];
        for i in 0..4 {
            let mut c = cin + skip_w[i];
            for _ in 0..dec_n[i] {
                expect += conv(dec_w[i], c, 3) + bn(dec_w[i]);
                c = dec_w[i];
            }
            cin = dec_w[i];
        }
        expect += conv(2, cin, 1); // head: out_frames = 2
        assert_eq!(model.n_params(), expect);
    }

    #[test]
    fn convlstm_param_count_closed_form() {
        // widths 2, 6, 6 at multiplier 1/32
        let cfg = tiny_cfg(ModelKind::ConvLstm);
        let model = Model::new(cfg).unwrap();
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let cell = |cin: usize, h: usize| 4 * h * (cin + h) * 9 + 4 * h;
        let mut expect = 0;
        // encoder: frame channels 3+1 = 4
        expect += conv(2, 4, 4) + cell(2, 2);
        expect += conv(6, 2, 4) + cell(6, 6);
        expect += conv(6, 6, 4) + cell(6, 6);
        // forecaster
        expect += cell(6, 6) + conv(6, 6, 4); // lstm0 + deconv0 (6 -> 6)
        expect += cell(6, 6) + conv(2, 6, 4); // lstm1 + deconv1 (6 -> 2)
        expect += cell(2, 2) + conv(2, 2, 4); // lstm2 + deconv2 (2 -> 2)
        expect += conv(2, 2, 3) + conv(1, 2, 1);
        assert_eq!(model.n_params(), expect);
    }

    #[test]
    fn svg_param_count_closed_form() {
        // widths 2, 4, 8; h = 16, z = 8, lstm = 8 at multiplier 1/32
        let cfg = tiny_cfg(ModelKind::SvgLp);
        let model = Model::new(cfg).unwrap();
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let bn = |c: usize| 2 * c;
        let lin = |din: usize, dout: usize| din * dout + dout;
        let lstm = |din: usize, h: usize| din * 4 * h + h * 4 * h + 4 * h;
        let (h_dim, z_dim, l) = (16, 8, 8);
        let bottom = 2; // 16 / 8
        let mut expect = 0;
        // frame encoder: frame channels 4
        expect += conv(2, 4, 3) + bn(2);
        expect += conv(4, 2, 3) + bn(4);
        expect += conv(8, 4, 3) + bn(8);
        expect += conv(h_dim, 8, bottom) + bn(h_dim);
        // decoder
        expect += conv(8, h_dim, bottom) + bn(8);
        expect += conv(4, 16, 3) + bn(4);
        expect += conv(2, 8, 3) + bn(2);
        expect += conv(2, 4, 3) + bn(2);
        expect += conv(1, 2, 1);
        // predictor
        expect += lin(h_dim + z_dim, l) + lstm(l, l) + lstm(l, l) + lin(l, h_dim);
        // posterior and prior
        expect += 2 * (lin(h_dim, l) + lstm(l, l) + lin(l, z_dim) + lin(l, z_dim));
        assert_eq!(model.n_params(), expect);
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = tiny_cfg(ModelKind::UNet);
        let a = Model::new(cfg.clone()).unwrap();
        let b = Model::new(cfg).unwrap();
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let cfg = tiny_cfg(ModelKind::ConvLstm);
        let model = Model::new(cfg).unwrap();
        let dir = TempDir::new().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = Model::load(dir.path()).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        let a: Vec<_> = model.store.iter().collect();
        let b: Vec<_> = loaded.store.iter().collect();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.trainable, pb.trainable);
            assert_eq!(pa.value.shape(), pb.value.shape());
            for (x, y) in pa.value.iter().zip(pb.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", pa.name);
            }
        }
    }

    #[test]
    fn load_missing_checkpoint_fails() {
        let dir = TempDir::new().unwrap();
        assert!(Model::load(&dir.path().join("absent")).is_err());
    }

    #[test]
    fn eval_mode_is_deterministic_for_unet() {
        let cfg = tiny_cfg(ModelKind::UNet);
        let mut model = Model::new(cfg.clone()).unwrap();
        let input = tiny_input(&cfg, false);
        let mut out = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let fwd = model
                .forward(&mut tape, &input, Mode::Eval, &mut rng)
                .unwrap();
            out.push(tape.value(fwd.pred).clone());
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn spatial_divisibility_enforced() {
        let mut cfg = tiny_cfg(ModelKind::UNet);
        cfg.spatial = 24; // not a multiple of 16
        assert!(Model::new(cfg).is_err());
    }
}
