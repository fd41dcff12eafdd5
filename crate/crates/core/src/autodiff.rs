//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records each operation as it executes; [`Tape::backward`] walks
//! the records in reverse and accumulates gradients into every node that
//! requires them. One tape is built per training step and consumed by a single
//! backward pass. All values are `f64`; reduction order is fixed, so gradients
//! are deterministic.
//!
//! Convolutions are im2col/GEMM based. Transposed convolution reuses the same
//! kernels with the data/gradient roles swapped.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView4, Axis, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn FnOnce(&[ArrayD<f64>], &ArrayD<f64>, &mut Grads)>;

struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    fn add(&mut self, id: usize, delta: ArrayD<f64>) {
        match &mut self.g[id] {
            Some(acc) => *acc += &delta,
            slot => *slot = Some(delta),
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackFn>>,
    requires: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: ArrayD<f64>, requires: bool, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    /// A node that participates in gradient computation.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    /// A node treated as a constant.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Runs reverse accumulation from a single-element root. Consumes the
    /// recorded operations; a tape can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(self.values[root.0].len(), 1, "backward root must be scalar");
        let mut grads = Grads {
            g: vec![None; self.values.len()],
        };
        grads.g[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if grads.g[id].is_none() {
                continue;
            }
            if let Some(back) = self.backs[id].take() {
                let gout = grads.g[id].clone().unwrap();
                back(&self.values, &gout, &mut grads);
            }
        }
        Gradients { g: grads.g }
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: ArrayD<f64>,
        back: impl FnOnce(&[ArrayD<f64>], &ArrayD<f64>) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>)
            + 'static,
    ) -> Var {
        let (ra, rb) = (self.req(a), self.req(b));
        let requires = ra || rb;
        let f: Option<BackFn> = if requires {
            Some(Box::new(move |vals, gout, grads| {
                let (ga, gb) = back(vals, gout);
                if ra {
                    if let Some(g) = ga {
                        grads.add(a.0, g);
                    }
                }
                if rb {
                    if let Some(g) = gb {
                        grads.add(b.0, g);
                    }
                }
            }))
        } else {
            None
        };
        self.push(value, requires, f)
    }

    fn unary(
        &mut self,
        a: Var,
        value: ArrayD<f64>,
        back: impl FnOnce(&[ArrayD<f64>], &ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var {
        let requires = self.req(a);
        let f: Option<BackFn> = if requires {
            Some(Box::new(move |vals, gout, grads| {
                grads.add(a.0, back(vals, gout));
            }))
        } else {
            None
        };
        self.push(value, requires, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let v = &self.values[a.0] + &self.values[b.0];
        self.binary(a, b, v, move |_, g| (Some(g.clone()), Some(g.clone())))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let v = &self.values[a.0] - &self.values[b.0];
        self.binary(a, b, v, move |_, g| (Some(g.clone()), Some(-g)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let v = &self.values[a.0] * &self.values[b.0];
        self.binary(a, b, v, move |vals, g| {
            (Some(g * &vals[b.0]), Some(g * &vals[a.0]))
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let v = &self.values[a.0] / &self.values[b.0];
        self.binary(a, b, v, move |vals, g| {
            let gb = -g * &vals[a.0] / (&vals[b.0] * &vals[b.0]);
            (Some(g / &vals[b.0]), Some(gb))
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] + c;
        self.unary(a, v, move |_, g| g.clone())
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        self.unary(a, v, move |_, g| g * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::sqrt);
        self.unary(a, v.clone(), move |_, g| g * &v.mapv(|y| 0.5 / y))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::exp);
        self.unary(a, v.clone(), move |_, g| g * &v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(a, v.clone(), move |_, g| g * &v.mapv(|y| y * (1.0 - y)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.unary(a, v.clone(), move |_, g| g * &v.mapv(|y| 1.0 - y * y))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let x = self.values[a.0].clone();
        let v = x.mapv(|t| if t >= 0.0 { t } else { slope * t });
        self.unary(a, v, move |_, g| {
            g * &x.mapv(|t| if t >= 0.0 { 1.0 } else { slope })
        })
    }

    // ---- reductions and shape ----

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.values[a.0].sum();
        let shape = self.values[a.0].raw_dim();
        let v = ArrayD::from_elem(IxDyn(&[1]), total);
        self.unary(a, v, move |_, g| ArrayD::from_elem(shape, g[[0]]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.values[a.0].raw_dim();
        let v = self.values[a.0]
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.unary(a, v, move |_, g| {
            g.as_standard_layout()
                .to_owned()
                .into_shape_with_order(old)
                .unwrap()
        })
    }

    /// Contiguous slice along one axis.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.values[a.0]
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let full = self.values[a.0].raw_dim();
        self.unary(a, v, move |_, g| {
            let mut out = ArrayD::zeros(full);
            out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                .assign(g);
            out
        })
    }

    /// Concatenation along one axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shape mismatch")
            .as_standard_layout()
            .to_owned();
        let ids: Vec<(usize, usize, bool)> = parts
            .iter()
            .map(|p| (p.0, self.values[p.0].shape()[axis], self.requires[p.0]))
            .collect();
        let requires = ids.iter().any(|(_, _, r)| *r);
        let f: Option<BackFn> = if requires {
            Some(Box::new(move |_, gout, grads| {
                let mut offset = 0;
                for (id, len, r) in ids {
                    if r {
                        let piece = gout
                            .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        grads.add(id, piece);
                    }
                    offset += len;
                }
            }))
        } else {
            None
        };
        self.push(v, requires, f)
    }

    // ---- linear algebra ----

    /// (N,K) x (K,M) -> (N,M).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let bv = as2(&self.values[b.0]);
        let v = av.dot(&bv).into_dyn();
        self.binary(a, b, v, move |vals, g| {
            let g2 = as2(g);
            let av = as2(&vals[a.0]);
            let bv = as2(&vals[b.0]);
            (
                Some(g2.dot(&bv.t()).into_dyn()),
                Some(av.t().dot(&g2).into_dyn()),
            )
        })
    }

    /// Adds a per-channel bias to an (N,C,...) tensor (channel axis 1); for a
    /// 2D (N,F) tensor the bias is per feature.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let c = if xs.len() == 2 { xs[1] } else { xs[1] };
        assert_eq!(self.values[b.0].len(), c);
        let mut bshape = vec![1; xs.len()];
        bshape[1] = c;
        let bb = self.values[b.0]
            .clone()
            .into_shape_with_order(IxDyn(&bshape))
            .unwrap();
        let v = &self.values[x.0] + &bb;
        self.binary(x, b, v, move |_, g| {
            // reduce gradient over every axis except the channel axis
            let mut gb = g.clone();
            for ax in (0..g.ndim()).rev() {
                if ax != 1 {
                    gb = gb.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                }
            }
            let gb = gb.into_shape_with_order(IxDyn(&[c])).unwrap();
            (Some(g.clone()), Some(gb))
        })
    }

    // ---- convolution ----

    /// 2D convolution: x (N,Cin,H,W), w (Cout,Cin,kh,kw).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.values[x.0]);
        let wv = as4(&self.values[w.0]);
        let v = conv_forward(&xv.view(), &wv.view(), stride, pad).into_dyn();
        let in_hw = (xv.shape()[2], xv.shape()[3]);
        self.binary(x, w, v, move |vals, g| {
            let g4 = as4(g);
            let xv = as4(&vals[x.0]);
            let wv = as4(&vals[w.0]);
            let dx = conv_backward_data(&g4.view(), &wv.view(), stride, pad, in_hw).into_dyn();
            let dw = conv_backward_weight(&xv.view(), &g4.view(), stride, pad).into_dyn();
            (Some(dx), Some(dw))
        })
    }

    /// Transposed 2D convolution: x (N,Cin,H,W), w (Cin,Cout,kh,kw); output
    /// spatial size is (H-1)*stride - 2*pad + k.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.values[x.0]);
        let wv = as4(&self.values[w.0]);
        let (h, wd) = (xv.shape()[2], xv.shape()[3]);
        let kh = wv.shape()[2];
        let kw = wv.shape()[3];
        let out_hw = (
            (h - 1) * stride + kh - 2 * pad,
            (wd - 1) * stride + kw - 2 * pad,
        );
        let v = conv_backward_data(&xv.view(), &wv.view(), stride, pad, out_hw).into_dyn();
        self.binary(x, w, v, move |vals, g| {
            let g4 = as4(g);
            let xv = as4(&vals[x.0]);
            let wv = as4(&vals[w.0]);
            let dx = conv_forward(&g4.view(), &wv.view(), stride, pad).into_dyn();
            let dw = conv_backward_weight(&g4.view(), &xv.view(), stride, pad).into_dyn();
            (Some(dx), Some(dw))
        })
    }

    // ---- pooling / upsampling ----

    /// 2x2 average pooling, stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = dims4(&xv);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let mut out = Array4::<f64>::zeros((n, c, h / 2, w / 2));
        for in_ in 0..n {
            for ch in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        out[[in_, ch, i, j]] = 0.25
                            * (xv[[in_, ch, 2 * i, 2 * j]]
                                + xv[[in_, ch, 2 * i, 2 * j + 1]]
                                + xv[[in_, ch, 2 * i + 1, 2 * j]]
                                + xv[[in_, ch, 2 * i + 1, 2 * j + 1]]);
                    }
                }
            }
        }
        self.unary(x, out.into_dyn(), move |_, g| {
            let g4 = as4(g);
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for in_ in 0..n {
                for ch in 0..c {
                    for i in 0..h / 2 {
                        for j in 0..w / 2 {
                            let v = 0.25 * g4[[in_, ch, i, j]];
                            dx[[in_, ch, 2 * i, 2 * j]] = v;
                            dx[[in_, ch, 2 * i, 2 * j + 1]] = v;
                            dx[[in_, ch, 2 * i + 1, 2 * j]] = v;
                            dx[[in_, ch, 2 * i + 1, 2 * j + 1]] = v;
                        }
                    }
                }
            }
            dx.into_dyn()
        })
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = dims4(&xv);
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for in_ in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[[in_, ch, i, j]];
                        out[[in_, ch, 2 * i, 2 * j]] = v;
                        out[[in_, ch, 2 * i, 2 * j + 1]] = v;
                        out[[in_, ch, 2 * i + 1, 2 * j]] = v;
                        out[[in_, ch, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        self.unary(x, out.into_dyn(), move |_, g| {
            let g4 = as4(g);
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for in_ in 0..n {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[in_, ch, i, j]] = g4[[in_, ch, 2 * i, 2 * j]]
                                + g4[[in_, ch, 2 * i, 2 * j + 1]]
                                + g4[[in_, ch, 2 * i + 1, 2 * j]]
                                + g4[[in_, ch, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
            }
            dx.into_dyn()
        })
    }

    // ---- normalization ----

    /// Training-mode batch normalization over every axis except channel axis 1.
    /// Returns the normalized output plus the batch mean/variance per channel
    /// (for running-stat updates).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let xs = self.values[x.0].shape().to_vec();
        let c = xs[1];
        let m: usize = xs.iter().product::<usize>() / c;
        let xv = &self.values[x.0];

        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        per_channel(xv, |ch, v| mean[ch] += v);
        mean /= m as f64;
        per_channel(xv, |ch, v| {
            let d = v - mean[ch];
            var[ch] += d * d;
        });
        var /= m as f64;

        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = xv.clone();
        map_channel(&mut xhat, |ch, v| (v - mean[ch]) * inv_std[ch]);
        let gv = as1(&self.values[gamma.0]);
        let bv = as1(&self.values[beta.0]);
        let mut out = xhat.clone();
        map_channel(&mut out, |ch, v| v * gv[ch] + bv[ch]);

        let (rx, rg, rb) = (self.req(x), self.req(gamma), self.req(beta));
        let requires = rx || rg || rb;
        let xid = x.0;
        let gid = gamma.0;
        let bid = beta.0;
        let inv_std_c = inv_std.clone();
        let xhat_c = xhat;
        let f: Option<BackFn> = if requires {
            Some(Box::new(move |vals, gout, grads| {
                let gv = as1(&vals[gid]);
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                zip_channel(gout, &xhat_c, |ch, g, xh| {
                    dgamma[ch] += g * xh;
                    dbeta[ch] += g;
                });
                if rx {
                    // dx = gamma*inv_std*(g - mean(g) - xhat*mean(g*xhat))
                    let mean_g = &dbeta / m as f64;
                    let mean_gx = &dgamma / m as f64;
                    let mut dx = gout.clone();
                    zip_channel_mut(&mut dx, &xhat_c, |ch, g, xh| {
                        gv[ch] * inv_std_c[ch] * (g - mean_g[ch] - xh * mean_gx[ch])
                    });
                    grads.add(xid, dx);
                }
                if rg {
                    grads.add(gid, dgamma.into_dyn());
                }
                if rb {
                    grads.add(bid, dbeta.into_dyn());
                }
            }))
        } else {
            None
        };
        let out = self.push(out, requires, f);
        (out, mean, var)
    }

    /// Inference-mode batch normalization with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let inv_std: Array1<f64> = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mean = running_mean.clone();
        let mut xhat = self.values[x.0].clone();
        map_channel(&mut xhat, |ch, v| (v - mean[ch]) * inv_std[ch]);
        let xhat_node = {
            let xid = x.0;
            let requires = self.req(x);
            let inv_std_c = inv_std;
            let f: Option<BackFn> = if requires {
                Some(Box::new(move |_, gout, grads| {
                    let mut dx = gout.clone();
                    map_channel(&mut dx, |ch, v| v * inv_std_c[ch]);
                    grads.add(xid, dx);
                }))
            } else {
                None
            };
            self.push(xhat, requires, f)
        };
        let scaled = self.channel_affine(xhat_node, gamma);
        self.add_bias(scaled, beta)
    }

    /// Multiplies an (N,C,...) tensor by a per-channel factor.
    fn channel_affine(&mut self, x: Var, gamma: Var) -> Var {
        let c = self.values[x.0].shape()[1];
        assert_eq!(self.values[gamma.0].len(), c);
        let gv = as1(&self.values[gamma.0]);
        let mut out = self.values[x.0].clone();
        map_channel(&mut out, |ch, v| v * gv[ch]);
        self.binary(x, gamma, out, move |vals, g| {
            let gv = as1(&vals[gamma.0]);
            let mut dx = g.clone();
            map_channel(&mut dx, |ch, v| v * gv[ch]);
            let mut dgamma = Array1::<f64>::zeros(c);
            zip_channel(g, &vals[x.0], |ch, gg, xx| dgamma[ch] += gg * xx);
            (Some(dx), Some(dgamma.into_dyn()))
        })
    }
}

// ---- helpers ----

fn as1(a: &ArrayD<f64>) -> ndarray::Array1<f64> {
    a.clone()
        .into_shape_with_order(IxDyn(&[a.len()]))
        .unwrap()
        .into_dimensionality()
        .unwrap()
}

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality().unwrap()
}

fn as4(a: &ArrayD<f64>) -> Array4<f64> {
    a.clone().into_dimensionality().unwrap()
}

fn dims4(a: &Array4<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

/// Applies `f(channel, value)` over every element of an (N,C,...) tensor.
fn per_channel(a: &ArrayD<f64>, mut f: impl FnMut(usize, f64)) {
    let c = a.shape()[1];
    let inner: usize = a.shape()[2..].iter().product();
    let flat = a.as_slice().expect("contiguous");
    for (idx, v) in flat.iter().enumerate() {
        let ch = (idx / inner) % c;
        f(ch, *v);
    }
}

fn map_channel(a: &mut ArrayD<f64>, f: impl Fn(usize, f64) -> f64) {
    let c = a.shape()[1];
    let inner: usize = a.shape()[2..].iter().product();
    let flat = a.as_slice_mut().expect("contiguous");
    for (idx, v) in flat.iter_mut().enumerate() {
        let ch = (idx / inner) % c;
        *v = f(ch, *v);
    }
}

fn zip_channel(a: &ArrayD<f64>, b: &ArrayD<f64>, mut f: impl FnMut(usize, f64, f64)) {
    let c = a.shape()[1];
    let inner: usize = a.shape()[2..].iter().product();
    let fa = a.as_slice().expect("contiguous");
    let fb = b.as_slice().expect("contiguous");
    for idx in 0..fa.len() {
        let ch = (idx / inner) % c;
        f(ch, fa[idx], fb[idx]);
    }
}

fn zip_channel_mut(a: &mut ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(usize, f64, f64) -> f64) {
    let c = a.shape()[1];
    let inner: usize = a.shape()[2..].iter().product();
    let fa = a.as_slice_mut().expect("contiguous");
    let fb = b.as_slice().expect("contiguous");
    for idx in 0..fa.len() {
        let ch = (idx / inner) % c;
        fa[idx] = f(ch, fa[idx], fb[idx]);
    }
}

fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds x (Cin,H,W) into (Cin*kh*kw, OH*OW) columns.
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let ii = ii - pad;
                    for oj in 0..ow {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ch, ii, jj - pad]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back into (Cin,H,W), accumulating.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let ii = ii - pad;
                    for oj in 0..ow {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        out[[ch, ii, jj - pad]] += cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin_w, "conv channel mismatch");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    let wmat = w
        .to_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
    for i in 0..n {
        let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, stride, pad);
        let y = wmat.dot(&cols); // (cout, oh*ow)
        out.index_axis_mut(Axis(0), i)
            .assign(&y.into_shape_with_order((cout, oh, ow)).unwrap());
    }
    out
}

pub(crate) fn conv_backward_data(
    dy: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array4<f64> {
    let (n, cout) = (dy.shape()[0], dy.shape()[1]);
    let (cout_w, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cout, cout_w, "conv channel mismatch");
    let (h, wd) = in_hw;
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    assert_eq!((dy.shape()[2], dy.shape()[3]), (oh, ow), "conv output shape");
    let wmat = w
        .to_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let mut dx = Array4::<f64>::zeros((n, cin, h, wd));
    for i in 0..n {
        let dyi = dy
            .index_axis(Axis(0), i)
            .to_owned()
            .into_shape_with_order((cout, oh * ow))
            .unwrap();
        let dcols = wmat.t().dot(&dyi); // (cin*kh*kw, oh*ow)
        let dxi = col2im(&dcols, cin, h, wd, kh, kw, stride, pad);
        dx.index_axis_mut(Axis(0), i).assign(&dxi);
    }
    dx
}

pub(crate) fn conv_backward_weight(
    x: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = dy.shape()[1];
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    // kernel size from oh = (h + 2*pad - kh)/stride + 1
    let kh = h + 2 * pad - (oh - 1) * stride;
    let kw = wd + 2 * pad - (ow - 1) * stride;
    let mut dw = Array2::<f64>::zeros((cout, cin * kh * kw));
    for i in 0..n {
        let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, stride, pad);
        let dyi = dy
            .index_axis(Axis(0), i)
            .to_owned()
            .into_shape_with_order((cout, oh * ow))
            .unwrap();
        dw = dw + dyi.dot(&cols.t());
    }
    dw.into_shape_with_order((cout, cin, kh, kw)).unwrap()
}
