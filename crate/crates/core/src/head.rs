//! Text-conditioned segmentation head.
//!
//! For every class `k` a controller MLP maps `[e_txt_k, GAP(f_enc_last)]` to
//! a flat parameter vector `theta_k`, which is split into three per-voxel
//! linear layers applied to the Conv-1 reduced decoder features. Each class
//! yields an independent sigmoid map; [`fuse_multiclass`] turns the stack
//! into a label map.

use std::rc::Rc;

use modseg_tensor::ops::{self, Conv3dOpts};
use modseg_tensor::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureBundle;
use crate::domain::Modality;
use crate::error::{bail, Result};
use crate::nn::{Builder, Conv3d, Ctx, Linear};
use crate::prompts::EmbeddingTable;

/// Width of the two hidden dynamic layers.
pub const DYN_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub c_pre: usize,
    /// Controller hidden width; 0 makes the controller a single linear map.
    pub hidden: usize,
    pub d_txt: usize,
    pub s1: usize,
    pub s2: usize,
    /// ReLU between the dynamic layers.
    pub activation: bool,
}

impl HeadConfig {
    pub fn new(d_txt: usize, s1: usize, s2: usize) -> Self {
        HeadConfig { c_pre: 8, hidden: 256, d_txt, s1, s2, activation: true }
    }

    pub fn p_total(&self) -> usize {
        ControllerParams::<f32>::p_total(self.c_pre)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_pre == 0 || self.d_txt == 0 || self.s1 == 0 || self.s2 == 0 {
            bail!(Config, "head dimensions must be positive: {self:?}");
        }
        Ok(())
    }

    /// Closed-form parameter count of controller plus Conv-1.
    pub fn param_count(&self) -> usize {
        let (din, p) = (self.d_txt + self.s1, self.p_total());
        let controller = if self.hidden == 0 {
            din * p + p
        } else {
            din * self.hidden + self.hidden + self.hidden * p + p
        };
        controller + self.s2 * self.c_pre + self.c_pre
    }
}

/// The three dynamic layers of one class, in `[w1, b1, w2, b2, w3, b3]`
/// order with row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerParams<T> {
    pub c_pre: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: Vec<T>,
}

impl<T: Scalar> ControllerParams<T> {
    pub fn p_total(c_pre: usize) -> usize {
        (c_pre * DYN_WIDTH + DYN_WIDTH) + (DYN_WIDTH * DYN_WIDTH + DYN_WIDTH) + (DYN_WIDTH + 1)
    }

    /// Offsets of `[w1, b1, w2, b2, w3, b3]` inside `theta`.
    fn layout(c_pre: usize) -> [usize; 7] {
        let sizes = [c_pre * DYN_WIDTH, DYN_WIDTH, DYN_WIDTH * DYN_WIDTH, DYN_WIDTH, DYN_WIDTH, 1];
        let mut off = [0; 7];
        for i in 0..6 {
            off[i + 1] = off[i] + sizes[i];
        }
        off
    }

    pub fn split(theta: &[T], c_pre: usize) -> Result<Self> {
        let want = Self::p_total(c_pre);
        if theta.len() != want {
            bail!(Parameter, "theta has {} values, expected {want} for c_pre={c_pre}", theta.len());
        }
        let o = Self::layout(c_pre);
        let seg = |i: usize| theta[o[i]..o[i + 1]].to_vec();
        Ok(ControllerParams { c_pre, w1: seg(0), b1: seg(1), w2: seg(2), b2: seg(3), w3: seg(4), b3: seg(5) })
    }

    pub fn concat(&self) -> Vec<T> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3].into_iter().flatten().copied().collect()
    }
}

/// Mean over spatial axes: `(B, S1, ...)` to `(B, S1)`.
pub fn global_pool<T: Scalar>(f_enc_last: &Var<T>) -> Result<Var<T>> {
    let s = f_enc_last.shape();
    if s.len() != 5 {
        bail!(Shape, "global_pool expects a rank-5 map, got {s:?}");
    }
    let (b, c) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    Ok(f_enc_last.reshape(&[b, c, v])?.mean_last()?)
}

/// Controller MLP applied to `[e_txt_k, e_vis_b]` for every class row of
/// `e_txt` `(K, d_txt)` and sample of `e_vis` `(B, S1)`; returns
/// `(B, K, P_total)`. `layers` are `(weight (out, in), bias)` pairs with a
/// ReLU between consecutive layers.
pub fn controller<T: Scalar>(e_txt: &Var<T>, e_vis: &Var<T>, layers: &[(Var<T>, Var<T>)]) -> Result<Var<T>> {
    let (ts, vs) = (e_txt.shape().to_vec(), e_vis.shape().to_vec());
    if ts.len() != 2 || vs.len() != 2 {
        bail!(Shape, "controller expects e_txt (K, d) and e_vis (B, S1), got {ts:?} and {vs:?}");
    }
    let (k, d, b, s1) = (ts[0], ts[1], vs[0], vs[1]);
    let Some((w0, _)) = layers.first() else {
        bail!(Shape, "controller needs at least one layer");
    };
    if w0.shape()[1] != d + s1 {
        bail!(Shape, "controller input width {} != d_txt {d} + S1 {s1}", w0.shape()[1]);
    }
    let txt_idx: Vec<usize> = (0..b).flat_map(|_| 0..k * d).collect();
    let txt = e_txt.gather(&[b, k, d], Rc::new(txt_idx))?;
    let vis_idx: Vec<usize> = (0..b).flat_map(|bi| (0..k).flat_map(move |_| bi * s1..(bi + 1) * s1)).collect();
    let vis = e_vis.gather(&[b, k, s1], Rc::new(vis_idx))?;
    let mut x = ops::cat(&[&txt, &vis], 2)?;
    for (i, (w, bias)) in layers.iter().enumerate() {
        if i > 0 {
            x = x.relu();
        }
        x = ops::linear(&x, w, Some(bias))?;
    }
    Ok(x)
}

/// Conv-1: shared per-voxel linear map `S2 -> C_pre`.
pub fn reduce_channels<T: Scalar>(f_dec_last: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (fs, ws) = (f_dec_last.shape(), w.shape());
    if fs.len() != 5 || ws.len() != 5 || fs[1] != ws[1] || ws[2..] != [1, 1, 1] {
        bail!(Shape, "reduce_channels: features {fs:?} vs weight {ws:?}");
    }
    Ok(ops::conv3d(f_dec_last, w, Some(b), Conv3dOpts::default())?)
}

/// Per-voxel evaluation of one class's dynamic stack; returns the logit and
/// fills the hidden activations.
#[inline]
fn dyn_forward<T: Scalar>(
    x: &[T],
    th: &[T],
    o: &[usize; 7],
    act: bool,
    h1: &mut [T; DYN_WIDTH],
    h2: &mut [T; DYN_WIDTH],
) -> T {
    let c = x.len();
    let relu = |v: T| if act && v < T::zero() { T::zero() } else { v };
    for j in 0..DYN_WIDTH {
        let w = &th[o[0] + j * c..o[0] + (j + 1) * c];
        let s: T = w.iter().zip(x).map(|(&a, &b)| a * b).sum();
        h1[j] = relu(s + th[o[1] + j]);
    }
    for j in 0..DYN_WIDTH {
        let w = &th[o[2] + j * DYN_WIDTH..o[2] + (j + 1) * DYN_WIDTH];
        let s: T = w.iter().zip(h1.iter()).map(|(&a, &b)| a * b).sum();
        h2[j] = relu(s + th[o[3] + j]);
    }
    let w3 = &th[o[4]..o[5]];
    w3.iter().zip(h2.iter()).map(|(&a, &b)| a * b).sum::<T>() + th[o[5]]
}

/// Applies each class's dynamic stack to `f_head_pre` `(B, C_pre, ...)`
/// with `theta` `(B, K, P_total)`; returns sigmoid maps `(B, K, ...)`.
pub fn dynamic_head<T: Scalar>(f_head_pre: &Var<T>, theta: &Var<T>, activation: bool) -> Result<Var<T>> {
    let (fs, ts) = (f_head_pre.shape().to_vec(), theta.shape().to_vec());
    if fs.len() < 3 || ts.len() != 3 || ts[0] != fs[0] {
        bail!(Shape, "dynamic_head: features {fs:?} vs theta {ts:?}");
    }
    let (b, c, k, p) = (fs[0], fs[1], ts[1], ts[2]);
    if p != ControllerParams::<T>::p_total(c) {
        bail!(Parameter, "theta length {p} does not match c_pre={c} (expected {})", ControllerParams::<T>::p_total(c));
    }
    let v: usize = fs[2..].iter().product();
    let o = ControllerParams::<T>::layout(c);
    let fd = f_head_pre.value().data();
    let td = theta.value().data();
    let mut out = vec![T::zero(); b * k * v];
    let mut x = vec![T::zero(); c];
    let (mut h1, mut h2) = ([T::zero(); DYN_WIDTH], [T::zero(); DYN_WIDTH]);
    for bi in 0..b {
        for vi in 0..v {
            for (ci, xv) in x.iter_mut().enumerate() {
                *xv = fd[(bi * c + ci) * v + vi];
            }
            for ki in 0..k {
                let th = &td[(bi * k + ki) * p..(bi * k + ki + 1) * p];
                let logit = dyn_forward(&x, th, &o, activation, &mut h1, &mut h2);
                out[(bi * k + ki) * v + vi] = modseg_tensor::sigmoid(logit);
            }
        }
    }
    let mut out_shape = fs.clone();
    out_shape[1] = k;
    let value = Tensor::new(&out_shape, out)?;
    Ok(Var::from_op(value, &[f_head_pre, theta], move |g, inputs, y| {
        let (fd, td, gd, yd) = (inputs[0].data(), inputs[1].data(), g.data(), y.data());
        let mut df = vec![T::zero(); fd.len()];
        let mut dt = vec![T::zero(); td.len()];
        let mut x = vec![T::zero(); c];
        let mut dx = vec![T::zero(); c];
        let (mut h1, mut h2) = ([T::zero(); DYN_WIDTH], [T::zero(); DYN_WIDTH]);
        for bi in 0..b {
            for vi in 0..v {
                for (ci, xv) in x.iter_mut().enumerate() {
                    *xv = fd[(bi * c + ci) * v + vi];
                }
                dx.fill(T::zero());
                for ki in 0..k {
                    let row = (bi * k + ki) * p;
                    let th = &td[row..row + p];
                    let dth = &mut dt[row..row + p];
                    dyn_forward(&x, th, &o, activation, &mut h1, &mut h2);
                    let yv = yd[(bi * k + ki) * v + vi];
                    let go = gd[(bi * k + ki) * v + vi] * yv * (T::one() - yv);
                    if go == T::zero() {
                        continue;
                    }
                    dth[o[5]] += go;
                    let mut dh2 = [T::zero(); DYN_WIDTH];
                    for j in 0..DYN_WIDTH {
                        dth[o[4] + j] += go * h2[j];
                        let pass = !activation || h2[j] > T::zero();
                        dh2[j] = if pass { go * th[o[4] + j] } else { T::zero() };
                    }
                    let mut dh1 = [T::zero(); DYN_WIDTH];
                    for j in 0..DYN_WIDTH {
                        dth[o[3] + j] += dh2[j];
                        for i in 0..DYN_WIDTH {
                            dth[o[2] + j * DYN_WIDTH + i] += dh2[j] * h1[i];
                            dh1[i] += dh2[j] * th[o[2] + j * DYN_WIDTH + i];
                        }
                    }
                    for j in 0..DYN_WIDTH {
                        let pass = !activation || h1[j] > T::zero();
                        let d = if pass { dh1[j] } else { T::zero() };
                        dth[o[1] + j] += d;
                        for ci in 0..c {
                            dth[o[0] + j * c + ci] += d * x[ci];
                            dx[ci] += d * th[o[0] + j * c + ci];
                        }
                    }
                }
                for ci in 0..c {
                    df[(bi * c + ci) * v + vi] = dx[ci];
                }
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape(), df).unwrap()),
            Some(Tensor::new(inputs[1].shape(), dt).unwrap()),
        ]
    }))
}

/// Label map from one-vs-all probabilities `(B, K, ...)`: background where
/// every class is below `threshold`, otherwise the most probable class
/// (lowest index on ties). Returns `B * V` labels.
pub fn fuse_multiclass<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<Vec<u8>> {
    let s = probs.shape();
    if s.len() < 2 || s[1] == 0 || s[1] > u8::MAX as usize {
        bail!(Shape, "fuse_multiclass expects (B, K, ...) with 1 <= K <= 255, got {s:?}");
    }
    let (b, k) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    let pd = probs.data();
    let thr = T::lit(threshold);
    let mut out = vec![0u8; b * v];
    for bi in 0..b {
        for vi in 0..v {
            let mut best = (T::neg_infinity(), 0usize);
            for ki in 0..k {
                let p = pd[(bi * k + ki) * v + vi];
                if p > best.0 {
                    best = (p, ki + 1);
                }
            }
            if best.0 >= thr {
                out[bi * v + vi] = best.1 as u8;
            }
        }
    }
    Ok(out)
}

/// Learned head weights.
#[derive(Clone, Debug)]
pub struct TextHead {
    pub cfg: HeadConfig,
    pub controller: Vec<Linear>,
    pub conv1: Conv3d,
}

impl TextHead {
    pub fn new<T: Scalar, R: Rng>(cfg: HeadConfig, bld: &mut Builder<T, R>) -> Result<Self> {
        cfg.validate()?;
        let din = cfg.d_txt + cfg.s1;
        let p = cfg.p_total();
        let controller = if cfg.hidden == 0 {
            vec![Linear::new(&mut bld.sub("controller.fc"), din, p, true)]
        } else {
            vec![
                Linear::new(&mut bld.sub("controller.fc1"), din, cfg.hidden, true),
                Linear::new(&mut bld.sub("controller.fc2"), cfg.hidden, p, true),
            ]
        };
        let conv1 = Conv3d::new(&mut bld.sub("conv1"), cfg.s2, cfg.c_pre, 1, Conv3dOpts::default(), true);
        Ok(TextHead { cfg, controller, conv1 })
    }

    /// Per-class probabilities `(B, K, H, W, D)` with text vectors chosen
    /// by `modality`.
    pub fn predict_all_classes<T: Scalar>(
        &self,
        ctx: Ctx<T>,
        bundle: &FeatureBundle<T>,
        table: &EmbeddingTable,
        modality: Modality,
    ) -> Result<Var<T>> {
        if table.d_txt() != self.cfg.d_txt {
            bail!(Compatibility, "embedding dim {} but head expects {}", table.d_txt(), self.cfg.d_txt);
        }
        let k = table.num_classes();
        let mut txt = Vec::with_capacity(k * table.d_txt());
        for c in 1..=k {
            txt.extend(table.vector(modality, c)?.iter().map(|&v| T::lit(v as f64)));
        }
        let e_txt = Var::constant(Tensor::new(&[k, table.d_txt()], txt)?);
        let e_vis = global_pool(&bundle.f_enc_last)?;
        let layers: Vec<(Var<T>, Var<T>)> = self
            .controller
            .iter()
            .map(|l| (ctx.p(l.w), ctx.p(l.b.expect("controller layers have biases"))))
            .collect();
        let theta = controller(&e_txt, &e_vis, &layers)?;
        let pre = reduce_channels(
            &bundle.f_dec_last,
            &ctx.p(self.conv1.w),
            &ctx.p(self.conv1.b.expect("conv1 has a bias")),
        )?;
        dynamic_head(&pre, &theta, self.cfg.activation)
    }
}

/// Text-free baseline: a 1x1x1 convolution to `K` sigmoid channels.
#[derive(Clone, Debug)]
pub struct VisionHead {
    pub num_classes: usize,
    pub conv: Conv3d,
}

impl VisionHead {
    pub fn new<T: Scalar, R: Rng>(s2: usize, num_classes: usize, bld: &mut Builder<T, R>) -> Self {
        let conv = Conv3d::new(&mut bld.sub("out"), s2, num_classes, 1, Conv3dOpts::default(), true);
        VisionHead { num_classes, conv }
    }

    pub fn predict_all_classes<T: Scalar>(&self, ctx: Ctx<T>, bundle: &FeatureBundle<T>) -> Result<Var<T>> {
        Ok(self.conv.forward(ctx, &bundle.f_dec_last)?.sigmoid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_total_at_defaults() {
        assert_eq!(ControllerParams::<f32>::p_total(8), 153);
        assert_eq!(ControllerParams::<f32>::p_total(3), 32 + 72 + 9);
    }

    #[test]
    fn split_round_trip() {
        let theta: Vec<f64> = (0..153).map(|i| i as f64).collect();
        let parts = ControllerParams::split(&theta, 8).unwrap();
        assert_eq!(parts.w1.len(), 64);
        assert_eq!(parts.b3, vec![152.0]);
        assert_eq!(parts.concat(), theta);
        assert!(matches!(ControllerParams::split(&theta[..152], 8), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn fuse_rules() {
        let t = |v: Vec<f64>, k: usize| Tensor::<f64>::new(&[1, k, 2], v).unwrap();
        assert_eq!(fuse_multiclass(&t(vec![0.4; 6], 3), 0.5).unwrap(), vec![0, 0]);
        assert_eq!(fuse_multiclass(&t(vec![0.1, 0.1, 0.9, 0.9, 0.1, 0.1], 3), 0.5).unwrap(), vec![2, 2]);
        assert_eq!(fuse_multiclass(&t(vec![0.2, 0.8, 0.8, 0.8, 0.8, 0.3], 3), 0.5).unwrap(), vec![2, 1]);
    }

    #[test]
    fn default_head_param_count() {
        let cfg = HeadConfig::new(512, 512, 64);
        assert_eq!(cfg.param_count(), (1024 * 256 + 256) + (256 * 153 + 153) + (64 * 8 + 8));
    }
}
