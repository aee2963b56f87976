//! Windowed-attention encoder with a residual convolutional decoder.
//!
//! Stage schedule: a stride-2 patch embedding to `S2` channels, then four
//! stages of two transformer blocks (shifted windows on the second block),
//! each followed by patch merging that halves resolution and doubles
//! channels. The decoder consumes the normalized stage outputs through skip
//! connections; the deepest map (`16 * S2` channels at 1/32 resolution) is
//! the encoder feature handed to the head.

use std::rc::Rc;

use modseg_tensor::ops::{self, Conv3dOpts, ZERO_FILL};
use modseg_tensor::{ParamId, Scalar, Tensor, Var};
use rand::Rng;

use super::{BackboneConfig, FeatureBundle};
use crate::error::Result;
use crate::nn::{to_channels_first, to_channels_last, Builder, Conv3d, ConvTranspose3d, Ctx, InstanceNorm, LayerNorm, Linear};

const MLP_RATIO: usize = 4;
const MASK_VALUE: f64 = -100.0;
const LEAKY_SLOPE: f64 = 0.01;

/// Largest divisor of `c` not exceeding `c / head_dim` (at least 1).
fn num_heads(c: usize, head_dim: usize) -> usize {
    let target = (c / head_dim).max(1);
    (1..=target).rev().find(|h| c.is_multiple_of(*h)).unwrap_or(1)
}

/// Window geometry for one block at a given token grid.
#[derive(Clone, Copy, Debug, PartialEq)]
struct WindowPlan {
    dims: [usize; 3],
    win: [usize; 3],
    shift: [usize; 3],
    padded: [usize; 3],
}

impl WindowPlan {
    fn new(dims: [usize; 3], ws: usize, shifted: bool) -> Self {
        let mut win = [0; 3];
        let mut shift = [0; 3];
        let mut padded = [0; 3];
        for d in 0..3 {
            if dims[d] <= ws {
                win[d] = dims[d];
            } else {
                win[d] = ws;
                if shifted {
                    shift[d] = ws / 2;
                }
            }
            padded[d] = dims[d].div_ceil(win[d]) * win[d];
        }
        WindowPlan { dims, win, shift, padded }
    }

    fn grid(&self) -> [usize; 3] {
        [0, 1, 2].map(|d| self.padded[d] / self.win[d])
    }

    fn n_windows(&self) -> usize {
        self.grid().iter().product()
    }

    fn n_tokens(&self) -> usize {
        self.win.iter().product()
    }

    /// Padded, cyclically shifted coordinate of window `wi`, token `n`,
    /// mapped back to the unshifted frame.
    fn source(&self, wi: usize, n: usize) -> [usize; 3] {
        let g = self.grid();
        let wc = [wi / (g[1] * g[2]), (wi / g[2]) % g[1], wi % g[2]];
        let tc = [n / (self.win[1] * self.win[2]), (n / self.win[2]) % self.win[1], n % self.win[2]];
        [0, 1, 2].map(|d| (wc[d] * self.win[d] + tc[d] + self.shift[d]) % self.padded[d])
    }

    /// Index turning `(B, d0, d1, d2, C)` into `(B * nW, N, C)`.
    fn partition_index(&self, batch: usize, c: usize) -> Vec<usize> {
        let (nw, nt) = (self.n_windows(), self.n_tokens());
        let [d0, d1, d2] = self.dims;
        let mut idx = Vec::with_capacity(batch * nw * nt * c);
        for b in 0..batch {
            for wi in 0..nw {
                for n in 0..nt {
                    let q = self.source(wi, n);
                    let inside = q[0] < d0 && q[1] < d1 && q[2] < d2;
                    let base = (((b * d0 + q[0]) * d1 + q[1]) * d2 + q[2]) * c;
                    idx.extend((0..c).map(|ch| if inside { base + ch } else { ZERO_FILL }));
                }
            }
        }
        idx
    }

    /// Index turning `(B * nW, N, C)` back into `(B, d0, d1, d2, C)`.
    fn reverse_index(&self, batch: usize, c: usize) -> Vec<usize> {
        let (nw, nt) = (self.n_windows(), self.n_tokens());
        let mut idx = vec![0; batch * self.dims.iter().product::<usize>() * c];
        let [d0, d1, d2] = self.dims;
        for b in 0..batch {
            for wi in 0..nw {
                for n in 0..nt {
                    let q = self.source(wi, n);
                    if q[0] < d0 && q[1] < d1 && q[2] < d2 {
                        let dst = (((b * d0 + q[0]) * d1 + q[1]) * d2 + q[2]) * c;
                        let src = ((b * nw + wi) * nt + n) * c;
                        for ch in 0..c {
                            idx[dst + ch] = src + ch;
                        }
                    }
                }
            }
        }
        idx
    }

    /// Additive mask `(1, nW, 1, N, N)` that blocks attention across the
    /// regions a cyclic shift glues together.
    fn shift_mask<T: Scalar>(&self) -> Option<Tensor<T>> {
        if self.shift == [0, 0, 0] {
            return None;
        }
        let region = |p: usize, d: usize| -> usize {
            let (pd, w, s) = (self.padded[d], self.win[d], self.shift[d]);
            if s == 0 || p < pd - w {
                0
            } else if p < pd - s {
                1
            } else {
                2
            }
        };
        let g = self.grid();
        let (nw, nt) = (self.n_windows(), self.n_tokens());
        let mut data = Vec::with_capacity(nw * nt * nt);
        for wi in 0..nw {
            let wc = [wi / (g[1] * g[2]), (wi / g[2]) % g[1], wi % g[2]];
            let labels: Vec<usize> = (0..nt)
                .map(|n| {
                    let tc = [n / (self.win[1] * self.win[2]), (n / self.win[2]) % self.win[1], n % self.win[2]];
                    let p = [0, 1, 2].map(|d| wc[d] * self.win[d] + tc[d]);
                    region(p[0], 0) * 9 + region(p[1], 1) * 3 + region(p[2], 2)
                })
                .collect();
            for &a in &labels {
                data.extend(labels.iter().map(|&b| if a == b { T::zero() } else { T::lit(MASK_VALUE) }));
            }
        }
        Some(Tensor::new(&[1, nw, 1, nt, nt], data).expect("mask shape"))
    }

    /// Row of the relative-position table for every (query, key) pair, for
    /// a table laid out over a `ws`-sized window.
    fn relative_index(&self, ws: usize) -> Vec<usize> {
        let nt = self.n_tokens();
        let span = 2 * ws - 1;
        let coord = |n: usize| {
            [n / (self.win[1] * self.win[2]), (n / self.win[2]) % self.win[1], n % self.win[2]]
        };
        let mut idx = Vec::with_capacity(nt * nt);
        for a in 0..nt {
            let ca = coord(a);
            for b in 0..nt {
                let cb = coord(b);
                let r = [0, 1, 2].map(|d| ca[d] + ws - 1 - cb[d]);
                idx.push((r[0] * span + r[1]) * span + r[2]);
            }
        }
        idx
    }
}

#[derive(Clone, Debug)]
struct WindowAttention {
    heads: usize,
    qkv: Linear,
    proj: Linear,
    bias_table: ParamId,
}

#[derive(Clone, Debug)]
struct SwinBlock {
    shifted: bool,
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl SwinBlock {
    fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, c: usize, heads: usize, ws: usize, shifted: bool) -> Self {
        let span = 2 * ws - 1;
        let norm1 = LayerNorm::new(&mut bld.sub("norm1"), c);
        let qkv = Linear::new(&mut bld.sub("qkv"), c, 3 * c, true);
        let proj = Linear::new(&mut bld.sub("proj"), c, c, true);
        let bias_table = {
            let name = "rel_bias";
            let mut sub = bld.sub("attn");
            let shape = [span * span * span, heads];
            // Small init, as for truncated-normal(0.02) tables.
            sub.uniform(name, &shape, 2500)
        };
        let norm2 = LayerNorm::new(&mut bld.sub("norm2"), c);
        let fc1 = Linear::new(&mut bld.sub("fc1"), c, MLP_RATIO * c, true);
        let fc2 = Linear::new(&mut bld.sub("fc2"), MLP_RATIO * c, c, true);
        SwinBlock { shifted, norm1, attn: WindowAttention { heads, qkv, proj, bias_table }, norm2, fc1, fc2 }
    }

    /// `x` is channels-last `(B, d0, d1, d2, C)`.
    fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>, ws: usize) -> Result<Var<T>> {
        let s = x.shape().to_vec();
        let (b, c) = (s[0], s[4]);
        let plan = WindowPlan::new([s[1], s[2], s[3]], ws, self.shifted);
        let (nw, nt) = (plan.n_windows(), plan.n_tokens());
        let (h, hd) = (self.attn.heads, c / self.attn.heads);

        let normed = self.norm1.forward(ctx, x)?;
        let windows = normed.gather(&[b * nw, nt, c], Rc::new(plan.partition_index(b, c)))?;
        let qkv = self.attn.qkv.forward(ctx, &windows)?;
        let qkv = qkv.reshape(&[b * nw, nt, 3, h, hd])?.permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var<T>> { Ok(qkv.narrow(0, i, 1)?.reshape(&[b * nw * h, nt, hd])?) };
        let q = part(0)?.scale(1.0 / (hd as f64).sqrt());
        let (k, v) = (part(1)?, part(2)?);
        let scores = ops::bmm(&q, &k, true)?.reshape(&[b, nw, h, nt, nt])?;
        let table = ctx.p(self.attn.bias_table);
        let rel = plan.relative_index(ws);
        let bias_idx: Vec<usize> =
            (0..h).flat_map(|hh| rel.iter().map(move |&r| r * h + hh)).collect();
        let bias = table.gather(&[1, 1, h, nt, nt], Rc::new(bias_idx))?;
        let mut scores = scores.add(&bias)?;
        if let Some(mask) = plan.shift_mask::<T>() {
            scores = scores.add(&Var::constant(mask))?;
        }
        let attn = ops::softmax_last(&scores.reshape(&[b * nw * h, nt, nt])?)?;
        let out = ops::bmm(&attn, &v, false)?
            .reshape(&[b * nw, h, nt, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * nw, nt, c])?;
        let out = self.attn.proj.forward(ctx, &out)?;
        let out = out.gather(&s, Rc::new(plan.reverse_index(b, c)))?;
        let x = x.add(&out)?;
        let mlp = self.fc2.forward(ctx, &self.fc1.forward(ctx, &self.norm2.forward(ctx, &x)?)?.gelu())?;
        Ok(x.add(&mlp)?)
    }
}

/// Concatenates each 2x2x2 neighbourhood (8C), normalizes, projects to 2C.
#[derive(Clone, Debug)]
struct PatchMerging {
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerging {
    fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape().to_vec();
        let (b, c) = (s[0], s[4]);
        let dims = [s[1], s[2], s[3]];
        let half = dims.map(|d| d.div_ceil(2));
        let mut idx = Vec::with_capacity(b * half.iter().product::<usize>() * 8 * c);
        for bb in 0..b {
            for i in 0..half[0] {
                for j in 0..half[1] {
                    for k in 0..half[2] {
                        for o in 0..8 {
                            let q = [2 * i + (o >> 2 & 1), 2 * j + (o >> 1 & 1), 2 * k + (o & 1)];
                            let inside = q[0] < dims[0] && q[1] < dims[1] && q[2] < dims[2];
                            let base = (((bb * dims[0] + q[0]) * dims[1] + q[1]) * dims[2] + q[2]) * c;
                            idx.extend((0..c).map(|ch| if inside { base + ch } else { ZERO_FILL }));
                        }
                    }
                }
            }
        }
        let merged = x.gather(&[b, half[0], half[1], half[2], 8 * c], Rc::new(idx))?;
        self.reduce.forward(ctx, &self.norm.forward(ctx, &merged)?)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<SwinBlock>,
    merge: PatchMerging,
}

/// Two 3x3x3 conv + instance norm layers with a residual path.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv3d,
    norm1: InstanceNorm,
    conv2: Conv3d,
    norm2: InstanceNorm,
    skip: Option<(Conv3d, InstanceNorm)>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, cin: usize, cout: usize) -> Self {
        let same = Conv3dOpts::same(3);
        let conv1 = Conv3d::new(&mut bld.sub("conv1"), cin, cout, 3, same, false);
        let norm1 = InstanceNorm::new(&mut bld.sub("norm1"), cout);
        let conv2 = Conv3d::new(&mut bld.sub("conv2"), cout, cout, 3, same, false);
        let norm2 = InstanceNorm::new(&mut bld.sub("norm2"), cout);
        let skip = (cin != cout).then(|| {
            (
                Conv3d::new(&mut bld.sub("conv3"), cin, cout, 1, Conv3dOpts::default(), false),
                InstanceNorm::new(&mut bld.sub("norm3"), cout),
            )
        });
        ResBlock { conv1, norm1, conv2, norm2, skip }
    }

    fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.norm1.forward(ctx, &self.conv1.forward(ctx, x)?)?.leaky_relu(LEAKY_SLOPE);
        let h = self.norm2.forward(ctx, &self.conv2.forward(ctx, &h)?)?;
        let res = match &self.skip {
            Some((conv, norm)) => norm.forward(ctx, &conv.forward(ctx, x)?)?,
            None => x.clone(),
        };
        Ok(h.add(&res)?.leaky_relu(LEAKY_SLOPE))
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    up: ConvTranspose3d,
    res: ResBlock,
}

impl UpBlock {
    fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, cin: usize, cout: usize) -> Self {
        let up = ConvTranspose3d::new(&mut bld.sub("up"), cin, cout, 2, false);
        let res = ResBlock::new(&mut bld.sub("res"), 2 * cout, cout);
        UpBlock { up, res }
    }

    fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>, skip: &Var<T>) -> Result<Var<T>> {
        let up = self.up.forward(ctx, x)?;
        self.res.forward(ctx, &ops::cat(&[&up, skip], 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct Swin3d {
    pub cfg: BackboneConfig,
    embed: Conv3d,
    stages: Vec<Stage>,
    enc0: ResBlock,
    enc1: ResBlock,
    enc2: ResBlock,
    enc3: ResBlock,
    bottleneck: ResBlock,
    /// Decoder stages from the deepest upward.
    ups: Vec<UpBlock>,
}

impl Swin3d {
    pub(super) fn new<T: Scalar, R: Rng>(cfg: BackboneConfig, bld: &mut Builder<T, R>) -> Self {
        let c = cfg.base_channels;
        let ws = cfg.window_size;
        let embed = Conv3d::new(&mut bld.sub("embed"), 1, c, 2, Conv3dOpts { stride: 2, padding: 0 }, true);
        let stages = (0..4)
            .map(|i| {
                let ci = c << i;
                let heads = num_heads(ci, cfg.head_dim);
                let mut sb = bld.sub(&format!("stage{i}"));
                let blocks = (0..2)
                    .map(|j| SwinBlock::new(&mut sb.sub(&format!("block{j}")), ci, heads, ws, j % 2 == 1))
                    .collect();
                let mut mb = sb.sub("merge");
                let norm = LayerNorm::new(&mut mb.sub("norm"), 8 * ci);
                let reduce = Linear::new(&mut mb.sub("reduce"), 8 * ci, 2 * ci, false);
                Stage { blocks, merge: PatchMerging { norm, reduce } }
            })
            .collect();
        let enc0 = ResBlock::new(&mut bld.sub("enc0"), 1, c);
        let enc1 = ResBlock::new(&mut bld.sub("enc1"), c, c);
        let enc2 = ResBlock::new(&mut bld.sub("enc2"), 2 * c, 2 * c);
        let enc3 = ResBlock::new(&mut bld.sub("enc3"), 4 * c, 4 * c);
        let bottleneck = ResBlock::new(&mut bld.sub("enc4"), 16 * c, 16 * c);
        let ups = [(16, 8), (8, 4), (4, 2), (2, 1), (1, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| UpBlock::new(&mut bld.sub(&format!("up{i}")), a * c, b * c))
            .collect();
        Swin3d { cfg, embed, stages, enc0, enc1, enc2, enc3, bottleneck, ups }
    }

    /// Parameter-free layer norm over channels of a channels-last map,
    /// returned channels-first.
    fn project_out<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
        to_channels_first(&ops::layer_norm(x, None, LayerNorm::EPS)?)
    }

    pub(super) fn forward<T: Scalar>(&self, ctx: Ctx<T>, images: &Var<T>) -> Result<FeatureBundle<T>> {
        let ws = self.cfg.window_size;
        let mut x = to_channels_last(&self.embed.forward(ctx, images)?)?;
        let mut hidden = vec![Self::project_out(&x)?];
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(ctx, &x, ws)?;
            }
            x = stage.merge.forward(ctx, &x)?;
            hidden.push(Self::project_out(&x)?);
        }
        let e0 = self.enc0.forward(ctx, images)?;
        let e1 = self.enc1.forward(ctx, &hidden[0])?;
        let e2 = self.enc2.forward(ctx, &hidden[1])?;
        let e3 = self.enc3.forward(ctx, &hidden[2])?;
        let f_enc_last = self.bottleneck.forward(ctx, &hidden[4])?;
        let skips = [&hidden[3], &e3, &e2, &e1, &e0];
        let mut y = f_enc_last.clone();
        for (up, skip) in self.ups.iter().zip(skips) {
            y = up.forward(ctx, &y, skip)?;
        }
        Ok(FeatureBundle { f_enc_last, f_dec_last: y })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_counts() {
        assert_eq!([48, 96, 192, 384].map(|c| num_heads(c, 16)), [3, 6, 12, 24]);
        assert_eq!(num_heads(8, 16), 1);
        assert_eq!(num_heads(24, 16), 1);
        assert_eq!(num_heads(40, 16), 2);
    }

    #[test]
    fn window_plan_clamps_and_pads() {
        let p = WindowPlan::new([16, 16, 16], 7, true);
        assert_eq!(p.win, [7; 3]);
        assert_eq!(p.shift, [3; 3]);
        assert_eq!(p.padded, [21; 3]);
        assert_eq!(p.n_windows(), 27);
        let small = WindowPlan::new([4, 4, 4], 7, true);
        assert_eq!(small.win, [4; 3]);
        assert_eq!(small.shift, [0; 3]);
        assert!(small.shift_mask::<f32>().is_none());
    }

    #[test]
    fn partition_then_reverse_is_identity() {
        for shifted in [false, true] {
            let plan = WindowPlan::new([5, 6, 3], 4, shifted);
            let (b, c) = (2, 3);
            let n = b * 5 * 6 * 3 * c;
            let part = plan.partition_index(b, c);
            let rev = plan.reverse_index(b, c);
            for (dst, &src) in rev.iter().enumerate() {
                assert_eq!(part[src], dst);
            }
            // Every real voxel appears exactly once in the windowed layout.
            let mut seen = vec![0; n];
            for &i in part.iter().filter(|&&i| i != ZERO_FILL) {
                seen[i] += 1;
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn shift_mask_blocks_wrapped_pairs() {
        let plan = WindowPlan::new([8, 8, 8], 4, true);
        let mask = plan.shift_mask::<f64>().unwrap();
        let nt = plan.n_tokens();
        // The first window never straddles the wrap-around seam.
        assert!(mask.data()[..nt * nt].iter().all(|&v| v == 0.0));
        // The last window does.
        let last = &mask.data()[(plan.n_windows() - 1) * nt * nt..];
        assert!(last.contains(&MASK_VALUE));
        // Masks are symmetric.
        for a in 0..nt {
            for b in 0..nt {
                assert_eq!(last[a * nt + b], last[b * nt + a]);
            }
        }
    }

    #[test]
    fn relative_index_is_translation_invariant() {
        let plan = WindowPlan::new([3, 3, 3], 3, false);
        let idx = plan.relative_index(3);
        let nt = plan.n_tokens();
        // The diagonal always maps to the zero-offset row.
        let centre = (2 * 5 + 2) * 5 + 2;
        assert!((0..nt).all(|a| idx[a * nt + a] == centre));
        assert!(idx.iter().all(|&i| i < 125));
    }
}
