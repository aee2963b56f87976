use modseg_tensor::ops::{self, Conv3dOpts};
use modseg_tensor::{Scalar, Var};
use rand::Rng;

use super::{BackboneConfig, FeatureBundle};
use crate::error::Result;
use crate::nn::{Builder, Conv3d, ConvTranspose3d, Ctx, InstanceNorm};

/// 3x3x3 convolution, instance norm, ReLU.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv3d,
    norm: InstanceNorm,
}

impl ConvBlock {
    fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, cin: usize, cout: usize) -> Self {
        let conv = Conv3d::new(&mut bld.sub("conv"), cin, cout, 3, Conv3dOpts::same(3), true);
        let norm = InstanceNorm::new(&mut bld.sub("norm"), cout);
        ConvBlock { conv, norm }
    }

    fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.norm.forward(ctx, &self.conv.forward(ctx, x)?)?.relu())
    }
}

#[derive(Clone, Debug)]
struct UpLevel {
    up: ConvTranspose3d,
    first: ConvBlock,
    second: ConvBlock,
}

/// Classic 3D U-Net: level `l` carries `S2 * 2^l` channels, each encoder
/// level widens in two convolutions (`c/2` then `c`), and each decoder level
/// upsamples with a stride-2 transposed convolution before concatenating the
/// skip connection.
#[derive(Clone, Debug)]
pub struct Unet3d {
    pub cfg: BackboneConfig,
    encoder: Vec<[ConvBlock; 2]>,
    decoder: Vec<UpLevel>,
}

impl Unet3d {
    pub(super) fn new<T: Scalar, R: Rng>(cfg: BackboneConfig, bld: &mut Builder<T, R>) -> Self {
        let ch = |l: usize| cfg.base_channels << l;
        let mut encoder = Vec::with_capacity(cfg.depth + 1);
        let mut cin = 1;
        for l in 0..=cfg.depth {
            let c = ch(l);
            let mid = (c / 2).max(1);
            let mut lvl = bld.sub(&format!("enc{l}"));
            let a = ConvBlock::new(&mut lvl.sub("a"), cin, mid);
            let b = ConvBlock::new(&mut lvl.sub("b"), mid, c);
            encoder.push([a, b]);
            cin = c;
        }
        let mut decoder = Vec::with_capacity(cfg.depth);
        for l in (0..cfg.depth).rev() {
            let (below, c) = (ch(l + 1), ch(l));
            let mut lvl = bld.sub(&format!("dec{l}"));
            let up = ConvTranspose3d::new(&mut lvl.sub("up"), below, below, 2, true);
            let first = ConvBlock::new(&mut lvl.sub("a"), below + c, c);
            let second = ConvBlock::new(&mut lvl.sub("b"), c, c);
            decoder.push(UpLevel { up, first, second });
        }
        Unet3d { cfg, encoder, decoder }
    }

    pub(super) fn forward<T: Scalar>(&self, ctx: Ctx<T>, images: &Var<T>) -> Result<FeatureBundle<T>> {
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut x = images.clone();
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            if l > 0 {
                x = ops::max_pool3d(&x, 2)?;
            }
            x = b.forward(ctx, &a.forward(ctx, &x)?)?;
            skips.push(x.clone());
        }
        let f_enc_last = skips.pop().expect("at least one level");
        let mut x = f_enc_last.clone();
        for lvl in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = lvl.up.forward(ctx, &x)?;
            let joined = ops::cat(&[&up, &skip], 1)?;
            x = lvl.second.forward(ctx, &lvl.first.forward(ctx, &joined)?)?;
        }
        Ok(FeatureBundle { f_enc_last, f_dec_last: x })
    }
}
