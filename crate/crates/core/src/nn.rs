//! Parameterized layers on top of the tensor ops. Layers only hold
//! parameter ids; values live in a shared [`ParamStore`].

use modseg_tensor::ops::{self, Conv3dOpts};
use modseg_tensor::{ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Parameter access for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    /// Whether parameters become graph leaves (training) or constants.
    pub trainable: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx { store, trainable }
    }

    pub fn p(&self, id: ParamId) -> Var<T> {
        self.store.var(id, self.trainable)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, prefix: &str) -> Self {
        Builder { store, rng, prefix: prefix.to_string() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T, R> {
        Builder { store: self.store, rng: self.rng, prefix: format!("{}.{name}", self.prefix) }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let name = self.name(leaf);
        self.store.add_fan_in_uniform(name, shape, fan_in, self.rng)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], v: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::full(shape, T::lit(v)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub opts: Conv3dOpts,
}

impl Conv3d {
    pub fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<T, R>,
        cin: usize,
        cout: usize,
        k: usize,
        opts: Conv3dOpts,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let w = bld.uniform("w", &[cout, cin, k, k, k], fan_in);
        let b = bias.then(|| bld.uniform("b", &[cout], fan_in));
        Conv3d { w, b, opts }
    }

    pub fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.b.map(|b| ctx.p(b));
        Ok(ops::conv3d(x, &ctx.p(self.w), b.as_ref(), self.opts)?)
    }
}

/// Transposed convolution with kernel = stride (exact 2x upsampling for k=2).
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub opts: Conv3dOpts,
}

impl ConvTranspose3d {
    pub fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        let fan_in = cout * k * k * k;
        let w = bld.uniform("w", &[cin, cout, k, k, k], fan_in);
        let b = bias.then(|| bld.uniform("b", &[cout], fan_in));
        ConvTranspose3d { w, b, opts: Conv3dOpts { stride: k, padding: 0 } }
    }

    pub fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.b.map(|b| ctx.p(b));
        Ok(ops::conv_transpose3d(x, &ctx.p(self.w), b.as_ref(), self.opts)?)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, c: usize) -> Self {
        InstanceNorm { gamma: bld.constant("gamma", &[c], 1.0), beta: bld.constant("beta", &[c], 0.0) }
    }

    pub fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(ops::instance_norm(x, &ctx.p(self.gamma), &ctx.p(self.beta), Self::EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, c: usize) -> Self {
        LayerNorm { gamma: bld.constant("gamma", &[c], 1.0), beta: bld.constant("beta", &[c], 0.0) }
    }

    pub fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        Ok(ops::layer_norm(x, Some((&g, &b)), Self::EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, din: usize, dout: usize, bias: bool) -> Self {
        let w = bld.uniform("w", &[dout, din], din);
        let b = bias.then(|| bld.uniform("b", &[dout], din));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, ctx: Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.b.map(|b| ctx.p(b));
        Ok(ops::linear(x, &ctx.p(self.w), b.as_ref())?)
    }
}

/// `(B, C, D0, D1, D2)` to `(B, D0, D1, D2, C)`.
pub fn to_channels_last<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    Ok(x.permute(&[0, 2, 3, 4, 1])?)
}

/// Inverse of [`to_channels_last`].
pub fn to_channels_first<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    Ok(x.permute(&[0, 4, 1, 2, 3])?)
}
