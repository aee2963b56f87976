//! 3D convolution family on `(B, C, D0, D1, D2)` tensors.
//!
//! Convolutions lower to GEMM through an im2col buffer that is built for a
//! bounded chunk of output voxels at a time, so peak memory stays flat for
//! large volumes.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;
use crate::var::Var;

/// Upper bound on im2col buffer elements per chunk.
const CHUNK_ELEMS: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dOpts {
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dOpts {
    pub fn same(kernel: usize) -> Self {
        Conv3dOpts { stride: 1, padding: kernel / 2 }
    }
}

impl Default for Conv3dOpts {
    fn default() -> Self {
        Conv3dOpts { stride: 1, padding: 0 }
    }
}

/// Sliding geometry of a plain convolution with `c` input channels.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    inp: [usize; 3],
    k: [usize; 3],
    s: usize,
    p: usize,
    out: [usize; 3],
}

impl Geom {
    fn new(c: usize, inp: [usize; 3], k: [usize; 3], s: usize, p: usize) -> Option<Geom> {
        let mut out = [0; 3];
        for d in 0..3 {
            let span = inp[d] + 2 * p;
            if span < k[d] || s == 0 {
                return None;
            }
            out[d] = (span - k[d]) / s + 1;
        }
        Some(Geom { c, inp, k, s, p, out })
    }

    fn kv(&self) -> usize {
        self.k.iter().product()
    }

    fn n_in(&self) -> usize {
        self.inp.iter().product()
    }

    fn n_out(&self) -> usize {
        self.out.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.s == 1 && self.p == 0
    }

    /// Output lines (fixed first two coordinates) per im2col chunk.
    fn lines_per_chunk(&self) -> usize {
        let per_line = self.c * self.kv() * self.out[2];
        (CHUNK_ELEMS / per_line.max(1)).clamp(1, (self.out[0] * self.out[1]).max(1))
    }

    /// Voxel ranges `[v0, v1)` of output chunks, aligned to whole lines.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let lines = self.out[0] * self.out[1];
        let step = self.lines_per_chunk();
        let o2 = self.out[2];
        (0..lines).step_by(step).map(move |l0| (l0 * o2, (l0 + step).min(lines) * o2))
    }

    /// Valid output range `[lo, hi)` along the last axis for kernel tap `k2`,
    /// plus the input offset of output 0.
    fn last_axis_span(&self, k2: usize) -> (usize, usize, isize) {
        let (s, n) = (self.s as isize, self.inp[2] as isize);
        let off = k2 as isize - self.p as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n - off <= 0 { 0 } else { (n - off + s - 1) / s };
        let hi = hi.min(self.out[2] as isize).max(lo);
        (lo as usize, hi as usize, off)
    }

    /// Visits every (channel, kernel tap, output line) of a chunk with the
    /// offset of the matching input line (`None` inside padding).
    fn for_each_segment(
        &self,
        v0: usize,
        v1: usize,
        mut f: impl FnMut(usize, usize, usize, Option<usize>, (usize, usize, isize)),
    ) {
        let o2 = self.out[2];
        let (l0, l1) = (v0 / o2, v1 / o2);
        let kv = self.kv();
        let (s, p) = (self.s as isize, self.p as isize);
        let [i0, i1, i2] = self.inp;
        for ci in 0..self.c {
            let mut kidx = 0;
            for k0 in 0..self.k[0] {
                for k1 in 0..self.k[1] {
                    for k2 in 0..self.k[2] {
                        let span = self.last_axis_span(k2);
                        let row = ci * kv + kidx;
                        for (li, line) in (l0..l1).enumerate() {
                            let z = (line / self.out[1]) as isize * s + k0 as isize - p;
                            let y = (line % self.out[1]) as isize * s + k1 as isize - p;
                            let inside = z >= 0 && z < i0 as isize && y >= 0 && y < i1 as isize;
                            let src = inside.then(|| (z as usize * i1 + y as usize) * i2);
                            f(ci, row, li, src, span);
                        }
                        kidx += 1;
                    }
                }
            }
        }
    }

    /// Fills `cols` (rows `c * kv`, columns = output voxels `v0..v1`).
    fn im2col<T: Scalar>(&self, x: &[T], v0: usize, v1: usize, cols: &mut [T]) {
        let (nc, o2, n_in, i2, s) = (v1 - v0, self.out[2], self.n_in(), self.inp[2], self.s);
        self.for_each_segment(v0, v1, |ci, row, li, src, (lo, hi, off)| {
            let dst = &mut cols[row * nc + li * o2..row * nc + (li + 1) * o2];
            let Some(base) = src else {
                dst.fill(T::zero());
                return;
            };
            let xrow = &x[ci * n_in + base..ci * n_in + base + i2];
            dst[..lo].fill(T::zero());
            dst[hi..].fill(T::zero());
            if s == 1 {
                let start = (lo as isize + off) as usize;
                dst[lo..hi].copy_from_slice(&xrow[start..start + hi - lo]);
            } else {
                for (c, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                    *d = xrow[(c as isize * s as isize + off) as usize];
                }
            }
        });
    }

    /// Adjoint of [`Geom::im2col`]: scatter-adds `cols` into `dx`.
    fn col2im<T: Scalar>(&self, cols: &[T], v0: usize, v1: usize, dx: &mut [T]) {
        let (nc, o2, n_in, i2, s) = (v1 - v0, self.out[2], self.n_in(), self.inp[2], self.s);
        self.for_each_segment(v0, v1, |ci, row, li, src, (lo, hi, off)| {
            let Some(base) = src else {
                return;
            };
            let seg = &cols[row * nc + li * o2..row * nc + (li + 1) * o2];
            let xrow = &mut dx[ci * n_in + base..ci * n_in + base + i2];
            if s == 1 {
                let start = (lo as isize + off) as usize;
                for (d, &v) in xrow[start..start + hi - lo].iter_mut().zip(&seg[lo..hi]) {
                    *d += v;
                }
            } else {
                for (c, &v) in seg.iter().enumerate().take(hi).skip(lo) {
                    xrow[(c as isize * s as isize + off) as usize] += v;
                }
            }
        });
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

/// Plain 3D convolution. `w` is `(C_out, C_in, k0, k1, k2)`.
pub fn conv3d<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    b: Option<&Var<T>>,
    opts: Conv3dOpts,
) -> Result<Var<T>> {
    let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
    if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
        return Err(shape_err!("conv3d", "input {xs:?} vs weight {ws:?}"));
    }
    let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
    let geom = Geom::new(cin, spatial(&xs), spatial(&ws), opts.stride, opts.padding)
        .ok_or_else(|| shape_err!("conv3d", "kernel {ws:?} does not fit input {xs:?} with {opts:?}"))?;
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(shape_err!("conv3d", "bias {:?} for {cout} outputs", b.shape()));
        }
    }
    let (n_in, n_out, kdim) = (geom.n_in(), geom.n_out(), cin * geom.kv());
    let out_shape = [batch, cout, geom.out[0], geom.out[1], geom.out[2]];
    let mut out = match b {
        Some(b) => {
            let bd = b.value().data();
            Tensor::from_fn(&out_shape, |i| bd[(i / n_out) % cout])
        }
        None => Tensor::zeros(&out_shape),
    };
    {
        let (xd, wd, od) = (x.value().data(), w.value().data(), out.data_mut());
        let mut cols = Vec::new();
        for bi in 0..batch {
            let xb = &xd[bi * cin * n_in..(bi + 1) * cin * n_in];
            let ob = &mut od[bi * cout * n_out..(bi + 1) * cout * n_out];
            if geom.pointwise() {
                gemm(
                    T::one(),
                    wd,
                    MatLayout::row_major(cout, cin),
                    xb,
                    MatLayout::row_major(cin, n_in),
                    T::one(),
                    ob,
                    MatLayout::row_major(cout, n_out),
                );
                continue;
            }
            for (v0, v1) in geom.chunks() {
                let nc = v1 - v0;
                cols.resize(kdim * nc, T::zero());
                geom.im2col(xb, v0, v1, &mut cols);
                gemm(
                    T::one(),
                    wd,
                    MatLayout::row_major(cout, kdim),
                    &cols,
                    MatLayout::row_major(kdim, nc),
                    T::one(),
                    &mut ob[v0..],
                    MatLayout::row_major(cout, nc).with_row_stride(n_out),
                );
            }
        }
    }
    let mut parents = vec![x, w];
    if let Some(b) = b {
        parents.push(b);
    }
    let has_bias = b.is_some();
    Ok(Var::from_op(out, &parents, move |g, inputs, _| {
        let (xd, wd, gd) = (inputs[0].data(), inputs[1].data(), g.data());
        let mut gx = Tensor::zeros(inputs[0].shape());
        let mut gw = Tensor::zeros(inputs[1].shape());
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for bi in 0..batch {
            let xb = &xd[bi * cin * n_in..(bi + 1) * cin * n_in];
            let gb = &gd[bi * cout * n_out..(bi + 1) * cout * n_out];
            let gxb = &mut gx.data_mut()[bi * cin * n_in..(bi + 1) * cin * n_in];
            if geom.pointwise() {
                gemm(
                    T::one(),
                    wd,
                    MatLayout::transposed(cout, cin),
                    gb,
                    MatLayout::row_major(cout, n_out),
                    T::zero(),
                    gxb,
                    MatLayout::row_major(cin, n_in),
                );
                gemm(
                    T::one(),
                    gb,
                    MatLayout::row_major(cout, n_out),
                    xb,
                    MatLayout::transposed(cin, n_in),
                    T::one(),
                    gw.data_mut(),
                    MatLayout::row_major(cout, cin),
                );
                continue;
            }
            for (v0, v1) in geom.chunks() {
                let nc = v1 - v0;
                cols.resize(kdim * nc, T::zero());
                geom.im2col(xb, v0, v1, &mut cols);
                let g_chunk = MatLayout::row_major(cout, nc).with_row_stride(n_out);
                gemm(
                    T::one(),
                    &gb[v0..],
                    g_chunk,
                    &cols,
                    MatLayout::transposed(kdim, nc),
                    T::one(),
                    gw.data_mut(),
                    MatLayout::row_major(cout, kdim),
                );
                dcols.resize(kdim * nc, T::zero());
                gemm(
                    T::one(),
                    wd,
                    MatLayout::transposed(cout, kdim),
                    &gb[v0..],
                    g_chunk,
                    T::zero(),
                    &mut dcols,
                    MatLayout::row_major(kdim, nc),
                );
                geom.col2im(&dcols, v0, v1, gxb);
            }
        }
        let mut grads = vec![Some(gx), Some(gw)];
        if has_bias {
            grads.push(Some(channel_sums(gd, batch, cout, n_out)));
        }
        grads
    }))
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, c: usize, n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); c];
    for bi in 0..batch {
        for (ci, o) in out.iter_mut().enumerate() {
            let base = (bi * c + ci) * n;
            *o += g[base..base + n].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], out).unwrap()
}

/// Transposed 3D convolution (adjoint of [`conv3d`]). `w` is
/// `(C_in, C_out, k0, k1, k2)`; output extent is `(n - 1) * s - 2p + k`.
pub fn conv_transpose3d<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    b: Option<&Var<T>>,
    opts: Conv3dOpts,
) -> Result<Var<T>> {
    let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
    if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[0] {
        return Err(shape_err!("conv_transpose3d", "input {xs:?} vs weight {ws:?}"));
    }
    let (batch, cin, cout) = (xs[0], xs[1], ws[1]);
    let k = spatial(&ws);
    let inp = spatial(&xs);
    let mut out_dims = [0; 3];
    for d in 0..3 {
        let full = (inp[d] - 1) * opts.stride + k[d];
        if full < 2 * opts.padding + 1 {
            return Err(shape_err!("conv_transpose3d", "padding {} too large", opts.padding));
        }
        out_dims[d] = full - 2 * opts.padding;
    }
    // Geometry of the forward conv this op is the adjoint of.
    let geom = Geom::new(cout, out_dims, k, opts.stride, opts.padding)
        .filter(|g| g.out == inp)
        .ok_or_else(|| shape_err!("conv_transpose3d", "inconsistent geometry for {xs:?}"))?;
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(shape_err!("conv_transpose3d", "bias {:?} for {cout} outputs", b.shape()));
        }
    }
    let (n_in, n_out, kdim) = (geom.n_out(), geom.n_in(), cout * geom.kv());
    let out_shape = [batch, cout, out_dims[0], out_dims[1], out_dims[2]];
    let mut out = match b {
        Some(b) => {
            let bd = b.value().data();
            Tensor::from_fn(&out_shape, |i| bd[(i / n_out) % cout])
        }
        None => Tensor::zeros(&out_shape),
    };
    {
        let (xd, wd, od) = (x.value().data(), w.value().data(), out.data_mut());
        let mut cols = Vec::new();
        for bi in 0..batch {
            let xb = &xd[bi * cin * n_in..(bi + 1) * cin * n_in];
            let ob = &mut od[bi * cout * n_out..(bi + 1) * cout * n_out];
            for (v0, v1) in geom.chunks() {
                let nc = v1 - v0;
                cols.resize(kdim * nc, T::zero());
                gemm(
                    T::one(),
                    wd,
                    MatLayout::transposed(cin, kdim),
                    &xb[v0..],
                    MatLayout::row_major(cin, nc).with_row_stride(n_in),
                    T::zero(),
                    &mut cols,
                    MatLayout::row_major(kdim, nc),
                );
                geom.col2im(&cols, v0, v1, ob);
            }
        }
    }
    let mut parents = vec![x, w];
    if let Some(b) = b {
        parents.push(b);
    }
    let has_bias = b.is_some();
    Ok(Var::from_op(out, &parents, move |g, inputs, _| {
        let (xd, wd, gd) = (inputs[0].data(), inputs[1].data(), g.data());
        let mut gx = Tensor::zeros(inputs[0].shape());
        let mut gw = Tensor::zeros(inputs[1].shape());
        let mut gcols = Vec::new();
        for bi in 0..batch {
            let xb = &xd[bi * cin * n_in..(bi + 1) * cin * n_in];
            let gb = &gd[bi * cout * n_out..(bi + 1) * cout * n_out];
            let gxb = &mut gx.data_mut()[bi * cin * n_in..(bi + 1) * cin * n_in];
            for (v0, v1) in geom.chunks() {
                let nc = v1 - v0;
                gcols.resize(kdim * nc, T::zero());
                geom.im2col(gb, v0, v1, &mut gcols);
                gemm(
                    T::one(),
                    wd,
                    MatLayout::row_major(cin, kdim),
                    &gcols,
                    MatLayout::row_major(kdim, nc),
                    T::zero(),
                    &mut gxb[v0..],
                    MatLayout::row_major(cin, nc).with_row_stride(n_in),
                );
                gemm(
                    T::one(),
                    &xb[v0..],
                    MatLayout::row_major(cin, nc).with_row_stride(n_in),
                    &gcols,
                    MatLayout::transposed(kdim, nc),
                    T::one(),
                    gw.data_mut(),
                    MatLayout::row_major(cin, kdim),
                );
            }
        }
        let mut grads = vec![Some(gx), Some(gw)];
        if has_bias {
            grads.push(Some(channel_sums(gd, batch, cout, n_out)));
        }
        grads
    }))
}

/// Non-overlapping max pooling with window and stride `k`.
pub fn max_pool3d<T: Scalar>(x: &Var<T>, k: usize) -> Result<Var<T>> {
    let xs = x.shape().to_vec();
    if xs.len() != 5 || k == 0 || xs[2..].iter().any(|&d| d % k != 0) {
        return Err(shape_err!("max_pool3d", "input {xs:?} not divisible by {k}"));
    }
    let (bc, inp) = (xs[0] * xs[1], spatial(&xs));
    let out_d = inp.map(|d| d / k);
    let (n_in, n_out) = (inp.iter().product::<usize>(), out_d.iter().product::<usize>());
    let xd = x.value().data();
    let mut arg = vec![0usize; bc * n_out];
    let mut out = Vec::with_capacity(bc * n_out);
    for p in 0..bc {
        for a in 0..out_d[0] {
            for b2 in 0..out_d[1] {
                for c in 0..out_d[2] {
                    let mut best_i = usize::MAX;
                    for dz in 0..k {
                        for dy in 0..k {
                            for dx in 0..k {
                                let i = p * n_in
                                    + ((a * k + dz) * inp[1] + b2 * k + dy) * inp[2]
                                    + c * k
                                    + dx;
                                if best_i == usize::MAX || xd[i] > xd[best_i] {
                                    best_i = i;
                                }
                            }
                        }
                    }
                    arg[out.len()] = best_i;
                    out.push(xd[best_i]);
                }
            }
        }
    }
    let value = Tensor::new(&[xs[0], xs[1], out_d[0], out_d[1], out_d[2]], out)?;
    Ok(Var::from_op(value, &[x], move |g, inputs, _| {
        let mut gx = Tensor::zeros(inputs[0].shape());
        let gxd = gx.data_mut();
        for (&i, &gv) in arg.iter().zip(g.data()) {
            gxd[i] += gv;
        }
        vec![Some(gx)]
    }))
}
