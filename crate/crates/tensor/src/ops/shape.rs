use std::rc::Rc;

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};
use crate::var::Var;

/// Sentinel in a gather index meaning "emit zero".
pub const ZERO_FILL: usize = usize::MAX;

impl<T: Scalar> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != self.value().numel() {
            return Err(shape_err!("reshape", "{:?} -> {shape:?}", self.shape()));
        }
        let value = self.value().clone().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op(value, &[self], move |g, _, _| {
            vec![Some(g.clone().reshape(&in_shape).unwrap())]
        }))
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == ZERO_FILL`.
    /// Indices may repeat; the backward pass scatter-adds.
    pub fn gather(&self, out_shape: &[usize], index: Rc<Vec<usize>>) -> Result<Var<T>> {
        if index.len() != numel(out_shape) {
            return Err(shape_err!("gather", "{} indices for shape {out_shape:?}", index.len()));
        }
        let src = self.value().data();
        let n = src.len();
        if let Some(&bad) = index.iter().find(|&&i| i != ZERO_FILL && i >= n) {
            return Err(invalid!("gather", "index {bad} out of range {n}"));
        }
        let data = index
            .iter()
            .map(|&i| if i == ZERO_FILL { T::zero() } else { src[i] })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op(value, &[self], move |g, _, _| {
            let mut grad = Tensor::zeros(&in_shape);
            let gd = grad.data_mut();
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != ZERO_FILL {
                    gd[i] += gv;
                }
            }
            vec![Some(grad)]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let (shape, index) = permute_index(self.shape(), axes)?;
        self.gather(&shape, Rc::new(index))
    }

    /// Zero padding; `pads[d] = (before, after)` for every axis.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Var<T>> {
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self.clone());
        }
        let (shape, index) = pad_index(self.shape(), pads)?;
        self.gather(&shape, Rc::new(index))
    }

    /// Inverse of [`Var::pad`].
    pub fn crop(&self, starts: &[usize], sizes: &[usize]) -> Result<Var<T>> {
        let (shape, index) = crop_index(self.shape(), starts, sizes)?;
        if shape == self.shape() {
            return Ok(self.clone());
        }
        self.gather(&shape, Rc::new(index))
    }

    /// Cyclic shift: `out[i] = in[(i - shift) mod n]` along each listed axis.
    pub fn roll(&self, shifts: &[(usize, isize)]) -> Result<Var<T>> {
        if shifts.iter().all(|&(_, s)| s == 0) {
            return Ok(self.clone());
        }
        let index = roll_index(self.shape(), shifts)?;
        self.gather(self.shape(), Rc::new(index))
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!("narrow", "axis {axis} range {start}+{len} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let src = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let value = Tensor::new(&out_shape, data)?;
        let in_shape = shape.to_vec();
        Ok(Var::from_op(value, &[self], move |g, _, _| {
            let mut grad = Tensor::zeros(&in_shape);
            let gd = grad.data_mut();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                let gbase = o * len * inner;
                gd[base..base + len * inner].copy_from_slice(&g.data()[gbase..gbase + len * inner]);
            }
            vec![Some(grad)]
        }))
    }

    pub fn sum_all(&self) -> Var<T> {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::from_op(value, &[self], move |g, _, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over the last axis, removing it.
    pub fn sum_last(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(shape_err!("sum_last", "rank-0 input"));
        };
        let rows = numel(lead);
        let src = self.value().data();
        let data = (0..rows).map(|r| src[r * n..(r + 1) * n].iter().copied().sum()).collect();
        let value = Tensor::new(lead, data)?;
        let in_shape = shape.to_vec();
        Ok(Var::from_op(value, &[self], move |g, _, _| {
            let gd = g.data();
            vec![Some(Tensor::from_fn(&in_shape, |i| gd[i / n]))]
        }))
    }

    pub fn mean_last(&self) -> Result<Var<T>> {
        let n = *self.shape().last().unwrap_or(&1);
        Ok(self.sum_last()?.scale(1.0 / n.max(1) as f64))
    }
}

/// Concatenation along `axis`.
pub fn cat<T: Scalar>(vars: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    let first = vars.first().ok_or_else(|| invalid!("cat", "no inputs"))?.shape().to_vec();
    if axis >= first.len() {
        return Err(shape_err!("cat", "axis {axis} for rank {}", first.len()));
    }
    for v in vars {
        let s = v.shape();
        let ok = s.len() == first.len()
            && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(shape_err!("cat", "{s:?} incompatible with {first:?} on axis {axis}"));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let sizes: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut out_shape = first.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for (v, &n) in vars.iter().zip(&sizes) {
            let src = v.value().data();
            data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let value = Tensor::new(&out_shape, data)?;
    let shapes: Vec<Vec<usize>> = vars.iter().map(|v| v.shape().to_vec()).collect();
    Ok(Var::from_op(value, vars, move |g, _, _| {
        let gd = g.data();
        let mut grads: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
        let mut off = 0;
        for _ in 0..outer {
            for (gr, &n) in grads.iter_mut().zip(&sizes) {
                gr.extend_from_slice(&gd[off..off + n * inner]);
                off += n * inner;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .map(|(d, s)| Some(Tensor::new(s, d).unwrap()))
            .collect()
    }))
}

pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(invalid!("permute", "axes {axes:?} for rank {rank}"));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    Ok((out_shape.clone(), odometer(&out_shape, |idx| idx.iter().zip(&eff).map(|(i, s)| i * s).sum())))
}

fn pad_index(shape: &[usize], pads: &[(usize, usize)]) -> Result<(Vec<usize>, Vec<usize>)> {
    if pads.len() != shape.len() {
        return Err(shape_err!("pad", "{} pads for rank {}", pads.len(), shape.len()));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = shape.iter().zip(pads).map(|(n, (a, b))| n + a + b).collect();
    let index = odometer(&out_shape, |idx| {
        let mut off = 0;
        for d in 0..idx.len() {
            let i = idx[d] as isize - pads[d].0 as isize;
            if i < 0 || i >= shape[d] as isize {
                return ZERO_FILL;
            }
            off += i as usize * in_strides[d];
        }
        off
    });
    Ok((out_shape, index))
}

fn crop_index(shape: &[usize], starts: &[usize], sizes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if starts.len() != shape.len() || sizes.len() != shape.len() {
        return Err(shape_err!("crop", "rank mismatch for {shape:?}"));
    }
    if (0..shape.len()).any(|d| starts[d] + sizes[d] > shape[d]) {
        return Err(shape_err!("crop", "{starts:?}+{sizes:?} exceeds {shape:?}"));
    }
    let in_strides = strides(shape);
    let index = odometer(sizes, |idx| {
        (0..idx.len()).map(|d| (idx[d] + starts[d]) * in_strides[d]).sum()
    });
    Ok((sizes.to_vec(), index))
}

fn roll_index(shape: &[usize], shifts: &[(usize, isize)]) -> Result<Vec<usize>> {
    let mut per_axis = vec![0isize; shape.len()];
    for &(axis, s) in shifts {
        if axis >= shape.len() {
            return Err(invalid!("roll", "axis {axis} for rank {}", shape.len()));
        }
        per_axis[axis] += s;
    }
    let in_strides = strides(shape);
    Ok(odometer(shape, |idx| {
        (0..idx.len())
            .map(|d| {
                let n = shape[d] as isize;
                ((idx[d] as isize - per_axis[d]).rem_euclid(n)) as usize * in_strides[d]
            })
            .sum()
    }))
}

/// Evaluates `f` at every multi-index of `shape` in row-major order.
pub fn odometer(shape: &[usize], mut f: impl FnMut(&[usize]) -> usize) -> Vec<usize> {
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        out.push(f(&idx));
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
