use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};
use crate::var::Var;

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Offset into a (broadcast) input for every element of `out_shape`.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let lead = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0; rank];
    for i in lead..rank {
        if in_shape[i - lead] != 1 {
            eff[i] = in_strides[i - lead];
        }
    }
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Sums a gradient of broadcast shape back onto `in_shape`.
fn reduce_to<T: Scalar>(grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    if grad.shape() == in_shape {
        return grad.clone();
    }
    let offsets = broadcast_offsets(grad.shape(), in_shape);
    let mut out = Tensor::zeros(in_shape);
    let data = out.data_mut();
    for (&o, &g) in offsets.iter().zip(grad.data()) {
        data[o] += g;
    }
    out
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary<T: Scalar>(a: &Var<T>, b: &Var<T>, op: BinOp, name: &'static str) -> Result<Var<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| shape_err!(name, "{:?} vs {:?}", a.shape(), b.shape()))?;
    let f = move |x: T, y: T| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    let same = a.shape() == b.shape();
    let value = if same {
        a.value().zip_map(b.value(), f)
    } else {
        let oa = broadcast_offsets(&out_shape, a.shape());
        let ob = broadcast_offsets(&out_shape, b.shape());
        let (da, db) = (a.value().data(), b.value().data());
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
        Tensor::new(&out_shape, data)?
    };
    Ok(Var::from_op(value, &[a, b], move |g, inputs, _| {
        let (x, y) = (inputs[0], inputs[1]);
        let (ga, gb) = if same {
            match op {
                BinOp::Add => (g.clone(), g.clone()),
                BinOp::Sub => (g.clone(), g.map(|v| -v)),
                BinOp::Mul => (g.zip_map(y, |g, y| g * y), g.zip_map(x, |g, x| g * x)),
                BinOp::Div => (
                    g.zip_map(y, |g, y| g / y),
                    Tensor::from_fn(g.shape(), |i| {
                        let (gv, xv, yv) = (g.data()[i], x.data()[i], y.data()[i]);
                        -gv * xv / (yv * yv)
                    }),
                ),
            }
        } else {
            let oa = broadcast_offsets(g.shape(), x.shape());
            let ob = broadcast_offsets(g.shape(), y.shape());
            let (dx, dy) = (x.data(), y.data());
            let (ga_full, gb_full): (Vec<T>, Vec<T>) = g
                .data()
                .iter()
                .zip(oa.iter().zip(&ob))
                .map(|(&gv, (&i, &j))| match op {
                    BinOp::Add => (gv, gv),
                    BinOp::Sub => (gv, -gv),
                    BinOp::Mul => (gv * dy[j], gv * dx[i]),
                    BinOp::Div => (gv / dy[j], -gv * dx[i] / (dy[j] * dy[j])),
                })
                .unzip();
            let ga = Tensor::new(g.shape(), ga_full).unwrap();
            let gb = Tensor::new(g.shape(), gb_full).unwrap();
            (reduce_to(&ga, x.shape()), reduce_to(&gb, y.shape()))
        };
        vec![Some(ga), Some(gb)]
    }))
}

fn unary<T: Scalar>(
    x: &Var<T>,
    f: impl Fn(T) -> T,
    // derivative from (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    let value = x.value().map(f);
    Var::from_op(value, &[x], move |g, inputs, out| {
        let x = inputs[0];
        let data = g
            .data()
            .iter()
            .zip(x.data().iter().zip(out.data()))
            .map(|(&g, (&xv, &yv))| g * df(xv, yv))
            .collect();
        vec![Some(Tensor::new(g.shape(), data).unwrap())]
    })
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(self, other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(self, other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(self, other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(self, other, BinOp::Div, "div")
    }

    pub fn scale(&self, c: f64) -> Var<T> {
        let c = T::lit(c);
        unary(self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let c = T::lit(c);
        unary(self, move |v| v + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<T> {
        unary(self, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::lit(slope);
        unary(
            self,
            move |v| if v > T::zero() { v } else { v * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(self, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<T> {
        unary(self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self) -> Var<T> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        unary(self, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn square(&self) -> Var<T> {
        unary(self, |v| v * v, |x, _| T::lit(2.0) * x)
    }

    /// Clamp with a pass-through gradient strictly inside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        unary(
            self,
            move |v| v.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<T> {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        unary(
            self,
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let u = k * (x + c * x * x * x);
                let t = u.tanh();
                let du = k * (T::one() + three * c * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }
}
