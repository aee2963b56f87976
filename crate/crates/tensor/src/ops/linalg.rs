use crate::error::{shape_err, Result};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;
use crate::var::Var;

/// `x @ w^T + b` over the last axis; `w` is `(out, in)`.
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let Some(&in_dim) = xs.last() else {
        return Err(shape_err!("linear", "rank-0 input"));
    };
    if ws.len() != 2 || ws[1] != in_dim {
        return Err(shape_err!("linear", "input {xs:?} vs weight {ws:?}"));
    }
    let out_dim = ws[0];
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(shape_err!("linear", "bias {:?} for {out_dim} outputs", b.shape()));
        }
    }
    let rows = x.value().numel() / in_dim.max(1);
    let mut out_shape = xs.to_vec();
    *out_shape.last_mut().unwrap() = out_dim;
    let mut out = match b {
        Some(b) => {
            let bd = b.value().data();
            Tensor::from_fn(&out_shape, |i| bd[i % out_dim])
        }
        None => Tensor::zeros(&out_shape),
    };
    gemm(
        T::one(),
        x.value().data(),
        MatLayout::row_major(rows, in_dim),
        w.value().data(),
        MatLayout::transposed(out_dim, in_dim),
        T::one(),
        out.data_mut(),
        MatLayout::row_major(rows, out_dim),
    );
    let mut parents = vec![x, w];
    if let Some(b) = b {
        parents.push(b);
    }
    let has_bias = b.is_some();
    Ok(Var::from_op(out, &parents, move |g, inputs, _| {
        let (xv, wv) = (inputs[0], inputs[1]);
        let mut gx = Tensor::zeros(xv.shape());
        gemm(
            T::one(),
            g.data(),
            MatLayout::row_major(rows, out_dim),
            wv.data(),
            MatLayout::row_major(out_dim, in_dim),
            T::zero(),
            gx.data_mut(),
            MatLayout::row_major(rows, in_dim),
        );
        let mut gw = Tensor::zeros(wv.shape());
        gemm(
            T::one(),
            g.data(),
            MatLayout::transposed(rows, out_dim),
            xv.data(),
            MatLayout::row_major(rows, in_dim),
            T::zero(),
            gw.data_mut(),
            MatLayout::row_major(out_dim, in_dim),
        );
        let mut grads = vec![Some(gx), Some(gw)];
        if has_bias {
            let mut gb = Tensor::zeros(&[out_dim]);
            let gbd = gb.data_mut();
            for (i, &v) in g.data().iter().enumerate() {
                gbd[i % out_dim] += v;
            }
            grads.push(Some(gb));
        }
        grads
    }))
}

/// Batched matrix product over the leading axis: `(G, M, K) x (G, K, N)`,
/// or `(G, M, K) x (G, N, K)^T` when `transpose_b` is set.
pub fn bmm<T: Scalar>(a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Result<Var<T>> {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(shape_err!("bmm", "{sa:?} x {sb:?}"));
    }
    let (groups, m, k) = (sa[0], sa[1], sa[2]);
    let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if kb != k {
        return Err(shape_err!("bmm", "{sa:?} x {sb:?} (transpose_b={transpose_b})"));
    }
    let b_layout = move || {
        if transpose_b {
            MatLayout::transposed(n, k)
        } else {
            MatLayout::row_major(k, n)
        }
    };
    let mut out = Tensor::zeros(&[groups, m, n]);
    {
        let (ad, bd, od) = (a.value().data(), b.value().data(), out.data_mut());
        for g in 0..groups {
            gemm(
                T::one(),
                &ad[g * m * k..(g + 1) * m * k],
                MatLayout::row_major(m, k),
                &bd[g * k * n..(g + 1) * k * n],
                b_layout(),
                T::zero(),
                &mut od[g * m * n..(g + 1) * m * n],
                MatLayout::row_major(m, n),
            );
        }
    }
    Ok(Var::from_op(out, &[a, b], move |grad, inputs, _| {
        let (av, bv) = (inputs[0], inputs[1]);
        let mut ga = Tensor::zeros(av.shape());
        let mut gb = Tensor::zeros(bv.shape());
        let (ad, bd, gd) = (av.data(), bv.data(), grad.data());
        for g in 0..groups {
            let gs = &gd[g * m * n..(g + 1) * m * n];
            // dA = dC · B^T
            let b_t = if transpose_b { MatLayout::row_major(n, k) } else { MatLayout::transposed(k, n) };
            gemm(
                T::one(),
                gs,
                MatLayout::row_major(m, n),
                &bd[g * k * n..(g + 1) * k * n],
                b_t,
                T::zero(),
                &mut ga.data_mut()[g * m * k..(g + 1) * m * k],
                MatLayout::row_major(m, k),
            );
            let a_s = &ad[g * m * k..(g + 1) * m * k];
            let gb_s = &mut gb.data_mut()[g * k * n..(g + 1) * k * n];
            if transpose_b {
                // dB (n x k) = dC^T · A
                gemm(
                    T::one(),
                    gs,
                    MatLayout::transposed(m, n),
                    a_s,
                    MatLayout::row_major(m, k),
                    T::zero(),
                    gb_s,
                    MatLayout::row_major(n, k),
                );
            } else {
                // dB (k x n) = A^T · dC
                gemm(
                    T::one(),
                    a_s,
                    MatLayout::transposed(m, k),
                    gs,
                    MatLayout::row_major(m, n),
                    T::zero(),
                    gb_s,
                    MatLayout::row_major(k, n),
                );
            }
        }
        vec![Some(ga), Some(gb)]
    }))
}

/// Softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let Some(&n) = x.shape().last() else {
        return Err(shape_err!("softmax", "rank-0 input"));
    };
    let mut out = x.value().clone();
    for row in out.data_mut().chunks_mut(n.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Var::from_op(out, &[x], move |g, _, y| {
        let mut gx = g.clone();
        for (gr, yr) in gx.data_mut().chunks_mut(n.max(1)).zip(y.data().chunks(n.max(1))) {
            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
            for (gv, &yv) in gr.iter_mut().zip(yr) {
                *gv = yv * (*gv - dot);
            }
        }
        vec![Some(gx)]
    }))
}
