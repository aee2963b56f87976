use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::var::Var;

/// Normalizes contiguous rows of length `n`; returns (normalized, inv_std per row).
fn normalize_rows<T: Scalar>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let nt = T::from_usize(n).unwrap();
    let rows = x.len() / n;
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(rows);
    for row in x.chunks(n) {
        let mean = row.iter().copied().sum::<T>() / nt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
        let is = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * is));
        inv.push(is);
    }
    (xhat, inv)
}

/// Row-wise backward given `dxhat` (gradient wrt normalized values).
fn normalize_rows_backward<T: Scalar>(dxhat: &[T], xhat: &[T], inv: &[T], n: usize) -> Vec<T> {
    let nt = T::from_usize(n).unwrap();
    let mut dx = Vec::with_capacity(dxhat.len());
    for ((dr, xr), &is) in dxhat.chunks(n).zip(xhat.chunks(n)).zip(inv) {
        let sum_d: T = dr.iter().copied().sum();
        let sum_dx: T = dr.iter().zip(xr).map(|(&d, &x)| d * x).sum();
        dx.extend(dr.iter().zip(xr).map(|(&d, &x)| is / nt * (nt * d - sum_d - x * sum_dx)));
    }
    dx
}

/// Layer normalization over the last axis with optional elementwise affine.
pub fn layer_norm<T: Scalar>(
    x: &Var<T>,
    affine: Option<(&Var<T>, &Var<T>)>,
    eps: f64,
) -> Result<Var<T>> {
    let Some(&n) = x.shape().last() else {
        return Err(shape_err!("layer_norm", "rank-0 input"));
    };
    if let Some((g, b)) = affine {
        if g.shape() != [n] || b.shape() != [n] {
            return Err(shape_err!("layer_norm", "affine {:?}/{:?} for width {n}", g.shape(), b.shape()));
        }
    }
    let (xhat, inv) = normalize_rows(x.value().data(), n, T::lit(eps));
    let out_data: Vec<T> = match affine {
        Some((g, b)) => {
            let (gd, bd) = (g.value().data(), b.value().data());
            xhat.iter().enumerate().map(|(i, &v)| v * gd[i % n] + bd[i % n]).collect()
        }
        None => xhat.clone(),
    };
    let out = Tensor::new(x.shape(), out_data)?;
    let mut parents = vec![x];
    if let Some((g, b)) = affine {
        parents.push(g);
        parents.push(b);
    }
    let has_affine = affine.is_some();
    Ok(Var::from_op(out, &parents, move |grad, inputs, _| {
        let gd = grad.data();
        let dxhat: Vec<T> = if has_affine {
            let gamma = inputs[1].data();
            gd.iter().enumerate().map(|(i, &v)| v * gamma[i % n]).collect()
        } else {
            gd.to_vec()
        };
        let dx = normalize_rows_backward(&dxhat, &xhat, &inv, n);
        let mut grads = vec![Some(Tensor::new(inputs[0].shape(), dx).unwrap())];
        if has_affine {
            let mut dg = vec![T::zero(); n];
            let mut db = vec![T::zero(); n];
            for (i, &v) in gd.iter().enumerate() {
                dg[i % n] += v * xhat[i];
                db[i % n] += v;
            }
            grads.push(Some(Tensor::new(&[n], dg).unwrap()));
            grads.push(Some(Tensor::new(&[n], db).unwrap()));
        }
        grads
    }))
}

/// Instance normalization of `(B, C, spatial...)` with per-channel affine.
pub fn instance_norm<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: f64,
) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(shape_err!("instance_norm", "expected (B, C, ...), got {s:?}"));
    }
    let c = s[1];
    let n: usize = s[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!("instance_norm", "affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()));
    }
    let (xhat, inv) = normalize_rows(x.value().data(), n, T::lit(eps));
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let out_data: Vec<T> = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / n) % c;
            v * gd[ch] + bd[ch]
        })
        .collect();
    let out = Tensor::new(s, out_data)?;
    Ok(Var::from_op(out, &[x, gamma, beta], move |grad, inputs, _| {
        let gdat = grad.data();
        let gamma = inputs[1].data();
        let dxhat: Vec<T> = gdat.iter().enumerate().map(|(i, &v)| v * gamma[(i / n) % c]).collect();
        let dx = normalize_rows_backward(&dxhat, &xhat, &inv, n);
        let mut dg = vec![T::zero(); c];
        let mut db = vec![T::zero(); c];
        for (i, &v) in gdat.iter().enumerate() {
            let ch = (i / n) % c;
            dg[ch] += v * xhat[i];
            db[ch] += v;
        }
        vec![
            Some(Tensor::new(inputs[0].shape(), dx).unwrap()),
            Some(Tensor::new(&[c], dg).unwrap()),
            Some(Tensor::new(&[c], db).unwrap()),
        ]
    }))
}
