use std::sync::Arc;

use super::{numel, Result, Scalar, Tensor, TensorError};

/// Lower clamp applied inside [`Tensor::log_clamped`].
pub const LOG_CLAMP_EPS: f64 = 1e-8;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast (right-aligned) to it.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0; rank];
    for i in 0..in_shape.len() {
        let o = rank - in_shape.len() + i;
        eff[o] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// `out[p, r] += a[p, q] * b[q, r]`
fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av == T::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[p, q] += g[p, r] * b[q, r]` (g times b transposed)
fn mm_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            out[i * q + k] += dot(grow, &b[k * r..(k + 1) * r]);
        }
    }
}

/// Dot product with eight independent partial sums, so the loop vectorizes.
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: T = xc
        .remainder()
        .iter()
        .zip(yc.remainder())
        .fold(T::zero(), |s, (&a, &b)| s + a * b);
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            lanes[l] += a[l] * b[l];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

/// `out[q, r] += a[p, q]^T * g[p, r]`
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `0.5 (1 + tanh u)` written as the logistic `1 / (1 + e^{-2u})`, which is
/// the same function and several times cheaper than `tanh`.
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

pub(crate) fn gelu_fwd(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

enum BinKind {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinKind, name: &'static str) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| TensorError::Shape {
            op: name,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        let n = numel(&out_shape);
        let map_a = (self.shape() != out_shape.as_slice()).then(|| Arc::new(broadcast_map(&out_shape, self.shape())));
        let map_b = (other.shape() != out_shape.as_slice()).then(|| Arc::new(broadcast_map(&out_shape, other.shape())));
        let (ad, bd) = (self.data(), other.data());
        let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
        let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
        let data: Vec<T> = match kind {
            BinKind::Add => (0..n).map(|i| ad[ia(i)] + bd[ib(i)]).collect(),
            BinKind::Sub => (0..n).map(|i| ad[ia(i)] - bd[ib(i)]).collect(),
            BinKind::Mul => (0..n).map(|i| ad[ia(i)] * bd[ib(i)]).collect(),
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    match kind {
                        BinKind::Add | BinKind::Sub => g.iter().enumerate().for_each(|(i, &v)| ga[ia(i)] += v),
                        BinKind::Mul => {
                            let bd = b.data();
                            g.iter().enumerate().for_each(|(i, &v)| ga[ia(i)] += v * bd[ib(i)])
                        }
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    match kind {
                        BinKind::Add => g.iter().enumerate().for_each(|(i, &v)| gb[ib(i)] += v),
                        BinKind::Sub => g.iter().enumerate().for_each(|(i, &v)| gb[ib(i)] -= v),
                        BinKind::Mul => {
                            let ad = a.data();
                            g.iter().enumerate().for_each(|(i, &v)| gb[ib(i)] += v * ad[ia(i)])
                        }
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    fn unary<F, D>(&self, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = Arc::new(data.clone());
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let gx = x
                .data()
                .iter()
                .zip(y.iter())
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary(|x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary(|x| T::of(gelu_fwd(x.as_f64())), |x, _| T::of(gelu_grad(x.as_f64())))
    }

    /// `ln(max(x, 1e-8))`; negative entries are a domain error.
    pub fn log_clamped(&self) -> Result<Tensor<T>> {
        if let Some(bad) = self.data().iter().find(|v| v.is_nan() || **v < T::zero()) {
            return Err(TensorError::Domain {
                op: "log_clamped",
                detail: format!("negative or NaN entry {bad}"),
            });
        }
        let eps = T::of(LOG_CLAMP_EPS);
        Ok(self.unary(
            move |x| x.max(eps).ln(),
            move |x, _| if x > eps { T::one() / x } else { T::zero() },
        ))
    }

    /// Batched matrix product `[..., p, q] x [..., q, r] -> [..., p, r]`
    /// with broadcasting over the leading (batch) dimensions.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(err());
        }
        let (sa, sb) = (self.shape(), other.shape());
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(err)?;
        let nb = numel(&batch);
        let off_a: Arc<Vec<usize>> = Arc::new(broadcast_map(&batch, ba).into_iter().map(|i| i * p * q).collect());
        let off_b: Arc<Vec<usize>> = Arc::new(broadcast_map(&batch, bb).into_iter().map(|i| i * q * r).collect());
        let mut data = vec![T::zero(); nb * p * r];
        let (ad, bd) = (self.data(), other.data());
        for bi in 0..nb {
            mm_acc(
                &ad[off_a[bi]..off_a[bi] + p * q],
                &bd[off_b[bi]..off_b[bi] + q * r],
                &mut data[bi * p * r..(bi + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let mut out_shape = batch;
        out_shape.extend([p, r]);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    let bd = b.data();
                    for bi in 0..nb {
                        mm_nt_acc(
                            &g[bi * p * r..(bi + 1) * p * r],
                            &bd[off_b[bi]..off_b[bi] + q * r],
                            &mut ga[off_a[bi]..off_a[bi] + p * q],
                            p,
                            q,
                            r,
                        );
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    let ad = a.data();
                    for bi in 0..nb {
                        mm_tn_acc(
                            &ad[off_a[bi]..off_a[bi] + p * q],
                            &g[bi * p * r..(bi + 1) * p * r],
                            &mut gb[off_b[bi]..off_b[bi] + q * r],
                            p,
                            q,
                            r,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        match self.shape().last() {
            Some(&m) if m > 0 => Ok(m),
            _ => Err(TensorError::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let m = self.last_dim("softmax_rows")?;
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = Arc::new(data.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&self) -> Result<Tensor<T>> {
        let m = self.last_dim("log_softmax_rows")?;
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "log_softmax_rows" });
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y = Arc::new(data.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)) {
                    let s: T = gr.iter().copied().sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * s;
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance
    /// (epsilon 1e-5 inside the variance), then applies `gain * x + shift`.
    pub fn layer_norm(&self, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.last_dim("layer_norm")?;
        for p in [gain, shift] {
            if p.shape() != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let rows = self.numel() / d;
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, (xr, hr)) in self.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * is;
            }
        }
        let (gd, sd) = (gain.data(), shift.data());
        let data: Vec<T> = xhat
            .chunks(d)
            .flat_map(|hr| hr.iter().zip(gd).zip(sd).map(|((&h, &g), &s)| g * h + s))
            .collect();
        let xhat = Arc::new(xhat);
        let (x, gain_t, shift_t) = (self.clone(), gain.clone(), shift.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), shift.clone()],
            move |g| {
                let gd = gain_t.data();
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let gh = gr[j] * gd[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (gr[j] * gd[j] - m1 - hr[j] * m2);
                        }
                    }
                    gx
                });
                let ggain = gain_t.requires_grad().then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += gr[j] * hr[j];
                        }
                    }
                    acc
                });
                let gshift = shift_t.requires_grad().then(|| {
                    let mut acc = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            acc[j] += gr[j];
                        }
                    }
                    acc
                });
                vec![gx, ggain, gshift]
            },
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        if numel(&shape) != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(Tensor::from_op(shape, self.data().to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Shape {
                op: "permute",
                lhs: self.shape().to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = self.numel();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..total {
            map.push(flat);
            for d in (0..rank).rev() {
                idx[d] += 1;
                flat += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                flat -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose_last",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: self.rank(),
            });
        }
        let dim = self.shape()[axis];
        if start + len > dim {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                limit: dim,
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n_in = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n_in];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(TensorError::Index {
            op: "concat",
            index: 0,
            limit: 0,
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_dim: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for (p, &dd) in parts.iter().zip(&dims) {
                data.extend_from_slice(&p.data()[o * dd * inner..(o + 1) * dd * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_dim;
        let flags: Vec<bool> = parts.iter().map(Tensor::requires_grad).collect();
        Ok(Tensor::from_op(shape, data, parts.to_vec(), move |g| {
            let mut grads: Vec<Option<Vec<T>>> = dims
                .iter()
                .zip(&flags)
                .map(|(&dd, &f)| f.then(|| Vec::with_capacity(outer * dd * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &dd) in grads.iter_mut().zip(&dims) {
                    let chunk = &g[pos..pos + dd * inner];
                    if let Some(v) = gp {
                        v.extend_from_slice(chunk);
                    }
                    pos += dd * inner;
                }
            }
            grads
        }))
    }

    /// Row lookup into a `[rows, d]` table; output shape is `index_shape ++ [d]`.
    pub fn embedding(table: &Tensor<T>, ids: &[usize], index_shape: &[usize]) -> Result<Tensor<T>> {
        if table.rank() != 2 || numel(index_shape) != ids.len() {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: table.shape().to_vec(),
                rhs: index_shape.to_vec(),
            });
        }
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                limit: rows,
            });
        }
        let src = table.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(shape, data, vec![table.clone()], move |g| {
            let mut gt = vec![T::zero(); rows * d];
            for (k, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g[k * d + j];
                }
            }
            vec![Some(gt)]
        }))
    }

    /// Picks elements by flat index into a 1-D tensor.
    pub fn gather_flat(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index {
                op: "gather_flat",
                index: bad,
                limit: n,
            });
        }
        let src = self.data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let indices = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len()],
            data,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); n];
                for (&i, &gv) in indices.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().scale(T::one() / T::of(n as f64))
    }
}
