use rand::Rng;

use super::autograd::Var;
use super::{Scalar, Tensor};

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_tensor<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let nd = t.ndim();
    assert_eq!(axes.len(), nd, "permutation rank mismatch");
    let in_strides = strides(t.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(t.numel());
    if nd == 0 || t.numel() == 0 {
        return Tensor::from_vec(&out_shape, t.data().to_vec());
    }
    let src = t.data();
    let last = nd - 1;
    let mut idx = vec![0usize; nd];
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return Tensor::from_vec(&out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, inputs, _| {
                vec![
                    Some(g.zip_map(inputs[1].value(), |g, b| g * b)),
                    Some(g.zip_map(inputs[0].value(), |g, a| g * a)),
                ]
            }),
        )
    }

    /// Adds `other`, whose shape must equal a trailing suffix of `self`'s shape.
    pub fn add_broadcast(&self, other: &Var<T>) -> Var<T> {
        let (outer, inner) = suffix_split(self.shape(), other.shape());
        let mut value = self.value().clone();
        let b = other.value().data();
        for chunk in value.data_mut().chunks_mut(inner) {
            chunk.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
        debug_assert_eq!(value.numel(), outer * inner);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, inputs, _| {
                let mut gb = Tensor::zeros(inputs[1].shape());
                for chunk in g.data().chunks(inner) {
                    gb.data_mut().iter_mut().zip(chunk).for_each(|(a, &c)| *a += c);
                }
                vec![Some(g.clone()), Some(gb)]
            }),
        )
    }

    pub fn scale(&self, c: T) -> Var<T> {
        Var::from_op(
            self.value().map(|v| v * c),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    pub fn relu(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|v| if v > T::zero() { v } else { T::zero() }),
            vec![self.clone()],
            Box::new(|g, inputs, _| {
                vec![Some(g.zip_map(inputs[0].value(), |g, x| if x > T::zero() { g } else { T::zero() }))]
            }),
        )
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&self) -> Var<T> {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        Var::from_op(
            self.value().map(|x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh())),
            vec![self.clone()],
            Box::new(move |g, inputs, _| {
                vec![Some(g.zip_map(inputs[0].value(), |g, x| {
                    let t = (c * (x + a * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * x * x);
                    g * (half * (T::one() + t) + half * x * dt)
                }))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        Var::from_op(
            self.value().map(sigmoid),
            vec![self.clone()],
            Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, s| g * s * (T::one() - s)))]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let old: Vec<usize> = self.shape().to_vec();
        Var::from_op(
            self.value().clone().reshape(shape),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.clone().reshape(&old))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let inv = inverse_permutation(axes);
        Var::from_op(
            permute_tensor(self.value(), axes),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(permute_tensor(g, &inv))]),
        )
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&self, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let k = *self.shape().last().expect("linear on scalar");
        let (o, wk) = (w.shape()[0], w.shape()[1]);
        assert_eq!(k, wk, "linear: input width {k} vs weight {:?}", w.shape());
        let m = self.value().numel() / k;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = o;
        let mut y = Tensor::zeros(&out_shape);
        T::gemm(m, k, o, self.value().data(), false, w.value().data(), true, y.data_mut(), false);
        if let Some(b) = b {
            let bias = b.value().data();
            for row in y.data_mut().chunks_mut(o) {
                row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut inputs = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            inputs.push(b.clone());
        }
        Var::from_op(
            y,
            inputs,
            Box::new(move |g, inputs, _| {
                let x = inputs[0].value();
                let w = inputs[1].value();
                let mut gx = Tensor::zeros(x.shape());
                if inputs[0].requires_grad() {
                    T::gemm(m, o, k, g.data(), false, w.data(), false, gx.data_mut(), false);
                }
                let mut gw = Tensor::zeros(w.shape());
                if inputs[1].requires_grad() {
                    T::gemm(o, m, k, g.data(), true, x.data(), false, gw.data_mut(), false);
                }
                let mut out = vec![Some(gx), Some(gw)];
                if inputs.len() == 3 {
                    let mut gb = Tensor::zeros(&[o]);
                    for row in g.data().chunks(o) {
                        gb.data_mut().iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    out.push(Some(gb));
                }
                out
            }),
        )
    }

    /// Batched `op(a) · op(b)` over a leading batch axis of rank-3 operands.
    pub fn bmm(&self, other: &Var<T>, trans_a: bool, trans_b: bool) -> Var<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let batch = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "bmm inner dims {sa:?} {sb:?}");
        let mut y = Tensor::zeros(&[batch, m, n]);
        let (a_sz, b_sz, c_sz) = (m * k, k * n, m * n);
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &self.value().data()[i * a_sz..(i + 1) * a_sz],
                trans_a,
                &other.value().data()[i * b_sz..(i + 1) * b_sz],
                trans_b,
                &mut y.data_mut()[i * c_sz..(i + 1) * c_sz],
                false,
            );
        }
        Var::from_op(
            y,
            vec![self.clone(), other.clone()],
            Box::new(move |g, inputs, _| {
                let a = inputs[0].value().data();
                let b = inputs[1].value().data();
                let mut ga = Tensor::zeros(inputs[0].shape());
                let mut gb = Tensor::zeros(inputs[1].shape());
                for i in 0..batch {
                    let gi = &g.data()[i * c_sz..(i + 1) * c_sz];
                    let ai = &a[i * a_sz..(i + 1) * a_sz];
                    let bi = &b[i * b_sz..(i + 1) * b_sz];
                    let ga_i = &mut ga.data_mut()[i * a_sz..(i + 1) * a_sz];
                    // dA' = dC · B'ᵀ ; dA = dA' or its transpose B' · dCᵀ.
                    if trans_a {
                        T::gemm(k, n, m, bi, trans_b, gi, true, ga_i, false);
                    } else {
                        T::gemm(m, n, k, gi, false, bi, !trans_b, ga_i, false);
                    }
                    let gb_i = &mut gb.data_mut()[i * b_sz..(i + 1) * b_sz];
                    // dB' = A'ᵀ · dC ; dB = dB' or its transpose dCᵀ · A'.
                    if trans_b {
                        T::gemm(n, m, k, gi, true, ai, trans_a, gb_i, false);
                    } else {
                        T::gemm(k, m, n, ai, !trans_a, gi, false, gb_i, false);
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn softmax_last(&self) -> Var<T> {
        let d = *self.shape().last().expect("softmax on scalar");
        let mut y = self.value().clone();
        for row in y.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _, out| {
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(out.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    grow.iter_mut().zip(yrow).for_each(|(gv, &yv)| *gv = yv * (*gv - dot));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Var<T> {
        let d = *self.shape().last().expect("layer_norm on scalar");
        let rows = self.value().numel() / d;
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = Tensor::zeros(self.shape());
        let mut inv_std = vec![T::zero(); rows];
        for (r, (src, dst)) in
            self.value().data().chunks(d).zip(xhat.data_mut().chunks_mut(d)).enumerate()
        {
            let mean = src.iter().copied().sum::<T>() / dn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            dst.iter_mut().zip(src).for_each(|(o, &v)| *o = (v - mean) * is);
        }
        let gm = gamma.value().data();
        let bt = beta.value().data();
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(d) {
            for ((v, &g), &b) in row.iter_mut().zip(gm).zip(bt) {
                *v = *v * g + b;
            }
        }
        Var::from_op(
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, inputs, _| {
                let gm = inputs[1].value().data();
                let mut gx = Tensor::zeros(inputs[0].shape());
                let mut ggamma = Tensor::zeros(&[d]);
                let mut gbeta = Tensor::zeros(&[d]);
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat.data()[r * d..(r + 1) * d];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = grow[j] * gm[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        ggamma.data_mut()[j] += grow[j] * xh[j];
                        gbeta.data_mut()[j] += grow[j];
                    }
                    let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dxh = grow[j] * gm[j];
                        out[j] = inv_std[r] * (dxh - sum_dxh / dn - xh[j] * sum_dxh_xh / dn);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        )
    }

    /// Training-mode batch normalization over axis 1 of an `[N, C, ...]` input.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> (Var<T>, BatchNormStats<T>) {
        let shape = self.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = n * inner;
        let cnt = T::lit(count as f64);
        let eps = T::lit(eps);
        let x = self.value().data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * inner;
                s += x[off..off + inner].iter().copied().sum::<T>();
            }
            let m = s / cnt;
            let mut v = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * inner;
                v += x[off..off + inner].iter().map(|&t| (t - m) * (t - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = v / cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&shape);
        {
            let xh = xhat.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        xh[i] = (x[i] - mean[ch]) * inv_std[ch];
                    }
                }
            }
        }
        let y = affine_channels(&xhat, gamma.value().data(), beta.value().data(), n, c, inner);
        let unbiased = if count > 1 {
            var.iter().map(|&v| v * cnt / T::lit((count - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let stats = BatchNormStats { mean, var: unbiased };
        let out = Var::from_op(
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, inputs, _| {
                let gm = inputs[1].value().data();
                let gd = g.data();
                let xh = xhat.data();
                let mut gx = Tensor::zeros(&shape);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            sum_g += gd[i];
                            sum_gx += gd[i] * xh[i];
                        }
                    }
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let k = gm[ch] * inv_std[ch];
                    let out = gx.data_mut();
                    for b in 0..n {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            out[i] = k * (gd[i] - sum_g / cnt - xh[i] * sum_gx / cnt);
                        }
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::from_vec(&[c], ggamma)),
                    Some(Tensor::from_vec(&[c], gbeta)),
                ]
            }),
        );
        (out, stats)
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Var<T> {
        let shape = self.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let inv_std: Vec<T> =
            running_var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let mean = running_mean.to_vec();
        let mut xhat = self.value().clone();
        for (blk, chunk) in xhat.data_mut().chunks_mut(inner).enumerate() {
            let ch = blk % c;
            chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
        let y = affine_channels(&xhat, gamma.value().data(), beta.value().data(), n, c, inner);
        Var::from_op(
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, inputs, _| {
                let gm = inputs[1].value().data();
                let mut gx = g.clone();
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for (blk, (gchunk, xchunk)) in
                    gx.data_mut().chunks_mut(inner).zip(xhat.data().chunks(inner)).enumerate()
                {
                    let ch = blk % c;
                    for (gv, &xv) in gchunk.iter_mut().zip(xchunk) {
                        ggamma[ch] += *gv * xv;
                        gbeta[ch] += *gv;
                        *gv *= gm[ch] * inv_std[ch];
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::from_vec(&[c], ggamma)),
                    Some(Tensor::from_vec(&[c], gbeta)),
                ]
            }),
        )
    }

    /// 2×2 max pooling with stride 2 over the last two axes (ceil mode).
    pub fn max_pool2x(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let planes: usize = shape[..nd - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = ho;
        out_shape[nd - 1] = wo;
        let mut y = Tensor::zeros(&out_shape);
        let mut arg = vec![0usize; y.numel()];
        let x = self.value().data();
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (r, c) = (2 * i + di, 2 * j + dj);
                            if r < h && c < w && src[r * w + c] > best {
                                best = src[r * w + c];
                                best_idx = r * w + c;
                            }
                        }
                    }
                    let o = p * ho * wo + i * wo + j;
                    y.data_mut()[o] = best;
                    arg[o] = p * h * w + best_idx;
                }
            }
        }
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for (o, &src) in arg.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[o];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbour ×2 upsampling over the last two axes.
    pub fn upsample2x(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let planes: usize = shape[..nd - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = 2 * h;
        out_shape[nd - 1] = 2 * w;
        let mut y = Tensor::zeros(&out_shape);
        let x = self.value().data();
        for p in 0..planes {
            for r in 0..2 * h {
                for c in 0..2 * w {
                    y.data_mut()[p * 4 * h * w + r * 2 * w + c] = x[p * h * w + (r / 2) * w + c / 2];
                }
            }
        }
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for p in 0..planes {
                    for r in 0..2 * h {
                        for c in 0..2 * w {
                            gx.data_mut()[p * h * w + (r / 2) * w + c / 2] +=
                                g.data()[p * 4 * h * w + r * 2 * w + c];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(vars: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!vars.is_empty(), "concat of nothing");
        let base = vars[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let extents: Vec<usize> = vars
            .iter()
            .map(|v| {
                let s = v.shape();
                assert!(
                    s.len() == base.len()
                        && s[..axis] == base[..axis]
                        && s[axis + 1..] == base[axis + 1..],
                    "concat shape mismatch {s:?} vs {base:?}"
                );
                s[axis]
            })
            .collect();
        let total: usize = extents.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in vars.iter().zip(&extents) {
                let blk = e * inner;
                data.extend_from_slice(&v.value().data()[o * blk..(o + 1) * blk]);
            }
        }
        Var::from_op(
            Tensor::from_vec(&out_shape, data),
            vars.to_vec(),
            Box::new(move |g, inputs, _| {
                let mut grads: Vec<Vec<T>> =
                    extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let gd = g.data();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gv, &e) in grads.iter_mut().zip(&extents) {
                        gv.extend_from_slice(&gd[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inputs)
                    .map(|(gv, inp)| Some(Tensor::from_vec(inp.shape(), gv)))
                    .collect()
            }),
        )
    }

    /// Picks index `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(index < shape[axis], "select index {index} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let off = (o * extent + index) * inner;
            data.extend_from_slice(&self.value().data()[off..off + inner]);
        }
        Var::from_op(
            Tensor::from_vec(&out_shape, data),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let off = (o * extent + index) * inner;
                    gx.data_mut()[off..off + inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Prepends a learned `[D]` token to every `[N, L, D]` sequence.
    pub fn prepend_token(&self, token: &Var<T>) -> Var<T> {
        let shape = self.shape().to_vec();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(token.shape(), [d], "token width mismatch");
        let mut data = Vec::with_capacity(n * (l + 1) * d);
        for b in 0..n {
            data.extend_from_slice(token.value().data());
            data.extend_from_slice(&self.value().data()[b * l * d..(b + 1) * l * d]);
        }
        Var::from_op(
            Tensor::from_vec(&[n, l + 1, d], data),
            vec![self.clone(), token.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(n * l * d);
                let mut gt = vec![T::zero(); d];
                for b in 0..n {
                    let row = &g.data()[b * (l + 1) * d..(b + 1) * (l + 1) * d];
                    gt.iter_mut().zip(&row[..d]).for_each(|(a, &v)| *a += v);
                    gx.extend_from_slice(&row[d..]);
                }
                vec![Some(Tensor::from_vec(&[n, l, d], gx)), Some(Tensor::from_vec(&[d], gt))]
            }),
        )
    }

    /// Spatial global average of `[N, C, T, H, W]`, returned as a `[N, T, C]` sequence.
    pub fn spatial_mean_seq(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 5, "spatial_mean_seq expects a 5-D input");
        let (n, c, t) = (shape[0], shape[1], shape[2]);
        let hw = shape[3] * shape[4];
        let inv = T::one() / T::lit(hw as f64);
        let x = self.value().data();
        let mut y = Tensor::zeros(&[n, t, c]);
        for b in 0..n {
            for ch in 0..c {
                for s in 0..t {
                    let off = ((b * c + ch) * t + s) * hw;
                    y.data_mut()[(b * t + s) * c + ch] =
                        x[off..off + hw].iter().copied().sum::<T>() * inv;
                }
            }
        }
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for b in 0..n {
                    for ch in 0..c {
                        for s in 0..t {
                            let v = g.data()[(b * t + s) * c + ch] * inv;
                            let off = ((b * c + ch) * t + s) * hw;
                            gx.data_mut()[off..off + hw].iter_mut().for_each(|e| *e = v);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().numel();
        let inv = T::one() / T::lit(n as f64);
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::scalar(self.value().sum() * inv),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item() * inv))]),
        )
    }

    /// Mean binary cross-entropy of logits against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&self, targets: &[T]) -> Var<T> {
        let z = self.value().data();
        assert_eq!(z.len(), targets.len(), "bce: logits/targets length mismatch");
        let n = T::lit(z.len() as f64);
        let loss: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let targets = targets.to_vec();
        Var::from_op(
            Tensor::scalar(loss),
            vec![self.clone()],
            Box::new(move |g, inputs, _| {
                let scale = g.item() / n;
                let z = inputs[0].value();
                let mut gz = z.clone();
                gz.data_mut()
                    .iter_mut()
                    .zip(&targets)
                    .for_each(|(v, &y)| *v = (sigmoid(*v) - y) * scale);
                vec![Some(gz)]
            }),
        )
    }

    /// Weighted-mean softmax cross-entropy of `[N, C]` logits.
    pub fn cross_entropy(&self, targets: &[usize], class_weights: Option<&[T]>) -> Var<T> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "cross_entropy expects [N, C] logits");
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(n, targets.len(), "cross_entropy: batch/targets mismatch");
        let weights: Vec<T> = match class_weights {
            Some(w) => {
                assert_eq!(w.len(), c, "one weight per class");
                targets.iter().map(|&t| w[t]).collect()
            }
            None => vec![T::one(); n],
        };
        let total_w: T = weights.iter().copied().sum();
        let mut probs = self.value().clone();
        let mut loss = T::zero();
        for (i, row) in probs.data_mut().chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += weights[i] * (lse - row[targets[i]]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let targets = targets.to_vec();
        Var::from_op(
            Tensor::scalar(loss / total_w),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let scale = g.item() / total_w;
                let mut gz = probs.clone();
                for (i, row) in gz.data_mut().chunks_mut(c).enumerate() {
                    row[targets[i]] -= T::one();
                    row.iter_mut().for_each(|v| *v *= weights[i] * scale);
                }
                vec![Some(gz)]
            }),
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Var<T> {
        if p <= 0.0 {
            return self.clone();
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value().numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut y = self.value().clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                vec![Some(gx)]
            }),
        )
    }
}

fn suffix_split(shape: &[usize], suffix: &[usize]) -> (usize, usize) {
    assert!(
        suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix,
        "cannot broadcast {suffix:?} onto {shape:?}"
    );
    let inner: usize = suffix.iter().product();
    (shape.iter().product::<usize>() / inner.max(1), inner)
}

fn affine_channels<T: Scalar>(
    xhat: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    inner: usize,
) -> Tensor<T> {
    let mut y = xhat.clone();
    debug_assert_eq!(y.numel(), n * c * inner);
    for (blk, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
        let ch = blk % c;
        chunk.iter_mut().for_each(|v| *v = *v * gamma[ch] + beta[ch]);
    }
    y
}
