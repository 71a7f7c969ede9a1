use super::autograd::Var;
use super::{Scalar, Tensor};

/// Kernel, stride and zero padding of a 3-D convolution, ordered `[t, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { kernel, stride, pad }
    }

    /// Plain 2-D convolution on `[N, C, 1, H, W]` inputs.
    pub fn spatial(k: usize, stride: usize, pad: usize) -> Self {
        Self::new([1, k, k], [1, stride, stride], [0, pad, pad])
    }

    /// Output extents for an input of `[t, h, w]`, or `None` when any axis collapses.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn is_identity_layout(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

struct Dims {
    c: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Dims {
    fn in_len(&self) -> usize {
        self.c * self.input.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn col_rows(&self, g: &ConvGeom) -> usize {
        self.c * g.kernel.iter().product::<usize>()
    }
}

/// Range of output indices `o` with `0 <= o*stride + offset - pad < extent`.
fn valid_range(out: usize, stride: usize, offset: usize, pad: usize, extent: usize) -> (usize, usize) {
    // Smallest o with o*stride + offset >= pad.
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // Largest o with o*stride + offset - pad <= extent - 1.
    let hi = if extent + pad > offset {
        ((extent - 1 + pad - offset) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], d: &Dims, g: &ConvGeom, col: &mut [T]) {
    let [ti, hi, wi] = d.input;
    let [to, ho, wo] = d.output;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let p = d.positions();
    let mut row = 0;
    for c in 0..d.c {
        let plane = &x[c * ti * hi * wi..(c + 1) * ti * hi * wi];
        for dt in 0..kt {
            let (t_lo, t_hi) = valid_range(to, st, dt, pt, ti);
            for dh in 0..kh {
                let (h_lo, h_hi) = valid_range(ho, sh, dh, ph, hi);
                for dw in 0..kw {
                    let (w_lo, w_hi) = valid_range(wo, sw, dw, pw, wi);
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.iter_mut().for_each(|v| *v = T::zero());
                    for ot in t_lo..t_hi {
                        let it = ot * st + dt - pt;
                        for oh in h_lo..h_hi {
                            let ih = oh * sh + dh - ph;
                            let src_row = &plane[(it * hi + ih) * wi..(it * hi + ih + 1) * wi];
                            let out_row = &mut dst[(ot * ho + oh) * wo..(ot * ho + oh + 1) * wo];
                            if sw == 1 {
                                let start = w_lo + dw - pw;
                                out_row[w_lo..w_hi].copy_from_slice(&src_row[start..start + (w_hi - w_lo)]);
                            } else {
                                for ow in w_lo..w_hi {
                                    out_row[ow] = src_row[ow * sw + dw - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &Dims, g: &ConvGeom, dx: &mut [T]) {
    let [ti, hi, wi] = d.input;
    let [to, ho, wo] = d.output;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let p = d.positions();
    let mut row = 0;
    for c in 0..d.c {
        let plane = &mut dx[c * ti * hi * wi..(c + 1) * ti * hi * wi];
        for dt in 0..kt {
            let (t_lo, t_hi) = valid_range(to, st, dt, pt, ti);
            for dh in 0..kh {
                let (h_lo, h_hi) = valid_range(ho, sh, dh, ph, hi);
                for dw in 0..kw {
                    let (w_lo, w_hi) = valid_range(wo, sw, dw, pw, wi);
                    let src = &col[row * p..(row + 1) * p];
                    for ot in t_lo..t_hi {
                        let it = ot * st + dt - pt;
                        for oh in h_lo..h_hi {
                            let ih = oh * sh + dh - ph;
                            let dst_row = &mut plane[(it * hi + ih) * wi..(it * hi + ih + 1) * wi];
                            let in_row = &src[(ot * ho + oh) * wo..(ot * ho + oh + 1) * wo];
                            for ow in w_lo..w_hi {
                                dst_row[ow * sw + dw - pw] += in_row[ow];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    /// 3-D convolution of `[N, C, T, H, W]` with weights `[O, C, kt, kh, kw]`.
    pub fn conv3d(&self, weight: &Var<T>, bias: Option<&Var<T>>, geom: ConvGeom) -> Var<T> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be [N, C, T, H, W], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be [O, C, kt, kh, kw], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch: input {xs:?}, weight {ws:?}");
        assert_eq!(ws[2..], geom.kernel, "weight extents disagree with geometry");
        let n = xs[0];
        let o = ws[0];
        let input = [xs[2], xs[3], xs[4]];
        let output = geom
            .output_dims(input)
            .unwrap_or_else(|| panic!("conv3d collapses input {input:?} with {geom:?}"));
        let dims = Dims { c: xs[1], input, output };
        let p = dims.positions();
        let rows = dims.col_rows(&geom);
        let in_len = dims.in_len();
        let direct = geom.is_identity_layout();

        let mut y = Tensor::zeros(&[n, o, output[0], output[1], output[2]]);
        let mut col = if direct { Vec::new() } else { vec![T::zero(); rows * p] };
        let x = self.value().data();
        let w = weight.value().data();
        for b in 0..n {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let colb: &[T] = if direct {
                xb
            } else {
                im2col(xb, &dims, &geom, &mut col);
                &col
            };
            let yb = &mut y.data_mut()[b * o * p..(b + 1) * o * p];
            T::gemm(o, rows, p, w, false, colb, false, yb, false);
            if let Some(bias) = bias {
                for (ch, &bv) in bias.value().data().iter().enumerate() {
                    yb[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            inputs.push(bias.clone());
        }
        Var::from_op(
            y,
            inputs,
            Box::new(move |g, inputs, _| {
                let x = inputs[0].value().data();
                let w = inputs[1].value().data();
                let need_x = inputs[0].requires_grad();
                let need_w = inputs[1].requires_grad();
                let mut gx = Tensor::zeros(inputs[0].shape());
                let mut gw = Tensor::zeros(inputs[1].shape());
                let mut col = if direct { Vec::new() } else { vec![T::zero(); rows * p] };
                let mut dcol = vec![T::zero(); rows * p];
                for b in 0..n {
                    let gb = &g.data()[b * o * p..(b + 1) * o * p];
                    if need_w {
                        let xb = &x[b * in_len..(b + 1) * in_len];
                        let colb: &[T] = if direct {
                            xb
                        } else {
                            im2col(xb, &dims, &geom, &mut col);
                            &col
                        };
                        T::gemm(o, p, rows, gb, false, colb, true, gw.data_mut(), true);
                    }
                    if need_x {
                        let gxb = &mut gx.data_mut()[b * in_len..(b + 1) * in_len];
                        if direct {
                            T::gemm(rows, o, p, w, true, gb, false, gxb, true);
                        } else {
                            T::gemm(rows, o, p, w, true, gb, false, &mut dcol, false);
                            col2im(&dcol, &dims, &geom, gxb);
                        }
                    }
                }
                let mut out = vec![Some(gx), Some(gw)];
                if inputs.len() == 3 {
                    let mut gbias = vec![T::zero(); o];
                    for b in 0..n {
                        for (ch, acc) in gbias.iter_mut().enumerate() {
                            let off = (b * o + ch) * p;
                            *acc += g.data()[off..off + p].iter().copied().sum::<T>();
                        }
                    }
                    out.push(Some(Tensor::from_vec(&[o], gbias)));
                }
                out
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let out = g.output_dims([xs[2], xs[3], xs[4]]).unwrap();
        let mut y = Tensor::zeros(&[xs[0], ws[0], out[0], out[1], out[2]]);
        let idx5 = |s: &[usize], i: [usize; 5]| {
            (((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]
        };
        let ys = y.shape().to_vec();
        for b in 0..xs[0] {
            for o in 0..ws[0] {
                for t in 0..out[0] {
                    for h in 0..out[1] {
                        for wv in 0..out[2] {
                            let mut acc = 0.0;
                            for c in 0..xs[1] {
                                for dt in 0..ws[2] {
                                    for dh in 0..ws[3] {
                                        for dw in 0..ws[4] {
                                            let it = (t * g.stride[0] + dt) as isize - g.pad[0] as isize;
                                            let ih = (h * g.stride[1] + dh) as isize - g.pad[1] as isize;
                                            let iw = (wv * g.stride[2] + dw) as isize - g.pad[2] as isize;
                                            if it < 0 || ih < 0 || iw < 0 {
                                                continue;
                                            }
                                            let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                            if it >= xs[2] || ih >= xs[3] || iw >= xs[4] {
                                                continue;
                                            }
                                            acc += x.data()[idx5(xs, [b, c, it, ih, iw])]
                                                * w.data()[idx5(ws, [o, c, dt, dh, dw])];
                                        }
                                    }
                                }
                            }
                            y.data_mut()[idx5(&ys, [b, o, t, h, wv])] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale).collect())
    }

    #[test]
    fn matches_naive_reference_across_geometries() {
        let cases = [
            ConvGeom::new([1, 3, 3], [1, 1, 1], [0, 1, 1]),
            ConvGeom::new([3, 1, 1], [2, 1, 1], [1, 0, 0]),
            ConvGeom::new([1, 1, 1], [2, 2, 2], [0, 0, 0]),
            ConvGeom::new([1, 7, 7], [1, 2, 2], [0, 3, 3]),
            ConvGeom::new([3, 3, 3], [1, 2, 1], [1, 1, 0]),
        ];
        for g in cases {
            let x = ramp(&[2, 3, 5, 9, 8], 1.0);
            let w = ramp(&[4, 3, g.kernel[0], g.kernel[1], g.kernel[2]], 0.3);
            let got = Var::constant(x.clone()).conv3d(&Var::constant(w.clone()), None, g);
            let want = naive_conv(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn output_dims_detects_collapse() {
        let g = ConvGeom::new([3, 3, 3], [2, 2, 2], [0, 0, 0]);
        assert_eq!(g.output_dims([2, 8, 8]), None);
        assert_eq!(g.output_dims([3, 8, 8]), Some([1, 3, 3]));
    }
}
