//! Dilated 2-D convolution.
//!
//! `out[b,o,y,x] = bias[o] + Σ_{c,u,v} in[b, c, y·s − p + u·D, x·s − p + v·D] · w[o,c,u,v]`
//! with zero fill outside the input. Lowered to an im2col matrix that is
//! built in row chunks so the scratch buffer stays bounded.

use super::gemm::{gemm, MatMut, MatRef};
use super::{Real, Result, Tensor, TensorError};

/// Upper bound on im2col scratch entries per chunk.
const COL_BUDGET: usize = 1 << 20;

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution whose output keeps the input's spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        Self {
            kernel_size,
            dilation,
            stride: 1,
            padding: dilation * (kernel_size.saturating_sub(1)) / 2,
            in_channels,
            out_channels,
            has_bias: true,
        }
    }

    /// Number of input pixels spanned by one kernel along an axis.
    pub fn receptive_span(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilation
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TensorError::InvalidSpec(msg.to_string()));
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad("kernel size must be a positive odd integer");
        }
        if self.dilation == 0 || self.stride == 0 {
            return bad("dilation and stride must be positive");
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        Ok(())
    }

    /// `floor((in + 2p − D·(K−1) − 1)/s) + 1`, or `None` when the padded
    /// input is smaller than the receptive span.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        let span = self.receptive_span();
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Weights feeding one output value: `Cin·K·K`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn check_conv<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
) -> Result<ConvGeometry> {
    const OP: &str = "conv2d";
    spec.validate()?;
    let [n, c, h, w] = input.dims4(OP)?;
    if c != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("input has {c} channels, spec expects {}", spec.in_channels),
        });
    }
    if weights.shape() != spec.weight_shape() {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("weights {:?}, expected {:?}", weights.shape(), spec.weight_shape()),
        });
    }
    let (Some(oh), Some(ow)) = (spec.output_size(h), spec.output_size(w)) else {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("{h}x{w} input is smaller than the receptive span"),
        });
    };
    Ok(ConvGeometry { n, h, w, oh, ow })
}

pub(crate) fn check_bias<T: Real>(spec: &ConvSpec, bias: Option<&Tensor<T>>) -> Result<()> {
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => Ok(()),
        (None, false) => Ok(()),
        (b, _) => Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "bias {:?} does not agree with has_bias={} and {} outputs",
                b.map(|t| t.shape().to_vec()),
                spec.has_bias,
                spec.out_channels
            ),
        }),
    }
}

/// Forward dilated convolution.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = check_conv(input, spec, weights)?;
    check_bias(spec, bias)?;
    input.ensure_finite("conv2d")?;
    weights.ensure_finite("conv2d")?;

    let cout = spec.out_channels;
    let cin = spec.in_channels;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ckk = spec.patch_len();
    let wf = weights.to_f64_vec();
    let bf = bias.map(|b| b.to_f64_vec());
    let rows_per_chunk = (COL_BUDGET / (ckk * g.ow)).clamp(1, g.oh);

    let mut out = Vec::with_capacity(g.n * cout * plane_out);
    let mut xf = vec![0.0; cin * plane_in];
    let mut yf = vec![0.0; cout * plane_out];
    let mut col = vec![0.0; ckk * rows_per_chunk * g.ow];
    for b in 0..g.n {
        let src = &input.data()[b * cin * plane_in..(b + 1) * cin * plane_in];
        xf.iter_mut().zip(src).for_each(|(d, s)| *d = s.to_f64());
        for o in 0..cout {
            let v = bf.as_ref().map_or(0.0, |bf| bf[o]);
            yf[o * plane_out..(o + 1) * plane_out].fill(v);
        }
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + rows_per_chunk).min(g.oh);
            let p = (r1 - r0) * g.ow;
            im2col(&xf, spec, &g, r0, r1, &mut col[..ckk * p]);
            gemm(
                MatRef::row_major(&wf, cout, ckk),
                MatRef::row_major(&col[..ckk * p], ckk, p),
                1.0,
                MatMut {
                    data: &mut yf,
                    offset: r0 * g.ow,
                    rows: cout,
                    cols: p,
                    row_stride: plane_out,
                },
            );
            r0 = r1;
        }
        out.extend(yf.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::from_parts(vec![g.n, cout, g.oh, g.ow], out, "conv2d")
}

pub(crate) struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = check_conv(input, spec, weights)?;
    let cout = spec.out_channels;
    let cin = spec.in_channels;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    if grad_out.shape() != [g.n, cout, g.oh, g.ow] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d backward",
            detail: format!("upstream gradient {:?}", grad_out.shape()),
        });
    }
    let ckk = spec.patch_len();
    let wf = weights.to_f64_vec();
    let rows_per_chunk = (COL_BUDGET / (ckk * g.ow)).clamp(1, g.oh);

    let mut gw = vec![0.0; cout * ckk];
    let mut gb = vec![0.0; cout];
    let mut gx_all = if want_input { Vec::with_capacity(g.n * cin * plane_in) } else { Vec::new() };
    let mut xf = vec![0.0; cin * plane_in];
    let mut gyf = vec![0.0; cout * plane_out];
    let mut gxf = vec![0.0; if want_input { cin * plane_in } else { 0 }];
    let mut col = vec![0.0; ckk * rows_per_chunk * g.ow];
    for b in 0..g.n {
        let src = &input.data()[b * cin * plane_in..(b + 1) * cin * plane_in];
        xf.iter_mut().zip(src).for_each(|(d, s)| *d = s.to_f64());
        let gsrc = &grad_out.data()[b * cout * plane_out..(b + 1) * cout * plane_out];
        gyf.iter_mut().zip(gsrc).for_each(|(d, s)| *d = s.to_f64());
        for o in 0..cout {
            gb[o] += gyf[o * plane_out..(o + 1) * plane_out].iter().sum::<f64>();
        }
        gxf.fill(0.0);

        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + rows_per_chunk).min(g.oh);
            let p = (r1 - r0) * g.ow;
            let gy_chunk = MatRef {
                data: &gyf,
                offset: r0 * g.ow,
                rows: cout,
                cols: p,
                row_stride: plane_out,
                col_stride: 1,
            };
            im2col(&xf, spec, &g, r0, r1, &mut col[..ckk * p]);
            // gW += gY · colᵀ
            gemm(
                gy_chunk,
                MatRef::row_major(&col[..ckk * p], ckk, p).t(),
                1.0,
                MatMut::row_major(&mut gw, cout, ckk),
            );
            if want_input {
                // dcol = Wᵀ · gY, reusing the column buffer
                gemm(
                    MatRef::row_major(&wf, cout, ckk).t(),
                    gy_chunk,
                    0.0,
                    MatMut::row_major(&mut col[..ckk * p], ckk, p),
                );
                col2im(&col[..ckk * p], spec, &g, r0, r1, &mut gxf);
            }
            r0 = r1;
        }
        if want_input {
            gx_all.extend(gxf.iter().map(|&v| T::from_f64(v)));
        }
    }

    let weights_grad = Tensor::from_parts(
        spec.weight_shape().to_vec(),
        gw.into_iter().map(T::from_f64).collect(),
        "conv2d backward",
    )?;
    let bias_grad = if spec.has_bias {
        Some(Tensor::from_parts(
            vec![cout],
            gb.into_iter().map(T::from_f64).collect(),
            "conv2d backward",
        )?)
    } else {
        None
    };
    let input_grad = if want_input {
        Some(Tensor::from_parts(
            input.shape().to_vec(),
            gx_all,
            "conv2d backward",
        )?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        weights: weights_grad,
        bias: bias_grad,
    })
}

/// Valid output columns `[lo, hi)` for kernel column offset `off = v·D − p`.
#[inline]
fn valid_cols(spec: &ConvSpec, off: isize, w: usize, ow: usize) -> (usize, usize) {
    let s = spec.stride as isize;
    // need 0 <= x*s + off < w
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if (w as isize) - off <= 0 {
        0
    } else {
        (((w as isize) - off + s - 1) / s).min(ow as isize)
    };
    let lo = (lo as usize).min(ow);
    (lo, (hi.max(lo as isize)) as usize)
}

/// Fills `col` (`ckk × (r1−r0)·ow`, row-major) with input taps for output
/// rows `r0..r1` of a single batch item.
fn im2col(x: &[f64], spec: &ConvSpec, g: &ConvGeometry, r0: usize, r1: usize, col: &mut [f64]) {
    let k = spec.kernel_size;
    let d = spec.dilation as isize;
    let s = spec.stride;
    let pad = spec.padding as isize;
    let p = (r1 - r0) * g.ow;
    for c in 0..spec.in_channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let dst_row = &mut col[row * p..(row + 1) * p];
                let off = v as isize * d - pad;
                let (lo, hi) = valid_cols(spec, off, g.w, g.ow);
                for (ri, oy) in (r0..r1).enumerate() {
                    let dst = &mut dst_row[ri * g.ow..(ri + 1) * g.ow];
                    let iy = (oy * s) as isize + u as isize * d - pad;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if s == 1 {
                        let start = (lo as isize + off) as usize;
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, slot) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *slot = src[((ox * s) as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back onto the input gradient plane set.
fn col2im(col: &[f64], spec: &ConvSpec, g: &ConvGeometry, r0: usize, r1: usize, gx: &mut [f64]) {
    let k = spec.kernel_size;
    let d = spec.dilation as isize;
    let s = spec.stride;
    let pad = spec.padding as isize;
    let p = (r1 - r0) * g.ow;
    for c in 0..spec.in_channels {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let src_row = &col[row * p..(row + 1) * p];
                let off = v as isize * d - pad;
                let (lo, hi) = valid_cols(spec, off, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                for (ri, oy) in (r0..r1).enumerate() {
                    let iy = (oy * s) as isize + u as isize * d - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &src_row[ri * g.ow..(ri + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        let start = (lo as isize + off) as usize;
                        dst[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&src[lo..hi])
                            .for_each(|(a, b)| *a += b);
                    } else {
                        for ox in lo..hi {
                            dst[((ox * s) as isize + off) as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}
