//! Pooling, transposed-convolution upsampling, and elementwise operators.

use super::gemm::{gemm, MatMut, MatRef};
use super::{Real, Result, Tensor, TensorError};

/// 2×2 stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input index of the first (row-major) maximum.
pub(crate) fn max_pool2_with_argmax<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = input.dims4("max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddSpatial { height: h, width: w });
    }
    input.ensure_finite("max_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let top = base + 2 * y * w + 2 * xo;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out, "max_pool2")?, argmax))
}

/// 2×2 stride-2 max pooling.
pub fn max_pool2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    max_pool2_with_argmax(input).map(|(t, _)| t)
}

pub(crate) fn max_pool2_backward<T: Real>(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let mut gx = vec![0.0f64; input_shape.iter().product()];
    for (&idx, g) in argmax.iter().zip(grad_out.data()) {
        gx[idx as usize] += g.to_f64();
    }
    Tensor::from_parts(input_shape.to_vec(), gx.into_iter().map(T::from_f64).collect(), "max_pool2 backward")
}

fn check_upsample<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<[usize; 5]> {
    const OP: &str = "upsample2";
    let [n, cin, h, w] = input.dims4(OP)?;
    let [wc, cout, k1, k2] = weights.dims4(OP)?;
    if wc != cin || k1 != 2 || k2 != 2 {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("weights {:?} do not fit a {cin}-channel input (want Cin×Cout×2×2)", weights.shape()),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("bias {:?}, expected [{cout}]", b.shape()),
            });
        }
    }
    Ok([n, cin, cout, h, w])
}

/// 2×2 stride-2 transposed convolution: every input pixel paints a 2×2
/// output block. `weights` is `Cin×Cout×2×2`.
///
/// `out[b,o,2y+u,2x+v] = bias[o] + Σ_c in[b,c,y,x] · w[c,o,u,v]`
pub fn upsample2<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, cin, cout, h, w] = check_upsample(input, weights, bias)?;
    input.ensure_finite("upsample2")?;
    let p = h * w;
    let wf = weights.to_f64_vec();
    let bf = bias.map(|b| b.to_f64_vec());
    let mut out = vec![T::ZERO; n * cout * 4 * p];
    let mut xf = vec![0.0; cin * p];
    let mut z = vec![0.0; cout * 4 * p];
    for b in 0..n {
        let src = &input.data()[b * cin * p..(b + 1) * cin * p];
        xf.iter_mut().zip(src).for_each(|(d, s)| *d = s.to_f64());
        // z[(o,u,v), pix] = Σ_c w[c,(o,u,v)] · x[c, pix]
        gemm(
            MatRef::row_major(&wf, cin, cout * 4).t(),
            MatRef::row_major(&xf, cin, p),
            0.0,
            MatMut::row_major(&mut z, cout * 4, p),
        );
        let dst = &mut out[b * cout * 4 * p..(b + 1) * cout * 4 * p];
        for o in 0..cout {
            let bias_o = bf.as_ref().map_or(0.0, |bf| bf[o]);
            for u in 0..2 {
                for v in 0..2 {
                    let zrow = &z[((o * 2 + u) * 2 + v) * p..][..p];
                    for y in 0..h {
                        let orow = &mut dst[(o * 2 * h + 2 * y + u) * 2 * w..][..2 * w];
                        for x in 0..w {
                            orow[2 * x + v] = T::from_f64(zrow[y * w + x] + bias_o);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, cout, 2 * h, 2 * w], out, "upsample2")
}

pub(crate) struct UpsampleGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn upsample2_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<UpsampleGrads<T>> {
    let [n, cin, cout, h, w] = check_upsample(input, weights, None)?;
    if grad_out.shape() != [n, cout, 2 * h, 2 * w] {
        return Err(TensorError::ShapeMismatch {
            op: "upsample2 backward",
            detail: format!("upstream gradient {:?}", grad_out.shape()),
        });
    }
    let p = h * w;
    let wf = weights.to_f64_vec();
    let mut gw = vec![0.0; cin * cout * 4];
    let mut gb = vec![0.0; cout];
    let mut gx_all = Vec::with_capacity(if want_input { n * cin * p } else { 0 });
    let mut xf = vec![0.0; cin * p];
    let mut gz = vec![0.0; cout * 4 * p];
    let mut gxf = vec![0.0; cin * p];
    for b in 0..n {
        let src = &input.data()[b * cin * p..(b + 1) * cin * p];
        xf.iter_mut().zip(src).for_each(|(d, s)| *d = s.to_f64());
        let gsrc = &grad_out.data()[b * cout * 4 * p..(b + 1) * cout * 4 * p];
        for o in 0..cout {
            for u in 0..2 {
                for v in 0..2 {
                    let zrow = &mut gz[((o * 2 + u) * 2 + v) * p..][..p];
                    for y in 0..h {
                        let grow = &gsrc[(o * 2 * h + 2 * y + u) * 2 * w..][..2 * w];
                        for x in 0..w {
                            zrow[y * w + x] = grow[2 * x + v].to_f64();
                        }
                    }
                }
            }
            gb[o] += gz[o * 4 * p..(o + 1) * 4 * p].iter().sum::<f64>();
        }
        // gW[c, j] += Σ_p x[c,p] · gz[j,p]
        gemm(
            MatRef::row_major(&xf, cin, p),
            MatRef::row_major(&gz, cout * 4, p).t(),
            1.0,
            MatMut::row_major(&mut gw, cin, cout * 4),
        );
        if want_input {
            gemm(
                MatRef::row_major(&wf, cin, cout * 4),
                MatRef::row_major(&gz, cout * 4, p),
                0.0,
                MatMut::row_major(&mut gxf, cin, p),
            );
            gx_all.extend(gxf.iter().map(|&v| T::from_f64(v)));
        }
    }
    Ok(UpsampleGrads {
        input: if want_input {
            Some(Tensor::from_parts(input.shape().to_vec(), gx_all, "upsample2 backward")?)
        } else {
            None
        },
        weights: Tensor::from_parts(weights.shape().to_vec(), gw.into_iter().map(T::from_f64).collect(), "upsample2 backward")?,
        bias: Tensor::from_parts(vec![cout], gb.into_iter().map(T::from_f64).collect(), "upsample2 backward")?,
    })
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Subgradient of ReLU taken as 0 at the kink.
pub(crate) fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

/// Elementwise sum of two equally shaped tensors.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64()))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data, "add")
}

pub(crate) fn scale<T: Real>(x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|v| T::from_f64(v.to_f64() * factor)).collect();
    Tensor::from_parts(x.shape().to_vec(), data, "scale")
}

/// Concatenates a tensor with itself along the channel axis:
/// `N×C×H×W → N×2C×H×W`, both halves equal to the input.
pub fn dup_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("dup_channels")?;
    let block = c * h * w;
    let mut data = Vec::with_capacity(2 * x.len());
    for b in 0..n {
        let src = &x.data()[b * block..(b + 1) * block];
        data.extend_from_slice(src);
        data.extend_from_slice(src);
    }
    Ok(Tensor {
        shape: vec![n, 2 * c, h, w],
        data,
    })
}

pub(crate) fn dup_channels_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let block: usize = input_shape[1..].iter().product();
    let g = grad_out.data();
    let mut data = Vec::with_capacity(input_shape.iter().product());
    for b in 0..input_shape[0] {
        let base = 2 * b * block;
        data.extend((0..block).map(|i| T::from_f64(g[base + i].to_f64() + g[base + block + i].to_f64())));
    }
    Tensor {
        shape: input_shape.to_vec(),
        data,
    }
}

/// Mean of squared differences, accumulated in `f64`.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape("mse", pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p.to_f64() - t.to_f64();
            d * d
        })
        .sum();
    let value = sum / pred.len() as f64;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TensorError::NonFinite { op: "mse" })
    }
}

/// `∂/∂pred` of the mean squared error, scaled by `upstream`.
pub(crate) fn mse_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, upstream: f64) -> Result<Tensor<T>> {
    let k = 2.0 * upstream / pred.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| T::from_f64(k * (p.to_f64() - t.to_f64())))
        .collect();
    Tensor::from_parts(pred.shape().to_vec(), data, "mse backward")
}
