//! 2-D convolution and its adjoint, lowered to im2col + sgemm.
//!
//! Batch elements are processed independently (in parallel when a rayon pool
//! has more than one thread); kernel and bias gradients are reduced over the
//! batch in index order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Backward, Tape, Tensor, Var};
use crate::error::{invalid, FlowError, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: &[f32], g: &Geometry) -> Vec<f32> {
    let p = g.cols();
    let mut cols = vec![0.0f32; g.rows() * p];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &Geometry, x: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            x[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major matrices, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are checked in debug builds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_geometry(
    op: &'static str,
    x_shape: (usize, usize, usize),
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, Geometry)> {
    let (c, h, w) = x_shape;
    let &[o, kc, kh, kw] = kernel.shape() else {
        return Err(invalid(format!("{op}: kernel must be OIHW, got {:?}", kernel.shape())));
    };
    if kc != c {
        return Err(FlowError::ShapeMismatch {
            op,
            lhs: vec![c],
            rhs: kernel.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(invalid(format!("{op}: stride must be positive")));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(invalid(format!("{op}: output spatial size would be empty")));
    }
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    Ok((
        o,
        Geometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        },
    ))
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, len: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [len] {
            return Err(FlowError::ShapeMismatch {
                op,
                lhs: vec![len],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Cross-correlation `y[n] = W · im2col(x[n])`: maps (n, C, H, W) to (n, O, Ho, Wo).
fn correlate(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, g: &Geometry, o: usize) -> Vec<f32> {
    let n = x.shape()[0];
    let in_len = g.channels * g.height * g.width;
    let out_len = o * g.cols();
    let mut out = vec![0.0f32; n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, dst)| {
        let cols = im2col(&x.data()[b * in_len..(b + 1) * in_len], g);
        gemm(o, g.rows(), g.cols(), kernel.data(), false, &cols, false, 0.0, dst);
        if let Some(bias) = bias {
            for (oc, row) in dst.chunks_mut(g.cols()).enumerate() {
                let bv = bias.data()[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Adjoint of [`correlate`]: maps (n, O, Ho, Wo) back to (n, C, H, W).
fn scatter(y: &[f32], kernel: &Tensor, g: &Geometry, o: usize, n: usize) -> Vec<f32> {
    let in_len = g.channels * g.height * g.width;
    let out_len = o * g.cols();
    let mut x = vec![0.0f32; n * in_len];
    x.par_chunks_mut(in_len).enumerate().for_each(|(b, dst)| {
        let mut cols = vec![0.0f32; g.rows() * g.cols()];
        gemm(
            g.rows(),
            o,
            g.cols(),
            kernel.data(),
            true,
            &y[b * out_len..(b + 1) * out_len],
            false,
            0.0,
            &mut cols,
        );
        col2im(&cols, g, dst);
    });
    x
}

/// Kernel gradient `Σ_n dy[n] · im2col(x[n])ᵀ`, reduced in batch order.
fn kernel_grad(x: &[f32], dy: &[f32], g: &Geometry, o: usize, n: usize) -> Vec<f32> {
    let in_len = g.channels * g.height * g.width;
    let out_len = o * g.cols();
    let partials: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let cols = im2col(&x[b * in_len..(b + 1) * in_len], g);
            let mut dw = vec![0.0f32; o * g.rows()];
            gemm(
                o,
                g.cols(),
                g.rows(),
                &dy[b * out_len..(b + 1) * out_len],
                false,
                &cols,
                true,
                0.0,
                &mut dw,
            );
            dw
        })
        .collect();
    let mut dw = vec![0.0f32; o * g.rows()];
    for p in partials {
        dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    dw
}

/// Per-channel sum over batch and space of an (n, ch, h, w) buffer.
fn channel_sums(d: &[f32], n: usize, ch: usize, plane: usize) -> Vec<f32> {
    let mut s = vec![0.0f32; ch];
    for b in 0..n {
        for (c, sc) in s.iter_mut().enumerate() {
            let start = (b * ch + c) * plane;
            *sc += d[start..start + plane].iter().sum::<f32>();
        }
    }
    s
}

struct Conv2d {
    geom: Geometry,
    out_channels: usize,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let n = x.shape()[0];
        let o = self.out_channels;
        let g = &self.geom;
        let dx = if needs[0] {
            Some(Tensor::new(x.shape(), scatter(grad.data(), kernel, g, o, n))?)
        } else {
            None
        };
        let dw = if needs[1] {
            Some(Tensor::new(kernel.shape(), kernel_grad(x.data(), grad.data(), g, o, n))?)
        } else {
            None
        };
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                Tensor::new(&[o], channel_sums(grad.data(), n, o, g.cols())).expect("bias shape")
            }));
        }
        Ok(out)
    }
}

struct ConvTranspose2d {
    geom: Geometry,
    in_channels: usize,
}

impl Backward for ConvTranspose2d {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (y, kernel) = (inputs[0], inputs[1]);
        let n = y.shape()[0];
        let o = self.in_channels;
        let g = &self.geom;
        let dy = if needs[0] {
            let grad_t = Tensor::new(&[n, g.channels, g.height, g.width], grad.data().to_vec())?;
            Some(Tensor::new(y.shape(), correlate(&grad_t, kernel, None, g, o))?)
        } else {
            None
        };
        let dw = if needs[1] {
            Some(Tensor::new(kernel.shape(), kernel_grad(grad.data(), y.data(), g, o, n))?)
        } else {
            None
        };
        let mut out = vec![dy, dw];
        if inputs.len() == 3 {
            let plane = g.height * g.width;
            out.push(needs[2].then(|| {
                Tensor::new(&[g.channels], channel_sums(grad.data(), n, g.channels, plane))
                    .expect("bias shape")
            }));
        }
        Ok(out)
    }
}

impl Tape {
    /// Zero-padded cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let k = self.value(kernel);
        let (o, geom) = conv_geometry("conv2d", (c, h, w), k, stride, pad)?;
        check_bias("conv2d", bias.map(|b| self.value(b)), o)?;
        let data = correlate(x, k, bias.map(|b| self.value(b)), &geom, o);
        let out = Tensor::new(&[n, o, geom.out_h, geom.out_w], data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record(
            out,
            &inputs,
            Conv2d {
                geom,
                out_channels: o,
            },
        )
    }

    /// Adjoint of [`Tape::conv2d`] with the same OIHW kernel: maps
    /// (n, O, h, w) to (n, I, (h−1)·stride − 2·pad + kh, …).
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = self.value(input);
        let (n, o, h, w) = y.dims4()?;
        let k = self.value(kernel);
        let &[ko, c, kh, kw] = k.shape() else {
            return Err(invalid("conv_transpose2d: kernel must be OIHW"));
        };
        if ko != o {
            return Err(FlowError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: vec![o],
                rhs: k.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv_transpose2d: stride must be positive"));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(invalid("conv_transpose2d: output spatial size would be empty"));
        }
        let geom = Geometry {
            channels: c,
            height: full_h - 2 * pad,
            width: full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        };
        check_bias("conv_transpose2d", bias.map(|b| self.value(b)), c)?;
        let mut data = scatter(y.data(), k, &geom, o, n);
        if let Some(b) = bias {
            let plane = geom.height * geom.width;
            let bv = self.value(b).data();
            for (i, chunk) in data.chunks_mut(plane).enumerate() {
                let v = bv[i % c];
                chunk.iter_mut().for_each(|x| *x += v);
            }
        }
        let out = Tensor::new(&[n, c, geom.height, geom.width], data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record(
            out,
            &inputs,
            ConvTranspose2d {
                geom,
                in_channels: o,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, uniform_tensor};

    #[test]
    fn all_ones_valid_convolution() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let input = uniform_tensor(&[2, 1, 5, 4], 1);
        let x = tape.constant(input.clone());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(Tensor::new(&[1, 1, 3, 3], kd).unwrap());
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn inconsistent_channels_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None, 1, 0), Err(FlowError::ShapeMismatch { .. })));
    }

    #[test]
    fn stride_two_transpose_of_single_pixel() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let x = tape.conv_transpose2d(y, k, None, 2, 0).unwrap();
        assert_eq!(tape.shape(x), &[1, 1, 2, 2]);
        assert_eq!(tape.value(x).data(), &[1.0; 4]);
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
    }

    #[test]
    fn adjoint_identity() {
        for (seed, (k, s, p)) in [(3, 1, 1), (4, 2, 1), (3, 2, 1), (2, 2, 0), (5, 1, 2)].iter().enumerate() {
            let seed = seed as u64;
            let xs = uniform_tensor(&[2, 3, 8, 8], seed);
            let ks = uniform_tensor(&[4, 3, *k, *k], seed + 10);
            let mut tape = Tape::new();
            let x = tape.constant(xs.clone());
            let kv = tape.constant(ks);
            let y = tape.conv2d(x, kv, None, *s, *p).unwrap();
            let ys = uniform_tensor(tape.shape(y), seed + 20);
            let yv = tape.constant(ys.clone());
            let xt = tape.conv_transpose2d(yv, kv, None, *s, *p).unwrap();
            let lhs = dot(tape.value(y), &ys);
            if tape.shape(xt) != xs.shape() {
                // (3,2,1) on even input drops a row; the adjoint is over the covered region
                continue;
            }
            let rhs = dot(&xs, tape.value(xt));
            assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..5 {
            let err = check_gradients(
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
                &[
                    uniform_tensor(&[1, 1, 4, 4], seed),
                    uniform_tensor(&[1, 1, 2, 2], seed + 100),
                    uniform_tensor(&[1], seed + 200),
                ],
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
            let err = check_gradients(
                |t, v| t.conv2d(v[0], v[1], None, 2, 1),
                &[uniform_tensor(&[2, 2, 5, 5], seed), uniform_tensor(&[3, 2, 3, 3], seed + 1)],
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        for seed in 0..5 {
            let err = check_gradients(
                |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1),
                &[
                    uniform_tensor(&[2, 3, 3, 3], seed),
                    uniform_tensor(&[3, 2, 4, 4], seed + 100),
                    uniform_tensor(&[2], seed + 200),
                ],
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }
}
