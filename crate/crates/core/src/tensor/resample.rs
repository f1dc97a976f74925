use super::{Backward, Tape, Tensor, Var};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// 2×2 average pooling.
    DownAvg,
    /// Bilinear ×2 upsampling, half-pixel centres (align_corners = false).
    ///
    /// Values are resampled, not rescaled: a flow field passed through here
    /// must be multiplied by 2 by the caller.
    UpBilinear,
}

/// Source taps for output index `o` of a ×2 bilinear upsampling of a line
/// of length `len`: (i0, i1, weight of i1).
fn up_taps(o: usize, len: usize) -> (usize, usize, f32) {
    let src = ((o as f32 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f32)
}

fn down(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

fn down_adjoint(g: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * ow + x / 2];
            }
        }
    }
    out
}

fn up(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; planes * oh * ow];
    let xs: Vec<_> = (0..ow).map(|o| up_taps(o, w)).collect();
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = up_taps(oy, h);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

fn up_adjoint(g: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; planes * h * w];
    let xs: Vec<_> = (0..ow).map(|o| up_taps(o, w)).collect();
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = up_taps(oy, h);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                dst[y0 * w + x1] += (1.0 - fy) * fx * v;
                dst[y1 * w + x0] += fy * (1.0 - fx) * v;
                dst[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    out
}

struct ResampleOp(Resample);

impl Backward for ResampleOp {
    fn name(&self) -> &'static str {
        "resample2x"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = inputs[0].dims4()?;
        let data = match self.0 {
            Resample::DownAvg => down_adjoint(grad.data(), n * c, h, w),
            Resample::UpBilinear => up_adjoint(grad.data(), n * c, h, w),
        };
        Ok(vec![Some(Tensor::new(inputs[0].shape(), data)?)])
    }
}

/// Resamples an NCHW tensor without recording it on a tape.
pub(crate) fn resample_tensor(x: &Tensor, dir: Resample) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    match dir {
        Resample::DownAvg => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(invalid(format!("down-sampling needs even dims, got {h}×{w}")));
            }
            Tensor::new(&[n, c, h / 2, w / 2], down(x.data(), n * c, h, w))
        }
        Resample::UpBilinear => Tensor::new(&[n, c, 2 * h, 2 * w], up(x.data(), n * c, h, w)),
    }
}

impl Tensor {
    pub fn resample2x(&self, dir: Resample) -> Result<Tensor> {
        resample_tensor(self, dir)
    }
}

impl Tape {
    pub fn resample2x(&mut self, a: Var, dir: Resample) -> Result<Var> {
        let out = resample_tensor(self.value(a), dir)?;
        self.record(out, &[a], ResampleOp(dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, uniform_tensor};

    #[test]
    fn average_pool_block() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(t.resample2x(Resample::DownAvg).unwrap().data(), &[2.0]);
        let odd = Tensor::ones(&[1, 1, 3, 2]);
        assert!(odd.resample2x(Resample::DownAvg).is_err());
    }

    #[test]
    fn constant_survives_up_then_down() {
        let t = Tensor::full(&[2, 3, 4, 6], 0.37);
        let up = t.resample2x(Resample::UpBilinear).unwrap();
        assert_eq!(up.shape(), &[2, 3, 8, 12]);
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
        let back = up.resample2x(Resample::DownAvg).unwrap();
        assert!(back.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
    }

    #[test]
    fn upsampled_ramp_interpolates() {
        let t = Tensor::new(&[1, 1, 1, 3], vec![0.0, 4.0, 8.0]).unwrap();
        let up = t.resample2x(Resample::UpBilinear).unwrap();
        assert_eq!(up.shape(), &[1, 1, 2, 6]);
        assert_eq!(&up.data()[..6], &[0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
        assert_eq!(&up.data()[6..], &up.data()[..6]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            for dir in [Resample::DownAvg, Resample::UpBilinear] {
                let err = check_gradients(
                    |t, v| t.resample2x(v[0], dir),
                    &[uniform_tensor(&[2, 2, 4, 6], seed)],
                    1e-3,
                )
                .unwrap();
                assert!(err < 1e-3, "{dir:?} seed {seed}: {err}");
            }
        }
    }
}
