//! Convolution and pooling kernels for the small image stem. Each batch row
//! holds one image flattened as `C×H×W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Same-padded, stride-1 convolution with an odd square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PoolGeometry {
    pub fn output_len(&self) -> usize {
        self.channels * (self.height / 2) * (self.width / 2)
    }
}

/// Unfolds one image into a `patch_len × (H·W)` column matrix.
fn im2col(img: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.height * g.width;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y + ki as isize - pad;
                    for x in 0..w {
                        let sx = x + kj as isize - pad;
                        dst[(y * w + x) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                            img[c * hw + (sy * w + sx) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.height * g.width;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y + ki as isize - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + kj as isize - pad;
                        if sx >= 0 && sx < w {
                            img[c * hw + (sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeometry) -> Result<()> {
    if g.kernel % 2 == 0 {
        return Err(Error::config("convolution kernel must be odd"));
    }
    if input.cols() != g.input_len() {
        return Err(Error::shape("conv2d input", input.shape(), &[input.rows(), g.input_len()]));
    }
    if weight.shape() != [g.out_channels, g.patch_len()] {
        return Err(Error::shape("conv2d weight", weight.shape(), &[g.out_channels, g.patch_len()]));
    }
    if bias.len() != g.out_channels {
        return Err(Error::shape("conv2d bias", bias.shape(), &[g.out_channels]));
    }
    Ok(())
}

pub(crate) fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    check_conv(input, weight, bias, g)?;
    let n = input.rows();
    let hw = g.height * g.width;
    let mut out = Tensor::zeros(&[n, g.output_len()]);
    let mut col = Tensor::zeros(&[g.patch_len(), hw]);
    for s in 0..n {
        im2col(input.row(s), g, col.data_mut());
        let y = weight.matmul(&col)?;
        let dst = out.row_mut(s);
        for (oc, b) in bias.data().iter().enumerate() {
            for (d, v) in dst[oc * hw..(oc + 1) * hw].iter_mut().zip(y.row(oc)) {
                *d = v + b;
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` only when requested.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    g: &ConvGeometry,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let n = input.rows();
    let hw = g.height * g.width;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![0.0; g.out_channels];
    let mut dx = want_input.then(|| Tensor::zeros(input.shape()));
    let mut col = Tensor::zeros(&[g.patch_len(), hw]);
    let wt = weight.transpose()?;
    for s in 0..n {
        let gy = Tensor::matrix(g.out_channels, hw, grad.row(s).to_vec())?;
        for (oc, d) in db.iter_mut().enumerate() {
            *d += gy.row(oc).iter().sum::<f64>();
        }
        im2col(input.row(s), g, col.data_mut());
        let dws = gy.matmul_nt(&col)?;
        dw.data_mut()
            .iter_mut()
            .zip(dws.data())
            .for_each(|(a, b)| *a += b);
        if let Some(dx) = dx.as_mut() {
            let dcol = wt.matmul(&gy)?;
            col2im(dcol.data(), g, dx.row_mut(s));
        }
    }
    Ok((dx, dw, Tensor::new(vec![g.out_channels], db)?))
}

pub(crate) fn max_pool2_forward(input: &Tensor, g: &PoolGeometry) -> Result<(Tensor, Vec<usize>)> {
    let in_len = g.channels * g.height * g.width;
    if input.cols() != in_len || g.height % 2 != 0 || g.width % 2 != 0 {
        return Err(Error::shape("max_pool2", input.shape(), &[input.rows(), in_len]));
    }
    let (oh, ow) = (g.height / 2, g.width / 2);
    let n = input.rows();
    let mut out = Tensor::zeros(&[n, g.output_len()]);
    let mut argmax = Vec::with_capacity(n * g.output_len());
    for s in 0..n {
        let src = input.row(s);
        let dst = out.row_mut(s);
        for c in 0..g.channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = c * g.height * g.width + (2 * y + dy) * g.width + 2 * x + dx;
                            if best == usize::MAX || src[idx] > best_v {
                                best = idx;
                                best_v = src[idx];
                            }
                        }
                    }
                    dst[(c * oh + y) * ow + x] = best_v;
                    argmax.push(best);
                }
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn max_pool2_backward(grad: &Tensor, argmax: &[usize], g: &PoolGeometry, input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let per = g.output_len();
    for s in 0..grad.rows() {
        let gr = grad.row(s);
        let dst = dx.row_mut(s);
        for (j, &v) in gr.iter().enumerate() {
            dst[argmax[s * per + j]] += v;
        }
    }
    dx
}
