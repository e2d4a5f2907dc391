use rand::Rng;

use super::{glorot_limit, Meta};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Sliding-window geometry of a convolution over one `channels x height x width` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return None;
        }
        Some(Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds every receptive field into a column; out-of-bounds taps read zero.
    pub fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let k = self.kernel;
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters columns back, accumulating into `img`.
    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let k = self.kernel;
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let plane =
                &mut img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn expect_4d(layer: &'static str, input: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::ShapeMismatch {
            layer,
            expected: vec![0, channels, 0, 0],
            got: s.to_vec(),
        });
    }
    Ok((s[0], s[2], s[3]))
}

/// 2-D convolution with square kernels, weight layout `(out, in, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub(super) meta: Meta,
    pub(super) weight: Tensor,
    pub(super) bias: Tensor,
    pub(super) stride: usize,
    pub(super) padding: usize,
}

impl Conv2d {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let receptive = kernel * kernel;
        let limit = glorot_limit(in_channels * receptive, out_channels * receptive);
        Conv2d {
            meta: Meta::fresh(),
            weight: Tensor::uniform(&[out_channels, in_channels, kernel, kernel], limit, rng),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        }
    }

    /// Builds a layer around explicit parameters.
    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || bias.shape() != [ws[0]] || stride == 0 {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "conv2d needs a (out, in, k, k) kernel, an (out) bias and stride >= 1".into(),
            });
        }
        Ok(Conv2d {
            meta: Meta::fresh(),
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn geometry(&self, input: &Tensor) -> Result<(usize, Geometry)> {
        let (n, h, w) = expect_4d("conv2d", input, self.in_channels())?;
        let g = Geometry::new(self.in_channels(), h, w, self.kernel(), self.stride, self.padding)
            .ok_or_else(|| Error::ShapeMismatch {
                layer: "conv2d",
                expected: vec![n, self.in_channels(), self.kernel(), self.kernel()],
                got: input.shape().to_vec(),
            })?;
        Ok((n, g))
    }

    pub(super) fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let probe = Tensor::zeros(&[1, input[1], input[2], input[3]]);
        let (_, g) = self.geometry(&probe)?;
        Ok(vec![input[0], self.out_channels(), g.out_h, g.out_w])
    }

    pub(super) fn run(&self, input: &Tensor) -> Result<Tensor> {
        let (n, g) = self.geometry(input)?;
        let out_c = self.out_channels();
        let plane = g.col_cols();
        let mut cols = vec![0.0; g.col_rows() * plane];
        let mut out = Tensor::zeros(&[n, out_c, g.out_h, g.out_w]);
        for i in 0..n {
            g.im2col(input.row(i), &mut cols);
            let dst = out.row_mut(i);
            for (c, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(self.bias.data()[c]);
            }
            gemm(out_c, g.col_rows(), plane, 1.0, self.weight.data(), false, &cols, false, 1.0, dst);
        }
        Ok(out)
    }

    pub(super) fn grads(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (n, g) = self.geometry(input)?;
        let out_c = self.out_channels();
        let plane = g.col_cols();
        let mut cols = vec![0.0; g.col_rows() * plane];
        let mut dcols = vec![0.0; g.col_rows() * plane];
        let mut grad_in = Tensor::zeros(input.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(self.bias.shape());
        for i in 0..n {
            let go = grad_out.row(i);
            g.im2col(input.row(i), &mut cols);
            gemm(out_c, plane, g.col_rows(), 1.0, go, false, &cols, true, 1.0, dw.data_mut());
            for (c, chunk) in go.chunks(plane).enumerate() {
                db.data_mut()[c] += chunk.iter().sum::<f64>();
            }
            gemm(g.col_rows(), out_c, plane, 1.0, self.weight.data(), true, go, false, 0.0, &mut dcols);
            g.col2im(&dcols, grad_in.row_mut(i));
        }
        Ok((grad_in, vec![dw, db]))
    }
}

/// Transposed 2-D convolution, the adjoint of [`Conv2d`] with the same kernel.
///
/// The weight keeps the layout of the convolution it is the adjoint of,
/// `(in, out, k, k)` seen from this layer: a `Conv2d` with weight `K` maps
/// `K.shape[1]` channels to `K.shape[0]`, and a `ConvTranspose2d` holding the
/// same `K` maps them back. `output_padding` (< stride) disambiguates the
/// output extent: `(h - 1) * stride - 2 * padding + k + output_padding`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub(super) meta: Meta,
    pub(super) weight: Tensor,
    pub(super) bias: Tensor,
    pub(super) stride: usize,
    pub(super) padding: usize,
    pub(super) output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut R,
    ) -> Self {
        let receptive = kernel * kernel;
        let limit = glorot_limit(in_channels * receptive, out_channels * receptive);
        ConvTranspose2d {
            meta: Meta::fresh(),
            weight: Tensor::uniform(&[in_channels, out_channels, kernel, kernel], limit, rng),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn from_parts(
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4
            || ws[2] != ws[3]
            || bias.shape() != [ws[1]]
            || stride == 0
            || output_padding >= stride
        {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "conv_transpose2d needs an (in, out, k, k) kernel, an (out) bias and output_padding < stride".into(),
            });
        }
        Ok(ConvTranspose2d {
            meta: Meta::fresh(),
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn output_padding(&self) -> usize {
        self.output_padding
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Geometry of the convolution whose adjoint this layer applies; its
    /// image is this layer's output.
    fn geometry(&self, input: &Tensor) -> Result<(usize, Geometry)> {
        let (n, h, w) = expect_4d("conv_transpose2d", input, self.in_channels())?;
        let k = self.kernel();
        let extent = |e: usize| ((e - 1) * self.stride + k + self.output_padding).checked_sub(2 * self.padding);
        let mismatch = || Error::ShapeMismatch {
            layer: "conv_transpose2d",
            expected: vec![n, self.in_channels(), h, w],
            got: input.shape().to_vec(),
        };
        let (oh, ow) = match (extent(h), extent(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(mismatch()),
        };
        let g = Geometry::new(self.out_channels(), oh, ow, k, self.stride, self.padding)
            .filter(|g| g.out_h == h && g.out_w == w)
            .ok_or_else(mismatch)?;
        Ok((n, g))
    }

    pub(super) fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let probe = Tensor::zeros(&[1, input[1], input[2], input[3]]);
        let (_, g) = self.geometry(&probe)?;
        Ok(vec![input[0], self.out_channels(), g.height, g.width])
    }

    pub(super) fn run(&self, input: &Tensor) -> Result<Tensor> {
        let (n, g) = self.geometry(input)?;
        let in_c = self.in_channels();
        let plane = g.col_cols();
        let mut cols = vec![0.0; g.col_rows() * plane];
        let mut out = Tensor::zeros(&[n, g.channels, g.height, g.width]);
        let out_plane = g.height * g.width;
        for i in 0..n {
            gemm(g.col_rows(), in_c, plane, 1.0, self.weight.data(), true, input.row(i), false, 0.0, &mut cols);
            let dst = out.row_mut(i);
            for (c, chunk) in dst.chunks_mut(out_plane).enumerate() {
                chunk.fill(self.bias.data()[c]);
            }
            g.col2im(&cols, dst);
        }
        Ok(out)
    }

    pub(super) fn grads(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (n, g) = self.geometry(input)?;
        let in_c = self.in_channels();
        let plane = g.col_cols();
        let out_plane = g.height * g.width;
        let mut gcols = vec![0.0; g.col_rows() * plane];
        let mut grad_in = Tensor::zeros(input.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(self.bias.shape());
        for i in 0..n {
            let go = grad_out.row(i);
            for (c, chunk) in go.chunks(out_plane).enumerate() {
                db.data_mut()[c] += chunk.iter().sum::<f64>();
            }
            g.im2col(go, &mut gcols);
            gemm(in_c, g.col_rows(), plane, 1.0, self.weight.data(), false, &gcols, false, 0.0, grad_in.row_mut(i));
            gemm(in_c, plane, g.col_rows(), 1.0, input.row(i), false, &gcols, true, 1.0, dw.data_mut());
        }
        Ok((grad_in, vec![dw, db]))
    }
}
