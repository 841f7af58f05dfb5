use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use super::{Param, Parameters};

/// 2-D convolution over NHWC activations, lowered to a single GEMM via im2col.
///
/// The weight is stored as `[kernel * kernel * in_channels, out_channels]`
/// with rows ordered `(ky, kx, c)`, matching the im2col column order.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Array2<f32>,
    input_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    /// He-normal initialised convolution (fan-out mode).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let fan_out = (out_channels * kernel * kernel) as f32;
        let std = gain / fan_out.sqrt();
        let weight = Param::normal(
            format!("{name}.weight"),
            &[kernel * kernel * in_channels, out_channels],
            std,
            rng,
        );
        let bias = bias.then(|| Param::zeros(format!("{name}.bias"), &[out_channels], false));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn im2col(&self, x: &Array4<f32>) -> Array2<f32> {
        let (n, h, w, c) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let width = k * k * c;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = vec![0.0f32; n * ho * wo * width];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * width;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            cols[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((n * ho * wo, width), cols).expect("im2col shape")
    }

    fn col2im(&self, dcols: &Array2<f32>, (n, h, w, c): (usize, usize, usize, usize)) -> Array4<f32> {
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let width = k * k * c;
        let dcols = dcols.as_standard_layout();
        let ds = dcols.as_slice().expect("standard layout");
        let mut dx = vec![0.0f32; n * h * w * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * width;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for (d, s) in dx[dst..dst + c].iter_mut().zip(&ds[src..src + c]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((n, h, w, c), dx).expect("col2im shape")
    }

    fn apply(&self, cols: &Array2<f32>, n: usize, ho: usize, wo: usize) -> Array4<f32> {
        let mut y = cols.dot(&self.weight.view2());
        if let Some(bias) = &self.bias {
            let b = ArrayView2::from_shape((1, self.out_channels), &bias.value).expect("bias shape");
            y += &b;
        }
        y.into_shape_with_order((n, ho, wo, self.out_channels))
            .expect("conv output shape")
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, h, w, _) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x);
        self.apply(&cols, n, ho, wo)
    }

    pub fn forward_train(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (n, h, w, c) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x);
        let y = self.apply(&cols, n, ho, wo);
        (
            y,
            ConvCache {
                cols,
                input_dim: (n, h, w, c),
            },
        )
    }

    fn accumulate_param_grads(&mut self, cols: &Array2<f32>, grad: &Array4<f32>) -> Array2<f32> {
        let (n, ho, wo, co) = grad.dim();
        let g = grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * ho * wo, co))
            .expect("grad reshape");
        let dw = cols.t().dot(&g);
        self.weight
            .grad
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(acc, d)| *acc += d);
        if let Some(bias) = &mut self.bias {
            let db = g.sum_axis(Axis(0));
            bias.grad.iter_mut().zip(db.iter()).for_each(|(acc, d)| *acc += d);
        }
        g
    }

    pub fn backward(&mut self, cache: ConvCache, grad: &Array4<f32>) -> Array4<f32> {
        let g = self.accumulate_param_grads(&cache.cols, grad);
        let dcols = g.dot(&self.weight.view2().t());
        self.col2im(&dcols, cache.input_dim)
    }

    /// Accumulates parameter gradients without computing the input gradient.
    pub fn backward_params(&mut self, cache: ConvCache, grad: &Array4<f32>) {
        self.accumulate_param_grads(&cache.cols, grad);
    }
}

impl Parameters for Conv2d {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.weight];
        out.extend(self.bias.as_ref());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.weight];
        out.extend(self.bias.as_mut());
        out
    }
}
