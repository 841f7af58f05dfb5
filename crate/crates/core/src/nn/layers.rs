use ndarray::{Array, Array2, Array4, ArrayView2, Axis, Dimension, Zip};

use super::{Buffer, Param, Parameters};

pub fn leaky_relu<D: Dimension>(x: &Array<f32, D>, slope: f32) -> Array<f32, D> {
    x.mapv(|v| if v > 0.0 { v } else { v * slope })
}

/// Backward through a leaky ReLU given its forward output `y` (same sign as
/// the input for any slope ≥ 0).
pub fn leaky_relu_backward<D: Dimension>(y: &Array<f32, D>, grad: &Array<f32, D>, slope: f32) -> Array<f32, D> {
    let mut out = grad.clone();
    Zip::from(&mut out).and(y).for_each(|g, &v| {
        if v <= 0.0 {
            *g *= slope;
        }
    });
    out
}

pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, h, w, c) = x.dim();
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, h * w, c))
        .expect("pool reshape");
    flat.mean_axis(Axis(1)).expect("non-empty spatial extent")
}

pub fn global_avg_pool_backward(grad: &Array2<f32>, hw: (usize, usize)) -> Array4<f32> {
    let (n, c) = grad.dim();
    let scale = 1.0 / (hw.0 * hw.1) as f32;
    Array4::from_shape_fn((n, hw.0, hw.1, c), |(b, _, _, ch)| grad[[b, ch]] * scale)
}

/// 2×2 max pooling with stride 2.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPool2;

#[derive(Debug)]
pub struct PoolCache {
    argmax: Vec<u8>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2 {
    fn run(x: &Array4<f32>) -> (Array4<f32>, Vec<u8>) {
        let (n, h, w, c) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = vec![0.0f32; n * ho * wo * c];
        let mut arg = vec![0u8; n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let out = ((b * ho + oy) * wo + ox) * c;
                    let ys = &mut y[out..out + c];
                    let args = &mut arg[out..out + c];
                    for k in 0..4u8 {
                        let iy = 2 * oy + (k / 2) as usize;
                        let ix = 2 * ox + (k % 2) as usize;
                        let src = ((b * h + iy) * w + ix) * c;
                        let row = &xs[src..src + c];
                        if k == 0 {
                            ys.copy_from_slice(row);
                            continue;
                        }
                        for ((yv, a), &v) in ys.iter_mut().zip(args.iter_mut()).zip(row) {
                            if v > *yv {
                                *yv = v;
                                *a = k;
                            }
                        }
                    }
                }
            }
        }
        (Array4::from_shape_vec((n, ho, wo, c), y).expect("pool shape"), arg)
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        Self::run(x).0
    }

    pub fn forward_train(&self, x: &Array4<f32>) -> (Array4<f32>, PoolCache) {
        let (y, argmax) = Self::run(x);
        (
            y,
            PoolCache {
                argmax,
                input_dim: x.dim(),
            },
        )
    }

    pub fn backward(&self, cache: PoolCache, grad: &Array4<f32>) -> Array4<f32> {
        let (n, h, w, c) = cache.input_dim;
        let (_, ho, wo, _) = grad.dim();
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().expect("standard layout");
        let mut dx = vec![0.0f32; n * h * w * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let out = ((b * ho + oy) * wo + ox) * c;
                    for ch in 0..c {
                        let k = cache.argmax[out + ch] as usize;
                        let iy = 2 * oy + k / 2;
                        let ix = 2 * ox + k % 2;
                        dx[((b * h + iy) * w + ix) * c + ch] += gs[out + ch];
                    }
                }
            }
        }
        Array4::from_shape_vec((n, h, w, c), dx).expect("pool shape")
    }
}

/// Batch normalisation over the channel (last) axis.
///
/// Running statistics follow the PyTorch convention:
/// `running = (1 - momentum) * running + momentum * batch`, with the unbiased
/// variance estimate.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Debug)]
pub struct BnCache {
    xhat: Array2<f32>,
    inv_std: Vec<f32>,
    dim: (usize, usize, usize, usize),
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, momentum: f32) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], 1.0, false),
            beta: Param::zeros(format!("{name}.beta"), &[channels], false),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![1.0; channels],
            },
            momentum,
            eps: 1e-5,
        }
    }

    fn rows(x: &Array4<f32>) -> Array2<f32> {
        let (n, h, w, c) = x.dim();
        x.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * h * w, c))
            .expect("bn reshape")
    }

    fn affine(&self, xhat: &Array2<f32>, dim: (usize, usize, usize, usize)) -> Array4<f32> {
        let c = dim.3;
        let g = ArrayView2::from_shape((1, c), &self.gamma.value).expect("gamma");
        let b = ArrayView2::from_shape((1, c), &self.beta.value).expect("beta");
        let y = xhat * &g + &b;
        y.into_shape_with_order(dim).expect("bn output shape")
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let dim = x.dim();
        let mut rows = Self::rows(x);
        for (ch, mut col) in rows.axis_iter_mut(Axis(1)).enumerate() {
            let mean = self.running_mean.value[ch];
            let inv = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
            col.mapv_inplace(|v| (v - mean) * inv);
        }
        self.affine(&rows, dim)
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BnCache) {
        let dim = x.dim();
        let mut rows = Self::rows(x);
        let m = rows.nrows() as f32;
        let mut inv_std = Vec::with_capacity(dim.3);
        for (ch, mut col) in rows.axis_iter_mut(Axis(1)).enumerate() {
            let mean = col.sum() / m;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / m;
            let inv = 1.0 / (var + self.eps).sqrt();
            col.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
        }
        let y = self.affine(&rows, dim);
        (y, BnCache { xhat: rows, inv_std, dim })
    }

    pub fn backward(&mut self, cache: BnCache, grad: &Array4<f32>) -> Array4<f32> {
        let g = Self::rows(grad);
        let m = g.nrows() as f32;
        let mut dx = Array2::<f32>::zeros(g.dim());
        for ch in 0..cache.dim.3 {
            let gc = g.column(ch);
            let xc = cache.xhat.column(ch);
            let sum_g: f32 = gc.sum();
            let sum_gx: f32 = gc.iter().zip(xc.iter()).map(|(a, b)| a * b).sum();
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let scale = self.gamma.value[ch] * cache.inv_std[ch] / m;
            for ((d, gv), xv) in dx.column_mut(ch).iter_mut().zip(gc.iter()).zip(xc.iter()) {
                *d = scale * (m * gv - sum_g - xv * sum_gx);
            }
        }
        dx.into_shape_with_order(cache.dim).expect("bn grad shape")
    }
}

impl Parameters for BatchNorm2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairing(a: &Array4<f32>, b: &Array4<f32>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 2, 2, 1), vec![1.0, 5.0, -2.0, 3.0]).unwrap();
        let (y, cache) = MaxPool2.forward_train(&x);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        let dx = MaxPool2.backward(cache, &Array4::from_elem((1, 1, 1, 1), 2.0));
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_backward_spreads_evenly() {
        let x = Array4::from_shape_fn((2, 2, 3, 2), |(b, i, j, c)| (b + i + j + c) as f32);
        let y = global_avg_pool(&x);
        assert!((y[[0, 0]] - 1.5).abs() < 1e-6);
        let dx = global_avg_pool_backward(&Array2::ones((2, 2)), (2, 3));
        assert!(dx.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-7));
    }

    #[test]
    fn batchnorm_train_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::new("bn", 3, 0.1);
        let x = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.random_range(-2.0f32..5.0));
        let (y, _) = bn.forward_train(&x);
        let rows = BatchNorm2d::rows(&y);
        for col in rows.axis_iter(Axis(1)) {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / col.len() as f32;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().all(|m| *m != 0.0));
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bn = BatchNorm2d::new("bn", 2, 0.1);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.2, -0.1];
        let x = Array4::from_shape_fn((3, 2, 2, 2), |_| rng.random_range(-1.0f32..1.0));
        let probe = Array4::from_shape_fn((3, 2, 2, 2), |_| rng.random_range(-1.0f32..1.0));
        let (_, cache) = bn.clone().forward_train(&x);
        let dx = bn.backward(cache, &probe);
        let eps = 1e-2f32;
        for idx in [0usize, 3, 10, 22] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let lp = pairing(&bn.clone().forward_train(&xp).0, &probe);
            let lm = pairing(&bn.clone().forward_train(&xm).0, &probe);
            let fd = (lp - lm) / (2.0 * eps as f64);
            let an = dx.as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() < 2e-3 * (1.0 + fd.abs()), "{fd} vs {an}");
        }
    }
}
