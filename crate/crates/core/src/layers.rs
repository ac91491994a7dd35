//! Layer vocabulary: same-padded convolution, floor-mode max pooling, batch
//! normalization with running statistics, dropout, dense, and the two
//! activations. Layers own their parameters as shared tensors so an
//! optimizer can hold the same handles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ops, Scalar, Tensor, TensorError};

/// Whether a forward pass updates batch statistics and applies dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const DROPOUT_RATE: f64 = 0.5;

fn glorot_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect();
    Tensor::param(shape, values).expect("shape/product consistent")
}

/// Stride-1 same-padded convolution with odd square kernels (1x1 or 3x3 in
/// every architecture here).
pub struct Conv2D<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl<T: Scalar> Conv2D<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        Conv2D {
            weight: glorot_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, fan_out, rng),
            bias: Tensor::param(&[out_channels], vec![T::ZERO; out_channels]).unwrap(),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ops::conv2d(x, &self.weight, &self.bias)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are discarded.
pub struct MaxPool2D {
    pub pool_h: usize,
    pub pool_w: usize,
}

impl MaxPool2D {
    pub fn new(pool_h: usize, pool_w: usize) -> Self {
        MaxPool2D { pool_h, pool_w }
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ops::maxpool2d(x, self.pool_h, self.pool_w)
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.pool_h, w / self.pool_w)
    }
}

/// Per-channel batch normalization.
///
/// A freshly constructed layer has no running statistics: inference before
/// any training update is an error. The first training update adopts the
/// batch statistics outright; later updates blend with
/// `running <- momentum * running + (1 - momentum) * batch`.
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: Option<(Vec<T>, Vec<T>)>,
    pub momentum: f64,
    pub channels: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::param(&[channels], vec![T::ONE; channels]).unwrap(),
            beta: Tensor::param(&[channels], vec![T::ZERO; channels]).unwrap(),
            running: None,
            momentum: BN_MOMENTUM,
            channels,
        }
    }

    /// Seeds the running statistics explicitly (mean 0, variance 1), so a
    /// network can run inference before its first optimizer step.
    pub fn init_running_stats(&mut self) {
        self.running = Some((vec![T::ZERO; self.channels], vec![T::ONE; self.channels]));
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let eps = T::from_f64(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, mean, var) = ops::batchnorm_train(x, &self.gamma, &self.beta, eps)?;
                match self.running.as_mut() {
                    None => self.running = Some((mean, var)),
                    Some((rm, rv)) => {
                        let m = T::from_f64(self.momentum);
                        let one_m = T::from_f64(1.0 - self.momentum);
                        for (r, b) in rm.iter_mut().zip(&mean) {
                            *r = *r * m + *b * one_m;
                        }
                        for (r, b) in rv.iter_mut().zip(&var) {
                            *r = *r * m + *b * one_m;
                        }
                    }
                }
                Ok(y)
            }
            Mode::Infer => {
                let (rm, rv) =
                    self.running.as_ref().ok_or(TensorError::UninitializedStats)?;
                ops::batchnorm_infer(x, &self.gamma, &self.beta, rm, rv, eps)
            }
        }
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Inverted dropout; the identity in inference mode.
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Dropout { rate }
    }

    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, TensorError> {
        if mode == Mode::Infer || self.rate == 0.0 {
            return Ok(x.clone());
        }
        ops::dropout(x, self.rate, rng)
    }
}

/// Affine map per row: `y = x . W + b` with `W` stored input-major
/// (`in x out`), i.e. the transpose of the usual out-by-in convention.
pub struct Dense<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            weight: glorot_uniform(&[in_features, out_features], in_features, out_features, rng),
            bias: Tensor::param(&[out_features], vec![T::ZERO; out_features]).unwrap(),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ops::add(&ops::matmul(x, &self.weight)?, &self.bias)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check, ops};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn identity_conv1x1_reproduces_input() {
        let x = Tensor::<f64>::new(&[1, 2, 3, 3], (0..18).map(|i| i as f64).collect()).unwrap();
        let conv = Conv2D {
            weight: Tensor::param(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::param(&[2], vec![0.0, 0.0]).unwrap(),
            in_channels: 2,
            out_channels: 2,
            kernel: 1,
        };
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn all_ones_3x3_kernel_sums_interior_neighbourhood() {
        let (c, v) = (3usize, 0.5f64);
        let x = Tensor::new(&[1, c, 5, 5], vec![v; c * 25]).unwrap();
        let conv = Conv2D {
            weight: Tensor::param(&[1, c, 3, 3], vec![1.0; c * 9]).unwrap(),
            bias: Tensor::param(&[1], vec![0.0]).unwrap(),
            in_channels: c,
            out_channels: 1,
            kernel: 3,
        };
        let y = conv.forward(&x).unwrap();
        // Interior pixel (2,2): full 3x3 neighbourhood in every channel.
        assert!((y.to_vec()[2 * 5 + 2] - 9.0 * v * c as f64).abs() < 1e-12);
    }

    #[test]
    fn conv_is_translation_equivariant_in_the_interior() {
        let mut r = rng();
        let (h, w) = (7usize, 9usize);
        let base: Vec<f64> = (0..h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        // Shift by one row and two columns, wrapping is irrelevant since we
        // only compare interior cells untouched by padding.
        let mut shifted = vec![0.0; h * w];
        for y in 1..h {
            for x in 2..w {
                shifted[y * w + x] = base[(y - 1) * w + (x - 2)];
            }
        }
        let conv = Conv2D::<f64>::new(1, 1, 3, &mut r);
        let y0 = conv.forward(&Tensor::new(&[1, 1, h, w], base).unwrap()).unwrap().to_vec();
        let y1 = conv.forward(&Tensor::new(&[1, 1, h, w], shifted).unwrap()).unwrap().to_vec();
        for y in 3..h - 1 {
            for x in 4..w - 1 {
                let want = y0[(y - 1) * w + (x - 2)];
                let got = y1[y * w + x];
                assert!((got - want).abs() < 1e-12, "({y},{x}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn maxpool_is_invariant_to_max_position_within_block() {
        // Same multiset of values per 2x2 block, max moved around.
        let a = Tensor::<f64>::new(&[1, 1, 2, 2], vec![9.0, 1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 9.0]).unwrap();
        let p = MaxPool2D::new(2, 2);
        assert_eq!(p.forward(&a).unwrap().to_vec(), p.forward(&b).unwrap().to_vec());
    }

    #[test]
    fn batchnorm_running_stats_lifecycle() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = Tensor::new(&[4, 2], vec![3.0; 8]).unwrap();

        // Inference before any update is a contract violation.
        assert!(matches!(
            bn.forward(&x, Mode::Infer),
            Err(TensorError::UninitializedStats)
        ));

        // One constant batch: running stats become exactly (mean 3, var 0),
        // so inference yields beta everywhere.
        bn.forward(&x, Mode::Train).unwrap();
        let (rm, rv) = bn.running.clone().unwrap();
        assert_eq!(rm, vec![3.0, 3.0]);
        assert_eq!(rv, vec![0.0, 0.0]);
        let y = bn.forward(&x, Mode::Infer).unwrap();
        assert!(y.to_vec().iter().all(|&v| v.abs() < 1e-12));

        // A second batch blends with momentum 0.99.
        let x2 = Tensor::new(&[4, 2], vec![5.0; 8]).unwrap();
        bn.forward(&x2, Mode::Train).unwrap();
        let (rm, _) = bn.running.clone().unwrap();
        assert!((rm[0] - (0.99 * 3.0 + 0.01 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_affine_law() {
        // Standardized input, gamma 2, beta 3 -> mean 3, std 2.
        let n = 64usize;
        let mut r = rng();
        let mut vals: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mu = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        for v in &mut vals {
            *v = (*v - mu) / var.sqrt();
        }
        let x = Tensor::new(&[n, 1], vals).unwrap();
        let mut bn = BatchNorm::<f64>::new(1);
        bn.gamma.set_values(&[2.0]);
        bn.beta.set_values(&[3.0]);
        let y = bn.forward(&x, Mode::Train).unwrap().to_vec();
        let ymu = y.iter().sum::<f64>() / n as f64;
        let ystd = (y.iter().map(|v| (v - ymu) * (v - ymu)).sum::<f64>() / n as f64).sqrt();
        assert!((ymu - 3.0).abs() < 1e-9);
        assert!((ystd - 2.0).abs() < 1e-4); // eps nudges the std slightly
    }

    #[test]
    fn dropout_identity_cases_and_expectation() {
        let x = Tensor::<f64>::new(&[1_000_000], vec![1.0; 1_000_000]).unwrap();
        let mut r = rng();
        // Rate 0 and inference mode are both exact identities.
        assert_eq!(Dropout::new(0.0).forward(&x, Mode::Train, &mut r).unwrap().to_vec(), x.to_vec());
        assert_eq!(Dropout::new(0.5).forward(&x, Mode::Infer, &mut r).unwrap().to_vec(), x.to_vec());
        // Inverted scaling preserves the mean to binomial accuracy.
        let y = Dropout::new(0.5).forward(&x, Mode::Train, &mut r).unwrap();
        let mean = y.to_vec().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dense_matches_examples_and_matmul_oracle() {
        let mut r = rng();
        // W = ones(1x3) stored transposed as 3x1, b = 0, x = [1,2,3] -> [6].
        let dense = Dense {
            weight: Tensor::param(&[3, 1], vec![1.0; 3]).unwrap(),
            bias: Tensor::param(&[1], vec![0.0]).unwrap(),
            in_features: 3,
            out_features: 1,
        };
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(dense.forward(&x).unwrap().to_vec(), vec![6.0]);

        // Identity weights reproduce the input.
        let eye = Dense {
            weight: Tensor::param(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
                .unwrap(),
            bias: Tensor::param(&[3], vec![0.0; 3]).unwrap(),
            in_features: 3,
            out_features: 3,
        };
        let x2 = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 4.0, 0.0, -3.0]).unwrap();
        assert_eq!(eye.forward(&x2).unwrap().to_vec(), x2.to_vec());

        // Random case against a direct triple loop.
        let dense = Dense::<f64>::new(4, 3, &mut r);
        let xv: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x3 = Tensor::new(&[2, 4], xv.clone()).unwrap();
        let y = dense.forward(&x3).unwrap().to_vec();
        let wv = dense.weight.to_vec();
        let bv = dense.bias.to_vec();
        for i in 0..2 {
            for j in 0..3 {
                let mut want = bv[j];
                for k in 0..4 {
                    want += xv[i * 4 + k] * wv[k * 3 + j];
                }
                assert!((y[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_rejects_width_mismatch() {
        let mut r = rng();
        let dense = Dense::<f64>::new(4, 3, &mut r);
        let x = Tensor::new(&[2, 5], vec![0.0; 10]).unwrap();
        assert!(dense.forward(&x).is_err());
    }

    #[test]
    fn layer_gradients_check_out() {
        let mut r = rng();
        let conv = Conv2D::<f64>::new(2, 3, 3, &mut r);
        let x = Tensor::param(&[2, 2, 4, 4], (0..64).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let err = grad_check(|x| Ok(ops::mean(&conv.forward(x)?)), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "conv layer grad err {err}");

        let dense = Dense::<f64>::new(6, 2, &mut r);
        let x = Tensor::param(&[3, 6], (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check(|x| Ok(ops::mean(&dense.forward(x)?)), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "dense layer grad err {err}");
    }

    #[test]
    fn training_updates_flow_into_conv_parameters() {
        let mut r = rng();
        let conv = Conv2D::<f64>::new(1, 2, 3, &mut r);
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let loss = ops::mean(&conv.forward(&x).unwrap());
        backward(&loss).unwrap();
        assert!(conv.weight.grad().is_some());
        assert!(conv.bias.grad().is_some());
        assert!(conv.bias.grad().unwrap().iter().all(|&g| (g - 0.5).abs() < 1e-12));
    }
}
