//! Turns a [`ModelSpec`] into live layers and runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::FeatureMatrix;
use crate::layers::{BatchNorm, Conv2D, Dropout, MaxPool2D, Mode};
use crate::tensor::ops;
use crate::tensor::{no_grad, Tensor};

use super::{BlockSpec, Layout, ModelError, ModelSpec};

enum Stage {
    Conv { name: String, layer: Conv2D<f32> },
    Bn { name: String, layer: BatchNorm<f32> },
    Relu,
    Pool(MaxPool2D),
    Dropout(Dropout),
    TimePool,
    Head(Conv2D<f32>),
}

pub struct Model {
    pub spec: ModelSpec,
    pub mode: Mode,
    stages: Vec<Stage>,
}

impl Model {
    /// Instantiates `spec` with Glorot-uniform weights drawn from a ChaCha
    /// stream seeded by `seed`. Batch-norm statistics start at mean 0,
    /// variance 1 so an untrained model can already run inference.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = match spec.layout() {
            Layout::Plane => 1,
            Layout::PerFrame => spec.input_bands,
        };
        let mut block = 0usize;
        let mut stages = Vec::new();
        for b in &spec.blocks {
            match *b {
                BlockSpec::Conv { channels, kernel } => {
                    block += 1;
                    stages.push(Stage::Conv {
                        name: format!("block{block}.conv"),
                        layer: Conv2D::new(d, channels, kernel, &mut rng),
                    });
                    d = channels;
                }
                BlockSpec::Dense { units } => {
                    block += 1;
                    stages.push(Stage::Conv {
                        name: format!("block{block}.dense"),
                        layer: Conv2D::new(d, units, 1, &mut rng),
                    });
                    d = units;
                }
                BlockSpec::Bn => {
                    let mut bn = BatchNorm::new(d);
                    bn.init_running_stats();
                    stages.push(Stage::Bn { name: format!("block{block}.bn"), layer: bn });
                }
                BlockSpec::Relu => stages.push(Stage::Relu),
                BlockSpec::Pool { ph, pw } => stages.push(Stage::Pool(MaxPool2D::new(ph, pw))),
                BlockSpec::Dropout { rate } => stages.push(Stage::Dropout(Dropout::new(rate))),
                BlockSpec::TimePool => stages.push(Stage::TimePool),
                BlockSpec::Head { units } => {
                    stages.push(Stage::Head(Conv2D::new(d, units, 1, &mut rng)));
                    d = units;
                }
            }
        }
        Ok(Model { spec: spec.clone(), mode: Mode::Infer, stages })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// One pass through every stage. Expects `[n, 1, bands, frames]` input
    /// for spectrogram nets and `[n, bands, 1, frames]` for per-frame nets;
    /// returns `[n, output_dim]` sigmoid scores.
    pub fn forward(
        &mut self,
        x: &Tensor<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<f32>, ModelError> {
        let want = match self.spec.layout() {
            Layout::Plane => (1, self.spec.input_bands, self.spec.input_frames),
            Layout::PerFrame => (self.spec.input_bands, 1, self.spec.input_frames),
        };
        let s = x.shape().to_vec();
        if s.len() != 4 || (s[1], s[2], s[3]) != want {
            return Err(ModelError::ShapeMismatch {
                expected: (self.spec.input_bands, self.spec.input_frames),
                got: (s.get(2).copied().unwrap_or(0), s.get(3).copied().unwrap_or(0)),
            });
        }
        let mode = self.mode;
        let mut x = x.clone();
        for stage in &mut self.stages {
            x = match stage {
                Stage::Conv { layer, .. } => layer.forward(&x)?,
                Stage::Bn { layer, .. } => layer.forward(&x, mode)?,
                Stage::Relu => ops::relu(&x),
                Stage::Pool(p) => p.forward(&x)?,
                Stage::Dropout(d) => d.forward(&x, mode, rng)?,
                Stage::TimePool => {
                    let w = x.shape()[3];
                    ops::maxpool2d(&x, 1, w)?
                }
                Stage::Head(layer) => {
                    let y = ops::sigmoid(&layer.forward(&x)?);
                    let n = y.shape()[0];
                    ops::reshape(&y, &[n, self.spec.output_dim])?
                }
            };
        }
        Ok(x)
    }

    /// Inference scores for a batch of feature matrices, row-major
    /// `[n, output_dim]`. Runs without gradient tracking and with dropout
    /// off regardless of the current mode.
    pub fn predict(&mut self, batch: &[&FeatureMatrix]) -> Result<Vec<f32>, ModelError> {
        let x = self.batch_input(batch)?;
        let prev = self.mode;
        self.mode = Mode::Infer;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = no_grad(|| self.forward(&x, &mut rng));
        self.mode = prev;
        Ok(out?.to_vec())
    }

    /// Packs feature matrices into the input tensor for this architecture.
    pub fn batch_input(&self, batch: &[&FeatureMatrix]) -> Result<Tensor<f32>, ModelError> {
        let (bands, frames) = (self.spec.input_bands, self.spec.input_frames);
        let mut data = Vec::with_capacity(batch.len() * bands * frames);
        for f in batch {
            if f.kind != self.spec.input_kind {
                return Err(ModelError::KindMismatch {
                    expected: self.spec.input_kind,
                    got: f.kind,
                });
            }
            if f.band_count != bands || f.frame_count != frames {
                return Err(ModelError::ShapeMismatch {
                    expected: (bands, frames),
                    got: (f.band_count, f.frame_count),
                });
            }
            data.extend_from_slice(&f.data);
        }
        let shape = match self.spec.layout() {
            Layout::Plane => [batch.len(), 1, bands, frames],
            Layout::PerFrame => [batch.len(), bands, 1, frames],
        };
        Ok(Tensor::new(&shape, data)?)
    }

    /// Learned parameters in stage order, named for checkpoints and
    /// optimizer diagnostics.
    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Conv { name, layer } => {
                    out.push((format!("{name}.weight"), layer.weight.clone()));
                    out.push((format!("{name}.bias"), layer.bias.clone()));
                }
                Stage::Bn { name, layer } => {
                    out.push((format!("{name}.gamma"), layer.gamma.clone()));
                    out.push((format!("{name}.beta"), layer.beta.clone()));
                }
                Stage::Head(layer) => {
                    out.push(("head.weight".to_string(), layer.weight.clone()));
                    out.push(("head.bias".to_string(), layer.bias.clone()));
                }
                _ => {}
            }
        }
        out
    }

    /// Batch-norm running statistics as `(name, mean, var)` triples.
    pub fn bn_stats(&self) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        let mut out = Vec::new();
        for stage in &self.stages {
            if let Stage::Bn { name, layer } = stage {
                let (mean, var) = layer
                    .running
                    .clone()
                    .unwrap_or_else(|| (vec![0.0; layer.channels], vec![1.0; layer.channels]));
                out.push((name.clone(), mean, var));
            }
        }
        out
    }

    pub fn set_bn_stats(&mut self, name: &str, mean: Vec<f32>, var: Vec<f32>) -> bool {
        for stage in &mut self.stages {
            if let Stage::Bn { name: n, layer } = stage {
                if n == name && mean.len() == layer.channels && var.len() == layer.channels {
                    layer.running = Some((mean, var));
                    return true;
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureKind;
    use crate::model::model_spec;
    use rand::Rng;

    fn random_features(kind: FeatureKind, bands: usize, frames: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix {
            kind,
            band_count: bands,
            frame_count: frames,
            config_hash: 0,
            data: (0..bands * frames).map(|_| rng.gen_range(-18.0..-2.0)).collect(),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = model_spec("fcn4s", 8).unwrap();
        let a = Model::build(&spec, 11).unwrap();
        let b = Model::build(&spec, 11).unwrap();
        let c = Model::build(&spec, 12).unwrap();
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(*na, nb);
            assert_eq!(pa.to_vec(), pb.to_vec(), "{na}");
        }
        let wa = a.named_params()[0].1.to_vec();
        let wc = c.named_params()[0].1.to_vec();
        assert_ne!(wa, wc);
    }

    #[test]
    fn predict_shape_and_range() {
        let spec = model_spec("fcn4s", 8).unwrap();
        let mut model = Model::build(&spec, 5).unwrap();
        let f0 = random_features(FeatureKind::LogMel, 96, 256, 1);
        let f1 = random_features(FeatureKind::LogMel, 96, 256, 2);
        let scores = model.predict(&[&f0, &f1]).unwrap();
        assert_eq!(scores.len(), 16);
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s) && s.is_finite()));
    }

    #[test]
    fn predict_ignores_batch_composition() {
        let spec = model_spec("fcn4s", 8).unwrap();
        let mut model = Model::build(&spec, 5).unwrap();
        let f0 = random_features(FeatureKind::LogMel, 96, 256, 3);
        let f1 = random_features(FeatureKind::LogMel, 96, 256, 4);
        let alone = model.predict(&[&f0]).unwrap();
        let pair = model.predict(&[&f0, &f1]).unwrap();
        assert_eq!(alone, pair[..8].to_vec());
    }

    #[test]
    fn untrained_scores_hover_near_half() {
        let spec = model_spec("fcn4s", 8).unwrap();
        let mut model = Model::build(&spec, 7).unwrap();
        let feats: Vec<FeatureMatrix> = (0..16)
            .map(|i| random_features(FeatureKind::LogMel, 96, 256, 100 + i))
            .collect();
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        let scores = model.predict(&refs).unwrap();
        let mean = scores.iter().sum::<f32>() / scores.len() as f32;
        assert!((mean - 0.5).abs() < 0.15, "mean {mean}");
    }

    #[test]
    fn mfcc_net_is_time_permutation_invariant() {
        let spec = model_spec("mfcc4s", 8).unwrap();
        let mut model = Model::build(&spec, 9).unwrap();
        let f = random_features(FeatureKind::MfccStack, 90, 256, 6);
        let mut permuted = f.clone();
        for b in 0..90 {
            let row = &mut permuted.data[b * 256..(b + 1) * 256];
            row.rotate_left(31);
            row.swap(0, 17);
        }
        let a = model.predict(&[&f]).unwrap();
        let b = model.predict(&[&permuted]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mfcc_net_output_set_by_active_frame() {
        let spec = model_spec("mfcc4s", 8).unwrap();
        let mut model = Model::build(&spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame: Vec<f32> = (0..90).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let place = |at: usize| {
            let mut data = vec![-60.0f32; 90 * 256];
            for (b, &v) in frame.iter().enumerate() {
                data[b * 256 + at] = v;
            }
            FeatureMatrix {
                kind: FeatureKind::MfccStack,
                band_count: 90,
                frame_count: 256,
                config_hash: 0,
                data,
            }
        };
        let early = model.predict(&[&place(4)]).unwrap();
        let late = model.predict(&[&place(251)]).unwrap();
        assert_eq!(early, late);
    }

    #[test]
    fn kind_and_shape_mismatch_rejected() {
        let spec = model_spec("fcn4s", 8).unwrap();
        let mut model = Model::build(&spec, 5).unwrap();
        let stft = random_features(FeatureKind::LogStft, 129, 256, 1);
        assert!(matches!(
            model.predict(&[&stft]),
            Err(ModelError::KindMismatch { .. })
        ));
        let short = random_features(FeatureKind::LogMel, 96, 128, 1);
        assert!(matches!(
            model.predict(&[&short]),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn train_mode_forward_backward_runs() {
        let spec = model_spec("fcn4s", 8).unwrap();
        let mut model = Model::build(&spec, 5).unwrap();
        model.set_mode(Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f0 = random_features(FeatureKind::LogMel, 96, 256, 1);
        let f1 = random_features(FeatureKind::LogMel, 96, 256, 2);
        let x = model.batch_input(&[&f0, &f1]).unwrap();
        let y = model.forward(&x, &mut rng).unwrap();
        let target = Tensor::new(&[2, 8], vec![1.0; 16]).unwrap();
        let loss = ops::bce(&y, &target).unwrap();
        crate::tensor::backward(&loss).unwrap();
        for (name, p) in model.named_params() {
            let g = p.grad().unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.iter().all(|v| v.is_finite()), "{name}");
        }
    }
}
