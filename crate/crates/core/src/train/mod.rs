//! Mini-batch Adam training of a [`Model`] on binary cross-entropy, with
//! per-epoch validation AUC, best-checkpoint persistence, and an
//! incrementally written history file.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::FeatureMatrix;
use crate::eval::{macro_auc, AucReport, EvalError};
use crate::layers::Mode;
use crate::model::{save_checkpoint, CheckpointError, Model, ModelError};
use crate::tensor::ops;
use crate::tensor::{backward, Tensor};

pub use crate::tensor::ops::bce as bce_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement tolerated before stopping;
    /// 0 stops after the first epoch.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            max_epochs: 100,
            patience: 10,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::BadConfig(format!("lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::BadConfig(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::BadConfig("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    BadConfig(String),
    BadData(String),
    /// Gradient blew up; names the parameter so the run is diagnosable.
    NonFiniteGrad { param: String },
    /// Training loss left the reals; the best checkpoint so far is kept.
    Diverged { epoch: usize, loss: f64 },
    Io { path: PathBuf, source: std::io::Error },
    Model(ModelError),
    Eval(EvalError),
    Checkpoint(CheckpointError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(d) => write!(f, "bad train config: {d}"),
            TrainError::BadData(d) => write!(f, "bad training data: {d}"),
            TrainError::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient in parameter '{param}'")
            }
            TrainError::Diverged { epoch, loss } => {
                write!(f, "training diverged at epoch {epoch} (loss {loss})")
            }
            TrainError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Eval(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(ModelError::from(e))
    }
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

/// Where a training example's features come from; lets the loop read from
/// memory or from feature files without caring which.
pub trait FeatureSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<FeatureMatrix, TrainError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct MemFeatures(pub Vec<FeatureMatrix>);

impl FeatureSource for MemFeatures {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn get(&self, index: usize) -> Result<FeatureMatrix, TrainError> {
        Ok(self.0[index].clone())
    }
}

/// Features plus an `n x k` binary label matrix.
pub struct TaggedSet<'a> {
    pub features: &'a dyn FeatureSource,
    pub labels: &'a [f32],
    pub k: usize,
}

impl<'a> TaggedSet<'a> {
    pub fn new(
        features: &'a dyn FeatureSource,
        labels: &'a [f32],
        k: usize,
    ) -> Result<Self, TrainError> {
        if features.is_empty() {
            return Err(TrainError::BadData("empty feature set".into()));
        }
        if labels.len() != features.len() * k {
            return Err(TrainError::BadData(format!(
                "{} labels for {} clips x {k} tags",
                labels.len(),
                features.len()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(TrainError::BadData(format!("label {v} is not binary")));
        }
        Ok(TaggedSet { features, labels, k })
    }

    fn n(&self) -> usize {
        self.features.len()
    }
}

/// Adam with bias correction; moments live beside the named parameters.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[(String, Tensor<f32>)]) -> Adam {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
            step: 0,
            moments: params
                .iter()
                .map(|(_, p)| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect(),
        }
    }

    /// One update over all parameters from their accumulated gradients.
    /// Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &[(String, Tensor<f32>)]) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for ((name, p), (m, v)) in params.iter().zip(&mut self.moments) {
            let Some(grad) = p.grad() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGrad { param: name.clone() });
            }
            p.update_values(|values| {
                for i in 0..values.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let m_hat = m[i] as f64 / corr1;
                    let v_hat = v[i] as f64 / corr2;
                    values[i] -= (self.lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
                }
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_auc: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

pub struct RunPaths {
    /// Full copy of the best-so-far model, rewritten on every improvement.
    pub best_checkpoint: PathBuf,
    pub history: PathBuf,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_macro_auc,wall_time_s";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != HISTORY_HEADER {
                return Err(TrainError::BadData(format!("bad history header '{line}'")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(TrainError::BadData(format!("history line {}: '{line}'", i + 1)));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| TrainError::BadData(format!("history line {}: '{s}'", i + 1)))
        };
        records.push(EpochRecord {
            epoch: parse(fields[0])? as usize,
            train_loss: parse(fields[1])?,
            val_macro_auc: parse(fields[2])?,
            wall_time_s: parse(fields[3])?,
        });
    }
    Ok(records)
}

/// Scores every clip in infer mode, `n * output_dim` flat row-major.
pub fn predict_set(
    model: &mut Model,
    features: &dyn FeatureSource,
    batch_size: usize,
) -> Result<Vec<f32>, TrainError> {
    let n = features.len();
    let mut scores = Vec::with_capacity(n * model.spec.output_dim);
    let mut i = 0;
    while i < n {
        let hi = (i + batch_size).min(n);
        let feats: Vec<FeatureMatrix> =
            (i..hi).map(|j| features.get(j)).collect::<Result<_, _>>()?;
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        scores.extend(model.predict(&refs)?);
        i = hi;
    }
    Ok(scores)
}

/// Scores a whole set in infer mode and reports per-tag and macro AUC.
pub fn evaluate_set(
    model: &mut Model,
    set: &TaggedSet,
    batch_size: usize,
) -> Result<AucReport, TrainError> {
    let scores = predict_set(model, set.features, batch_size)?;
    Ok(macro_auc(&scores, set.labels, set.n(), set.k)?)
}

/// The epoch loop: seeded shuffle, Adam on BCE, validation macro-AUC after
/// every epoch, best checkpoint kept on disk, history appended as it goes.
/// Stops at `max_epochs` or once `patience` epochs pass without a
/// validation improvement. A non-finite loss aborts the run and leaves the
/// last best checkpoint in place.
pub fn train(
    model: &mut Model,
    train_set: &TaggedSet,
    val_set: &TaggedSet,
    cfg: &TrainConfig,
    paths: &RunPaths,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    for (set, name) in [(&train_set, "train"), (&val_set, "validation")] {
        if set.k != model.spec.output_dim {
            return Err(TrainError::BadData(format!(
                "{name} labels have {} tags, model outputs {}",
                set.k, model.spec.output_dim
            )));
        }
    }

    let file = File::create(&paths.history).map_err(io_err(&paths.history))?;
    let mut history_out = BufWriter::new(file);
    writeln!(history_out, "{HISTORY_HEADER}").map_err(io_err(&paths.history))?;

    let params = model.named_params();
    let mut adam = Adam::new(cfg, &params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(u64::MAX);

    let started = Instant::now();
    let mut history = TrainHistory::default();
    let mut best_auc = f64::NEG_INFINITY;
    let mut stale_epochs = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.n()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        model.set_mode(Mode::Train);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let feats: Vec<FeatureMatrix> =
                batch.iter().map(|&j| train_set.features.get(j)).collect::<Result<_, _>>()?;
            let refs: Vec<&FeatureMatrix> = feats.iter().collect();
            let x = model.batch_input(&refs)?;
            let mut target = Vec::with_capacity(batch.len() * train_set.k);
            for &j in batch {
                target.extend_from_slice(&train_set.labels[j * train_set.k..(j + 1) * train_set.k]);
            }
            let y_true = Tensor::new(&[batch.len(), train_set.k], target)?;

            for (_, p) in &params {
                p.zero_grad();
            }
            let y = model.forward(&x, &mut dropout_rng)?;
            let loss = ops::bce(&y, &y_true)?;
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch, loss: loss_val });
            }
            backward(&loss)?;
            adam.step(&params)?;
            loss_sum += loss_val * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;

        let report = evaluate_set(model, val_set, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_macro_auc: report.macro_auc,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        writeln!(
            history_out,
            "{},{:.9},{:.9},{:.3}",
            record.epoch, record.train_loss, record.val_macro_auc, record.wall_time_s
        )
        .map_err(io_err(&paths.history))?;
        history_out.flush().map_err(io_err(&paths.history))?;
        on_epoch(&record);
        history.records.push(record);

        if report.macro_auc > best_auc {
            best_auc = report.macro_auc;
            history.best_epoch = epoch;
            history.best_val_auc = best_auc;
            save_checkpoint(model, &paths.best_checkpoint)?;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }
        if stale_epochs >= cfg.patience {
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureKind;
    use crate::model::{load_checkpoint, model_spec};
    use crate::tensor::no_grad;
    use rand::Rng;

    fn random_features(n: usize, seed: u64) -> Vec<FeatureMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FeatureMatrix {
                kind: FeatureKind::LogMel,
                band_count: 96,
                frame_count: 256,
                config_hash: 0,
                data: (0..96 * 256).map(|_| rng.gen_range(-18.0..-2.0)).collect(),
            })
            .collect()
    }

    /// Labels tied to a crude feature statistic so there is signal to learn.
    fn energy_labels(feats: &[FeatureMatrix], k: usize) -> Vec<f32> {
        let mut labels = Vec::with_capacity(feats.len() * k);
        for f in feats {
            for tag in 0..k {
                let band = tag * 96 / k;
                let mean: f32 =
                    f.band(band).iter().sum::<f32>() / f.frame_count as f32;
                labels.push(if mean > -10.0 { 1.0 } else { 0.0 });
            }
        }
        labels
    }

    #[test]
    fn bce_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 64;
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let direct = -p
            .iter()
            .zip(&y)
            .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / n as f64;
        let pred = Tensor::new(&[8, 8], p).unwrap();
        let target = Tensor::new(&[8, 8], y).unwrap();
        let loss = bce_loss(&pred, &target).unwrap().item();
        assert!((loss - direct).abs() < 1e-12, "{loss} vs {direct}");
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let cfg = TrainConfig::default();
        let p = Tensor::param(&[1], vec![0.5f32]).unwrap();
        p.accumulate_grad(&[1.0]);
        let params = vec![("w".to_string(), p.clone())];
        let mut adam = Adam::new(&cfg, &params);
        adam.step(&params).unwrap();
        // f32 moment arithmetic and value storage round at the 1e-8 scale.
        let moved = 0.5 - p.to_vec()[0] as f64;
        assert!((moved - 1e-3).abs() < 1e-7, "step {moved}");
    }

    #[test]
    fn adam_zero_grad_and_zero_lr_hold_still() {
        let cfg = TrainConfig::default();
        let p = Tensor::param(&[2], vec![0.3f32, -0.7]).unwrap();
        let params = vec![("w".to_string(), p.clone())];
        let mut adam = Adam::new(&cfg, &params);
        p.accumulate_grad(&[0.0, 0.0]);
        adam.step(&params).unwrap();
        assert_eq!(p.to_vec(), vec![0.3, -0.7]);

        let mut zero_lr = TrainConfig::default();
        zero_lr.lr = 0.0;
        assert!(matches!(zero_lr.validate(), Err(TrainError::BadConfig(_))));
        // The optimizer itself accepts lr = 0 and must not move anything.
        let mut adam = Adam { lr: 0.0, ..Adam::new(&TrainConfig::default(), &params) };
        p.zero_grad();
        p.accumulate_grad(&[5.0, -3.0]);
        adam.step(&params).unwrap();
        assert_eq!(p.to_vec(), vec![0.3, -0.7]);
    }

    #[test]
    fn adam_updates_are_odd_in_gradient() {
        let cfg = TrainConfig::default();
        let a = Tensor::param(&[1], vec![0.0f32]).unwrap();
        let b = Tensor::param(&[1], vec![0.0f32]).unwrap();
        a.accumulate_grad(&[0.37]);
        b.accumulate_grad(&[-0.37]);
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let mut adam = Adam::new(&cfg, &params);
        adam.step(&params).unwrap();
        assert_eq!(a.to_vec()[0], -b.to_vec()[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let cfg = TrainConfig::default();
        let p = Tensor::param(&[1], vec![0.5f32]).unwrap();
        p.accumulate_grad(&[f32::NAN]);
        let params = vec![("block1.conv.weight".to_string(), p)];
        let mut adam = Adam::new(&cfg, &params);
        match adam.step(&params) {
            Err(TrainError::NonFiniteGrad { param }) => {
                assert_eq!(param, "block1.conv.weight")
            }
            other => panic!("want NonFiniteGrad, got {other:?}"),
        }
    }

    #[test]
    fn loss_descends_on_a_fixed_batch() {
        let spec = model_spec("fcn4s", 4).unwrap();
        let mut model = Model::build(&spec, 21).unwrap();
        let feats = random_features(8, 50);
        let labels = energy_labels(&feats, 4);
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        let x = model.batch_input(&refs).unwrap();
        let y_true = Tensor::new(&[8, 4], labels).unwrap();

        let cfg = TrainConfig { lr: 1e-4, ..TrainConfig::default() };
        let params = model.named_params();
        let mut adam = Adam::new(&cfg, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let eval_loss = |model: &mut Model| {
            model.set_mode(Mode::Infer);
            let mut quiet = ChaCha8Rng::seed_from_u64(0);
            no_grad(|| {
                let y = model.forward(&x, &mut quiet).unwrap();
                ops::bce(&y, &y_true).unwrap().item() as f64
            })
        };

        let mut losses = vec![eval_loss(&mut model)];
        for _ in 0..5 {
            model.set_mode(Mode::Train);
            for (_, p) in &params {
                p.zero_grad();
            }
            let y = model.forward(&x, &mut rng).unwrap();
            let loss = ops::bce(&y, &y_true).unwrap();
            backward(&loss).unwrap();
            adam.step(&params).unwrap();
            losses.push(eval_loss(&mut model));
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = model_spec("fcn4s", 4).unwrap();
        let mut model = Model::build(&spec, 1).unwrap();
        let feats = MemFeatures(random_features(12, 60));
        let labels = energy_labels(&feats.0, 4);
        let vfeats = MemFeatures(random_features(6, 61));
        let vlabels = energy_labels(&vfeats.0, 4);
        let train_set = TaggedSet::new(&feats, &labels, 4).unwrap();
        let val_set = TaggedSet::new(&vfeats, &vlabels, 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 6,
            max_epochs: 30,
            patience: 0,
            ..TrainConfig::default()
        };
        let paths = RunPaths {
            best_checkpoint: dir.path().join("best.ckpt"),
            history: dir.path().join("history.csv"),
        };
        let history = train(&mut model, &train_set, &val_set, &cfg, &paths, |_| {}).unwrap();
        assert_eq!(history.records.len(), 1);
        assert_eq!(history.best_epoch, 1);
        assert!(paths.best_checkpoint.is_file());
        let rows = read_history(&paths.history).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].epoch, 1);
    }

    #[test]
    fn same_seed_same_history() {
        let dir = tempfile::tempdir().unwrap();
        let spec = model_spec("fcn4s", 4).unwrap();
        let feats = MemFeatures(random_features(16, 70));
        let labels = energy_labels(&feats.0, 4);
        let vfeats = MemFeatures(random_features(8, 71));
        let vlabels = energy_labels(&vfeats.0, 4);
        let train_set = TaggedSet::new(&feats, &labels, 4).unwrap();
        let val_set = TaggedSet::new(&vfeats, &vlabels, 4).unwrap();
        let cfg = TrainConfig { batch_size: 8, max_epochs: 3, ..TrainConfig::default() };

        let run = |tag: &str| {
            let mut model = Model::build(&spec, 9).unwrap();
            let paths = RunPaths {
                best_checkpoint: dir.path().join(format!("{tag}.ckpt")),
                history: dir.path().join(format!("{tag}.csv")),
            };
            let history = train(&mut model, &train_set, &val_set, &cfg, &paths, |_| {}).unwrap();
            (history, std::fs::read_to_string(&paths.history).unwrap())
        };
        let (ha, ta) = run("a");
        let (hb, tb) = run("b");
        let strip = |t: &str| {
            t.lines()
                .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
                .collect::<Vec<_>>()
        };
        // Wall time differs between runs; everything else must match.
        assert_eq!(strip(&ta), strip(&tb));
        let losses = |h: &TrainHistory| {
            h.records.iter().map(|r| (r.train_loss, r.val_macro_auc)).collect::<Vec<_>>()
        };
        assert_eq!(losses(&ha), losses(&hb));
        for (a, b) in ha.records.iter().zip(hb.records.iter()) {
            assert_eq!(a.epoch, b.epoch);
        }
        for w in ha.records.windows(2) {
            assert!(w[1].epoch > w[0].epoch);
        }
    }

    #[test]
    fn validation_is_repeatable_and_checkpoint_faithful() {
        let dir = tempfile::tempdir().unwrap();
        let spec = model_spec("fcn4s", 4).unwrap();
        let mut model = Model::build(&spec, 2).unwrap();
        let feats = MemFeatures(random_features(10, 80));
        let labels = energy_labels(&feats.0, 4);
        let vfeats = MemFeatures(random_features(6, 81));
        let vlabels = energy_labels(&vfeats.0, 4);
        let train_set = TaggedSet::new(&feats, &labels, 4).unwrap();
        let val_set = TaggedSet::new(&vfeats, &vlabels, 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 5,
            max_epochs: 2,
            patience: 5,
            ..TrainConfig::default()
        };
        let paths = RunPaths {
            best_checkpoint: dir.path().join("best.ckpt"),
            history: dir.path().join("history.csv"),
        };
        let history = train(&mut model, &train_set, &val_set, &cfg, &paths, |_| {}).unwrap();

        let a = evaluate_set(&mut model, &val_set, 5).unwrap();
        let b = evaluate_set(&mut model, &val_set, 5).unwrap();
        assert_eq!(a.macro_auc, b.macro_auc);
        assert_eq!(a.per_tag, b.per_tag);

        // The stored best checkpoint reproduces its recorded validation AUC.
        let mut best = load_checkpoint(&paths.best_checkpoint).unwrap();
        let replayed = evaluate_set(&mut best, &val_set, 5).unwrap();
        assert_eq!(replayed.macro_auc, history.best_val_auc);
    }

    #[test]
    fn label_dimension_must_match_model() {
        let dir = tempfile::tempdir().unwrap();
        let spec = model_spec("fcn4s", 8).unwrap();
        let mut model = Model::build(&spec, 1).unwrap();
        let feats = MemFeatures(random_features(4, 90));
        let labels = energy_labels(&feats.0, 4);
        let set = TaggedSet::new(&feats, &labels, 4).unwrap();
        let cfg = TrainConfig { batch_size: 2, max_epochs: 1, ..TrainConfig::default() };
        let paths = RunPaths {
            best_checkpoint: dir.path().join("best.ckpt"),
            history: dir.path().join("history.csv"),
        };
        assert!(matches!(
            train(&mut model, &set, &set, &cfg, &paths, |_| {}),
            Err(TrainError::BadData(_))
        ));
    }
}
