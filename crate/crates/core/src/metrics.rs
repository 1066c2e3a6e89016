//! Inception-score analogue over a small classifier trained on the shapes
//! dataset, and the perceptual distance between real and generated images.

use diffcomp::{Adam, AdamConfig, BatchNorm2d, BnMode, Bound, Conv2d, Linear, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{captioner_loss, cosine_lr, PerceptualEncoder};
use crate::dataset::{Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::train_util::{argmax_rows, batches, check_finite, epoch_order};

/// Lower clamp on class probabilities inside the score's logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_SPLITS: usize = 10;
pub const SCORE_NOTE: &str =
    "scores come from a classifier trained on the synthetic shapes dataset; only relative comparisons within this artifact are meaningful";
const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Last-epoch learning rate as a fraction of `lr`, reached by half-cosine decay.
    pub final_lr_fraction: f64,
    pub widths: [usize; 3],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            final_lr_fraction: 0.05,
            widths: [32, 64, 128],
        }
    }
}

/// Three stride-2 conv blocks, global average pooling, affine to 24 logits.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    pub blocks: Vec<(Conv2d, BatchNorm2d)>,
    pub fc: Linear,
    pub resolution: usize,
}

impl ClassifierNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        resolution: usize,
        widths: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        if resolution < 8 || resolution % 8 != 0 {
            return Err(Error::Config(format!(
                "classifier needs a resolution divisible by 8, got {resolution}"
            )));
        }
        let mut blocks = Vec::with_capacity(3);
        let mut ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push((
                Conv2d::new(store, &format!("cls.conv{i}"), ch, w, 4, 2, 1, false, rng),
                BatchNorm2d::new(store, &format!("cls.bn{i}"), w),
            ));
            ch = w;
        }
        let fc = Linear::new(store, "cls.fc", ch, NUM_CLASSES, true, rng);
        Ok(Self { blocks, fc, resolution })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, images: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>> {
        let r = self.resolution;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [3, r, r] {
            return Err(Error::Invalid(format!("classifier expects N×3×{r}×{r}, got {shape:?}")));
        }
        let mut x = images;
        for (conv, bn) in &self.blocks {
            x = bn.forward(p, conv.forward(p, x)?, mode)?.relu()?;
        }
        let pooled = x.avg_downsample(r / 8)?.flatten()?;
        Ok(self.fc.forward(p, pooled)?)
    }
}

/// Block-mean downsampling of `N×3×R×R` images to `target`.
pub fn fit_resolution(images: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let r = images.shape()[2];
    if r == target {
        return Ok(images.clone());
    }
    if r < target || r % target != 0 {
        return Err(Error::Invalid(format!("cannot bring {r}×{r} images to {target}×{target}")));
    }
    let tape = Tape::new();
    Ok(tape.constant(images.clone()).avg_downsample(r / target)?.value())
}

pub fn softmax_rows(logits: &[f32], cols: usize) -> Vec<Vec<f64>> {
    logits
        .chunks_exact(cols)
        .map(|row| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub store: ParamStore<f32>,
    pub net: ClassifierNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub heldout_accuracy: Vec<f64>,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(config: &ClassifierConfig, resolution: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = ClassifierNet::new(&mut store, resolution, config.widths, rng)?;
        Ok(Self { store, net })
    }

    /// Class posteriors for each image, at any resolution that is a
    /// multiple of the classifier's.
    pub fn probs(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let images = fit_resolution(images, self.net.resolution)?;
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = INFER_CHUNK.min(n - start);
            let tape = Tape::new();
            let p = self.store.bind(&tape, false);
            let logits = self
                .net
                .forward(&p, tape.constant(images.slice_rows(start, len)?), BnMode::Eval)?
                .value();
            out.extend(softmax_rows(logits.data(), NUM_CLASSES));
            start += len;
        }
        Ok(out)
    }

    /// Held-out accuracy and mean cross-entropy.
    pub fn evaluate(&self, data: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
        let (mut correct, mut loss_sum) = (0usize, 0.0);
        for chunk in indices.chunks(INFER_CHUNK) {
            let tape = Tape::new();
            let p = self.store.bind(&tape, false);
            let images = tape.constant(data.images_at(chunk, self.net.resolution)?);
            let logits = self.net.forward(&p, images, BnMode::Eval)?;
            let labels = data.labels(chunk);
            loss_sum += logits.cross_entropy(&labels, None)?.item()? as f64 * chunk.len() as f64;
            let pred = argmax_rows(logits.value().data(), NUM_CLASSES);
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let n = indices.len().max(1) as f64;
        Ok((correct as f64 / n, loss_sum / n))
    }

    pub fn train(
        &mut self,
        data: &Dataset,
        train: &[usize],
        heldout: &[usize],
        config: &ClassifierConfig,
        shuffle_seed: u64,
    ) -> Result<ClassifierReport> {
        let initial_loss = self.evaluate(data, train)?.1;
        let mut adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &self.store,
        );
        let mut report = ClassifierReport {
            initial_loss,
            epoch_losses: Vec::new(),
            heldout_accuracy: Vec::new(),
        };
        let mut step = 0u64;
        for epoch in 0..config.epochs {
            adam.config.lr = cosine_lr(config.lr, config.final_lr_fraction, epoch, config.epochs);
            let order = epoch_order(shuffle_seed, epoch as u64, train.len());
            let (mut total, mut seen) = (0.0, 0usize);
            for rows in batches(&order, config.batch_size) {
                let idx: Vec<usize> = rows.iter().map(|&r| train[r]).collect();
                let tape = Tape::new();
                let p = self.store.bind(&tape, true);
                let images = tape.constant(data.images_at(&idx, self.net.resolution)?);
                let loss = self.net.forward(&p, images, BnMode::Train)?.cross_entropy(&data.labels(&idx), None)?;
                let value = loss.item()? as f64;
                check_finite(value, step, "classifier loss")?;
                let grads = tape.backward(loss)?;
                let updates = p.into_updates();
                self.store.accumulate_grads(&grads);
                self.store.apply_updates(updates)?;
                adam.step(&mut self.store)?;
                total += value;
                seen += 1;
                step += 1;
            }
            report.epoch_losses.push(total / seen.max(1) as f64);
            if !heldout.is_empty() {
                report.heldout_accuracy.push(self.evaluate(data, heldout)?.0);
            }
        }
        Ok(report)
    }
}

/// `exp(mean_x KL(p(y|x) ‖ p̄(y)))` per contiguous split; mean and
/// population standard deviation across splits.
pub fn inception_score(probs: &[Vec<f64>], n_splits: usize) -> Result<(f64, f64)> {
    if n_splits == 0 {
        return Err(Error::Invalid("inception score needs at least one split".into()));
    }
    if probs.len() < n_splits {
        return Err(Error::Invalid(format!(
            "{} images cannot fill {n_splits} splits",
            probs.len()
        )));
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..n_splits)
        .map(|s| {
            let part = &probs[s * n / n_splits..(s + 1) * n / n_splits];
            let classes = part[0].len();
            let mut marginal = vec![0.0; classes];
            for p in part {
                for (m, &v) in marginal.iter_mut().zip(p) {
                    *m += v / part.len() as f64;
                }
            }
            let mean_kl: f64 = part
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .map(|(&pi, &mi)| {
                            let pi = pi.max(PROB_FLOOR);
                            pi * (pi.ln() - mi.max(PROB_FLOOR).ln())
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            // KL is non-negative; clip rounding below zero
            mean_kl.max(0.0).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}

/// The captioner loss evaluated outside training.
pub fn perceptual_distance<T: Scalar>(
    real: &Tensor<T>,
    generated: &Tensor<T>,
    e0: &impl PerceptualEncoder<T>,
) -> Result<f64> {
    let tape = Tape::new();
    Ok(captioner_loss(e0, real, tape.constant(generated.clone()))?.item()?.as_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub inception_mean: f64,
    pub inception_std: f64,
    pub splits: usize,
    pub samples: usize,
    pub perceptual_distance: f64,
    pub config_digests: Vec<String>,
    pub note: String,
}
