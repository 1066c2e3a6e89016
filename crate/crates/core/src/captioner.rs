//! Image captioner: convolutional encoder E₀ onto a 256-d perceptual code
//! and a recurrent decoder D₀ back to caption tokens.

use diffcomp::{
    Adam, AdamConfig, BatchNorm2d, BnMode, Bound, Conv2d, Embedding, GruCell, Linear, ParamStore, Scalar, Tape,
    Tensor, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TokenBatch};
use crate::error::{Error, Result};
use crate::textenc::{END, PAD};
use crate::train_util::{argmax_rows, batches, check_finite, epoch_order};

pub const CODE_DIM: usize = 256;
pub const MAX_DECODE_LEN: usize = 12;
const LEAK: f64 = 0.2;
/// Rows per forward pass when encoding outside training.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the last epoch as a fraction of `lr`; the rate
    /// follows a half cosine between the two.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub widths: [usize; 4],
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 32,
            lr: 1e-3,
            final_lr_fraction: 0.05,
            beta1: 0.5,
            widths: [32, 64, 128, 128],
            embed_dim: 32,
            hidden: 128,
        }
    }
}

/// E₀: four stride-2 conv blocks, then an affine map to the code.
#[derive(Clone, Debug)]
pub struct ImageEncoderNet {
    pub blocks: Vec<(Conv2d, BatchNorm2d)>,
    pub fc: Linear,
    pub resolution: usize,
}

impl ImageEncoderNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        resolution: usize,
        widths: [usize; 4],
        rng: &mut R,
    ) -> Result<Self> {
        if resolution < 16 || resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "captioner encoder needs a resolution divisible by 16, got {resolution}"
            )));
        }
        let mut blocks = Vec::with_capacity(4);
        let mut ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("e0.conv{i}");
            blocks.push((
                Conv2d::new(store, &name, ch, w, 4, 2, 1, false, rng),
                BatchNorm2d::new(store, &format!("e0.bn{i}"), w),
            ));
            ch = w;
        }
        let side = resolution / 16;
        let fc = Linear::new(store, "e0.fc", ch * side * side, CODE_DIM, true, rng);
        Ok(Self { blocks, fc, resolution })
    }

    /// `N×3×R×R` images to `N×256` codes.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, images: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>> {
        let r = self.resolution;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [3, r, r] {
            return Err(Error::Invalid(format!("captioner encoder expects N×3×{r}×{r}, got {shape:?}")));
        }
        let mut x = images;
        for (conv, bn) in &self.blocks {
            x = bn.forward(p, conv.forward(p, x)?, mode)?.leaky_relu(LEAK)?;
        }
        Ok(self.fc.forward(p, x.flatten()?)?)
    }
}

/// D₀: an affine map of the code as the initial state of a gated recurrent cell
/// over token embeddings, with an affine read-out to vocabulary logits.
#[derive(Clone, Debug)]
pub struct CaptionDecoderNet {
    pub init: Linear,
    pub embed: Embedding,
    pub gru: GruCell,
    pub out: Linear,
}

impl CaptionDecoderNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            init: Linear::new(store, "d0.init", CODE_DIM, hidden, true, rng),
            embed: Embedding::new(store, "d0.embed", vocab, embed_dim, rng),
            gru: GruCell::new(store, "d0.gru", embed_dim, hidden, rng),
            out: Linear::new(store, "d0.out", hidden, vocab, true, rng),
        }
    }

    /// Teacher-forced logits, time-major `(width·N)×|V|`. The end token is
    /// also the start symbol.
    pub fn logits<'t, T: Scalar>(
        &self,
        p: &Bound<'_, 't, T>,
        codes: Var<'t, T>,
        captions: &TokenBatch,
    ) -> Result<Var<'t, T>> {
        let mut h = self.init.forward(p, codes)?;
        let mut states = Vec::with_capacity(captions.width);
        for t in 0..captions.width {
            let inputs = if t == 0 {
                vec![END; captions.rows]
            } else {
                captions.column(t - 1)
            };
            h = self.gru.forward(p, self.embed.forward(p, &inputs)?, h)?;
            states.push(h);
        }
        let all = Var::concat(&states, 0)?;
        Ok(self.out.forward(p, all)?)
    }

    /// Time-major targets matching [`CaptionDecoderNet::logits`].
    pub fn targets(captions: &TokenBatch) -> Vec<usize> {
        (0..captions.width).flat_map(|t| captions.column(t)).collect()
    }

    /// Greedy decoding of one code (`1×256`) until the end token or
    /// [`MAX_DECODE_LEN`] tokens.
    pub fn greedy<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, code: Var<'t, T>) -> Result<Vec<usize>> {
        let mut h = self.init.forward(p, code)?;
        let mut prev = END;
        let mut out = Vec::new();
        while out.len() < MAX_DECODE_LEN {
            h = self.gru.forward(p, self.embed.forward(p, &[prev])?, h)?;
            let logits = self.out.forward(p, h)?.value();
            let scores: Vec<f32> = logits.data().iter().map(|v| v.as_f64() as f32).collect();
            prev = argmax_rows(&scores, scores.len())[0];
            out.push(prev);
            if prev == END {
                break;
            }
        }
        Ok(out)
    }
}

/// Anything that maps images to perceptual codes on a tape.
pub trait PerceptualEncoder<T: Scalar> {
    fn encode<'t>(&self, tape: &'t Tape<T>, images: Var<'t, T>) -> Result<Var<'t, T>>;
}

/// E₀ bound as constants with running batch-norm statistics, so gradients
/// reach the images but never the encoder.
pub struct FrozenEncoder<'a, T> {
    pub net: &'a ImageEncoderNet,
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> PerceptualEncoder<T> for FrozenEncoder<'_, T> {
    fn encode<'t>(&self, tape: &'t Tape<T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let p = self.store.bind(tape, false);
        self.net.forward(&p, images, BnMode::Eval)
    }
}

/// Mean over batch and code dimensions of `(E₀(real) − E₀(fake))²`.
/// Only `fake` can carry gradient.
pub fn captioner_loss<'t, T: Scalar>(
    e0: &impl PerceptualEncoder<T>,
    real: &Tensor<T>,
    fake: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let tape = fake.tape();
    let real_codes = e0.encode(tape, tape.constant(real.clone()))?.value();
    captioner_loss_from_codes(&real_codes, e0.encode(tape, fake)?)
}

/// [`captioner_loss`] with the real codes already computed.
pub fn captioner_loss_from_codes<'t, T: Scalar>(real_codes: &Tensor<T>, fake_codes: Var<'t, T>) -> Result<Var<'t, T>> {
    if real_codes.shape() != fake_codes.shape().as_slice() {
        return Err(Error::Invalid(format!(
            "captioner loss batch mismatch: real {:?}, generated {:?}",
            real_codes.shape(),
            fake_codes.shape()
        )));
    }
    let tape = fake_codes.tape();
    Ok(fake_codes.mse(tape.constant(real_codes.clone()))?)
}

/// Half-cosine decay from `lr` at the first epoch to `lr·floor` at the last.
pub fn cosine_lr(lr: f64, floor: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs < 2 {
        return lr;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub store: ParamStore<f32>,
    pub encoder: ImageEncoderNet,
    pub decoder: CaptionDecoderNet,
    pub epochs_trained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub heldout_accuracy: Vec<f64>,
}

impl Captioner {
    pub fn new<R: Rng + ?Sized>(config: &CaptionerConfig, vocab: usize, resolution: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = ImageEncoderNet::new(&mut store, resolution, config.widths, rng)?;
        let decoder = CaptionDecoderNet::new(&mut store, vocab, config.embed_dim, config.hidden, rng);
        Ok(Self {
            store,
            encoder,
            decoder,
            epochs_trained: 0,
        })
    }

    pub fn frozen(&self) -> FrozenEncoder<'_, f32> {
        FrozenEncoder {
            net: &self.encoder,
            store: &self.store,
        }
    }

    /// Codes for `N×3×R×R` images with running statistics, no gradient.
    pub fn encode_images(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = INFER_CHUNK.min(n - start);
            let tape = Tape::new();
            let x = tape.constant(images.slice_rows(start, len)?);
            parts.push(self.frozen().encode(&tape, x)?.value());
            start += len;
        }
        Ok(Tensor::stack_rows(&parts)?)
    }

    /// Mean cross-entropy per non-padding token plus `(correct, counted)`.
    fn teacher_forced<'t>(
        &self,
        p: &Bound<'_, 't, f32>,
        images: &Tensor<f32>,
        captions: &TokenBatch,
        mode: BnMode,
    ) -> Result<(Var<'t, f32>, usize, usize)> {
        let tape = p.tape();
        let codes = self.encoder.forward(p, tape.constant(images.clone()), mode)?;
        let logits = self.decoder.logits(p, codes, captions)?;
        let targets = CaptionDecoderNet::targets(captions);
        let loss = logits.cross_entropy(&targets, Some(PAD))?;
        let value = logits.value();
        let pred = argmax_rows(value.data(), value.shape()[1]);
        let counted = targets.iter().filter(|&&t| t != PAD).count();
        let correct = pred.iter().zip(&targets).filter(|(p, t)| **t != PAD && p == t).count();
        Ok((loss, correct, counted))
    }

    /// Teacher-forced token accuracy and mean loss over `indices`.
    pub fn evaluate(&self, data: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
        let (mut correct, mut counted, mut loss_sum) = (0usize, 0usize, 0.0);
        for chunk in indices.chunks(INFER_CHUNK) {
            let tape = Tape::new();
            let p = self.store.bind(&tape, false);
            let images = data.images_at(chunk, self.encoder.resolution)?;
            let (loss, c, n) = self.teacher_forced(&p, &images, &data.captions(chunk), BnMode::Eval)?;
            loss_sum += loss.item()? as f64 * n as f64;
            correct += c;
            counted += n;
        }
        let counted = counted.max(1) as f64;
        Ok((correct as f64 / counted, loss_sum / counted))
    }

    /// Greedy caption for one `3×R×R` image.
    pub fn caption_image(&self, image: &Tensor<f32>) -> Result<Vec<usize>> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let code = self.encode_images(&image.reshape(&shape)?)?;
        self.decode(&code)
    }

    /// Greedy decoding of a single code (`256` or `1×256`).
    pub fn decode(&self, code: &Tensor<f32>) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        self.decoder.greedy(&p, tape.constant(code.reshape(&[1, CODE_DIM])?))
    }

    /// Teacher-forced cross-entropy training of E₀ and D₀ together.
    pub fn train(
        &mut self,
        data: &Dataset,
        train: &[usize],
        heldout: &[usize],
        config: &CaptionerConfig,
        shuffle_seed: u64,
    ) -> Result<CaptionerReport> {
        let initial_loss = self.evaluate(data, train)?.1;
        let mut adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                beta1: config.beta1,
                ..AdamConfig::default()
            },
            &self.store,
        );
        let mut report = CaptionerReport {
            initial_loss,
            epoch_losses: Vec::new(),
            heldout_accuracy: Vec::new(),
        };
        let mut step = 0u64;
        for epoch in 0..config.epochs {
            adam.config.lr = cosine_lr(config.lr, config.final_lr_fraction, epoch, config.epochs);
            let order = epoch_order(shuffle_seed, epoch as u64, train.len());
            let (mut total, mut batches_seen) = (0.0, 0usize);
            for rows in batches(&order, config.batch_size) {
                let idx: Vec<usize> = rows.iter().map(|&r| train[r]).collect();
                let images = data.images_at(&idx, self.encoder.resolution)?;
                let tape = Tape::new();
                let p = self.store.bind(&tape, true);
                let (loss, _, _) = self.teacher_forced(&p, &images, &data.captions(&idx), BnMode::Train)?;
                let value = loss.item()? as f64;
                check_finite(value, step, "captioner loss")?;
                let grads = tape.backward(loss)?;
                let updates = p.into_updates();
                self.store.accumulate_grads(&grads);
                self.store.apply_updates(updates)?;
                adam.step(&mut self.store)?;
                total += value;
                batches_seen += 1;
                step += 1;
            }
            self.epochs_trained += 1;
            report.epoch_losses.push(total / batches_seen.max(1) as f64);
            if !heldout.is_empty() {
                report.heldout_accuracy.push(self.evaluate(data, heldout)?.0);
            }
        }
        Ok(report)
    }
}
