//! Caption vocabulary and the recurrent caption encoder that produces φ_t.

use std::collections::HashMap;

use diffcomp::{Adam, AdamConfig, Bound, Embedding, GruCell, Linear, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::Captioner;
use crate::dataset::{Dataset, TokenBatch};
use crate::error::{Error, Result};
use crate::train_util::{batches, check_finite, epoch_order};

pub const PAD: usize = 0;
pub const END: usize = 1;

const STANDARD_TOKENS: [&str; 21] = [
    "<pad>", "<end>", "a", "small", "large", "red", "green", "blue", "yellow", "cyan", "magenta", "white", "black",
    "circle", "square", "triangle", "above", "below", "left", "right", "of",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn standard() -> Self {
        Self::from_tokens(STANDARD_TOKENS.iter().map(|s| s.to_string()).collect()).expect("standard vocabulary")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != "<pad>" || tokens[END] != "<end>" {
            return Err(Error::Vocab("ids 0 and 1 must be <pad> and <end>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown word `{word}`")))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace-separated words, lowercased, with the end token appended.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = text
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Vocab("empty caption".into()));
        }
        ids.push(END);
        Ok(ids)
    }

    /// Words up to the first end token, skipping padding.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&t| t != END)
            .filter(|&&t| t != PAD)
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub embed_dim: usize,
}

impl Default for TextEncConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            lr: 2e-3,
            embed_dim: 32,
        }
    }
}

/// Token embedding, one gated recurrent cell, and a projection onto the
/// captioner code space used only while pretraining.
#[derive(Clone, Debug)]
pub struct TextEncoderNet {
    pub embed: Embedding,
    pub gru: GruCell,
    pub proj: Linear,
}

impl TextEncoderNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab: usize,
        embed_dim: usize,
        dim: usize,
        code_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            embed: Embedding::new(store, "text.embed", vocab, embed_dim, rng),
            gru: GruCell::new(store, "text.gru", embed_dim, dim, rng),
            proj: Linear::new(store, "text.proj", dim, code_dim, true, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.gru.hidden
    }

    /// φ_t for every caption: the hidden state after the end token. Later
    /// positions leave a row's state untouched.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, captions: &TokenBatch) -> Result<Var<'t, T>> {
        if captions.rows == 0 || captions.lengths.contains(&0) {
            return Err(Error::Vocab("empty caption".into()));
        }
        if let Some(&bad) = captions.ids.iter().find(|&&t| t >= self.embed.vocab) {
            return Err(Error::Vocab(format!("token id {bad} outside the vocabulary")));
        }
        let tape = p.tape();
        let n = captions.rows;
        let mut h = tape.constant(Tensor::zeros(&[n, self.dim()]));
        let steps = captions.lengths.iter().copied().max().unwrap_or(0);
        for t in 0..steps {
            let x = self.embed.forward(p, &captions.column(t))?;
            let next = self.gru.forward(p, x, h)?;
            if captions.lengths.iter().all(|&l| l > t) {
                h = next;
            } else {
                let mask: Vec<T> = captions
                    .lengths
                    .iter()
                    .map(|&l| if l > t { T::one() } else { T::zero() })
                    .collect();
                let mask = tape.constant(Tensor::new(&[n, 1], mask)?);
                h = h.add(mask.mul(next.sub(h)?)?)?;
            }
        }
        Ok(h)
    }

    pub fn project<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, phi: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.proj.forward(p, phi)?)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub store: ParamStore<f32>,
    pub net: TextEncoderNet,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(vocab: usize, embed_dim: usize, dim: usize, code_dim: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let net = TextEncoderNet::new(&mut store, vocab, embed_dim, dim, code_dim, rng);
        Self { store, net }
    }

    /// `N×D_t` embeddings, outside any training graph.
    pub fn encode(&self, captions: &TokenBatch) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        Ok(self.net.forward(&p, captions)?.value())
    }

    pub fn encode_tokens(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let phi = self.encode(&TokenBatch::from_sequences(&[tokens]))?;
        Ok(phi.reshape(&[self.net.dim()])?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_top1: f64,
    pub heldout_pairs: usize,
}

/// Fits the encoder so that `proj(φ_t)` regresses the frozen captioner code
/// of the paired image.
pub fn pretrain_text_encoder(
    data: &Dataset,
    train: &[usize],
    heldout: &[usize],
    captioner: Option<&Captioner>,
    encoder: &mut TextEncoder,
    config: &TextEncConfig,
    shuffle_seed: u64,
) -> Result<TextEncReport> {
    let captioner = captioner.ok_or_else(|| Error::Missing("trained captioner encoder".into()))?;
    if captioner.epochs_trained == 0 {
        return Err(Error::Missing("captioner encoder has not been trained".into()));
    }
    let codes = captioner.encode_images(&data.images_at(train, data.resolution())?)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &encoder.store,
    );
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = epoch_order(shuffle_seed, epoch as u64, train.len());
        let (mut total, mut count) = (0.0, 0usize);
        for rows in batches(&order, config.batch_size) {
            let idx: Vec<usize> = rows.iter().map(|&r| train[r]).collect();
            let target = codes.select_rows(rows)?;
            let tape = Tape::new();
            let p = encoder.store.bind(&tape, true);
            let phi = encoder.net.forward(&p, &data.captions(&idx))?;
            let loss = encoder.net.project(&p, phi)?.mse(tape.constant(target))?;
            let value = loss.item()? as f64;
            check_finite(value, step, "text encoder loss")?;
            let grads = tape.backward(loss)?;
            drop(p);
            encoder.store.accumulate_grads(&grads);
            adam.step(&mut encoder.store)?;
            total += value * rows.len() as f64;
            count += rows.len();
            step += 1;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }
    let heldout_top1 = retrieval_top1(data, heldout, captioner, encoder)?;
    Ok(TextEncReport {
        epoch_losses,
        heldout_top1,
        heldout_pairs: heldout.len(),
    })
}

/// Fraction of captions whose projected embedding is nearest to its own
/// image's captioner code among all listed images.
pub fn retrieval_top1(data: &Dataset, indices: &[usize], captioner: &Captioner, encoder: &TextEncoder) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Invalid("retrieval needs at least one pair".into()));
    }
    let codes = captioner.encode_images(&data.images_at(indices, data.resolution())?)?;
    let tape = Tape::new();
    let p = encoder.store.bind(&tape, false);
    let phi = encoder.net.forward(&p, &data.captions(indices))?;
    let proj = encoder.net.project(&p, phi)?.value();
    let d = codes.shape()[1];
    let mut hits = 0;
    for i in 0..indices.len() {
        let q = &proj.data()[i * d..(i + 1) * d];
        let best = (0..indices.len())
            .map(|j| {
                let c = &codes.data()[j * d..(j + 1) * d];
                let dist: f64 = q.iter().zip(c).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                (j, dist)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j);
        hits += usize::from(best == Some(i));
    }
    Ok(hits as f64 / indices.len() as f64)
}
