//! Scoring generated (or real) held-out images.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::generate::TextToImage;
use crate::captioner::Captioner;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{fit_resolution, inception_score, perceptual_distance, Classifier, ScoreReport, SCORE_NOTE};

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub seed: u64,
    /// Score the real held-out images instead of generating.
    pub skip_generation: bool,
}

/// Inception score and perceptual distance over the first
/// `cfg.eval_samples` held-out captions. `model` may be `None` only when
/// generation is skipped. The report is written to `out` when given.
#[allow(clippy::too_many_arguments)]
pub fn run_evaluate(
    cfg: &TrainConfig,
    data: &Dataset,
    model: Option<&TextToImage>,
    classifier: (&Classifier, &str),
    captioner: (&Captioner, &str),
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<ScoreReport> {
    let (_, heldout) = data.split(cfg.holdout);
    if heldout.len() < cfg.eval_samples || cfg.eval_samples == 0 {
        return Err(Error::Invalid(format!(
            "insufficient held-out captions: {} requested, {} available",
            cfg.eval_samples,
            heldout.len()
        )));
    }
    let idx = &heldout[..cfg.eval_samples];
    let (cap, cap_digest) = captioner;
    let (clf, clf_digest) = classifier;
    let mut digests = Vec::new();
    let images = if opts.skip_generation {
        data.images_at(idx, data.resolution())?
    } else {
        let model = model.ok_or_else(|| Error::Missing("stage checkpoints for generation".into()))?;
        digests.extend(model.digests());
        let phi = model.textenc.encode(&data.captions(idx))?;
        model.chain.sample(&phi, &mut ChaCha8Rng::seed_from_u64(opts.seed))?
    };
    digests.push(cap_digest.to_string());
    digests.push(clf_digest.to_string());
    let (inception_mean, inception_std) = inception_score(&clf.probs(&images)?, cfg.eval_splits)?;
    let res = cap.encoder.resolution;
    let real = data.images_at(idx, res)?;
    let distance = perceptual_distance(&real, &fit_resolution(&images, res)?, &cap.frozen())?;
    let report = ScoreReport {
        inception_mean,
        inception_std,
        splits: cfg.eval_splits,
        samples: idx.len(),
        perceptual_distance: distance,
        config_digests: digests,
        note: SCORE_NOTE.to_string(),
    };
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}
