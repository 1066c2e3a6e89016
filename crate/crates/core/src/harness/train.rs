//! Training entry points: the pretrained components and the GAN stages.

use std::path::{Path, PathBuf};

use diffcomp::{Adam, BnMode, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use super::config::TrainConfig;
use super::generate::StageChain;
use super::lock::OutputLock;
use super::runlog::{RunLog, RunLogHeader, StepRecord};
use crate::captioner::{Captioner, CaptionerReport, CODE_DIM};
use crate::condaug::{kl_to_standard_normal, sample_eps};
use crate::dataset::{Dataset, MANIFEST};
use crate::error::{Error, Result};
use crate::metrics::{Classifier, ClassifierReport};
use crate::stages::{
    captioner_weight, d_loss, refine_g_loss, stage1_g_loss, GLossWeights, RealRef, RefineStage, Stage1,
};
use crate::textenc::{pretrain_text_encoder, TextEncReport, TextEncoder, Vocab};
use crate::train_util::{batches, check_finite, epoch_order};

/// Run-level options that are not part of the experiment record.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps, checkpointing the partial state.
    pub max_steps: Option<u64>,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRun {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub epochs_completed: u64,
}

pub fn open_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    if !cfg.dataset.join(MANIFEST).is_file() {
        return Err(Error::Missing(format!("dataset at {}", cfg.dataset.display())));
    }
    Dataset::open(&cfg.dataset)
}

fn load_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Missing(format!("{kind} checkpoint {}", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(kind, path)?;
    Ok(ckpt)
}

fn meta(kind: &str, stage: u8, cfg: &TrainConfig, model: serde_json::Value) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        kind: kind.into(),
        stage,
        epoch: 0,
        batch_in_epoch: 0,
        step: 0,
        config: cfg.clone(),
        config_digest: cfg.digest()?,
        rng: None,
        metrics: serde_json::Value::Null,
        model,
    })
}

/// Parameters are overwritten on load, so the init stream is irrelevant.
fn scratch_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn load_captioner(path: &Path) -> Result<(Captioner, String)> {
    let ckpt = load_kind(path, "captioner")?;
    let mut cap = Captioner::new(
        &ckpt.meta.config.captioner,
        ckpt.model_usize("vocab")?,
        ckpt.model_usize("resolution")?,
        &mut scratch_rng(),
    )?;
    ckpt.load_store("", &mut cap.store)?;
    cap.epochs_trained = ckpt.meta.epoch as usize;
    Ok((cap, ckpt.meta.config_digest))
}

pub fn load_textenc(path: &Path) -> Result<(TextEncoder, Vocab, String)> {
    let ckpt = load_kind(path, "textenc")?;
    let tokens: Vec<String> = serde_json::from_value(ckpt.meta.model.get("tokens").cloned().unwrap_or_default())
        .map_err(|e| Error::format(path, format!("vocabulary: {e}")))?;
    let vocab = Vocab::from_tokens(tokens)?;
    let mut enc = TextEncoder::new(
        vocab.len(),
        ckpt.model_usize("embed_dim")?,
        ckpt.model_usize("dim")?,
        ckpt.model_usize("code_dim")?,
        &mut scratch_rng(),
    );
    ckpt.load_store("", &mut enc.store)?;
    Ok((enc, vocab, ckpt.meta.config_digest))
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, String)> {
    let ckpt = load_kind(path, "classifier")?;
    let mut clf = Classifier::new(&ckpt.meta.config.classifier, ckpt.model_usize("resolution")?, &mut scratch_rng())?;
    ckpt.load_store("", &mut clf.store)?;
    Ok((clf, ckpt.meta.config_digest))
}

pub fn load_stage1(path: &Path) -> Result<(Stage1, String)> {
    let ckpt = load_kind(path, "stage1")?;
    let mut s = Stage1::new(&ckpt.meta.config.arch, ckpt.model_usize("resolution")?, &mut scratch_rng())?;
    ckpt.load_store("g.", &mut s.g)?;
    ckpt.load_store("d.", &mut s.d)?;
    Ok((s, ckpt.meta.config_digest))
}

pub fn load_refine(path: &Path) -> Result<(RefineStage, String)> {
    if !path.is_file() {
        return Err(Error::Missing(format!("stage checkpoint {}", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let stage = ckpt.meta.stage;
    if !(2..=3).contains(&stage) {
        return Err(Error::format(path, format!("expected a refinement stage, found stage {stage}")));
    }
    ckpt.expect_kind(&format!("stage{stage}"), path)?;
    let mut s = RefineStage::new(stage, &ckpt.meta.config.arch, ckpt.model_usize("in_res")?, &mut scratch_rng())?;
    ckpt.load_store("g.", &mut s.g)?;
    ckpt.load_store("d.", &mut s.d)?;
    Ok((s, ckpt.meta.config_digest))
}

fn split(cfg: &TrainConfig, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let (train, heldout) = data.split(cfg.holdout);
    if train.len() < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "{} training samples cannot fill a batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    Ok((train, heldout))
}

/// Trains E₀ and its decoder; writes `captioner.pgan` under `out_dir`.
pub fn run_train_captioner(cfg: &TrainConfig, out_dir: &Path) -> Result<(PathBuf, CaptionerReport)> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out_dir)?;
    let data = open_dataset(cfg)?;
    let (train, heldout) = data.split(cfg.holdout);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut cap = Captioner::new(&cfg.captioner, data.vocab.len(), cfg.resolution, &mut rng)?;
    let report = cap.train(&data, &train, &heldout, &cfg.captioner, cfg.train_seed)?;
    let mut ckpt = Checkpoint::new(meta(
        "captioner",
        0,
        cfg,
        json!({ "vocab": data.vocab.len(), "resolution": cfg.resolution }),
    )?);
    ckpt.meta.epoch = cap.epochs_trained as u64;
    ckpt.meta.metrics = serde_json::to_value(&report)?;
    ckpt.put_store("", &cap.store);
    let path = out_dir.join("captioner.pgan");
    ckpt.save(&path)?;
    Ok((path, report))
}

/// Pretrains the text encoder against the frozen captioner codes; writes
/// `textenc.pgan`.
pub fn run_train_textenc(cfg: &TrainConfig, out_dir: &Path) -> Result<(PathBuf, TextEncReport)> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out_dir)?;
    let data = open_dataset(cfg)?;
    let (captioner, cap_digest) = load_captioner(&cfg.captioner_checkpoint)?;
    let (train, heldout) = data.split(cfg.holdout);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut enc = TextEncoder::new(data.vocab.len(), cfg.textenc.embed_dim, cfg.arch.dt, CODE_DIM, &mut rng);
    let report = pretrain_text_encoder(
        &data,
        &train,
        &heldout,
        Some(&captioner),
        &mut enc,
        &cfg.textenc,
        cfg.train_seed,
    )?;
    let mut ckpt = Checkpoint::new(meta(
        "textenc",
        0,
        cfg,
        json!({
            "tokens": data.vocab.tokens(),
            "embed_dim": cfg.textenc.embed_dim,
            "dim": cfg.arch.dt,
            "code_dim": CODE_DIM,
            "upstream": [cap_digest],
        }),
    )?);
    ckpt.meta.epoch = cfg.textenc.epochs as u64;
    ckpt.meta.metrics = serde_json::to_value(&report)?;
    ckpt.put_store("", &enc.store);
    let path = out_dir.join("textenc.pgan");
    ckpt.save(&path)?;
    Ok((path, report))
}

/// Trains the scoring classifier on real images; writes `classifier.pgan`.
pub fn run_train_classifier(cfg: &TrainConfig, out_dir: &Path) -> Result<(PathBuf, ClassifierReport)> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out_dir)?;
    let data = open_dataset(cfg)?;
    let (train, heldout) = data.split(cfg.holdout);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut clf = Classifier::new(&cfg.classifier, cfg.resolution, &mut rng)?;
    let report = clf.train(&data, &train, &heldout, &cfg.classifier, cfg.train_seed)?;
    let mut ckpt = Checkpoint::new(meta("classifier", 0, cfg, json!({ "resolution": cfg.resolution }))?);
    ckpt.meta.epoch = cfg.classifier.epochs as u64;
    ckpt.meta.metrics = serde_json::to_value(&report)?;
    ckpt.put_store("", &clf.store);
    let path = out_dir.join("classifier.pgan");
    ckpt.save(&path)?;
    Ok((path, report))
}

trait GanParts {
    fn stage(&self) -> u8;
    fn model_meta(&self) -> serde_json::Value;
    fn stores(&self) -> (&ParamStore<f32>, &ParamStore<f32>);
    fn stores_mut(&mut self) -> (&mut ParamStore<f32>, &mut ParamStore<f32>);
}

impl GanParts for Stage1 {
    fn stage(&self) -> u8 {
        1
    }

    fn model_meta(&self) -> serde_json::Value {
        json!({ "resolution": self.resolution() })
    }

    fn stores(&self) -> (&ParamStore<f32>, &ParamStore<f32>) {
        (&self.g, &self.d)
    }

    fn stores_mut(&mut self) -> (&mut ParamStore<f32>, &mut ParamStore<f32>) {
        (&mut self.g, &mut self.d)
    }
}

impl GanParts for RefineStage {
    fn stage(&self) -> u8 {
        self.stage
    }

    fn model_meta(&self) -> serde_json::Value {
        json!({ "resolution": self.out_res(), "in_res": self.in_res() })
    }

    fn stores(&self) -> (&ParamStore<f32>, &ParamStore<f32>) {
        (&self.g, &self.d)
    }

    fn stores_mut(&mut self) -> (&mut ParamStore<f32>, &mut ParamStore<f32>) {
        (&mut self.g, &mut self.d)
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Progress {
    /// Completed epochs.
    epoch: u64,
    /// Batches completed inside the current epoch.
    batch: u64,
    step: u64,
}

struct Optimizers {
    g: Adam<f32>,
    d: Adam<f32>,
}

struct StepCtx<'a> {
    rows: &'a [usize],
    epoch: usize,
    step: u64,
}

#[allow(clippy::too_many_arguments)]
fn stage_checkpoint<S: GanParts>(
    model: &S,
    cfg: &TrainConfig,
    upstream: &[String],
    progress: Progress,
    rng: &ChaCha8Rng,
    opt: &Optimizers,
    metrics: serde_json::Value,
) -> Result<Checkpoint> {
    let mut model_meta = model.model_meta();
    model_meta["upstream"] = json!(upstream);
    let mut ckpt = Checkpoint::new(meta(&format!("stage{}", model.stage()), model.stage(), cfg, model_meta)?);
    ckpt.meta.epoch = progress.epoch;
    ckpt.meta.batch_in_epoch = progress.batch;
    ckpt.meta.step = progress.step;
    ckpt.meta.rng = Some(RngState::capture(rng));
    ckpt.meta.metrics = metrics;
    let (g, d) = model.stores();
    ckpt.put_store("g.", g);
    ckpt.put_store("d.", d);
    ckpt.put_adam("adam_g.", &opt.g, g);
    ckpt.put_adam("adam_d.", &opt.d, d);
    Ok(ckpt)
}

fn clip(store: &mut ParamStore<f32>, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = store.grad_norm();
        if norm > max {
            store.scale_grads(max / norm);
        }
    }
}

fn mean_sigmoid(logits: &Tensor<f32>) -> f64 {
    let n = logits.numel().max(1) as f64;
    logits.data().iter().map(|&l| 1.0 / (1.0 + (-(l as f64)).exp())).sum::<f64>() / n
}

/// Noise for the GAN steps. Epoch orders use low-numbered streams of the
/// training seed, so this one sits at the top of the stream space.
fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Epoch/batch loop shared by every stage: resume, logging, cadence
/// checkpoints and the last-good snapshot on a non-finite loss.
fn drive<S: GanParts>(
    cfg: &TrainConfig,
    opts: &TrainOptions,
    model: &mut S,
    n_train: usize,
    upstream: &[String],
    mut step_fn: impl FnMut(&mut S, &StepCtx, &mut ChaCha8Rng, &mut Optimizers) -> Result<StepRecord>,
) -> Result<StageRun> {
    let _lock = OutputLock::acquire(&opts.out_dir)?;
    let digest = cfg.digest()?;
    let stage = model.stage();
    let (g, d) = model.stores();
    let mut opt = Optimizers {
        g: Adam::new(cfg.adam_g(), g),
        d: Adam::new(cfg.adam_d(), d),
    };
    let mut rng = noise_rng(cfg.train_seed);
    let mut progress = Progress::default();
    let log_path = opts.out_dir.join(format!("stage{stage}_runlog.jsonl"));
    let header = RunLogHeader {
        stage,
        config_digest: digest.clone(),
    };
    let mut log = match &opts.resume {
        None => RunLog::create(&log_path, &header)?,
        Some(path) => {
            let ckpt = load_kind(path, &format!("stage{stage}"))?;
            if ckpt.meta.config_digest != digest {
                return Err(Error::Config(format!(
                    "{} was written under a different configuration",
                    path.display()
                )));
            }
            let (g, d) = model.stores_mut();
            ckpt.load_store("g.", g)?;
            ckpt.load_store("d.", d)?;
            ckpt.load_adam("adam_g.", &mut opt.g, g, ckpt.meta.step)?;
            ckpt.load_adam("adam_d.", &mut opt.d, d, ckpt.meta.step)?;
            rng = ckpt
                .meta
                .rng
                .as_ref()
                .ok_or_else(|| Error::format(path, "checkpoint has no rng state"))?
                .restore()?;
            progress = Progress {
                epoch: ckpt.meta.epoch,
                batch: ckpt.meta.batch_in_epoch,
                step: ckpt.meta.step,
            };
            let kept: Vec<StepRecord> = if log_path.is_file() {
                RunLog::read(&log_path)?
                    .1
                    .into_iter()
                    .filter(|r| r.step < progress.step)
                    .collect()
            } else {
                Vec::new()
            };
            RunLog::rewrite(&log_path, &header, &kept)?
        }
    };
    let mut last = serde_json::Value::Null;
    let mut stopped = false;
    while progress.epoch < cfg.epochs as u64 && !stopped {
        let last_good = stage_checkpoint(model, cfg, upstream, progress, &rng, &opt, last.clone())?;
        let epoch = progress.epoch as usize;
        let order = epoch_order(cfg.train_seed, progress.epoch, n_train);
        for rows in batches(&order, cfg.batch_size).skip(progress.batch as usize) {
            if opts.max_steps.is_some_and(|m| progress.step >= m) {
                stopped = true;
                break;
            }
            let ctx = StepCtx {
                rows,
                epoch,
                step: progress.step,
            };
            let record = match step_fn(model, &ctx, &mut rng, &mut opt) {
                Ok(r) => r,
                Err(e) => {
                    if e.category() == "non_finite" {
                        last_good.save(&opts.out_dir.join("last_good.pgan"))?;
                    }
                    return Err(e);
                }
            };
            log.append(&record)?;
            last = serde_json::to_value(&record)?;
            progress.step += 1;
            progress.batch += 1;
        }
        if stopped {
            break;
        }
        progress.epoch += 1;
        progress.batch = 0;
        if cfg.checkpoint_every > 0 && progress.epoch % cfg.checkpoint_every as u64 == 0 {
            let path = opts.out_dir.join(format!("stage{stage}_epoch{}.pgan", progress.epoch));
            stage_checkpoint(model, cfg, upstream, progress, &rng, &opt, last.clone())?.save(&path)?;
        }
    }
    let checkpoint = opts.out_dir.join(format!("stage{stage}.pgan"));
    stage_checkpoint(model, cfg, upstream, progress, &rng, &opt, last)?.save(&checkpoint)?;
    Ok(StageRun {
        checkpoint,
        log: log_path,
        steps: progress.step,
        epochs_completed: progress.epoch,
    })
}

/// One discriminator update on real pairs and detached fakes. Returns the
/// loss and the mean D(real), D(fake).
fn d_step(
    disc: &crate::stages::Discriminator,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    real: Tensor<f32>,
    fake: Tensor<f32>,
    phi: &Tensor<f32>,
    clip_norm: Option<f64>,
) -> Result<(f64, f64, f64)> {
    let tape = Tape::new();
    let p = store.bind(&tape, true);
    let real_logits = disc.forward(&p, tape.constant(real), tape.constant(phi.clone()), BnMode::Train)?;
    let fake_logits = disc.forward(&p, tape.constant(fake), tape.constant(phi.clone()), BnMode::Train)?;
    let (d_real, d_fake) = (mean_sigmoid(&real_logits.value()), mean_sigmoid(&fake_logits.value()));
    let loss = d_loss(real_logits, fake_logits)?;
    let value = loss.item()? as f64;
    let grads = tape.backward(loss)?;
    let updates = p.into_updates();
    store.accumulate_grads(&grads);
    store.apply_updates(updates)?;
    clip(store, clip_norm);
    adam.step(store)?;
    Ok((value, d_real, d_fake))
}

/// Stage-I training against frozen E₀ and text encoder.
pub fn train_stage1(
    cfg: &TrainConfig,
    data: &Dataset,
    captioner: &Captioner,
    textenc: &TextEncoder,
    opts: &TrainOptions,
) -> Result<StageRun> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config(format!("stage-I training with stage = {}", cfg.stage)));
    }
    if captioner.epochs_trained == 0 {
        return Err(Error::Missing("captioner encoder has not been trained".into()));
    }
    if captioner.encoder.resolution != cfg.resolution {
        return Err(Error::Config(format!(
            "captioner works at {}×{}, stage I at {}×{}",
            captioner.encoder.resolution, captioner.encoder.resolution, cfg.resolution, cfg.resolution
        )));
    }
    let (train, _) = split(cfg, data)?;
    let phi_all = textenc.encode(&data.captions(&train))?;
    let real_all = data.images_at(&train, cfg.resolution)?;
    let codes_all = captioner.encode_images(&real_all)?;
    let mut model = Stage1::new(&cfg.arch, cfg.resolution, &mut ChaCha8Rng::seed_from_u64(cfg.init_seed))?;
    let upstream = vec![digest_of(captioner, "captioner"), digest_of(textenc, "textenc")];
    let e0 = captioner.frozen();
    drive(cfg, opts, &mut model, train.len(), &upstream, |m, ctx, rng, opt| {
        let n = ctx.rows.len();
        let phi = phi_all.select_rows(ctx.rows)?;
        let real = real_all.select_rows(ctx.rows)?;
        let real_codes = codes_all.select_rows(ctx.rows)?;
        let eps = sample_eps(n, cfg.arch.ng, rng);
        let z = (cfg.arch.nz > 0).then(|| Tensor::randn(&[n, cfg.arch.nz], rng));
        let Stage1 {
            g, d, cond, gen, disc, ..
        } = m;

        let tape = Tape::new();
        let gp = g.bind(&tape, true);
        let ca = cond.forward(&gp, tape.constant(phi.clone()), &eps)?;
        let fake = gen.forward(&gp, ca.c, z.map(|z| tape.constant(z)), BnMode::Train)?;

        let (d_value, d_real, d_fake) = d_step(disc, d, &mut opt.d, real, fake.value(), &phi, cfg.clip_norm)?;
        check_finite(d_value, ctx.step, "discriminator loss")?;

        let dp = d.bind(&tape, false);
        let fake_logits = disc.forward(&dp, fake, tape.constant(phi), BnMode::BatchStats)?;
        let weights = GLossWeights {
            captioner: captioner_weight(ctx.epoch, cfg.warmup_epochs, cfg.captioner_weight),
            kl: cfg.kl_weight,
        };
        let loss = stage1_g_loss(fake_logits, fake, RealRef::Codes(&real_codes), ca.mu, ca.logvar, &e0, weights)?;
        let g_value = loss.total.item()? as f64;
        check_finite(g_value, ctx.step, "generator loss")?;
        let grads = tape.backward(loss.total)?;
        drop(dp);
        let updates = gp.into_updates();
        g.accumulate_grads(&grads);
        g.apply_updates(updates)?;
        clip(g, cfg.clip_norm);
        opt.g.step(g)?;
        Ok(StepRecord {
            step: ctx.step,
            epoch: ctx.epoch,
            g_loss: g_value,
            d_loss: d_value,
            cap_loss: loss.captioner,
            kl: loss.kl,
            d_real,
            d_fake,
        })
    })
}

/// Digest of a frozen component's parameters, for the upstream list.
fn digest_of<T: HasStore>(x: &T, kind: &str) -> String {
    format!("{kind}:{}", super::checkpoint::store_digest(x.store()))
}

trait HasStore {
    fn store(&self) -> &ParamStore<f32>;
}

impl HasStore for Captioner {
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }
}

impl HasStore for TextEncoder {
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }
}

/// Loads the dataset, E₀ and text encoder named in `cfg` and trains stage I.
pub fn run_train_stage1(cfg: &TrainConfig, opts: &TrainOptions) -> Result<StageRun> {
    cfg.validate()?;
    let data = open_dataset(cfg)?;
    let (captioner, _) = load_captioner(&cfg.captioner_checkpoint)?;
    let (textenc, _, _) = load_textenc(&cfg.textenc_checkpoint)?;
    train_stage1(cfg, &data, &captioner, &textenc, opts)
}

/// Trains refinement stage `cfg.stage` on top of a frozen `chain`.
pub fn train_refine(
    cfg: &TrainConfig,
    data: &Dataset,
    textenc: &TextEncoder,
    chain: &StageChain,
    opts: &TrainOptions,
) -> Result<StageRun> {
    cfg.validate()?;
    let stage = cfg.stage;
    if !(2..=3).contains(&stage) {
        return Err(Error::Config(format!("refinement training with stage = {stage}")));
    }
    if chain.stages() != stage as usize - 1 {
        return Err(Error::Missing(format!(
            "stage {stage} needs {} previous stages, got {}",
            stage - 1,
            chain.stages()
        )));
    }
    let in_res = chain.out_res();
    if in_res != cfg.stage_resolution(stage - 1) {
        return Err(Error::Config(format!(
            "previous stages produce {in_res}×{in_res}, expected {}",
            cfg.stage_resolution(stage - 1)
        )));
    }
    let (train, _) = split(cfg, data)?;
    let phi_all = textenc.encode(&data.captions(&train))?;
    let out_res = 2 * in_res;
    let mut model = RefineStage::new(stage, &cfg.arch, in_res, &mut ChaCha8Rng::seed_from_u64(cfg.init_seed))?;
    let mut upstream = vec![digest_of(textenc, "textenc")];
    upstream.extend(chain.digests.iter().cloned());
    drive(cfg, opts, &mut model, train.len(), &upstream, |m, ctx, rng, opt| {
        let n = ctx.rows.len();
        let idx: Vec<usize> = ctx.rows.iter().map(|&r| train[r]).collect();
        let phi = phi_all.select_rows(ctx.rows)?;
        let real = data.images_at(&idx, out_res)?;
        let s_prev = chain.sample(&phi, rng)?;
        let eps = sample_eps(n, cfg.arch.ng, rng);
        let RefineStage {
            g, d, cond, gen, disc, ..
        } = m;

        let tape = Tape::new();
        let gp = g.bind(&tape, true);
        let ca = cond.forward(&gp, tape.constant(phi.clone()), &eps)?;
        let fake = gen.forward(&gp, tape.constant(s_prev), ca.c, BnMode::Train)?;

        let (d_value, d_real, d_fake) = d_step(disc, d, &mut opt.d, real, fake.value(), &phi, cfg.clip_norm)?;
        check_finite(d_value, ctx.step, "discriminator loss")?;

        let dp = d.bind(&tape, false);
        let fake_logits = disc.forward(&dp, fake, tape.constant(phi), BnMode::BatchStats)?;
        let kl = kl_to_standard_normal(ca.mu, ca.logvar)?.item()? as f64;
        let total = refine_g_loss(fake_logits, ca.mu, ca.logvar, cfg.kl_weight)?;
        let g_value = total.item()? as f64;
        check_finite(g_value, ctx.step, "generator loss")?;
        let grads = tape.backward(total)?;
        drop(dp);
        let updates = gp.into_updates();
        g.accumulate_grads(&grads);
        g.apply_updates(updates)?;
        clip(g, cfg.clip_norm);
        opt.g.step(g)?;
        Ok(StepRecord {
            step: ctx.step,
            epoch: ctx.epoch,
            g_loss: g_value,
            d_loss: d_value,
            cap_loss: 0.0,
            kl,
            d_real,
            d_fake,
        })
    })
}

/// Loads the dataset, text encoder and `cfg.previous_stages`, then trains
/// refinement stage `cfg.stage`.
pub fn run_train_refine(cfg: &TrainConfig, opts: &TrainOptions) -> Result<StageRun> {
    cfg.validate()?;
    if cfg.previous_stages.len() + 1 != cfg.stage as usize {
        return Err(Error::Missing(format!(
            "stage {} needs {} previous stage checkpoints, {} given",
            cfg.stage,
            cfg.stage.saturating_sub(1),
            cfg.previous_stages.len()
        )));
    }
    let data = open_dataset(cfg)?;
    let (textenc, _, _) = load_textenc(&cfg.textenc_checkpoint)?;
    let chain = StageChain::load(&cfg.previous_stages)?;
    train_refine(cfg, &data, &textenc, &chain, opts)
}
