//! Generators, discriminators and losses of the stage-I GAN and of the
//! resolution-doubling refinement stages.

use diffcomp::{BatchNorm2d, BnMode, Bound, Conv2d, Linear, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{captioner_loss, captioner_loss_from_codes, PerceptualEncoder};
use crate::condaug::{kl_to_standard_normal, CondAugNet};
use crate::error::{Error, Result};

const LEAK: f64 = 0.2;
const MIN_CHANNELS: usize = 8;
const MIN_DECODER_CHANNELS: usize = 16;
pub const REFINE_RES_BLOCKS: usize = 4;

/// Widths and latent sizes shared by every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arch {
    pub ng: usize,
    pub nz: usize,
    pub dt: usize,
    pub c0: usize,
    pub cd: usize,
    pub ce: usize,
    pub nd: usize,
    pub mg: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            ng: 64,
            nz: 64,
            dt: 128,
            c0: 128,
            cd: 64,
            ce: 64,
            nd: 16,
            mg: 4,
        }
    }
}

fn log2_ratio(big: usize, small: usize, what: &str) -> Result<usize> {
    if small == 0 || big < small || big % small != 0 || !(big / small).is_power_of_two() {
        return Err(Error::Config(format!("{what}: {big} is not a power-of-two multiple of {small}")));
    }
    Ok((big / small).trailing_zeros() as usize)
}

fn expect_images<T: Scalar>(x: &Var<'_, T>, resolution: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != [3, resolution, resolution] {
        return Err(Error::Invalid(format!(
            "{what} expects N×3×{resolution}×{resolution} images, got {s:?}"
        )));
    }
    Ok(())
}

/// `relu(x + bn(conv(relu(bn(conv(x))))))`, channel-preserving.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), ch),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), ch),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>> {
        let h = self.bn1.forward(p, self.conv1.forward(p, x)?, mode)?.relu()?;
        let h = self.bn2.forward(p, self.conv2.forward(p, h)?, mode)?;
        Ok(x.add(h)?.relu()?)
    }
}

/// Nearest ×2 upsampling, 3×3 conv, batch norm, relu.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl UpBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, 3, 1, 1, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>> {
        let up = x.upsample_nearest(2)?;
        Ok(self.bn.forward(p, self.conv.forward(p, up)?, mode)?.relu()?)
    }
}

/// G₁: `[ĉ, z]` → `C₀×4×4` → upsampling blocks → `3×R×R` in `(−1, 1)`.
/// The first two levels are each followed by a residual block.
#[derive(Clone, Debug)]
pub struct Generator1 {
    pub fc: Linear,
    pub bn0: BatchNorm2d,
    pub ups: Vec<UpBlock>,
    pub res: Vec<ResBlock>,
    pub out: Conv2d,
    pub c0: usize,
    pub ng: usize,
    pub nz: usize,
    pub resolution: usize,
}

impl Generator1 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        arch: &Arch,
        resolution: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = log2_ratio(resolution, 4, "stage-I resolution")?;
        let fc = Linear::new(store, "g1.fc", arch.ng + arch.nz, arch.c0 * 16, false, rng);
        let bn0 = BatchNorm2d::new(store, "g1.bn0", arch.c0);
        let (mut ups, mut res) = (Vec::new(), Vec::new());
        let mut ch = arch.c0;
        for level in 0..levels {
            let next = (ch / 2).max(MIN_CHANNELS);
            ups.push(UpBlock::new(store, &format!("g1.up{level}"), ch, next, rng));
            ch = next;
            if level < 2 {
                res.push(ResBlock::new(store, &format!("g1.res{level}"), ch, rng));
            }
        }
        let out = Conv2d::new(store, "g1.out", ch, 3, 3, 1, 1, true, rng);
        Ok(Self {
            fc,
            bn0,
            ups,
            res,
            out,
            c0: arch.c0,
            ng: arch.ng,
            nz: arch.nz,
            resolution,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'_, 't, T>,
        c: Var<'t, T>,
        z: Option<Var<'t, T>>,
        mode: BnMode,
    ) -> Result<Var<'t, T>> {
        let n = c.shape()[0];
        if c.shape() != [n, self.ng] {
            return Err(Error::Invalid(format!("G₁ expects N×{} codes, got {:?}", self.ng, c.shape())));
        }
        let input = match (z, self.nz) {
            (None, 0) => c,
            (Some(z), nz) if z.shape() == [n, nz] => Var::concat(&[c, z], 1)?,
            (z, nz) => {
                return Err(Error::Invalid(format!(
                    "G₁ expects N×{nz} noise, got {:?}",
                    z.map(|z| z.shape())
                )))
            }
        };
        let x = self.fc.forward(p, input)?.reshape(&[n, self.c0, 4, 4])?;
        let mut x = self.bn0.forward(p, x, mode)?.relu()?;
        for (level, up) in self.ups.iter().enumerate() {
            x = up.forward(p, x, mode)?;
            if let Some(block) = self.res.get(level) {
                x = block.forward(p, x, mode)?;
            }
        }
        Ok(self.out.forward(p, x)?.tanh()?)
    }
}

/// Conditional discriminator: stride-2 convs down to `C_d×4×4`, the text
/// embedding mapped to `N_d` channels and replicated over space, a joint
/// 1×1 conv, then one logit per pair.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub downs: Vec<(Conv2d, Option<BatchNorm2d>)>,
    pub text: Linear,
    pub joint: Conv2d,
    pub joint_bn: BatchNorm2d,
    pub out: Linear,
    pub cd: usize,
    pub dt: usize,
    pub resolution: usize,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        arch: &Arch,
        resolution: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = log2_ratio(resolution, 4, "discriminator resolution")?;
        if levels == 0 {
            return Err(Error::Config("discriminator resolution must exceed 4".into()));
        }
        let mut downs = Vec::with_capacity(levels);
        let mut ch = 3;
        for i in 0..levels {
            let next = (arch.cd >> (levels - 1 - i)).max(MIN_CHANNELS);
            let conv = Conv2d::new(store, &format!("{name}.down{i}"), ch, next, 4, 2, 1, i == 0, rng);
            let bn = (i > 0).then(|| BatchNorm2d::new(store, &format!("{name}.down{i}.bn"), next));
            downs.push((conv, bn));
            ch = next;
        }
        Ok(Self {
            downs,
            text: Linear::new(store, &format!("{name}.text"), arch.dt, arch.nd, true, rng),
            joint: Conv2d::new(store, &format!("{name}.joint"), ch + arch.nd, arch.cd, 1, 1, 0, false, rng),
            joint_bn: BatchNorm2d::new(store, &format!("{name}.joint.bn"), arch.cd),
            out: Linear::new(store, &format!("{name}.out"), arch.cd * 16, 1, true, rng),
            cd: arch.cd,
            dt: arch.dt,
            resolution,
        })
    }

    /// `N×1` logits for image/caption pairs.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'_, 't, T>,
        images: Var<'t, T>,
        phi: Var<'t, T>,
        mode: BnMode,
    ) -> Result<Var<'t, T>> {
        expect_images(&images, self.resolution, "discriminator")?;
        let n = images.shape()[0];
        if phi.shape() != [n, self.dt] {
            return Err(Error::Invalid(format!(
                "discriminator expects {n}×{} text embeddings, got {:?}",
                self.dt,
                phi.shape()
            )));
        }
        let mut x = images;
        for (conv, bn) in &self.downs {
            x = conv.forward(p, x)?;
            if let Some(bn) = bn {
                x = bn.forward(p, x, mode)?;
            }
            x = x.leaky_relu(LEAK)?;
        }
        let t = self.text.forward(p, phi)?.leaky_relu(LEAK)?.replicate_spatial(4, 4)?;
        let joint = self.joint.forward(p, Var::concat(&[x, t], 1)?)?;
        let joint = self.joint_bn.forward(p, joint, mode)?.leaky_relu(LEAK)?;
        Ok(self.out.forward(p, joint.flatten()?)?)
    }
}

/// Refinement generator: encode the previous image down to `M_g×M_g`,
/// concatenate the replicated latent, residual blocks, then upsample to
/// twice the input resolution.
#[derive(Clone, Debug)]
pub struct RefineGenerator {
    pub stem: Conv2d,
    pub downs: Vec<(Conv2d, BatchNorm2d)>,
    pub joint: Conv2d,
    pub joint_bn: BatchNorm2d,
    pub res: Vec<ResBlock>,
    pub ups: Vec<UpBlock>,
    pub out: Conv2d,
    pub ng: usize,
    pub mg: usize,
    pub in_res: usize,
}

impl RefineGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        arch: &Arch,
        in_res: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n_down = log2_ratio(in_res, arch.mg, "refinement input vs M_g")?;
        let n_up = n_down + 1;
        let mut ch = (arch.ce >> n_down).max(MIN_CHANNELS);
        let stem = Conv2d::new(store, &format!("{name}.stem"), 3, ch, 3, 1, 1, true, rng);
        let mut downs = Vec::with_capacity(n_down);
        for i in 0..n_down {
            let next = if i + 1 == n_down { arch.ce } else { (arch.ce >> (n_down - 1 - i)).max(MIN_CHANNELS) };
            downs.push((
                Conv2d::new(store, &format!("{name}.down{i}"), ch, next, 4, 2, 1, false, rng),
                BatchNorm2d::new(store, &format!("{name}.down{i}.bn"), next),
            ));
            ch = next;
        }
        let joint = Conv2d::new(store, &format!("{name}.joint"), ch + arch.ng, arch.ce, 3, 1, 1, false, rng);
        let joint_bn = BatchNorm2d::new(store, &format!("{name}.joint.bn"), arch.ce);
        let res = (0..REFINE_RES_BLOCKS)
            .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), arch.ce, rng))
            .collect();
        let mut ups = Vec::with_capacity(n_up);
        let mut ch = arch.ce;
        for i in 0..n_up {
            let next = (ch / 2).max(MIN_DECODER_CHANNELS);
            ups.push(UpBlock::new(store, &format!("{name}.up{i}"), ch, next, rng));
            ch = next;
        }
        let out = Conv2d::new(store, &format!("{name}.out"), ch, 3, 3, 1, 1, true, rng);
        Ok(Self {
            stem,
            downs,
            joint,
            joint_bn,
            res,
            ups,
            out,
            ng: arch.ng,
            mg: arch.mg,
            in_res,
        })
    }

    pub fn out_res(&self) -> usize {
        2 * self.in_res
    }

    /// Image features at `M_g×M_g` with the replicated latent appended
    /// along channels.
    pub fn joint_features<'t, T: Scalar>(
        &self,
        p: &Bound<'_, 't, T>,
        s_prev: Var<'t, T>,
        c: Var<'t, T>,
        mode: BnMode,
    ) -> Result<Var<'t, T>> {
        expect_images(&s_prev, self.in_res, "refinement generator")?;
        let n = s_prev.shape()[0];
        if c.shape() != [n, self.ng] {
            return Err(Error::Invalid(format!(
                "refinement generator expects {n}×{} codes, got {:?}",
                self.ng,
                c.shape()
            )));
        }
        let mut x = self.stem.forward(p, s_prev)?.relu()?;
        for (conv, bn) in &self.downs {
            x = bn.forward(p, conv.forward(p, x)?, mode)?.relu()?;
        }
        Ok(Var::concat(&[x, c.replicate_spatial(self.mg, self.mg)?], 1)?)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'_, 't, T>,
        s_prev: Var<'t, T>,
        c: Var<'t, T>,
        mode: BnMode,
    ) -> Result<Var<'t, T>> {
        let joint = self.joint_features(p, s_prev, c, mode)?;
        let mut x = self.joint_bn.forward(p, self.joint.forward(p, joint)?, mode)?.relu()?;
        for block in &self.res {
            x = block.forward(p, x, mode)?;
        }
        for up in &self.ups {
            x = up.forward(p, x, mode)?;
        }
        Ok(self.out.forward(p, x)?.tanh()?)
    }
}

/// Discriminator loss in stable form: `bce(real, 1) + bce(fake, 0)`, the
/// negated adversarial objective.
pub fn d_loss<'t, T: Scalar>(real_logits: Var<'t, T>, fake_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    let ones = Tensor::ones(&real_logits.shape());
    let zeros = Tensor::zeros(&fake_logits.shape());
    Ok(real_logits.bce_with_logits(&ones)?.add(fake_logits.bce_with_logits(&zeros)?)?)
}

/// Non-saturating generator term `−E[log D(fake)]`.
pub fn g_adv_loss<'t, T: Scalar>(fake_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    let ones = Tensor::ones(&fake_logits.shape());
    Ok(fake_logits.bce_with_logits(&ones)?)
}

/// The literal saturating generator objective `E[log(1 − D(fake))] + λ·KL`.
pub fn saturating_g_loss<'t, T: Scalar>(fake_logits: Var<'t, T>, kl: Var<'t, T>, lambda: f64) -> Result<Var<'t, T>> {
    let zeros = Tensor::zeros(&fake_logits.shape());
    Ok(fake_logits.bce_with_logits(&zeros)?.neg()?.add(kl.scale(lambda)?)?)
}

/// [`saturating_g_loss`] from discriminator probabilities.
pub fn saturating_g_value(d_fake: &[f64], kl: f64, lambda: f64) -> f64 {
    let mean = d_fake.iter().map(|d| (1.0 - d).ln()).sum::<f64>() / d_fake.len().max(1) as f64;
    mean + lambda * kl
}

/// Captioner weight for an epoch: a hard step from 0 to `lambda_c` at
/// `warmup_epochs`.
pub fn captioner_weight(epoch: usize, warmup_epochs: usize, lambda_c: f64) -> f64 {
    if epoch < warmup_epochs {
        0.0
    } else {
        lambda_c
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GLossWeights {
    /// Captioner weight already resolved for the current epoch.
    pub captioner: f64,
    pub kl: f64,
}

/// Real side of the captioner term.
#[derive(Clone, Copy)]
pub enum RealRef<'a, T> {
    Images(&'a Tensor<T>),
    Codes(&'a Tensor<T>),
}

pub struct GLoss<'t, T> {
    pub total: Var<'t, T>,
    pub adversarial: f64,
    /// Weighted captioner term; exactly zero when its weight is zero.
    pub captioner: f64,
    pub kl: f64,
}

/// Stage-I generator loss: non-saturating adversarial term, the weighted
/// captioner term and the weighted KL term. With a zero captioner weight
/// the encoder is not evaluated at all.
#[allow(clippy::too_many_arguments)]
pub fn stage1_g_loss<'t, T: Scalar>(
    fake_logits: Var<'t, T>,
    fake_images: Var<'t, T>,
    real: RealRef<'_, T>,
    mu: Var<'t, T>,
    logvar: Var<'t, T>,
    e0: &impl PerceptualEncoder<T>,
    weights: GLossWeights,
) -> Result<GLoss<'t, T>> {
    let adv = g_adv_loss(fake_logits)?;
    let kl = kl_to_standard_normal(mu, logvar)?;
    let mut total = adv.add(kl.scale(weights.kl)?)?;
    let mut captioner = 0.0;
    if weights.captioner != 0.0 {
        let cap = match real {
            RealRef::Images(images) => captioner_loss(e0, images, fake_images)?,
            RealRef::Codes(codes) => {
                let tape = fake_images.tape();
                captioner_loss_from_codes(codes, e0.encode(tape, fake_images)?)?
            }
        };
        let weighted = cap.scale(weights.captioner)?;
        captioner = weighted.item()?.as_f64();
        total = total.add(weighted)?;
    }
    Ok(GLoss {
        adversarial: adv.item()?.as_f64(),
        kl: kl.item()?.as_f64(),
        captioner,
        total,
    })
}

/// Refinement generator loss: non-saturating adversarial term plus `λ·KL`.
pub fn refine_g_loss<'t, T: Scalar>(
    fake_logits: Var<'t, T>,
    mu: Var<'t, T>,
    logvar: Var<'t, T>,
    lambda: f64,
) -> Result<Var<'t, T>> {
    let kl = kl_to_standard_normal(mu, logvar)?;
    Ok(g_adv_loss(fake_logits)?.add(kl.scale(lambda)?)?)
}

/// Refinement stages only run on top of a frozen predecessor.
pub fn ensure_frozen<T: Scalar>(prev: &Bound<'_, '_, T>) -> Result<()> {
    if prev.is_trainable() {
        Err(Error::Invalid("previous stage must be bound frozen".into()))
    } else {
        Ok(())
    }
}

/// Stage-I generator and discriminator with their own parameter stores.
#[derive(Clone, Debug)]
pub struct Stage1 {
    pub g: ParamStore<f32>,
    pub d: ParamStore<f32>,
    pub cond: CondAugNet,
    pub gen: Generator1,
    pub disc: Discriminator,
    pub arch: Arch,
}

impl Stage1 {
    pub fn new<R: Rng + ?Sized>(arch: &Arch, resolution: usize, rng: &mut R) -> Result<Self> {
        let mut g = ParamStore::new();
        let mut d = ParamStore::new();
        let cond = CondAugNet::new(&mut g, "ca1", arch.dt, arch.ng, rng);
        let gen = Generator1::new(&mut g, arch, resolution, rng)?;
        let disc = Discriminator::new(&mut d, "d1", arch, resolution, rng)?;
        Ok(Self {
            g,
            d,
            cond,
            gen,
            disc,
            arch: *arch,
        })
    }

    pub fn resolution(&self) -> usize {
        self.gen.resolution
    }

    /// Images for `φ_t` with fixed noise, using running statistics.
    pub fn generate(&self, phi: &Tensor<f32>, eps: &Tensor<f32>, z: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let p = self.g.bind(&tape, false);
        ensure_frozen(&p)?;
        let ca = self.cond.forward(&p, tape.constant(phi.clone()), eps)?;
        let z = z.map(|z| tape.constant(z.clone()));
        Ok(self.gen.forward(&p, ca.c, z, BnMode::Eval)?.value())
    }
}

/// One refinement stage (k ≥ 2) with its own conditioning augmentation.
#[derive(Clone, Debug)]
pub struct RefineStage {
    pub stage: u8,
    pub g: ParamStore<f32>,
    pub d: ParamStore<f32>,
    pub cond: CondAugNet,
    pub gen: RefineGenerator,
    pub disc: Discriminator,
    pub arch: Arch,
}

impl RefineStage {
    pub fn new<R: Rng + ?Sized>(stage: u8, arch: &Arch, in_res: usize, rng: &mut R) -> Result<Self> {
        let mut g = ParamStore::new();
        let mut d = ParamStore::new();
        let cond = CondAugNet::new(&mut g, &format!("ca{stage}"), arch.dt, arch.ng, rng);
        let gen = RefineGenerator::new(&mut g, &format!("g{stage}"), arch, in_res, rng)?;
        let disc = Discriminator::new(&mut d, &format!("d{stage}"), arch, 2 * in_res, rng)?;
        Ok(Self {
            stage,
            g,
            d,
            cond,
            gen,
            disc,
            arch: *arch,
        })
    }

    pub fn in_res(&self) -> usize {
        self.gen.in_res
    }

    pub fn out_res(&self) -> usize {
        self.gen.out_res()
    }

    pub fn generate(&self, s_prev: &Tensor<f32>, phi: &Tensor<f32>, eps: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let p = self.g.bind(&tape, false);
        ensure_frozen(&p)?;
        let ca = self.cond.forward(&p, tape.constant(phi.clone()), eps)?;
        Ok(self.gen.forward(&p, tape.constant(s_prev.clone()), ca.c, BnMode::Eval)?.value())
    }
}
