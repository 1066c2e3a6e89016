//! Caption-to-image sampling through a chain of trained stages.

use std::path::{Path, PathBuf};

use diffcomp::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{load_refine, load_stage1, load_textenc};
use crate::condaug::sample_eps;
use crate::dataset::{write_image, TokenBatch};
use crate::error::{Error, Result};
use crate::stages::{RefineStage, Stage1};
use crate::textenc::{TextEncoder, Vocab};

/// Rows generated per forward pass.
const SAMPLE_CHUNK: usize = 64;

/// Stage I followed by zero or more refinement stages whose resolutions
/// chain.
#[derive(Clone, Debug)]
pub struct StageChain {
    pub stage1: Stage1,
    pub refiners: Vec<RefineStage>,
    /// Config digest of each stage's checkpoint, in order.
    pub digests: Vec<String>,
}

impl StageChain {
    pub fn new(stage1: Stage1, refiners: Vec<RefineStage>, digests: Vec<String>) -> Result<Self> {
        let mut res = stage1.resolution();
        for (i, r) in refiners.iter().enumerate() {
            let expected = i as u8 + 2;
            if r.stage != expected {
                return Err(Error::Invalid(format!(
                    "stage chain position {expected} holds stage {}",
                    r.stage
                )));
            }
            if r.in_res() != res {
                return Err(Error::Invalid(format!(
                    "stage {} expects {}×{} input but the chain produces {res}×{res}",
                    r.stage,
                    r.in_res(),
                    r.in_res()
                )));
            }
            if r.arch.dt != stage1.arch.dt {
                return Err(Error::Invalid(format!("stage {} has a different text width", r.stage)));
            }
            res = r.out_res();
        }
        Ok(Self {
            stage1,
            refiners,
            digests,
        })
    }

    /// Loads stage checkpoints given in stage order.
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let (first, rest) = paths
            .split_first()
            .ok_or_else(|| Error::Missing("stage-I checkpoint".into()))?;
        let (stage1, d1) = load_stage1(first)?;
        let mut digests = vec![d1];
        let mut refiners = Vec::new();
        for p in rest {
            let (r, d) = load_refine(p)?;
            refiners.push(r);
            digests.push(d);
        }
        Self::new(stage1, refiners, digests)
    }

    pub fn stages(&self) -> usize {
        1 + self.refiners.len()
    }

    pub fn dt(&self) -> usize {
        self.stage1.arch.dt
    }

    pub fn out_res(&self) -> usize {
        self.refiners.last().map_or(self.stage1.resolution(), RefineStage::out_res)
    }

    /// Runs the chain on `N×D_t` embeddings. Noise is drawn per chunk of
    /// rows: ε and z for stage I, then ε for each refinement stage.
    pub fn sample<R: Rng + ?Sized>(&self, phi: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
        let n = phi.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = SAMPLE_CHUNK.min(n - start);
            let phi = phi.slice_rows(start, len)?;
            let arch = &self.stage1.arch;
            let eps = sample_eps(len, arch.ng, rng);
            let z = (arch.nz > 0).then(|| Tensor::randn(&[len, arch.nz], rng));
            let mut images = self.stage1.generate(&phi, &eps, z.as_ref())?;
            for r in &self.refiners {
                let eps = sample_eps(len, r.arch.ng, rng);
                images = r.generate(&images, &phi, &eps)?;
            }
            parts.push(images);
            start += len;
        }
        Ok(Tensor::stack_rows(&parts)?)
    }
}

/// Everything needed to turn caption text into images.
#[derive(Clone, Debug)]
pub struct TextToImage {
    pub vocab: Vocab,
    pub textenc: TextEncoder,
    pub textenc_digest: String,
    pub chain: StageChain,
}

impl TextToImage {
    pub fn load(textenc: &Path, stages: &[PathBuf]) -> Result<Self> {
        let (textenc, vocab, textenc_digest) = load_textenc(textenc)?;
        let chain = StageChain::load(stages)?;
        if textenc.net.dim() != chain.dt() {
            return Err(Error::Invalid(format!(
                "text encoder width {} does not match the stages' {}",
                textenc.net.dim(),
                chain.dt()
            )));
        }
        Ok(Self {
            vocab,
            textenc,
            textenc_digest,
            chain,
        })
    }

    pub fn digests(&self) -> Vec<String> {
        let mut d = vec![self.textenc_digest.clone()];
        d.extend(self.chain.digests.iter().cloned());
        d
    }

    pub fn embed(&self, captions: &[String]) -> Result<Tensor<f32>> {
        let seqs = captions
            .iter()
            .map(|c| self.vocab.encode(c))
            .collect::<Result<Vec<_>>>()?;
        self.textenc.encode(&TokenBatch::from_sequences(&seqs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOutput {
    pub captions: Vec<String>,
    pub seed: u64,
    pub count_per_caption: usize,
    pub resolution: usize,
    pub images: Vec<PathBuf>,
    /// `captions × count` grid, one row per caption.
    pub sheet: PathBuf,
    pub grid: (usize, usize),
    pub config_digests: Vec<String>,
}

/// Tiles `rows·cols` images of `3×R×R`, row-major, into one sheet.
pub fn contact_sheet(images: &Tensor<f32>, rows: usize, cols: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || s[0] != rows * cols {
        return Err(Error::Invalid(format!("cannot tile {s:?} into {rows}×{cols}")));
    }
    let (c, r) = (s[1], s[2]);
    let (h, w) = (rows * r, cols * r);
    let mut out = vec![0.0f32; c * h * w];
    for (k, img) in images.data().chunks_exact(c * r * r).enumerate() {
        let (gy, gx) = (k / cols, k % cols);
        for ch in 0..c {
            for y in 0..r {
                let src = &img[(ch * r + y) * r..(ch * r + y + 1) * r];
                let dst = (ch * h + gy * r + y) * w + gx * r;
                out[dst..dst + r].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

/// Writes `count` images per caption plus a contact sheet under `out`.
pub fn run_generate(
    model: &TextToImage,
    captions: &[String],
    seed: u64,
    count: usize,
    out: &Path,
) -> Result<GenerateOutput> {
    if captions.is_empty() || count == 0 {
        return Err(Error::Invalid("need at least one caption and a positive count".into()));
    }
    let phi = model.embed(captions)?;
    let rows: Vec<usize> = (0..captions.len()).flat_map(|i| std::iter::repeat(i).take(count)).collect();
    let phi = phi.select_rows(&rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = model.chain.sample(&phi, &mut rng)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut paths = Vec::with_capacity(rows.len());
    for (k, &ci) in rows.iter().enumerate() {
        let path = out.join(format!("caption{ci:03}_{:03}.pgim", k % count));
        write_image(&path, &images.slice_rows(k, 1)?.reshape(&images.shape()[1..])?)?;
        paths.push(path);
    }
    let sheet = out.join("sheet.pgim");
    write_image(&sheet, &contact_sheet(&images, captions.len(), count)?)?;
    let output = GenerateOutput {
        captions: captions.to_vec(),
        seed,
        count_per_caption: count,
        resolution: model.chain.out_res(),
        images: paths,
        sheet,
        grid: (captions.len(), count),
        config_digests: model.digests(),
    };
    let report = out.join("generate.json");
    std::fs::write(&report, serde_json::to_vec_pretty(&output)?).map_err(|e| Error::io(&report, e))?;
    Ok(output)
}
