//! Procedurally generated captioned-shapes dataset and its on-disk layout:
//! `manifest.jsonl` (a header line, then one record per sample) next to an
//! `images/` directory of PGIM files.

pub mod pgim;
pub mod scene;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::digest;
use crate::textenc::{Vocab, PAD};
use diffcomp::Tensor;

pub use pgim::{read_image, write_image, RawImage};
pub use scene::{
    caption_from_seed, check_resolution, class_of, class_parts, generate_caption, render_scene, render_scene_bytes,
    sample_scene, Cell, Color, Kind, Object, Relation, ShapeScene, Size, BACKGROUNDS, NUM_CLASSES, RESOLUTIONS,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub resolution: usize,
    pub count: usize,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the dataset root.
    pub image: String,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub scene: ShapeScene,
    pub caption_seed: u64,
}

/// One generated sample with its image in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub scene: ShapeScene,
    pub caption_seed: u64,
}

#[derive(Serialize)]
struct SynthParams {
    count: usize,
    resolution: usize,
    seed: u64,
}

/// Class of sample `index`: each consecutive block of 24 samples holds
/// every class once, in a seeded order.
pub fn class_for_index(seed: u64, index: usize) -> usize {
    let block = (index / NUM_CLASSES) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - block);
    let mut perm: Vec<usize> = (0..NUM_CLASSES).collect();
    perm.shuffle(&mut rng);
    perm[index % NUM_CLASSES]
}

/// Sample `index` of the dataset with `seed`; independent of every other
/// index.
pub fn generate_sample(seed: u64, index: usize, resolution: usize, vocab: &Vocab) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let scene = sample_scene(class_for_index(seed, index), &mut rng);
    let caption_seed: u64 = rng.random();
    let tokens = caption_from_seed(&scene, vocab, caption_seed)?;
    Ok(Sample {
        id: format!("s{index:06}"),
        image: render_scene(&scene, resolution)?,
        label: scene.class_label(),
        tokens,
        scene,
        caption_seed,
    })
}

/// Writes `count` samples and the manifest under `out`.
pub fn synthesize_dataset(count: usize, resolution: usize, seed: u64, out: &Path) -> Result<ManifestHeader> {
    if count == 0 {
        return Err(Error::Invalid("dataset count must be at least 1".into()));
    }
    check_resolution(resolution)?;
    let vocab = Vocab::standard();
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let header = ManifestHeader {
        format_version: FORMAT_VERSION,
        resolution,
        count,
        seed,
        vocab: vocab.tokens().to_vec(),
        config_digest: digest(&SynthParams {
            count,
            resolution,
            seed,
        })?,
    };
    let path = out.join(MANIFEST);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for index in 0..count {
        let sample = generate_sample(seed, index, resolution, &vocab)?;
        let rel = format!("images/{}.pgim", sample.id);
        write_image(&out.join(&rel), &sample.image)?;
        let record = SampleRecord {
            id: sample.id,
            image: rel,
            caption: vocab.decode(&sample.tokens),
            tokens: sample.tokens,
            label: sample.label,
            scene: sample.scene,
            caption_seed: sample.caption_seed,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(header)
}

/// Right-padded token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    /// Row-major `rows × width`.
    pub ids: Vec<usize>,
    pub rows: usize,
    pub width: usize,
    /// Tokens per row up to and including the end token.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * width..r * width + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Self {
            ids,
            rows: seqs.len(),
            width,
            lengths: seqs.iter().map(|s| s.as_ref().len()).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.width..r * self.width + self.lengths[r]]
    }

    /// Token at column `t` of every row.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.ids[r * self.width + t]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub captions: TokenBatch,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header: ManifestHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line.map_err(|e| Error::io(&path, e))?)?,
            None => return Err(Error::format(&path, "empty manifest")),
        };
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest version {}", header.format_version),
            ));
        }
        let mut records = Vec::with_capacity(header.count);
        for line in lines {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)?;
            if let Some(&bad) = rec.tokens.iter().find(|&&t| t >= header.vocab.len()) {
                return Err(Error::format(&path, format!("{}: token id {bad} outside the vocabulary", rec.id)));
            }
            records.push(rec);
        }
        if records.len() != header.count {
            return Err(Error::format(
                &path,
                format!("header declares {} samples, found {}", header.count, records.len()),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            header,
            records,
        })
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.header.vocab.clone())
    }

    fn read_record_image(&self, rec: &SampleRecord) -> Result<Tensor<f32>> {
        let path = self.root.join(&rec.image);
        let raw = RawImage::read(&path)?;
        let r = self.header.resolution;
        if raw.channels != 3 || raw.height != r || raw.width != r {
            return Err(Error::format(
                &path,
                format!(
                    "image is {}×{}×{}, manifest declares 3×{r}×{r}",
                    raw.channels, raw.height, raw.width
                ),
            ));
        }
        raw.to_tensor()
    }

    /// Reads the listed samples from disk, in the order given.
    pub fn load_batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut images = Vec::with_capacity(indices.len());
        let mut captions = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let rec = self
                .records
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("sample index {i} out of range ({})", self.records.len())))?;
            images.push(self.read_record_image(rec)?);
            captions.push(rec.tokens.clone());
            labels.push(rec.label);
        }
        Ok(Batch {
            images: stack_images(&images)?,
            captions: TokenBatch::from_sequences(&captions),
            labels,
        })
    }
}

pub fn stack_images(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::Invalid("empty image batch".into()));
    };
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::stack_rows(images)?.reshape(&shape)?)
}

/// Number of held-out samples taken from the end of a dataset.
pub fn holdout_count(count: usize, requested: usize) -> usize {
    requested.min(count / 4)
}

/// A manifest with every image decoded in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocab,
    images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(root)?;
        let vocab = manifest.vocab()?;
        let images = manifest
            .records
            .iter()
            .map(|rec| manifest.read_record_image(rec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            vocab,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.manifest.header.resolution
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.manifest.records[i]
    }

    /// `(train, held_out)` index lists; the held-out part is the tail.
    pub fn split(&self, requested_holdout: usize) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let h = holdout_count(n, requested_holdout);
        ((0..n - h).collect(), (n - h..n).collect())
    }

    pub fn captions(&self, indices: &[usize]) -> TokenBatch {
        let seqs: Vec<&[usize]> = indices.iter().map(|&i| self.record(i).tokens.as_slice()).collect();
        TokenBatch::from_sequences(&seqs)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.record(i).label).collect()
    }

    /// `N×3×R×R` images at `resolution`; other resolutions than the stored
    /// one are rendered from the scene descriptions.
    pub fn images_at(&self, indices: &[usize], resolution: usize) -> Result<Tensor<f32>> {
        let images = indices
            .iter()
            .map(|&i| {
                if resolution == self.resolution() {
                    Ok(self.images[i].clone())
                } else {
                    render_scene(&self.record(i).scene, resolution)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        stack_images(&images)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images_at(indices, self.resolution())?,
            captions: self.captions(indices),
            labels: self.labels(indices),
        })
    }
}
