//! Parallel corpora, image-feature packs, the planted-signal synthetic task
//! and attention-map export.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_orthogonal, RngState};
use crate::decoder::DecodeTrace;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"MMAF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;

/// Per-example `L × D` image annotation grids, stored location-major.
///
/// On disk: `"MMAF"`, version `u32`, count `u64`, `L` `u32`, `D` `u32`, then
/// `count · L · D` little-endian `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeaturePack {
    pub fn new(len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::FeatureFormat(format!("invalid grid {len} × {dim}")));
        }
        Ok(Self { len, dim, data: Vec::new() })
    }

    /// Number of annotations per example (`L`).
    pub fn locations(&self) -> usize {
        self.len
    }

    /// Annotation width (`D`).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / (self.len * self.dim)
    }

    pub fn push(&mut self, grid: &[f32]) -> Result<()> {
        if grid.len() != self.len * self.dim {
            return Err(Error::FeatureFormat(format!(
                "grid has {} values, expected {} × {}",
                grid.len(),
                self.len,
                self.dim
            )));
        }
        self.data.extend_from_slice(grid);
        Ok(())
    }

    pub fn raw(&self, i: usize) -> &[f32] {
        let n = self.len * self.dim;
        &self.data[i * n..(i + 1) * n]
    }

    /// Example `i` as an `[L, D]` tensor.
    pub fn get<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self.raw(i).iter().map(|&x| T::from_f64c(x as f64)).collect();
        Tensor::matrix(self.len, self.dim, data).expect("pack grids are L × D")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::FeatureFormat("truncated header".into()));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::FeatureFormat("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FEATURE_VERSION {
            return Err(Error::FeatureFormat(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let len = u32_at(16) as usize;
        let dim = u32_at(20) as usize;
        let mut pack = Self::new(len, dim)?;
        let expected = count
            .checked_mul(len * dim * 4)
            .ok_or_else(|| Error::FeatureFormat("payload size overflows".into()))?;
        let payload = &bytes[FEATURE_HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::FeatureFormat(format!(
                "payload is {} bytes, header implies {count} × {len} × {dim} × 4 = {expected}",
                payload.len()
            )));
        }
        pack.data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(pack)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Aligned source/target sentences with optional per-example image features
/// (example `i` uses grid `i` of the pack).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub source: Vec<Vec<String>>,
    pub target: Vec<Vec<String>>,
    pub features: Option<FeaturePack>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.len() != self.target.len() {
            return Err(Error::InvalidArgument(format!(
                "{} source but {} target sentences",
                self.source.len(),
                self.target.len()
            )));
        }
        if let Some(f) = &self.features {
            if f.count() != self.len() {
                return Err(Error::FeatureFormat(format!(
                    "{} feature grids for {} sentence pairs",
                    f.count(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    /// Writes `<stem>.src`, `<stem>.tgt` and, if present, `<stem>.feat`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_lines(dir.join(format!("{stem}.src")), &self.source)?;
        write_lines(dir.join(format!("{stem}.tgt")), &self.target)?;
        if let Some(f) = &self.features {
            f.write(dir.join(format!("{stem}.feat")))?;
        }
        Ok(())
    }
}

fn write_lines(path: PathBuf, sentences: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.join(" "));
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads whitespace-tokenized sentences, one per line.
pub fn read_sentences(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map(|l| crate::bleu::tokenize(&l)).map_err(|e| Error::io(path, e)))
        .collect()
}

/// Loads a parallel corpus. Line counts must match, and so must the feature
/// count when a pack is given.
pub fn load_corpus(src: impl AsRef<Path>, tgt: impl AsRef<Path>, features: Option<&Path>) -> Result<ParallelCorpus> {
    let source = read_sentences(src.as_ref())?;
    let target = read_sentences(tgt.as_ref())?;
    if source.len() != target.len() {
        return Err(Error::LineCountMismatch {
            src_path: src.as_ref().to_path_buf(),
            src: source.len(),
            tgt_path: tgt.as_ref().to_path_buf(),
            tgt: target.len(),
        });
    }
    let features = features.map(FeaturePack::read).transpose()?;
    let corpus = ParallelCorpus { source, target, features };
    corpus.validate()?;
    Ok(corpus)
}

/// Parameters of the planted-signal task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Grid side `g`; `L = g²`.
    pub grid: usize,
    pub img_dim: usize,
    /// Number of object classes `K`.
    pub classes: usize,
    /// Size of the ordinary source alphabet.
    pub words: usize,
    pub sentence_len: usize,
    /// Position of the ambiguous token.
    pub obj_slot: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid: 4,
            img_dim: 8,
            classes: 4,
            words: 12,
            sentence_len: 6,
            obj_slot: 2,
            noise_std: 0.1,
            seed: 1,
            train: 2000,
            dev: 200,
            test: 200,
        }
    }
}

impl SyntheticSpec {
    pub fn locations(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.grid == 0 || self.img_dim == 0 || self.classes == 0 || self.words == 0 || self.sentence_len == 0 {
            return bad("all sizes must be positive");
        }
        if self.classes > self.locations() {
            return bad("more classes than grid cells");
        }
        if self.classes > self.img_dim {
            return bad("orthogonal class signatures need classes ≤ img_dim");
        }
        if self.obj_slot >= self.sentence_len {
            return bad("obj_slot outside the sentence");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a non-negative number");
        }
        Ok(())
    }
}

pub const OBJ_TOKEN: &str = "OBJ";

pub fn source_word(i: usize) -> String {
    format!("w{i}")
}

pub fn target_word(i: usize) -> String {
    format!("v{i}")
}

/// Target token for object class `k ∈ 1..=K`.
pub fn class_word(k: usize) -> String {
    format!("obj{k}")
}

/// Ground truth of one synthetic example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlantedLabel {
    /// Class in `1..=K`.
    pub class: usize,
    /// Grid cell holding the class signature.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub corpus: ParallelCorpus,
    pub labels: Vec<PlantedLabel>,
}

impl SyntheticSplit {
    /// Writes the corpus files plus `<stem>.labels` (`class\tcell`).
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        self.corpus.write(dir.as_ref(), stem)?;
        let mut text = String::new();
        for l in &self.labels {
            text.push_str(&format!("{}\t{}\n", l.class, l.cell));
        }
        let path = dir.as_ref().join(format!("{stem}.labels"));
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<PlantedLabel>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| {
            let mut it = l.split('\t').map(str::parse::<usize>);
            match (it.next(), it.next()) {
                (Some(Ok(class)), Some(Ok(cell))) => Ok(PlantedLabel { class, cell }),
                _ => Err(Error::InvalidArgument(format!("{}: bad label line {l:?}", path.display()))),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub train: SyntheticSplit,
    pub dev: SyntheticSplit,
    pub test: SyntheticSplit,
    /// Unit-norm, mutually orthogonal class signatures (`K × D`).
    pub signatures: Vec<Vec<f32>>,
    /// `source word i ↦ target word mapping[i]`.
    pub mapping: Vec<usize>,
}

/// Generates the planted-signal task: the source is random words with `OBJ`
/// at `obj_slot`; the target maps each word through a fixed bijection and
/// replaces `OBJ` with the class token of the object planted in one random
/// grid cell. The source carries no information about the class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let sig: Tensor<f64> = init_orthogonal(&[spec.img_dim, spec.img_dim], &mut rng)?;
    let signatures: Vec<Vec<f32>> = (0..spec.classes).map(|k| sig.row(k).iter().map(|&x| x as f32).collect()).collect();

    let mut mapping: Vec<usize> = (0..spec.words).collect();
    for i in (1..mapping.len()).rev() {
        let j = rng.below(i + 1);
        mapping.swap(i, j);
    }

    let mut split = |n: usize| -> Result<SyntheticSplit> {
        let l = spec.locations();
        let d = spec.img_dim;
        let mut corpus = ParallelCorpus { features: Some(FeaturePack::new(l, d)?), ..Default::default() };
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut src = Vec::with_capacity(spec.sentence_len);
            let mut tgt = Vec::with_capacity(spec.sentence_len);
            let class = 1 + rng.below(spec.classes);
            for pos in 0..spec.sentence_len {
                if pos == spec.obj_slot {
                    src.push(OBJ_TOKEN.to_string());
                    tgt.push(class_word(class));
                } else {
                    let w = rng.below(spec.words);
                    src.push(source_word(w));
                    tgt.push(target_word(mapping[w]));
                }
            }
            let cell = rng.below(l);
            let mut grid = vec![0f32; l * d];
            for (i, x) in grid.iter_mut().enumerate() {
                *x = if i / d == cell { signatures[class - 1][i % d] } else { (spec.noise_std * rng.normal()) as f32 };
            }
            if spec.noise_std == 0.0 {
                grid.iter_mut().enumerate().filter(|(i, _)| i / d != cell).for_each(|(_, x)| *x = 0.0);
            }
            corpus.features.as_mut().unwrap().push(&grid)?;
            corpus.source.push(src);
            corpus.target.push(tgt);
            labels.push(PlantedLabel { class, cell });
        }
        Ok(SyntheticSplit { corpus, labels })
    };
    let train = split(spec.train)?;
    let dev = split(spec.dev)?;
    let test = split(spec.test)?;
    Ok(SyntheticData { spec: spec.clone(), train, dev, test, signatures, mapping })
}

impl SyntheticData {
    /// Writes `train.*`, `dev.*`, `test.*` and `spec.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write(dir, "train")?;
        self.dev.write(dir, "dev")?;
        self.test.write(dir, "test")?;
        let path = dir.join("spec.json");
        fs::write(&path, serde_json::to_string_pretty(&self.spec)?).map_err(|e| Error::io(path, e))
    }
}

/// 8-bit binary PGM of a `side × side` map, max-normalized to 255.
pub fn attention_pgm(weights: &[f64], side: usize) -> Result<Vec<u8>> {
    if side * side != weights.len() {
        return Err(Error::InvalidArgument(format!("{} weights do not form a {side}×{side} grid", weights.len())));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(weights.iter().map(|&w| if max > 0.0 { (255.0 * w / max).round().clamp(0.0, 255.0) as u8 } else { 0 }));
    Ok(out)
}

/// Writes the image attention of every step: `attention.csv` (one row of L
/// weights plus β per step) and, when `L = grid²`, `step_NNN.pgm` maps.
pub fn dump_attention(trace: &DecodeTrace, grid: usize, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let rows: Vec<&Vec<f64>> = trace
        .steps
        .iter()
        .map(|s| s.image_alpha.as_ref().ok_or_else(|| Error::InvalidArgument("trace has no image attention".into())))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let len = rows.first().map(|r| r.len()).unwrap_or(0);

    let csv_path = out_dir.join("attention.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let header: Vec<String> = (0..len).map(|i| format!("a{i}")).chain(std::iter::once("beta".into())).collect();
    writeln!(csv, "{}", header.join(",")).map_err(|e| Error::io(&csv_path, e))?;
    for (row, step) in rows.iter().zip(&trace.steps) {
        let mut fields: Vec<String> = row.iter().map(|w| format!("{w:.8}")).collect();
        fields.push(step.beta.map(|b| format!("{b:.8}")).unwrap_or_default());
        writeln!(csv, "{}", fields.join(",")).map_err(|e| Error::io(&csv_path, e))?;
    }
    let mut written = vec![csv_path];

    if grid * grid != len {
        warn!("{len} annotations do not form a {grid}×{grid} grid; writing CSV only");
        return Ok(written);
    }
    for (t, row) in rows.iter().enumerate() {
        let path = out_dir.join(format!("step_{t:03}.pgm"));
        fs::write(&path, attention_pgm(row, grid)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
