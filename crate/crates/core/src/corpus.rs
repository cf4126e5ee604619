//! Token corpora and their on-disk layout.
//!
//! A corpus directory looks like
//!
//! ```text
//! <dir>/manifest.json              written last; its presence marks a complete store
//! <dir>/pad.bin                    d x float32, little-endian
//! <dir>/labels.jsonl               optional ground truth, one line per image
//! <dir>/<image_id>/embeddings.bin  L x d float32, little-endian, row-major
//! <dir>/<image_id>/requests.jsonl  replay stores only
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::{EmbeddingVector, TokenMatrix};
use crate::oracle::OracleCapabilities;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAD_FILE: &str = "pad.bin";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const REQUESTS_FILE: &str = "requests.jsonl";

/// Ground-truth role of a synthetic token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenLabel {
    Background,
    Object(usize),
}

impl TokenLabel {
    pub fn is_background(self) -> bool {
        self == TokenLabel::Background
    }
}

impl fmt::Display for TokenLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenLabel::Background => f.write_str("B"),
            TokenLabel::Object(c) => write!(f, "O:{c}"),
        }
    }
}

impl FromStr for TokenLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "B" {
            return Ok(TokenLabel::Background);
        }
        s.strip_prefix("O:")
            .and_then(|c| c.parse().ok())
            .map(TokenLabel::Object)
            .ok_or_else(|| Error::InvalidInput(format!("bad token label {s:?}")))
    }
}

impl Serialize for TokenLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusImage {
    pub image_id: String,
    /// `(rows, cols)`; `rows * cols == tokens.rows()`.
    pub grid: (usize, usize),
    pub tokens: TokenMatrix,
    pub labels: Option<Vec<TokenLabel>>,
}

impl CorpusImage {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Class with the most object tokens, ties to the lower class.
    pub fn majority_class(&self) -> Option<usize> {
        let labels = self.labels.as_ref()?;
        let mut counts: Vec<usize> = Vec::new();
        for l in labels {
            if let TokenLabel::Object(c) = *l {
                if counts.len() <= c {
                    counts.resize(c + 1, 0);
                }
                counts[c] += 1;
            }
        }
        let best = *counts.iter().max()?;
        (best > 0).then(|| counts.iter().position(|&n| n == best).unwrap())
    }
}

/// Generation parameters recorded alongside a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub n_classes: usize,
    pub seed: u64,
    pub sigma_obj: f64,
    pub sigma_bg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub images: Vec<CorpusImage>,
    pub synthetic: Option<SynthMeta>,
}

impl Corpus {
    pub fn new(images: Vec<CorpusImage>) -> Result<Self> {
        let corpus = Self {
            images,
            synthetic: None,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.images.first() else {
            return Err(Error::InvalidInput("corpus has no images".into()));
        };
        let dim = first.tokens.dim();
        let mut ids = BTreeSet::new();
        for img in &self.images {
            if !ids.insert(img.image_id.as_str()) {
                return Err(Error::Consistency(format!(
                    "duplicate image id {}",
                    img.image_id
                )));
            }
            if img.image_id.is_empty()
                || img.image_id.contains(['/', '\\'])
                || img.image_id.starts_with('.')
            {
                return Err(Error::InvalidInput(format!(
                    "unusable image id {:?}",
                    img.image_id
                )));
            }
            if img.tokens.dim() != dim {
                return Err(Error::Shape(format!(
                    "image {} has dim {}, corpus dim is {dim}",
                    img.image_id,
                    img.tokens.dim()
                )));
            }
            if img.grid.0 * img.grid.1 != img.len() {
                return Err(Error::Shape(format!(
                    "image {} grid {:?} does not cover {} tokens",
                    img.image_id,
                    img.grid,
                    img.len()
                )));
            }
            if let Some(labels) = &img.labels {
                if labels.len() != img.len() {
                    return Err(Error::Consistency(format!(
                        "image {} has {} labels for {} tokens",
                        img.image_id,
                        labels.len(),
                        img.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.images[0].tokens.dim()
    }

    pub fn get(&self, image_id: &str) -> Option<&CorpusImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn mean_len(&self) -> f64 {
        self.images.iter().map(|i| i.len() as f64).sum::<f64>() / self.images.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCapabilities {
    pub repeat_for_single_input: bool,
    pub uses_image_newline: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    #[serde(rename = "L")]
    pub len: usize,
    pub grid: [usize; 2],
    /// CRC32 of `embeddings.bin`, checked on load when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crc32: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    pub d: usize,
    pub vocab_size: usize,
    pub article_ids: Vec<u32>,
    pub capabilities: ManifestCapabilities,
    pub images: Vec<ManifestImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthMeta>,
}

impl Manifest {
    /// Manifest header describing `caps`, with an empty image list.
    pub fn for_model(model_id: &str, caps: &OracleCapabilities) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_id: model_id.to_owned(),
            d: caps.embed_dim,
            vocab_size: caps.vocab_size,
            article_ids: caps.article_ids.iter().copied().collect(),
            capabilities: ManifestCapabilities {
                repeat_for_single_input: caps.repeat_for_single_input,
                uses_image_newline: caps.uses_image_newline,
            },
            images: Vec::new(),
            synthetic: None,
        }
    }

    pub fn oracle_capabilities(&self) -> OracleCapabilities {
        OracleCapabilities {
            repeat_for_single_input: self.capabilities.repeat_for_single_input,
            uses_image_newline: self.capabilities.uses_image_newline,
            article_ids: self.article_ids.iter().copied().collect(),
            vocab_size: self.vocab_size,
            embed_dim: self.d,
        }
    }
}

pub fn image_dir(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(image_id)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::CorruptStore(format!("{} is missing", path.display()))
        }
        _ => Error::io(path, e),
    })?;
    if bytes.len() != expected * 4 {
        return Err(Error::CorruptStore(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(decode_f32(&bytes))
}

/// Write a corpus directory: per-image embeddings plus whatever `extra`
/// writes into each image directory, labels, the pad embedding, and the
/// manifest last. `header` supplies the model fields; its image list is
/// replaced.
pub fn write_corpus_with<F>(
    dir: &Path,
    corpus: &Corpus,
    header: &Manifest,
    pad: &EmbeddingVector,
    mut extra: F,
) -> Result<Manifest>
where
    F: FnMut(&Path, &CorpusImage) -> Result<()>,
{
    corpus.validate()?;
    if pad.dim() != corpus.dim() || header.d != corpus.dim() {
        return Err(Error::Shape(format!(
            "pad dim {} / manifest dim {} vs corpus dim {}",
            pad.dim(),
            header.d,
            corpus.dim()
        )));
    }
    create_dir(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }

    let mut manifest = header.clone();
    manifest.format_version = FORMAT_VERSION;
    manifest.synthetic = corpus.synthetic.clone();
    manifest.images.clear();
    let mut labels_out = Vec::new();
    for img in &corpus.images {
        let idir = image_dir(dir, &img.image_id);
        create_dir(&idir)?;
        let bytes = encode_f32(img.tokens.as_slice());
        write_file(&idir.join(EMBEDDINGS_FILE), &bytes)?;
        extra(&idir, img)?;
        manifest.images.push(ManifestImage {
            image_id: img.image_id.clone(),
            len: img.len(),
            grid: [img.grid.0, img.grid.1],
            crc32: Some(crc32fast::hash(&bytes)),
        });
        if let Some(labels) = &img.labels {
            labels_out.push(LabelLine {
                image_id: img.image_id.clone(),
                labels: labels.clone(),
            });
        }
    }
    write_file(&dir.join(PAD_FILE), &encode_f32(pad.as_slice()))?;
    if !labels_out.is_empty() {
        write_jsonl(&dir.join(LABELS_FILE), &labels_out)?;
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_corpus(
    dir: &Path,
    corpus: &Corpus,
    header: &Manifest,
    pad: &EmbeddingVector,
) -> Result<Manifest> {
    write_corpus_with(dir, corpus, header, pad, |_, _| Ok(()))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    write_file(&path, text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CorruptStore(format!(
            "{} has no manifest (incomplete or interrupted write)",
            dir.display()
        )),
        _ => Error::io(&path, e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptStore(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.format_version));
    }
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    image_id: String,
    labels: Vec<TokenLabel>,
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::CorruptStore(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(row);
    }
    Ok(out)
}

/// Load every image listed in the manifest, checking blob sizes and CRCs.
pub fn load_corpus(dir: &Path) -> Result<(Manifest, Corpus)> {
    let manifest = read_manifest(dir)?;
    let labels_path = dir.join(LABELS_FILE);
    let labels: Vec<LabelLine> = if labels_path.exists() {
        read_jsonl(&labels_path)?
    } else {
        Vec::new()
    };
    let mut images = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        if entry.grid[0] * entry.grid[1] != entry.len {
            return Err(Error::CorruptStore(format!(
                "image {} grid {:?} does not cover L={}",
                entry.image_id, entry.grid, entry.len
            )));
        }
        let path = image_dir(dir, &entry.image_id).join(EMBEDDINGS_FILE);
        let data = read_blob(&path, entry.len * manifest.d)?;
        if let Some(crc) = entry.crc32 {
            let actual = crc32fast::hash(&encode_f32(&data));
            if actual != crc {
                return Err(Error::CorruptStore(format!(
                    "{} fails its checksum",
                    path.display()
                )));
            }
        }
        let tokens = TokenMatrix::new(entry.len, manifest.d, data)
            .map_err(|e| Error::CorruptStore(format!("{}: {e}", path.display())))?;
        let image_labels = labels
            .iter()
            .find(|l| l.image_id == entry.image_id)
            .map(|l| l.labels.clone());
        images.push(CorpusImage {
            image_id: entry.image_id.clone(),
            grid: (entry.grid[0], entry.grid[1]),
            tokens,
            labels: image_labels,
        });
    }
    let corpus = Corpus {
        images,
        synthetic: manifest.synthetic.clone(),
    };
    corpus
        .validate()
        .map_err(|e| Error::CorruptStore(e.to_string()))?;
    Ok((manifest, corpus))
}

/// Root `pad.bin`, or failing that the per-image pad files (which must all
/// agree).
pub fn load_pad(dir: &Path, manifest: &Manifest) -> Result<EmbeddingVector> {
    let root = dir.join(PAD_FILE);
    let data = if root.exists() {
        read_blob(&root, manifest.d)?
    } else {
        let mut found: Option<Vec<f64>> = None;
        for entry in &manifest.images {
            let path = image_dir(dir, &entry.image_id).join(PAD_FILE);
            let pad = read_blob(&path, manifest.d)?;
            match &found {
                Some(prev) if *prev != pad => {
                    return Err(Error::CorruptStore(format!(
                        "{} disagrees with the other pad embeddings",
                        path.display()
                    )))
                }
                _ => found = Some(pad),
            }
        }
        found.ok_or_else(|| Error::CorruptStore("store has no pad embedding".into()))?
    };
    EmbeddingVector::new(data).map_err(|e| Error::CorruptStore(e.to_string()))
}
