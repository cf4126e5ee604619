//! Seeded synthetic "images": token grids with planted rectangular objects
//! on a near-constant background.
//!
//! Class `c` lives along the basis vector `e_c`; the background along
//! `e_{d-1}`. Object tokens are `e_c + N(0, sigma_obj^2)`, background tokens
//! `e_{d-1} + N(0, sigma_bg^2)`, rounded to `f32`.
//!
//! Randomness: image `i` draws from ChaCha8 seeded with the corpus seed on
//! stream `i`, so images can be generated independently and in any order.
//! Per image: object count uniform in `1..=min(3, C)`, distinct classes,
//! rectangle sides uniform in `2..=3` (clipped to `G-1`), placements
//! rejection-sampled so rectangles never overlap.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::corpus::{Corpus, CorpusImage, SynthMeta, TokenLabel};
use crate::error::{Error, Result};
use crate::numerics::TokenMatrix;

const MAX_OBJECTS: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_images: usize,
    pub grid: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub sigma_obj: f64,
    pub sigma_bg: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_images: 100,
            grid: 8,
            n_classes: 4,
            dim: 32,
            seed: 42,
            sigma_obj: 0.05,
            sigma_bg: 0.01,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 3 {
            return Err(Error::InvalidInput(format!(
                "grid must be at least 3, got {}",
                self.grid
            )));
        }
        if self.n_classes == 0 || self.n_classes + 2 > self.dim {
            return Err(Error::InvalidInput(format!(
                "need 1 <= classes <= dim - 2 (classes {}, dim {})",
                self.n_classes, self.dim
            )));
        }
        if self.n_images == 0 {
            return Err(Error::InvalidInput(
                "corpus needs at least one image".into(),
            ));
        }
        if !(self.sigma_obj >= 0.0 && self.sigma_bg >= 0.0)
            || !self.sigma_obj.is_finite()
            || !self.sigma_bg.is_finite()
        {
            return Err(Error::InvalidInput(
                "noise levels must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn meta(&self) -> SynthMeta {
        SynthMeta {
            n_classes: self.n_classes,
            seed: self.seed,
            sigma_obj: self.sigma_obj,
            sigma_bg: self.sigma_bg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image_id: String,
    pub grid: usize,
    pub tokens: TokenMatrix,
    pub labels: Vec<TokenLabel>,
    /// Corpus seed; the image uses ChaCha8 stream `index` under it.
    pub seed: u64,
    pub index: u64,
}

impl From<SynthImage> for CorpusImage {
    fn from(img: SynthImage) -> Self {
        CorpusImage {
            image_id: img.image_id,
            grid: (img.grid, img.grid),
            tokens: img.tokens,
            labels: Some(img.labels),
        }
    }
}

pub fn class_direction(class: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[class] = 1.0;
    v
}

pub fn background_direction(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[dim - 1] = 1.0;
    v
}

pub fn image_id(index: usize) -> String {
    format!("synth_{index:05}")
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    row: usize,
    col: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.row < o.row + o.h
            && o.row < self.row + self.h
            && self.col < o.col + o.w
            && o.col < self.col + self.w
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.h).contains(&r) && (self.col..self.col + self.w).contains(&c)
    }
}

fn generate_image(p: &SynthParams, index: usize) -> Result<SynthImage> {
    let g = p.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index as u64);

    let n_obj = rng.random_range(1..=MAX_OBJECTS.min(p.n_classes));
    let classes = sample(&mut rng, p.n_classes, n_obj).into_vec();
    let max_side = 3.min(g - 1);
    let min_side = 2.min(max_side);
    let mut rects: Vec<(Rect, usize)> = Vec::with_capacity(n_obj);
    for &class in &classes {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let h = rng.random_range(min_side..=max_side);
            let w = rng.random_range(min_side..=max_side);
            let rect = Rect {
                row: rng.random_range(0..=g - h),
                col: rng.random_range(0..=g - w),
                h,
                w,
            };
            if rects.iter().all(|(r, _)| !r.overlaps(&rect)) {
                rects.push((rect, class));
                break;
            }
        }
    }

    let obj_noise =
        Normal::new(0.0, p.sigma_obj).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let bg_noise = Normal::new(0.0, p.sigma_bg).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let background = background_direction(p.dim);
    let mut data = Vec::with_capacity(g * g * p.dim);
    let mut labels = Vec::with_capacity(g * g);
    for r in 0..g {
        for c in 0..g {
            let hit = rects.iter().find(|(rect, _)| rect.contains(r, c));
            let (base, noise, label) = match hit {
                Some(&(_, class)) => (
                    class_direction(class, p.dim),
                    &obj_noise,
                    TokenLabel::Object(class),
                ),
                None => (background.clone(), &bg_noise, TokenLabel::Background),
            };
            data.extend(
                base.iter()
                    .map(|b| (b + noise.sample(&mut rng)) as f32 as f64),
            );
            labels.push(label);
        }
    }
    Ok(SynthImage {
        image_id: image_id(index),
        grid: g,
        tokens: TokenMatrix::new(g * g, p.dim, data)?,
        labels,
        seed: p.seed,
        index: index as u64,
    })
}

pub fn generate_corpus(p: &SynthParams) -> Result<Vec<SynthImage>> {
    p.validate()?;
    (0..p.n_images)
        .into_par_iter()
        .map(|i| generate_image(p, i))
        .collect()
}

/// [`generate_corpus`] packaged as a [`Corpus`] with its generation metadata.
pub fn generate(p: &SynthParams) -> Result<Corpus> {
    let images = generate_corpus(p)?
        .into_iter()
        .map(CorpusImage::from)
        .collect();
    let mut corpus = Corpus::new(images)?;
    corpus.synthetic = Some(p.meta());
    Ok(corpus)
}
