//! Frozen, weight-free stand-ins for the text and image encoders.
//!
//! The text encoder maps a prompt to a unit vector drawn from a normal
//! distribution seeded by a stable 64-bit hash of the prompt bytes. The image
//! encoder turns per-patch statistics into unit vectors through a fixed random
//! projection. Both are deterministic across processes and platforms.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Seed of the image-statistics projection.
const IMAGE_PROJECTION_SEED: u64 = 0x1A6E_5EED_0000_0001;

/// Per-patch statistics fed to the image projection: bias, mean, variance, edge energy.
const IMAGE_STATS: usize = 4;

/// FNV-1a over the raw bytes.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

fn unit_gaussian(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn encode_text(prompt: &str, dim: usize) -> Result<Tensor> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if dim == 0 {
        return Err(Error::Input("embedding width must be positive".into()));
    }
    Tensor::new(vec![1, dim], unit_gaussian(stable_hash(prompt.as_bytes()), dim))
}

fn patch_stats(patch: &[f64], side_h: usize, side_w: usize) -> [f64; IMAGE_STATS] {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut edge = 0.0;
    for y in 0..side_h {
        for x in 0..side_w {
            let v = patch[y * side_w + x];
            if x + 1 < side_w {
                edge += (patch[y * side_w + x + 1] - v).abs();
            }
            if y + 1 < side_h {
                edge += (patch[(y + 1) * side_w + x] - v).abs();
            }
        }
    }
    [1.0, mean, var, edge / n]
}

fn image_projection(dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(IMAGE_PROJECTION_SEED ^ dim as u64);
    Tensor::randn(vec![IMAGE_STATS, dim], 1.0, &mut rng)
}

/// `tokens` must be a perfect square; the image is split into a √M×√M grid.
pub fn encode_image_global(image: &Image, dim: usize, tokens: usize) -> Result<Tensor> {
    let side = (tokens as f64).sqrt().round() as usize;
    if tokens == 0 || side * side != tokens {
        return Err(Error::Input(format!("token count {tokens} is not a square grid")));
    }
    let patches = image.patch_grid(side, side)?;
    let (ph, pw) = (image.height / side, image.width / side);
    let stats: Vec<f64> = patches
        .iter()
        .flat_map(|p| patch_stats(p, ph, pw))
        .collect();
    let stats = Tensor::new(vec![tokens, IMAGE_STATS], stats)?;
    let projected = stats.matmul(&image_projection(dim))?;
    Ok(projected.normalize_rows())
}

/// Category description plus ordered keypoint descriptions.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PromptSet {
    pub category: String,
    pub keypoints: Vec<String>,
}

impl PromptSet {
    pub fn new(category: impl Into<String>, keypoints: Vec<String>) -> Result<Self> {
        let category = category.into();
        if category.is_empty() {
            return Err(Error::Input("empty category description".into()));
        }
        if keypoints.is_empty() || keypoints.iter().any(String::is_empty) {
            return Err(Error::Input("keypoint descriptions must be non-empty".into()));
        }
        Ok(PromptSet { category, keypoints })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Sidecar text: category on the first line, one keypoint per following line.
    pub fn parse_sidecar(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim_end).filter(|l| !l.is_empty());
        let category = lines
            .next()
            .ok_or_else(|| Error::Input("prompt file is empty".into()))?;
        PromptSet::new(category, lines.map(str::to_owned).collect())
    }

    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", self.category).expect("write to string");
        for k in &self.keypoints {
            writeln!(out, "{k}").expect("write to string");
        }
        out
    }
}

/// Frozen embeddings for one query: joints `N×C`, class `1×C`, image `M×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub e_joint: Tensor,
    pub e_cls: Tensor,
    pub e_img: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub dim: usize,
    pub tokens: usize,
}

pub fn build_bundle(prompts: &PromptSet, image: &Image, dims: EncoderDims) -> Result<EmbeddingBundle> {
    let rows = prompts
        .keypoints
        .iter()
        .map(|k| encode_text(k, dims.dim))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&Tensor> = rows.iter().collect();
    Ok(EmbeddingBundle {
        e_joint: Tensor::concat_rows(&rows)?,
        e_cls: encode_text(&prompts.category, dims.dim)?,
        e_img: encode_image_global(image, dims.dim, dims.tokens)?,
    })
}

/// Prompt corruption used by the robustness suites.
#[derive(Clone, Copy, Debug)]
pub enum PromptNoise<'a> {
    /// One adjacent-character transposition or duplication.
    Typo,
    /// Replacement by a different entry of the candidate list.
    ClassSubstitute(&'a [String]),
}

pub fn perturb_prompt(prompt: &str, noise: PromptNoise<'_>, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(prompt.as_bytes()));
    match noise {
        PromptNoise::Typo => {
            let chars: Vec<char> = prompt.chars().collect();
            if chars.is_empty() {
                return Err(Error::Input("cannot add a typo to an empty prompt".into()));
            }
            let swaps: Vec<usize> = (0..chars.len().saturating_sub(1))
                .filter(|&i| chars[i] != chars[i + 1])
                .collect();
            let mut out = chars.clone();
            if !swaps.is_empty() && rng.random_bool(0.5) {
                let i = swaps[rng.random_range(0..swaps.len())];
                out.swap(i, i + 1);
            } else {
                let i = rng.random_range(0..chars.len());
                out.insert(i, chars[i]);
            }
            Ok(out.into_iter().collect())
        }
        PromptNoise::ClassSubstitute(candidates) => {
            let others: Vec<&String> = candidates.iter().filter(|c| *c != prompt).collect();
            if others.is_empty() {
                return Err(Error::Input(format!(
                    "no substitute category differs from `{prompt}`"
                )));
            }
            Ok(others[rng.random_range(0..others.len())].clone())
        }
    }
}
