//! Layer selection by overlap with the refined region, lightness-preserving recoloring of the
//! selected layers, and recomposition of the photo.

use std::collections::HashMap;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{lab_to_rgb_clamped, rgb_f64_to_lab, rgb_to_lab, Lab, Rgb8};
use crate::region::{SemanticColorLayer, Side, SoftRegionMasks};

/// Number of target layers recolored per source color.
pub const TARGET_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecolorError {
    #[error("no semantic layer overlaps the target region")]
    NoOverlappingLayer,
    #[error("layer and image sizes disagree: expected {expected} pixels, found {found}")]
    SizeMismatch { expected: usize, found: usize },
}

impl RecolorError {
    pub fn code(&self) -> &'static str {
        match self {
            RecolorError::NoOverlappingLayer => "no-overlapping-layer",
            RecolorError::SizeMismatch { .. } => "size-mismatch",
        }
    }
}

/// Overlap rate of one semantic layer with the foreground mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapScore {
    pub layer: usize,
    pub base_index: usize,
    pub side: Side,
    pub o: f64,
}

/// Mean opacity per pixel below which a layer counts as empty; solver round-off leaves
/// traces near 1e-15 in colors that are absent from the photo.
pub const EMPTY_LAYER_MASS: f64 = 1e-6;

fn overlap(num: f64, den: f64, pixels: usize) -> f64 {
    if den > EMPTY_LAYER_MASS * pixels as f64 {
        (num / den).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// o = Σ α·m_f / Σ α for a color layer's opacity field, and 0 when the layer is empty.
pub fn overlap_rate(alpha: &[f64], m_f: &[f64]) -> f64 {
    let (num, den) = alpha
        .iter()
        .zip(m_f)
        .fold((0.0, 0.0), |(n, d), (a, m)| (n + a * m, d + a));
    overlap(num, den, alpha.len())
}

/// Overlap of each semantic layer: the share of its color layer's total opacity that the
/// semantic layer places inside the foreground. The color layer's mass is the sum of its
/// foreground and background halves, since m_f + m_b = 1. With a hard mask this is the
/// fraction of the color inside the region for the foreground half and 0 for the background
/// half.
pub fn compute_overlap_rates(layers: &[SemanticColorLayer], masks: &SoftRegionMasks) -> Vec<OverlapScore> {
    let masses: Vec<f64> = layers.par_iter().map(|l| l.alpha.iter().sum()).collect();
    let mut base_mass: HashMap<usize, f64> = HashMap::new();
    for (l, m) in layers.iter().zip(&masses) {
        *base_mass.entry(l.base_index).or_default() += m;
    }
    layers
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let num: f64 = l.alpha.iter().zip(&masks.m_f).map(|(a, m)| a * m).sum();
            OverlapScore {
                layer: i,
                base_index: l.base_index,
                side: l.side,
                o: overlap(num, base_mass[&l.base_index], l.alpha.len()),
            }
        })
        .collect()
}

/// Top `n` layers by overlap, ties by layer index; zero-overlap layers never qualify.
pub fn select_target_layers(scores: &[OverlapScore], n: usize) -> Result<Vec<OverlapScore>, RecolorError> {
    let mut ranked: Vec<OverlapScore> = scores.iter().copied().filter(|s| s.o > 0.0).collect();
    ranked.sort_by(|a, b| b.o.total_cmp(&a.o).then(a.layer.cmp(&b.layer)));
    ranked.truncate(n);
    if ranked.is_empty() {
        return Err(RecolorError::NoOverlappingLayer);
    }
    Ok(ranked)
}

/// The new color of one target layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecolor {
    pub layer: usize,
    pub base_index: usize,
    pub side: Side,
    pub overlap: f64,
    pub original: Rgb8,
    pub original_lab: Lab,
    pub delta_l: f64,
    pub l_hat: f64,
    pub new_color: Rgb8,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecolorReport {
    pub overlap_rates: Vec<OverlapScore>,
    pub targets: Vec<TargetRecolor>,
}

#[derive(Clone, Debug)]
pub struct RecolorResult {
    pub image: RgbImage,
    pub source_color: Rgb8,
    pub report: RecolorReport,
}

/// New colors for the targets: the source chroma with each layer's lightness offset from the
/// dominant target kept. Targets must be non-empty with the dominant layer first.
pub fn target_colors(layers: &[SemanticColorLayer], targets: &[OverlapScore], c_s: Rgb8) -> Vec<TargetRecolor> {
    let src = rgb_to_lab(c_s);
    let l_t1 = rgb_f64_to_lab(layers[targets[0].layer].color).l;
    targets
        .iter()
        .map(|t| {
            let color = layers[t.layer].color;
            let lab = rgb_f64_to_lab(color);
            let delta_l = lab.l - l_t1;
            let l_hat = (src.l + delta_l).clamp(0.0, 100.0);
            let (new_color, clamped) = lab_to_rgb_clamped(Lab::new(l_hat, src.a, src.b));
            TargetRecolor {
                layer: t.layer,
                base_index: t.base_index,
                side: t.side,
                overlap: t.o,
                original: Rgb8::from_f64(color),
                original_lab: lab,
                delta_l,
                l_hat,
                new_color,
                clamped,
            }
        })
        .collect()
}

/// Σ_l α_l · color_l over any set of layers, unrounded.
pub fn recompose_layers(layers: &[SemanticColorLayer], pixels: usize) -> Vec<[f64; 3]> {
    (0..pixels)
        .into_par_iter()
        .map(|p| {
            let mut c = [0.0; 3];
            for l in layers {
                for k in 0..3 {
                    c[k] += l.alpha[p] * l.color[k];
                }
            }
            c
        })
        .collect()
}

/// Per-pixel change Σ_targets α_t · (c′_t − c_t).
fn target_delta(layers: &[SemanticColorLayer], targets: &[TargetRecolor], pixels: usize) -> Vec<[f64; 3]> {
    (0..pixels)
        .into_par_iter()
        .map(|p| {
            let mut d = [0.0; 3];
            for t in targets {
                let l = &layers[t.layer];
                let new = t.new_color.to_f64();
                for k in 0..3 {
                    d[k] += l.alpha[p] * (new[k] - l.color[k]);
                }
            }
            d
        })
        .collect()
}

/// Recolors `photo` by moving the selected layers to new colors. The unexplained residual of the
/// decomposition is carried over unchanged, so pixels outside the targets keep their exact values.
pub fn recolor_with_source(
    photo: &RgbImage,
    layers: &[SemanticColorLayer],
    scores: Vec<OverlapScore>,
    targets: &[OverlapScore],
    c_s: Rgb8,
) -> Result<RecolorResult, RecolorError> {
    let pixels = (photo.width() * photo.height()) as usize;
    if let Some(l) = layers.iter().find(|l| l.alpha.len() != pixels) {
        return Err(RecolorError::SizeMismatch {
            expected: pixels,
            found: l.alpha.len(),
        });
    }
    if targets.is_empty() {
        return Err(RecolorError::NoOverlappingLayer);
    }
    let recolored = target_colors(layers, targets, c_s);
    let delta = target_delta(layers, &recolored, pixels);
    let w = photo.width();
    let image = RgbImage::from_fn(w, photo.height(), |x, y| {
        let p = (y * w + x) as usize;
        let base = photo.get_pixel(x, y).0;
        Rgb8::from_f64([0, 1, 2].map(|k| base[k] as f64 + delta[p][k])).into()
    });
    Ok(RecolorResult {
        image,
        source_color: c_s,
        report: RecolorReport {
            overlap_rates: scores,
            targets: recolored,
        },
    })
}

/// Scores, selects and recolors in one step.
pub fn recolor_region(
    photo: &RgbImage,
    layers: &[SemanticColorLayer],
    masks: &SoftRegionMasks,
    c_s: Rgb8,
) -> Result<RecolorResult, RecolorError> {
    let scores = compute_overlap_rates(layers, masks);
    let targets = select_target_layers(&scores, TARGET_LAYERS)?;
    recolor_with_source(photo, layers, scores, &targets, c_s)
}
