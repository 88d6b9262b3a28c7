//! Target-region masks: the initial hard mask from the instruction's region phrase, its
//! edge-aware soft refinement, and the foreground/background split of the color layers.

use std::num::NonZero;

use image::{GrayImage, Luma, RgbImage};
use imageproc::distance_transform::Norm;
use imageproc::morphology::{close, dilate, erode, open};
use imageproc::region_labelling::{connected_components, Connectivity};
use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{classify_color_term, ColorTerm, Rgb8};
use crate::design::{Mask, PhotoObject};
use crate::instruction::RegionDescriptor;
use crate::palette::{default_spatial_scale, Decomposition};

/// Radius of the opening and closing applied to color-seed masks.
pub const SEED_MORPH_RADIUS: u8 = 2;
/// Seed components smaller than this fraction of the photo are dropped.
pub const SEED_MIN_COMPONENT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskProvider {
    Annotation,
    ColorSeed,
    UserSupplied,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitialRegionMask {
    pub mask: Mask,
    pub provider: MaskProvider,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegionError {
    #[error("region '{phrase}' has no color adjective, annotation, or supplied mask")]
    NoProvider { phrase: String },
    #[error("no pixels found for region '{phrase}'")]
    EmptyMask { phrase: String },
    #[error("initial mask covers the whole photo, leaving no background to anchor")]
    FullMask,
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
}

impl RegionError {
    pub fn code(&self) -> &'static str {
        match self {
            RegionError::NoProvider { .. } => "no-provider",
            RegionError::EmptyMask { .. } => "empty-mask",
            RegionError::FullMask => "full-mask",
            RegionError::DimensionMismatch { .. } => "dimension-mismatch",
        }
    }
}

fn same_phrase(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ");
    norm(a) == norm(b)
}

/// Initial hard mask. Priority: supplied mask, then annotated photo objects matching the
/// phrase (and color, when given), then the color seed.
pub fn initial_mask(
    photo: &RgbImage,
    region: &RegionDescriptor,
    user_mask: Option<&Mask>,
    objects: &[PhotoObject],
) -> Result<InitialRegionMask, RegionError> {
    let dims = photo.dimensions();
    if let Some(m) = user_mask {
        if m.dimensions() != dims {
            return Err(RegionError::DimensionMismatch {
                expected: dims,
                found: m.dimensions(),
            });
        }
        return Ok(InitialRegionMask {
            mask: m.clone(),
            provider: MaskProvider::UserSupplied,
        });
    }
    let matching: Vec<&PhotoObject> = objects
        .iter()
        .filter(|o| same_phrase(&o.phrase, &region.phrase))
        .filter(|o| region.color_adj == ColorTerm::None || o.color == region.color_adj)
        .filter(|o| o.mask.dimensions() == dims)
        .collect();
    if !matching.is_empty() {
        let mut mask = Mask::new(dims.0, dims.1);
        for o in matching {
            mask.union_with(&o.mask);
        }
        if mask.count() > 0 {
            return Ok(InitialRegionMask {
                mask,
                provider: MaskProvider::Annotation,
            });
        }
    }
    if region.color_adj == ColorTerm::None {
        return Err(RegionError::NoProvider {
            phrase: region.phrase.clone(),
        });
    }
    let mask = color_seed(photo, region.color_adj);
    if mask.count() == 0 {
        return Err(RegionError::EmptyMask {
            phrase: region.phrase.clone(),
        });
    }
    Ok(InitialRegionMask {
        mask,
        provider: MaskProvider::ColorSeed,
    })
}

/// Pixels named `term`, opened and closed, keeping 8-connected components of at least
/// `SEED_MIN_COMPONENT` of the photo area.
pub fn color_seed(photo: &RgbImage, term: ColorTerm) -> Mask {
    let (w, h) = photo.dimensions();
    let raw = GrayImage::from_fn(w, h, |x, y| {
        let hit = classify_color_term(Rgb8::from(*photo.get_pixel(x, y))) == term;
        Luma([if hit { 255 } else { 0 }])
    });
    let cleaned = close(&open(&raw, Norm::L2, SEED_MORPH_RADIUS), Norm::L2, SEED_MORPH_RADIUS);
    let labels = connected_components(&cleaned, Connectivity::Eight, Luma([0u8]));
    let max_label = labels.pixels().map(|p| p[0]).max().unwrap_or(0) as usize;
    let mut sizes = vec![0usize; max_label + 1];
    for p in labels.pixels() {
        sizes[p[0] as usize] += 1;
    }
    let min_size = (SEED_MIN_COMPONENT * (w as f64) * (h as f64)).ceil() as usize;
    Mask::from_fn(w, h, |x, y| {
        let l = labels.get_pixel(x, y)[0] as usize;
        l != 0 && sizes[l] >= min_size
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Neighbours per pixel in the affinity graph.
    pub k: usize,
    /// Weight of the data term anchoring the solution to the initial mask.
    pub mu: f64,
    pub erode_radius: u8,
    pub dilate_radius: u8,
    /// Data-term confidence in the band between eroded and dilated masks.
    pub band_confidence: f64,
    /// Relative residual at which the solver stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Spatial scale for the (r, g, b, λx, λy) features; defaults to 255 / max(W, H).
    pub spatial_scale: Option<f64>,
    /// Edges sampled for the median distance that sets the affinity bandwidth.
    pub sigma_samples: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            k: 10,
            mu: 10.0,
            erode_radius: 3,
            dilate_radius: 5,
            band_confidence: 0.05,
            tolerance: 1e-4,
            max_iterations: 2000,
            spatial_scale: None,
            sigma_samples: 10_000,
        }
    }
}

/// Symmetric KNN affinity graph in CSR form; depends only on the photo.
#[derive(Clone, Debug)]
pub struct AffinityGraph {
    pub width: u32,
    pub height: u32,
    pub sigma: f64,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    weights: Vec<f64>,
    degree: Vec<f64>,
}

impl AffinityGraph {
    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    fn row(&self, p: usize) -> (&[u32], &[f64]) {
        let r = self.offsets[p]..self.offsets[p + 1];
        (&self.neighbors[r.clone()], &self.weights[r])
    }
}

/// Builds the KNN affinity graph over (r, g, b, λx, λy) features with Gaussian weights whose
/// bandwidth is the median of sampled edge lengths.
pub fn build_affinity_graph(photo: &RgbImage, cfg: &RefineConfig) -> AffinityGraph {
    let (w, h) = photo.dimensions();
    let lambda = cfg.spatial_scale.unwrap_or_else(|| default_spatial_scale(photo));
    let feats: Vec<[f64; 5]> = photo
        .enumerate_pixels()
        .map(|(x, y, p)| [p[0] as f64, p[1] as f64, p[2] as f64, lambda * x as f64, lambda * y as f64])
        .collect();
    let n = feats.len();
    let k = cfg.k.min(n.saturating_sub(1));
    let mut pairs: Vec<(u32, u32, f64)> = Vec::new();
    if k > 0 {
        let tree: ImmutableKdTree<f64, 5> =
            ImmutableKdTree::new_from_slice(&feats).expect("finite pixel features build a tree");
        let qty = NonZero::new(k + 1).expect("k + 1 > 0");
        let knn: Vec<Vec<(u32, f64)>> = feats
            .par_iter()
            .enumerate()
            .map(|(p, f)| {
                let mut found: Vec<(u32, f64)> = tree
                    .query(f)
                    .nearest_n::<SquaredEuclidean<f64>>(qty)
                    .execute()
                    .iter()
                    .map(|r| (r.item as u32, r.distance))
                    .filter(|(q, _)| *q as usize != p)
                    .collect();
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                found.truncate(k);
                found
            })
            .collect();
        for (p, list) in knn.iter().enumerate() {
            for &(q, d2) in list {
                let (a, b) = if (p as u32) < q { (p as u32, q) } else { (q, p as u32) };
                pairs.push((a, b, d2));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
    pairs.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
    let stride = pairs.len().div_ceil(cfg.sigma_samples.max(1)).max(1);
    let mut sample: Vec<f64> = pairs.iter().step_by(stride).map(|e| e.2.sqrt()).collect();
    sample.sort_by(f64::total_cmp);
    let sigma = sample.get(sample.len() / 2).copied().filter(|s| *s > 0.0).unwrap_or(1.0);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut counts = vec![0usize; n + 1];
    for &(a, b, _) in &pairs {
        counts[a as usize + 1] += 1;
        counts[b as usize + 1] += 1;
    }
    for i in 0..n {
        counts[i + 1] += counts[i];
    }
    let offsets = counts.clone();
    let mut fill = counts;
    let mut neighbors = vec![0u32; offsets[n]];
    let mut weights = vec![0.0; offsets[n]];
    for &(a, b, d2) in &pairs {
        let wgt = (-d2 * inv).exp();
        for (from, to) in [(a, b), (b, a)] {
            let slot = fill[from as usize];
            neighbors[slot] = to;
            weights[slot] = wgt;
            fill[from as usize] += 1;
        }
    }
    let degree = (0..n).map(|p| weights[offsets[p]..offsets[p + 1]].iter().sum()).collect();
    AffinityGraph {
        width: w,
        height: h,
        sigma,
        offsets,
        neighbors,
        weights,
        degree,
    }
}

/// Soft foreground mask with its complement; `m_f` is stored on a 2^-24 grid so that
/// `m_f + m_b == 1` holds exactly in floating point.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftRegionMasks {
    pub width: u32,
    pub height: u32,
    pub m_f: Vec<f64>,
    pub m_b: Vec<f64>,
}

const GRID: f64 = (1u64 << 24) as f64;

impl SoftRegionMasks {
    pub fn from_foreground(width: u32, height: u32, fg: &[f64]) -> Self {
        let m_f: Vec<f64> = fg.iter().map(|v| (v.clamp(0.0, 1.0) * GRID).round() / GRID).collect();
        let m_b = m_f.iter().map(|v| 1.0 - v).collect();
        SoftRegionMasks { width, height, m_f, m_b }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        let fg: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        SoftRegionMasks::from_foreground(mask.width(), mask.height(), &fg)
    }

    pub fn foreground_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([(self.m_f[(y * self.width + x) as usize] * 255.0).round() as u8])
        })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let fg: Vec<f64> = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
        SoftRegionMasks::from_foreground(img.width(), img.height(), &fg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct RefinedMask {
    pub masks: SoftRegionMasks,
    pub confidence: Vec<f64>,
    pub report: SolveReport,
}

/// Per-pixel data-term confidence: 1 on the eroded mask and outside the dilated mask,
/// `band_confidence` in between.
pub fn confidence_map(init: &Mask, cfg: &RefineConfig) -> Vec<f64> {
    let g = init.to_gray();
    let inner = erode(&g, Norm::L2, cfg.erode_radius);
    let outer = dilate(&g, Norm::L2, cfg.dilate_radius);
    inner
        .pixels()
        .zip(outer.pixels())
        .map(|(i, o)| if i[0] > 0 || o[0] == 0 { 1.0 } else { cfg.band_confidence })
        .collect()
}

const CHUNK: usize = 4096;

/// Dot product with fixed chunking so the result is independent of the thread count.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
        .collect();
    partial.iter().sum()
}

fn apply(graph: &AffinityGraph, diag_extra: &[f64], x: &[f64], out: &mut [f64]) {
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        for (i, o) in chunk.iter_mut().enumerate() {
            let p = c * CHUNK + i;
            let (nb, wt) = graph.row(p);
            let mut acc = (graph.degree[p] + diag_extra[p]) * x[p];
            for (q, w) in nb.iter().zip(wt) {
                acc -= w * x[*q as usize];
            }
            *o = acc;
        }
    });
}

/// Solves (L + μC) m = μC·init with Jacobi-preconditioned conjugate gradients, starting
/// from `init`. Stops at the relative residual tolerance or the iteration cap.
pub fn refine_with_graph(
    graph: &AffinityGraph,
    init: &Mask,
    cfg: &RefineConfig,
) -> Result<RefinedMask, RegionError> {
    let dims = (graph.width, graph.height);
    if init.dimensions() != dims {
        return Err(RegionError::DimensionMismatch {
            expected: dims,
            found: init.dimensions(),
        });
    }
    let on = init.count();
    if on == 0 {
        return Err(RegionError::EmptyMask { phrase: String::new() });
    }
    if on == init.len() {
        return Err(RegionError::FullMask);
    }
    let n = graph.len();
    let conf = confidence_map(init, cfg);
    let extra: Vec<f64> = conf.iter().map(|c| cfg.mu * c).collect();
    let target: Vec<f64> = init.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let rhs: Vec<f64> = extra.iter().zip(&target).map(|(e, t)| e * t).collect();
    let diag: Vec<f64> = graph.degree.iter().zip(&extra).map(|(d, e)| d + e).collect();
    let bnorm = dot(&rhs, &rhs).sqrt();

    let mut x = target.clone();
    let mut ax = vec![0.0; n];
    apply(graph, &extra, &x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    let mut iterations = 0;
    while rel > cfg.tolerance && iterations < cfg.max_iterations {
        apply(graph, &extra, &p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        z.par_iter_mut()
            .zip(&r)
            .zip(&diag)
            .for_each(|((zi, ri), di)| *zi = ri / di);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
        iterations += 1;
        rel = dot(&r, &r).sqrt() / bnorm;
    }
    Ok(RefinedMask {
        masks: SoftRegionMasks::from_foreground(dims.0, dims.1, &x),
        confidence: conf,
        report: SolveReport {
            iterations,
            relative_residual: rel,
            converged: rel <= cfg.tolerance,
        },
    })
}

/// Builds the affinity graph for `photo` and refines `init` against it.
pub fn refine_soft_mask(photo: &RgbImage, init: &Mask, cfg: &RefineConfig) -> Result<RefinedMask, RegionError> {
    if init.dimensions() != photo.dimensions() {
        return Err(RegionError::DimensionMismatch {
            expected: photo.dimensions(),
            found: init.dimensions(),
        });
    }
    refine_with_graph(&build_affinity_graph(photo, cfg), init, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Foreground,
    Background,
}

/// A soft color layer restricted to one side of the region.
#[derive(Clone, Debug)]
pub struct SemanticColorLayer {
    pub base_index: usize,
    pub side: Side,
    pub color: [f64; 3],
    pub alpha: Vec<f64>,
}

/// The 2N semantic layers: all foreground layers by base index, then all background layers.
pub fn build_semantic_layers(d: &Decomposition, s: &SoftRegionMasks) -> Result<Vec<SemanticColorLayer>, RegionError> {
    if (d.width, d.height) != (s.width, s.height) {
        return Err(RegionError::DimensionMismatch {
            expected: (d.width, d.height),
            found: (s.width, s.height),
        });
    }
    let n = d.n();
    let mut out = Vec::with_capacity(2 * n);
    for (side, mask) in [(Side::Foreground, &s.m_f), (Side::Background, &s.m_b)] {
        for i in 0..n {
            let alpha = d
                .alpha
                .par_chunks(n)
                .zip(mask.par_iter())
                .map(|(a, m)| a[i] * m)
                .collect();
            out.push(SemanticColorLayer {
                base_index: i,
                side,
                color: d.palette.colors[i],
                alpha,
            });
        }
    }
    Ok(out)
}
