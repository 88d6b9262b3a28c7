//! Convex-hull palette extraction and RGBXY decomposition of a photo into soft additive
//! color layers.

pub mod hull;
pub mod rgbxy;
pub mod star;

use std::collections::HashSet;

use image::{GrayImage, Luma, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{luma, Rgb8};
use hull::{color_rank, hull2, principal_axes3, simplify_hull, simplify_polygon, HullError};
pub use rgbxy::{rgbxy_weights, RgbxyWeights, TessellationError, MAX_NNZ};
use star::PaletteStar;

pub const MIN_PALETTE: usize = 2;
pub const MAX_PALETTE: usize = 12;
pub const DEFAULT_PALETTE: usize = 6;
/// Largest palette tried by automatic sizing.
pub const AUTO_MAX: usize = 10;
/// Reconstruction error automatic sizing aims for, in units of full scale.
pub const AUTO_RMSE: f64 = 2.0 / 255.0;
/// Unique colors beyond this count are strided down before hulling.
pub const MAX_HULL_POINTS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PaletteSize {
    Fixed(usize),
    Auto,
}

impl Default for PaletteSize {
    fn default() -> Self {
        PaletteSize::Fixed(DEFAULT_PALETTE)
    }
}

impl std::str::FromStr for PaletteSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(PaletteSize::Auto);
        }
        let n: usize = s.parse().map_err(|_| format!("palette size must be an integer or 'auto', got '{s}'"))?;
        if !(MIN_PALETTE..=MAX_PALETTE).contains(&n) {
            return Err(format!("palette size must lie in [{MIN_PALETTE}, {MAX_PALETTE}], got {n}"));
        }
        Ok(PaletteSize::Fixed(n))
    }
}

/// Ordered palette vertices, stored real-valued; every coordinate lies in [0, 255].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[f64; 3]>,
}

impl Palette {
    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn rgb8(&self) -> Vec<Rgb8> {
        self.colors.iter().map(|c| Rgb8::from_f64(*c)).collect()
    }

    /// Clips to the RGB cube, drops near-duplicates, and orders by descending luma.
    pub fn normalized(colors: Vec<[f64; 3]>) -> Palette {
        let mut out: Vec<[f64; 3]> = Vec::new();
        for c in colors {
            let c = c.map(|v| v.clamp(0.0, 255.0));
            if !out.iter().any(|o| hull::norm3(hull::sub3(*o, c)) < 1e-6) {
                out.push(c);
            }
        }
        out.sort_by(|a, b| {
            luma(*b)
                .total_cmp(&luma(*a))
                .then(a[0].total_cmp(&b[0]))
                .then(a[1].total_cmp(&b[1]))
                .then(a[2].total_cmp(&b[2]))
        });
        Palette { colors: out }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PaletteWarning {
    /// Fewer hull vertices than requested; the hull was returned as is.
    NTooLarge { requested: usize, available: usize },
    /// The cloud is collinear or coplanar; a lower-dimensional palette was built.
    DegenerateColorCloud { rank: usize },
    /// A full-rank cloud cannot be enclosed by fewer than four colors.
    SizeRaised { requested: usize, used: usize },
    /// No enclosing collapse was available before reaching the requested size.
    SimplificationStalled { reached: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PaletteExtraction {
    pub palette: Palette,
    pub requested: PaletteSize,
    pub rank: usize,
    pub initial_hull_vertices: usize,
    pub warnings: Vec<PaletteWarning>,
}

#[derive(Debug, thiserror::Error)]
pub enum PaletteError {
    #[error("photo has fewer than 2 distinct colors")]
    TooFewColors,
    #[error("palette size {0} outside [{MIN_PALETTE}, {MAX_PALETTE}]")]
    InvalidSize(usize),
    #[error("palette must hold between {MIN_PALETTE} and {MAX_PALETTE} colors inside the RGB cube")]
    InvalidPalette,
    #[error("decomposition dimensions {found:?} do not match photo {expected:?}")]
    SizeMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error(transparent)]
    Hull(#[from] HullError),
    #[error(transparent)]
    Tessellation(#[from] TessellationError),
}

impl PaletteError {
    pub fn code(&self) -> &'static str {
        match self {
            PaletteError::TooFewColors => "degenerate-color-cloud",
            PaletteError::InvalidSize(_) => "invalid-palette-size",
            PaletteError::InvalidPalette => "invalid-palette",
            PaletteError::SizeMismatch { .. } => "size-mismatch",
            PaletteError::Hull(_) => "hull-failed",
            PaletteError::Tessellation(_) => "degenerate-tessellation",
        }
    }
}

/// Distinct colors of a photo in ascending packed order, strided to at most `MAX_HULL_POINTS`.
pub fn unique_colors(photo: &RgbImage) -> Vec<[f64; 3]> {
    let mut seen = HashSet::new();
    for p in photo.pixels() {
        seen.insert(u32::from_be_bytes([0, p[0], p[1], p[2]]));
    }
    let mut packed: Vec<u32> = seen.into_iter().collect();
    packed.sort_unstable();
    let stride = packed.len().div_ceil(MAX_HULL_POINTS).max(1);
    packed
        .iter()
        .step_by(stride)
        .map(|v| {
            let [_, r, g, b] = v.to_be_bytes();
            [r as f64, g as f64, b as f64]
        })
        .collect()
}

/// Enclosing palette of exactly `n` colors where the geometry allows it.
pub fn extract_palette_n(photo: &RgbImage, n: usize) -> Result<PaletteExtraction, PaletteError> {
    if !(MIN_PALETTE..=MAX_PALETTE).contains(&n) {
        return Err(PaletteError::InvalidSize(n));
    }
    let pts = unique_colors(photo);
    if pts.len() < 2 {
        return Err(PaletteError::TooFewColors);
    }
    let (mean, vals, axes) = principal_axes3(&pts);
    let mut rank = color_rank(vals);
    let mut warnings = Vec::new();
    let mut initial = 0;
    let mut colors = Vec::new();
    if rank == 3 {
        let target = n.max(4);
        if target != n {
            warnings.push(PaletteWarning::SizeRaised { requested: n, used: target });
        }
        match simplify_hull(&pts, target) {
            Ok(s) => {
                initial = s.initial_vertices;
                if s.initial_vertices < n {
                    warnings.push(PaletteWarning::NTooLarge {
                        requested: n,
                        available: s.initial_vertices,
                    });
                }
                if s.stalled {
                    warnings.push(PaletteWarning::SimplificationStalled { reached: s.vertices.len() });
                }
                colors = s.vertices;
            }
            Err(_) => rank = 2,
        }
    }
    if rank == 2 {
        let coords: Vec<[f64; 2]> = pts
            .iter()
            .map(|p| {
                let d = hull::sub3(*p, mean);
                [hull::dot3(d, axes[0]), hull::dot3(d, axes[1])]
            })
            .collect();
        let poly = hull2(&coords);
        initial = poly.len();
        if poly.len() < n {
            warnings.push(PaletteWarning::NTooLarge {
                requested: n,
                available: poly.len(),
            });
        }
        let target = n.max(3);
        if target != n {
            warnings.push(PaletteWarning::SizeRaised { requested: n, used: target });
        }
        colors = simplify_polygon(poly, target)
            .iter()
            .map(|q| [0, 1, 2].map(|k| mean[k] + q[0] * axes[0][k] + q[1] * axes[1][k]))
            .collect();
        warnings.push(PaletteWarning::DegenerateColorCloud { rank: 2 });
    }
    if rank <= 1 {
        let t: Vec<f64> = pts.iter().map(|p| hull::dot3(hull::sub3(*p, mean), axes[0])).collect();
        let lo = (0..pts.len()).min_by(|&a, &b| t[a].total_cmp(&t[b])).unwrap();
        let hi = (0..pts.len()).max_by(|&a, &b| t[a].total_cmp(&t[b])).unwrap();
        colors = vec![pts[lo], pts[hi]];
        initial = 2;
        if n > 2 {
            warnings.push(PaletteWarning::NTooLarge { requested: n, available: 2 });
        }
        warnings.push(PaletteWarning::DegenerateColorCloud { rank: 1 });
        rank = 1;
    }
    Ok(PaletteExtraction {
        palette: Palette::normalized(colors),
        requested: PaletteSize::Fixed(n),
        rank,
        initial_hull_vertices: initial,
        warnings,
    })
}

/// Palette extraction; `Auto` picks the smallest size up to `AUTO_MAX` whose decomposition
/// reconstructs within `AUTO_RMSE`, falling back to `AUTO_MAX`.
pub fn extract_palette(photo: &RgbImage, size: PaletteSize) -> Result<PaletteExtraction, PaletteError> {
    match size {
        PaletteSize::Fixed(n) => extract_palette_n(photo, n),
        PaletteSize::Auto => {
            let tess = rgbxy_weights(photo, default_spatial_scale(photo))?;
            let mut last = None;
            for n in MIN_PALETTE..=AUTO_MAX {
                let mut ex = extract_palette_n(photo, n)?;
                ex.requested = PaletteSize::Auto;
                let d = decompose_with(photo, &tess, &ex.palette)?;
                if d.stats.reconstruction_rmse <= AUTO_RMSE {
                    return Ok(ex);
                }
                last = Some(ex);
            }
            Ok(last.expect("at least one size tried"))
        }
    }
}

/// λ = 255 / max(W, H), so both spatial axes span the same range as a color channel.
pub fn default_spatial_scale(photo: &RgbImage) -> f64 {
    255.0 / photo.width().max(photo.height()).max(1) as f64
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DecompositionStats {
    /// Root mean squared error of the layer sum against the photo, full scale = 1.
    pub reconstruction_rmse: f64,
    /// Most negative weight seen anywhere before clamping.
    pub min_raw_weight: f64,
    /// Largest |Σα − 1| over pixels after renormalization.
    pub max_sum_error: f64,
    /// Largest RGBXY snap distance for points found outside the tessellation.
    pub max_rgbxy_snap: f64,
    /// Largest RGB distance from a hull vertex color to the palette hull.
    pub max_palette_snap: f64,
    pub max_rgbxy_nonzeros: usize,
    pub rgbxy_vertices: usize,
    pub rgbxy_rank: usize,
    pub simplices: usize,
}

/// Soft additive layers: per pixel, `alpha[p * N + i]` is the opacity of palette color i.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub palette: Palette,
    pub width: u32,
    pub height: u32,
    pub alpha: Vec<f64>,
    pub stats: DecompositionStats,
}

/// One palette color with its opacity field.
#[derive(Clone, Debug)]
pub struct SoftColorLayer {
    pub palette_index: usize,
    pub color: [f64; 3],
    pub alpha: Vec<f64>,
}

impl SoftColorLayer {
    pub fn to_gray(&self, width: u32, height: u32) -> GrayImage {
        GrayImage::from_fn(width, height, |x, y| {
            let a = self.alpha[(y * width + x) as usize];
            Luma([(a * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }
}

impl Decomposition {
    pub fn n(&self) -> usize {
        self.palette.len()
    }

    pub fn pixel_alphas(&self, p: usize) -> &[f64] {
        let n = self.n();
        &self.alpha[p * n..(p + 1) * n]
    }

    pub fn layer(&self, i: usize) -> SoftColorLayer {
        let n = self.n();
        SoftColorLayer {
            palette_index: i,
            color: self.palette.colors[i],
            alpha: self.alpha.iter().skip(i).step_by(n).copied().collect(),
        }
    }

    pub fn layers(&self) -> Vec<SoftColorLayer> {
        (0..self.n()).map(|i| self.layer(i)).collect()
    }

    /// Per-pixel Σ α_i · color_i, unrounded.
    pub fn reconstruct_f64(&self) -> Vec<[f64; 3]> {
        let n = self.n();
        self.alpha
            .chunks(n)
            .map(|a| {
                let mut c = [0.0; 3];
                for (w, col) in a.iter().zip(&self.palette.colors) {
                    for k in 0..3 {
                        c[k] += w * col[k];
                    }
                }
                c
            })
            .collect()
    }
}

/// Per-pixel Σ α_i · color_i rounded to 8 bits.
pub fn reconstruct_image(d: &Decomposition) -> RgbImage {
    let rec = d.reconstruct_f64();
    RgbImage::from_fn(d.width, d.height, |x, y| Rgb8::from_f64(rec[(y * d.width + x) as usize]).into())
}

/// RMSE between two equally sized color buffers in full-scale units.
pub fn rmse(photo: &RgbImage, rec: &[[f64; 3]]) -> f64 {
    let n = rec.len().max(1) as f64;
    let sum: f64 = photo
        .pixels()
        .zip(rec)
        .map(|(p, c)| (0..3).map(|k| ((c[k] - p[k] as f64) / 255.0).powi(2)).sum::<f64>())
        .sum();
    (sum / (3.0 * n)).sqrt()
}

fn validate_palette(p: &Palette) -> Result<(), PaletteError> {
    let ok = (MIN_PALETTE..=MAX_PALETTE).contains(&p.len())
        && p.colors.iter().flatten().all(|v| v.is_finite() && (0.0..=255.0).contains(v));
    if ok {
        Ok(())
    } else {
        Err(PaletteError::InvalidPalette)
    }
}

/// Decomposes `photo` over `palette`, computing the RGBXY tessellation from scratch.
pub fn decompose_layers(photo: &RgbImage, palette: &Palette) -> Result<Decomposition, PaletteError> {
    validate_palette(palette)?;
    let tess = rgbxy_weights(photo, default_spatial_scale(photo))?;
    decompose_with(photo, &tess, palette)
}

/// Composes cached pixel-to-vertex weights with vertex-to-palette weights.
pub fn decompose_with(photo: &RgbImage, tess: &RgbxyWeights, palette: &Palette) -> Result<Decomposition, PaletteError> {
    validate_palette(palette)?;
    if photo.dimensions() != (tess.width, tess.height) {
        return Err(PaletteError::SizeMismatch {
            expected: photo.dimensions(),
            found: (tess.width, tess.height),
        });
    }
    let n = palette.len();
    let star = PaletteStar::new(&palette.colors);
    let vw: Vec<star::StarWeights> = tess.vertex_colors.iter().map(|c| star.weights(*c)).collect();
    let mut stats = DecompositionStats {
        min_raw_weight: tess.min_raw_weight,
        max_rgbxy_snap: tess.max_snap_distance,
        max_rgbxy_nonzeros: tess.max_nonzeros(),
        rgbxy_vertices: tess.vertex_colors.len(),
        rgbxy_rank: tess.rank,
        simplices: tess.simplices,
        ..Default::default()
    };
    for w in &vw {
        stats.min_raw_weight = stats.min_raw_weight.min(w.min_raw);
        stats.max_palette_snap = stats.max_palette_snap.max(w.snap);
    }
    let mut alpha = vec![0.0; tess.pixel_count() * n];
    let sum_errors: Vec<f64> = alpha
        .par_chunks_mut(n * tess.width.max(1) as usize)
        .enumerate()
        .map(|(row, out)| {
            let mut worst = 0.0f64;
            for (x, a) in out.chunks_mut(n).enumerate() {
                let p = row * tess.width as usize + x;
                for (id, w) in tess.vertex_ids[p].iter().zip(&tess.weights[p]) {
                    if *w == 0.0 {
                        continue;
                    }
                    for (ai, vi) in a.iter_mut().zip(&vw[*id as usize].weights) {
                        *ai += w * vi;
                    }
                }
                let s: f64 = a.iter().map(|v| v.max(0.0)).sum();
                for v in a.iter_mut() {
                    *v = v.max(0.0) / s;
                }
                worst = worst.max((a.iter().sum::<f64>() - 1.0).abs());
            }
            worst
        })
        .collect();
    stats.max_sum_error = sum_errors.into_iter().fold(0.0, f64::max);
    let mut d = Decomposition {
        palette: palette.clone(),
        width: tess.width,
        height: tess.height,
        alpha,
        stats,
    };
    d.stats.reconstruction_rmse = rmse(photo, &d.reconstruct_f64());
    Ok(d)
}
