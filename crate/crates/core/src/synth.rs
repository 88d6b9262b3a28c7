//! Synthetic annotated designs with multi-granularity instructions and ground truth.
//!
//! Every case is drawn from its own ChaCha stream `(seed, index)`, so output does not depend
//! on generation order or thread count. Annotation masks mark the pixels where an element is
//! visible at full coverage; anti-aliased fringes belong to no element.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{bin_index, classify_color_term, rgb_to_lab, ColorTerm, Rgb8};
use crate::design::{BundleError, DesignBundle, DesignElement, ElementClass, Mask, PhotoObject, Rect};
use crate::instruction::{
    recognize_source_granularity, Granularity, InstructionAst, Lexicon, Quantifier, RegionDescriptor,
    SourceDescriptor,
};

/// Curated design colors, several per basic term.
pub const POOL: [[u8; 3]; 44] = [
    [30, 70, 200], [20, 120, 220], [60, 90, 160], [110, 170, 235],
    [120, 72, 30], [95, 55, 25], [110, 65, 30], [70, 45, 20],
    [40, 160, 60], [20, 110, 50], [120, 200, 90], [60, 150, 90],
    [240, 130, 20], [250, 160, 50], [225, 110, 30], [255, 140, 70],
    [245, 140, 190], [230, 90, 160], [250, 190, 215], [215, 60, 130],
    [120, 60, 180], [90, 40, 140], [160, 110, 220], [70, 30, 110],
    [220, 30, 40], [190, 20, 30], [240, 60, 50], [160, 10, 25],
    [250, 220, 40], [240, 200, 10], [255, 235, 110], [230, 210, 60],
    [20, 20, 25], [10, 10, 10], [30, 28, 32], [40, 40, 42],
    [128, 128, 128], [90, 92, 95], [170, 170, 165], [200, 200, 205],
    [250, 250, 250], [245, 245, 245], [238, 238, 238], [232, 232, 232],
];

/// Object phrases pasted into procedural photos. None is a color word or a connector.
pub const OBJECT_PHRASES: [&str; 16] = [
    "ball", "hat", "cup", "kite", "balloon", "car", "vase", "lamp", "chair", "sofa", "umbrella", "flower",
    "boat", "bag", "bottle", "tree",
];

/// Minimum Lab lightness difference between text and anything beneath it.
pub const MIN_TEXT_CONTRAST: f64 = 25.0;
/// Supersampling factor per axis for anti-aliased edges.
const SS: u32 = 4;
/// Placement tries per item inside one layout attempt.
const PLACE_TRIES: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    /// 0 leaves the design untouched; 1 is the strongest supported setting.
    pub strength: f64,
    /// Adds a linear lightness ramp over filled elements before compression.
    pub gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub count: usize,
    pub canvas_sizes: Vec<[u32; 2]>,
    pub palette_pool: Vec<Rgb8>,
    pub degrade: Option<DegradeConfig>,
    /// Directory of PNG photos used as backdrops instead of procedural ones.
    pub photo_dir: Option<PathBuf>,
    /// Paste annotated objects into the photo; without them regions are color seeds.
    pub photo_objects: bool,
    pub instructions_per_case: usize,
    pub margin: u32,
    pub min_text_contrast: f64,
    pub max_layout_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            count: 100,
            canvas_sizes: vec![[320, 240], [240, 320], [288, 288]],
            palette_pool: POOL.iter().map(|&c| Rgb8::from(c)).collect(),
            degrade: None,
            photo_dir: None,
            photo_objects: true,
            instructions_per_case: 5,
            margin: 8,
            min_text_contrast: MIN_TEXT_CONTRAST,
            max_layout_attempts: 10,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("no feasible layout after {attempts} attempts")]
    LayoutInfeasible { attempts: usize },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("no PNG photos in {0}")]
    NoPhotos(PathBuf),
    #[error("io failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("malformed dataset file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::LayoutInfeasible { .. } => "layout-infeasible",
            SynthError::InvalidConfig(_) => "invalid-config",
            SynthError::NoPhotos(_) => "no-photos",
            SynthError::Io { .. } => "io-failure",
            SynthError::Bundle(_) => "bundle",
            SynthError::Malformed { .. } => "malformed-dataset",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The RNG stream of case `index`.
pub fn case_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

// ---------------------------------------------------------------------------------------------
// Rasterization

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Round { x0: f64, y0: f64, x1: f64, y1: f64, r: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Diamond { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Round { x0, y0, x1, y1, r } => {
                if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
                    return false;
                }
                let cx = x.clamp(x0 + r, x1 - r);
                let cy = y.clamp(y0 + r, y1 - r);
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Diamond { cx, cy, rx, ry } => ((x - cx) / rx).abs() + ((y - cy) / ry).abs() <= 1.0,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } | Shape::Round { x0, y0, x1, y1, .. } => (x0, y0, x1, y1),
            Shape::Ellipse { cx, cy, rx, ry } | Shape::Diamond { cx, cy, rx, ry } => {
                (cx - rx, cy - ry, cx + rx, cy + ry)
            }
        }
    }

    /// Subsamples of pixel (x, y) inside the shape, out of SS².
    fn coverage(&self, x: u32, y: u32) -> u32 {
        let mut n = 0;
        for j in 0..SS {
            for i in 0..SS {
                let sx = x as f64 + (i as f64 + 0.5) / SS as f64;
                let sy = y as f64 + (j as f64 + 0.5) / SS as f64;
                n += self.contains(sx, sy) as u32;
            }
        }
        n
    }
}

/// Integer pixel box `[x0, x1) × [y0, y1)` with `x1 > x0`, `y1 > y0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PixBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl PixBox {
    fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        PixBox {
            x0: x,
            y0: y,
            x1: x + w,
            y1: y + h,
        }
    }

    fn overlaps(&self, o: &PixBox, gap: u32) -> bool {
        self.x0 < o.x1 + gap && o.x0 < self.x1 + gap && self.y0 < o.y1 + gap && o.y0 < self.y1 + gap
    }

    fn rect(&self) -> Rect {
        Rect::new(self.x0, self.y0, self.x1 - self.x0, self.y1 - self.y0)
    }
}

const NO_OWNER: i32 = -1;

struct Canvas {
    img: RgbImage,
    owner: Vec<i32>,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Canvas {
            img: RgbImage::new(w, h),
            owner: vec![NO_OWNER; (w * h) as usize],
        }
    }

    /// Paints with anti-aliased edges. Fully covered pixels take `color` exactly and become
    /// owned by `id`; partially covered pixels are blended and owned by nobody.
    fn paint(&mut self, shape: &Shape, color: Rgb8, id: i32) {
        let (w, h) = self.img.dimensions();
        let (bx0, by0, bx1, by1) = shape.bounds();
        let x0 = bx0.floor().max(0.0) as u32;
        let y0 = by0.floor().max(0.0) as u32;
        let x1 = (bx1.ceil().max(0.0) as u32).min(w);
        let y1 = (by1.ceil().max(0.0) as u32).min(h);
        let full = SS * SS;
        let c = color.to_array();
        for y in y0..y1 {
            for x in x0..x1 {
                let k = shape.coverage(x, y);
                if k == 0 {
                    continue;
                }
                let i = (y * w + x) as usize;
                if k == full {
                    self.img.put_pixel(x, y, Rgb(c));
                    self.owner[i] = id;
                } else {
                    let cur = self.img.get_pixel(x, y).0;
                    let mix = |a: u8, b: u8| ((k * a as u32 + (full - k) * b as u32 + full / 2) / full) as u8;
                    self.img.put_pixel(x, y, Rgb([mix(c[0], cur[0]), mix(c[1], cur[1]), mix(c[2], cur[2])]));
                    self.owner[i] = NO_OWNER;
                }
            }
        }
    }

    fn paste(&mut self, photo: &RgbImage, at: PixBox, id: i32) {
        let w = self.img.width();
        for y in 0..photo.height() {
            for x in 0..photo.width() {
                let (cx, cy) = (at.x0 + x, at.y0 + y);
                self.img.put_pixel(cx, cy, *photo.get_pixel(x, y));
                self.owner[(cy * w + cx) as usize] = id;
            }
        }
    }

    /// Distinct colors inside a box.
    fn colors_in(&self, b: &PixBox) -> BTreeSet<[u8; 3]> {
        let mut out = BTreeSet::new();
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                out.insert(self.img.get_pixel(x, y).0);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------------------------
// Colors

fn lightness(c: Rgb8) -> f64 {
    rgb_to_lab(c).l
}

/// Colors already used in a design. Distinct colors must occupy distinct histogram bins.
#[derive(Default)]
struct ColorBook {
    used: Vec<Rgb8>,
}

impl ColorBook {
    fn admissible(&self, c: Rgb8) -> bool {
        self.used.contains(&c) || !self.used.iter().any(|u| bin_index(*u) == bin_index(c))
    }

    /// A pool color passing `ok`; reuses an existing color with probability `reuse` when one fits.
    fn pick(
        &mut self,
        rng: &mut ChaCha8Rng,
        pool: &[Rgb8],
        reuse: f64,
        fresh_only: bool,
        ok: impl Fn(Rgb8) -> bool,
    ) -> Option<Rgb8> {
        let reusable: Vec<Rgb8> = if fresh_only {
            Vec::new()
        } else {
            self.used.iter().copied().filter(|&c| ok(c)).collect()
        };
        let fresh: Vec<Rgb8> = pool
            .iter()
            .copied()
            .filter(|&c| !self.used.contains(&c) && self.admissible(c) && ok(c))
            .collect();
        let c = if !reusable.is_empty() && (fresh.is_empty() || rng.random_bool(reuse)) {
            *reusable.choose(rng)?
        } else {
            *fresh.choose(rng)?
        };
        if !self.used.contains(&c) {
            self.used.push(c);
        }
        Some(c)
    }
}

// ---------------------------------------------------------------------------------------------
// Photos

fn procedural_backdrop(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(30.0..230.0));
    let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(30.0..230.0));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(3.0..9.0),
            )
        })
        .collect();
    let (dx, dy) = (theta.cos(), theta.sin());
    let span = (w as f64).abs() * dx.abs() + (h as f64) * dy.abs();
    RgbImage::from_fn(w, h, |x, y| {
        let t = ((x as f64 * dx + y as f64 * dy) / span.max(1.0) + 0.5).clamp(0.0, 1.0);
        let n: f64 = waves
            .iter()
            .map(|(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
            .sum();
        Rgb(std::array::from_fn(|k| (a[k] + t * (b[k] - a[k]) + n).round().clamp(0.0, 255.0) as u8))
    })
}

fn load_photo_list(dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(SynthError::NoPhotos(dir.to_path_buf()));
    }
    Ok(out)
}

/// Photo of the requested size with up to three annotated flat-colored objects.
fn make_photo(
    w: u32,
    h: u32,
    cfg: &GeneratorConfig,
    photos: &[PathBuf],
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, Vec<PhotoObject>), SynthError> {
    let mut img = if photos.is_empty() {
        procedural_backdrop(w, h, rng)
    } else {
        let p = photos.choose(rng).expect("nonempty");
        let src = image::open(p)
            .map_err(|e| SynthError::Malformed {
                path: p.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        resize(&src, w, h, FilterType::Triangle)
    };
    if !cfg.photo_objects {
        return Ok((img, Vec::new()));
    }
    let count = rng.random_range(1..=3);
    let mut phrases: Vec<&str> = OBJECT_PHRASES.to_vec();
    phrases.shuffle(rng);
    let mut boxes: Vec<PixBox> = Vec::new();
    let mut terms: BTreeSet<ColorTerm> = BTreeSet::new();
    let mut objects = Vec::new();
    let min_dim = w.min(h) as f64;
    for phrase in phrases.into_iter().take(count) {
        let size = rng.random_range(0.22..0.4) * min_dim;
        let (ow, oh) = (size * rng.random_range(0.8..1.25), size);
        let placed = (0..PLACE_TRIES).find_map(|_| {
            let x = rng.random_range(2.0..(w as f64 - ow - 2.0).max(3.0));
            let y = rng.random_range(2.0..(h as f64 - oh - 2.0).max(3.0));
            let b = PixBox::new(x as u32, y as u32, ow.ceil() as u32 + 1, oh.ceil() as u32 + 1);
            (b.x1 <= w && b.y1 <= h && !boxes.iter().any(|o| o.overlaps(&b, 3))).then_some((x, y, b))
        });
        let Some((x, y, b)) = placed else { continue };
        let choices: Vec<Rgb8> = cfg
            .palette_pool
            .iter()
            .copied()
            .filter(|c| !terms.contains(&classify_color_term(*c)))
            .collect();
        let Some(&color) = choices.choose(rng) else { continue };
        let shape = match rng.random_range(0..3) {
            0 => Shape::Ellipse {
                cx: x + ow / 2.0,
                cy: y + oh / 2.0,
                rx: ow / 2.0,
                ry: oh / 2.0,
            },
            1 => Shape::Round {
                x0: x,
                y0: y,
                x1: x + ow,
                y1: y + oh,
                r: size * 0.2,
            },
            _ => Shape::Diamond {
                cx: x + ow / 2.0,
                cy: y + oh / 2.0,
                rx: ow / 2.0,
                ry: oh / 2.0,
            },
        };
        let mut mask = Mask::new(w, h);
        let full = SS * SS;
        let c = color.to_f64();
        for py in b.y0..b.y1.min(h) {
            for px in b.x0..b.x1.min(w) {
                let k = shape.coverage(px, py);
                if k == 0 {
                    continue;
                }
                // Mild vertical shading keeps the object from being a single flat color.
                let shade = 1.0 - 0.08 * (py as f64 - y) / oh;
                let cur = img.get_pixel(px, py).0;
                let a = k as f64 / full as f64;
                let v: [u8; 3] = std::array::from_fn(|i| {
                    (a * (c[i] * shade) + (1.0 - a) * cur[i] as f64).round().clamp(0.0, 255.0) as u8
                });
                img.put_pixel(px, py, Rgb(v));
                if 2 * k >= full {
                    mask.set(px, py, true);
                }
            }
        }
        if mask.count() == 0 {
            continue;
        }
        boxes.push(b);
        terms.insert(classify_color_term(color));
        objects.push(PhotoObject {
            phrase: phrase.to_string(),
            color: classify_color_term(color),
            mask,
        });
    }
    Ok((img, objects))
}

/// A standalone photo as pasted into generated designs, with its annotated objects.
pub fn generate_photo(
    w: u32,
    h: u32,
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, Vec<PhotoObject>), SynthError> {
    let photos = match &cfg.photo_dir {
        Some(d) => load_photo_list(d)?,
        None => Vec::new(),
    };
    make_photo(w, h, cfg, &photos, rng)
}

// ---------------------------------------------------------------------------------------------
// Layout

/// Pseudo-text: lines of rounded glyph blobs grouped into words, inside `b`.
fn glyph_run(b: &PixBox, lines: u32, glyph_h: f64, line_gap: f64, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let mut out = Vec::new();
    let width = (b.x1 - b.x0) as f64;
    for line in 0..lines {
        let top = b.y0 as f64 + line as f64 * (glyph_h + line_gap) + 0.5;
        let limit = if line + 1 == lines && lines > 1 {
            width * rng.random_range(0.45..0.95)
        } else {
            width
        };
        let mut cursor = b.x0 as f64 + rng.random_range(0.0..0.5);
        let end = b.x0 as f64 + limit - 1.0;
        'words: loop {
            let letters = rng.random_range(2..=7);
            for _ in 0..letters {
                let gw = (glyph_h * rng.random_range(0.45..0.75)).max(3.0);
                if cursor + gw > end {
                    break 'words;
                }
                let tall = rng.random_bool(0.35);
                let y0 = if tall { top } else { top + 0.3 * glyph_h };
                out.push(Shape::Round {
                    x0: cursor,
                    y0,
                    x1: cursor + gw,
                    y1: top + glyph_h,
                    r: (gw.min(glyph_h) * 0.25).max(0.8),
                });
                cursor += gw + rng.random_range(1.2..2.2);
            }
            cursor += glyph_h * 0.5;
        }
    }
    out
}

struct Placed {
    id: String,
    class: ElementClass,
    color: Option<Rgb8>,
}

struct Layout {
    canvas: Canvas,
    elements: Vec<Placed>,
    photo: RgbImage,
    photo_box: PixBox,
    objects: Vec<PhotoObject>,
}

fn sample_box(rng: &mut ChaCha8Rng, w: u32, h: u32, bw: u32, bh: u32, margin: u32) -> Option<PixBox> {
    if bw + 2 * margin > w || bh + 2 * margin > h {
        return None;
    }
    let x = rng.random_range(margin..=w - margin - bw);
    let y = rng.random_range(margin..=h - margin - bh);
    Some(PixBox::new(x, y, bw, bh))
}

fn try_layout(
    cfg: &GeneratorConfig,
    photos: &[PathBuf],
    rng: &mut ChaCha8Rng,
) -> Result<Option<Layout>, SynthError> {
    let [w, h] = *cfg.canvas_sizes.choose(rng).expect("validated nonempty");
    let pool = &cfg.palette_pool;
    let scale = w.min(h) as f64 / 256.0;
    let mut canvas = Canvas::new(w, h);
    let mut book = ColorBook::default();
    let mut elements: Vec<Placed> = Vec::new();
    let add = |elements: &mut Vec<Placed>, id: String, class, color| {
        elements.push(Placed { id, class, color });
        elements.len() as i32 - 1
    };

    // Background: solid or two bands, each band its own element.
    let two_band = rng.random_bool(0.35);
    let bands = if two_band { 2 } else { 1 };
    let split = rng.random_range(0.35..0.65);
    let vertical = rng.random_bool(0.5);
    for i in 0..bands {
        let Some(c) = book.pick(rng, pool, 0.0, true, |_| true) else {
            return Ok(None);
        };
        let shape = if bands == 1 {
            Shape::Rect {
                x0: 0.0,
                y0: 0.0,
                x1: w as f64,
                y1: h as f64,
            }
        } else if vertical {
            let s = (w as f64 * split).round();
            let (x0, x1) = if i == 0 { (0.0, s) } else { (s, w as f64) };
            Shape::Rect {
                x0,
                y0: 0.0,
                x1,
                y1: h as f64,
            }
        } else {
            let s = (h as f64 * split).round();
            let (y0, y1) = if i == 0 { (0.0, s) } else { (s, h as f64) };
            Shape::Rect {
                x0: 0.0,
                y0,
                x1: w as f64,
                y1,
            }
        };
        let id = add(&mut elements, format!("background-{i}"), ElementClass::Background, Some(c));
        canvas.paint(&shape, c, id);
    }

    // Decorative background shapes, allowed under text and photo.
    for i in 0..rng.random_range(0..=2) {
        let Some(c) = book.pick(rng, pool, 0.0, true, |_| true) else { break };
        let (sw, sh) = (w as f64 * rng.random_range(0.25..0.6), h as f64 * rng.random_range(0.25..0.6));
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                cx,
                cy,
                rx: sw / 2.0,
                ry: sh / 2.0,
            }
        } else {
            Shape::Round {
                x0: cx - sw / 2.0,
                y0: cy - sh / 2.0,
                x1: cx + sw / 2.0,
                y1: cy + sh / 2.0,
                r: sw.min(sh) * 0.15,
            }
        };
        let id = add(&mut elements, format!("background-shape-{i}"), ElementClass::BackgroundShape, Some(c));
        canvas.paint(&shape, c, id);
    }

    // The photo.
    let pw = (w as f64 * rng.random_range(0.38..0.55)).round() as u32;
    let ph = (h as f64 * rng.random_range(0.35..0.5)).round() as u32;
    let Some(photo_box) = sample_box(rng, w, h, pw, ph, cfg.margin) else {
        return Ok(None);
    };
    let (photo, objects) = make_photo(pw, ph, cfg, photos, rng)?;
    let id = add(&mut elements, "photo".into(), ElementClass::Photo, None);
    canvas.paste(&photo, photo_box, id);
    let mut blocked: Vec<PixBox> = vec![photo_box];

    // Content shapes.
    for i in 0..rng.random_range(0..=2) {
        let side = (w.min(h) as f64 * rng.random_range(0.1..0.2)).round() as u32;
        let (bw, bh) = (side + rng.random_range(0..side / 2 + 1), side);
        let Some(b) = (0..PLACE_TRIES)
            .filter_map(|_| sample_box(rng, w, h, bw, bh, cfg.margin))
            .find(|b| !blocked.iter().any(|o| o.overlaps(b, cfg.margin / 2)))
        else {
            continue;
        };
        let Some(c) = book.pick(rng, pool, 0.0, true, |_| true) else { break };
        let (x0, y0, x1, y1) = (b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Rect { x0, y0, x1, y1 },
            1 => Shape::Round {
                x0,
                y0,
                x1,
                y1,
                r: (y1 - y0) * 0.2,
            },
            _ => Shape::Ellipse {
                cx: (x0 + x1) / 2.0,
                cy: (y0 + y1) / 2.0,
                rx: (x1 - x0) / 2.0,
                ry: (y1 - y0) / 2.0,
            },
        };
        let id = add(&mut elements, format!("shape-{i}"), ElementClass::ShapeWithoutContent, Some(c));
        canvas.paint(&shape, c, id);
        blocked.push(b);
    }

    // Text: a title, maybe a subtitle, up to two plain-text blocks.
    struct TextSpec {
        id: String,
        class: ElementClass,
        glyph_h: f64,
        lines: u32,
        width: f64,
        required: bool,
    }
    let mut specs = vec![TextSpec {
        id: "title".into(),
        class: ElementClass::Title,
        glyph_h: rng.random_range(14.0..22.0) * scale,
        lines: 1,
        width: rng.random_range(0.45..0.8),
        required: true,
    }];
    if rng.random_bool(0.6) {
        specs.push(TextSpec {
            id: "subtitle".into(),
            class: ElementClass::Subtitle,
            glyph_h: rng.random_range(9.0..12.0) * scale,
            lines: 1,
            width: rng.random_range(0.35..0.65),
            required: false,
        });
    }
    for i in 0..rng.random_range(0..=2) {
        specs.push(TextSpec {
            id: format!("text-{i}"),
            class: ElementClass::PlainText,
            glyph_h: rng.random_range(6.0..8.5) * scale,
            lines: rng.random_range(2..=4),
            width: rng.random_range(0.28..0.45),
            required: false,
        });
    }
    for spec in specs {
        let gap = (spec.glyph_h * 0.45).round();
        let bw = (w as f64 * spec.width).round() as u32;
        let bh = (spec.lines as f64 * spec.glyph_h + (spec.lines - 1) as f64 * gap).ceil() as u32 + 1;
        let mut placed = None;
        for _ in 0..PLACE_TRIES {
            let Some(b) = sample_box(rng, w, h, bw, bh, cfg.margin) else { continue };
            if blocked.iter().any(|o| o.overlaps(&b, 4)) {
                continue;
            }
            let under: Vec<f64> = canvas.colors_in(&b).into_iter().map(|u| lightness(Rgb8::from(u))).collect();
            let ok = |c: Rgb8| under.iter().all(|l| (lightness(c) - l).abs() >= cfg.min_text_contrast);
            if let Some(c) = book.pick(rng, pool, 0.3, false, ok) {
                placed = Some((b, c));
                break;
            }
        }
        let Some((b, color)) = placed else {
            if spec.required {
                return Ok(None);
            }
            continue;
        };
        let glyphs = glyph_run(&b, spec.lines, spec.glyph_h, gap, rng);
        let id = add(&mut elements, spec.id, spec.class, Some(color));
        for g in &glyphs {
            canvas.paint(g, color, id);
        }
        blocked.push(b);
    }
    Ok(Some(Layout {
        canvas,
        elements,
        photo,
        photo_box,
        objects,
    }))
}

/// Renders one annotated design. Elements hidden entirely by later ones are dropped.
pub fn generate_design(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<DesignBundle, SynthError> {
    let photos = match &cfg.photo_dir {
        Some(d) => load_photo_list(d)?,
        None => Vec::new(),
    };
    generate_design_with(cfg, &photos, rng)
}

fn generate_design_with(
    cfg: &GeneratorConfig,
    photos: &[PathBuf],
    rng: &mut ChaCha8Rng,
) -> Result<DesignBundle, SynthError> {
    validate_config(cfg)?;
    for _ in 0..cfg.max_layout_attempts {
        let Some(layout) = try_layout(cfg, photos, rng)? else { continue };
        let (w, h) = layout.canvas.img.dimensions();
        let elements: Vec<DesignElement> = layout
            .elements
            .iter()
            .enumerate()
            .map(|(i, p)| DesignElement {
                id: p.id.clone(),
                class: p.class,
                color: p.color,
                mask: Mask::from_vec(w, h, layout.canvas.owner.iter().map(|&o| o == i as i32).collect()),
            })
            .filter(|e| e.mask.count() > 0)
            .collect();
        let b = DesignBundle {
            design: layout.canvas.img,
            photo: layout.photo,
            photo_rect: layout.photo_box.rect(),
            elements,
            photo_objects: layout.objects,
        };
        b.validate()?;
        return Ok(b);
    }
    Err(SynthError::LayoutInfeasible {
        attempts: cfg.max_layout_attempts,
    })
}

fn validate_config(cfg: &GeneratorConfig) -> Result<(), SynthError> {
    if cfg.canvas_sizes.is_empty() {
        return Err(SynthError::InvalidConfig("no canvas sizes".into()));
    }
    if cfg.canvas_sizes.iter().any(|[w, h]| *w < 96 || *h < 96) {
        return Err(SynthError::InvalidConfig("canvas sides must be at least 96".into()));
    }
    if cfg.palette_pool.len() < 4 {
        return Err(SynthError::InvalidConfig("palette pool needs at least 4 colors".into()));
    }
    if let Some(d) = &cfg.degrade {
        if !(0.0..=1.0).contains(&d.strength) {
            return Err(SynthError::InvalidConfig("degrade strength must lie in [0, 1]".into()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------------
// Instructions

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "kebab-case")]
pub enum Template {
    /// `<verb> R <connector> C`
    VerbFirst { verb: String, connector: String },
    /// `use C to <verb> R`
    UseFirst { verb: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionCase {
    pub text: String,
    pub ast: InstructionAst,
    pub template: Template,
    pub granularity: Granularity,
    pub gt_source_colors: Vec<Rgb8>,
    pub gt_element_ids: Vec<String>,
}

fn type_level(class: ElementClass) -> bool {
    matches!(class, ElementClass::Background | ElementClass::Text | ElementClass::Shape)
}

/// The quantifier the parser derives for a source with these fields.
pub fn canonical_quantifier(class: ElementClass, attr: ColorTerm, plural: bool) -> Quantifier {
    if attr.is_none() && (plural || type_level(class)) {
        Quantifier::All
    } else {
        Quantifier::One
    }
}

pub fn random_template(lex: &Lexicon, rng: &mut ChaCha8Rng) -> Template {
    let verb = lex.verbs.choose(rng).expect("verbs").join(" ");
    if rng.random_bool(0.5) {
        Template::VerbFirst {
            verb,
            connector: lex.connectors.choose(rng).expect("connectors").clone(),
        }
    } else {
        Template::UseFirst { verb }
    }
}

fn color_word(lex: &Lexicon, term: ColorTerm, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&String> = lex.colors.iter().filter(|(_, t)| *t == term).map(|(w, _)| w).collect();
    words.choose(rng).map(|w| w.to_string()).unwrap_or_else(|| term.as_str().to_string())
}

fn render_source(lex: &Lexicon, s: &SourceDescriptor, rng: &mut ChaCha8Rng) -> String {
    let singular: Vec<String> = lex
        .elements
        .iter()
        .filter(|f| f.class == s.class && !f.plural)
        .map(|f| f.words.join(" "))
        .collect();
    let plural: Vec<String> = lex
        .elements
        .iter()
        .filter(|f| f.class == s.class && f.plural)
        .map(|f| f.words.join(" "))
        .collect();
    let all = s.quantifier == Quantifier::All;
    // Plural or `all` is needed exactly when the class alone does not imply `all`.
    let (noun, explicit_all) = if all && !type_level(s.class) {
        if !plural.is_empty() && rng.random_bool(0.7) {
            (plural.choose(rng).unwrap().clone(), false)
        } else {
            (singular.choose(rng).unwrap().clone(), true)
        }
    } else if all {
        match rng.random_range(0..3) {
            0 if !plural.is_empty() => (plural.choose(rng).unwrap().clone(), false),
            1 => (singular.choose(rng).unwrap().clone(), true),
            _ => (singular.choose(rng).unwrap().clone(), false),
        }
    } else {
        (singular.choose(rng).unwrap().clone(), false)
    };
    let core = if s.attr.is_none() {
        noun
    } else {
        format!("{} {noun}", color_word(lex, s.attr, rng))
    };
    let det = if explicit_all {
        if rng.random_bool(0.5) { "all the" } else { "all" }
    } else {
        "the"
    };
    match rng.random_range(0..3) {
        0 => format!("{det} {core}"),
        1 => format!("the color of {det} {core}"),
        _ => format!("{det} {core} color"),
    }
}

fn render_regions(lex: &Lexicon, regions: &[RegionDescriptor], rng: &mut ChaCha8Rng) -> String {
    let parts: Vec<String> = regions
        .iter()
        .map(|r| {
            if r.color_adj.is_none() {
                format!("the {}", r.phrase)
            } else {
                format!("the {} {}", color_word(lex, r.color_adj, rng), r.phrase)
            }
        })
        .collect();
    match parts.len() {
        1 => parts[0].clone(),
        _ => {
            let (last, head) = parts.split_last().unwrap();
            format!("{} and {last}", head.join(", "))
        }
    }
}

/// Instruction text for `ast` in the given template; synonyms and phrasing drawn from `rng`.
pub fn render_instruction(lex: &Lexicon, ast: &InstructionAst, t: &Template, rng: &mut ChaCha8Rng) -> String {
    let src = render_source(lex, &ast.source, rng);
    let regions = render_regions(lex, &ast.regions, rng);
    let body = match t {
        Template::VerbFirst { verb, connector } => format!("{verb} {regions} {connector} {src}"),
        Template::UseFirst { verb } => format!("use {src} to {verb} {regions}"),
    };
    let mut text = if rng.random_bool(0.15) { format!("please {body}") } else { body };
    if rng.random_bool(0.5) {
        let mut c = text.chars();
        text = c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default();
    }
    text
}

/// Random well-formed AST over the lexicon, for round-trip testing.
pub fn random_ast(lex: &Lexicon, rng: &mut ChaCha8Rng) -> InstructionAst {
    let classes: Vec<ElementClass> = lex.elements.iter().map(|f| f.class).collect::<BTreeSet<_>>().into_iter().collect();
    let class = *classes.choose(rng).unwrap();
    let attr = if rng.random_bool(0.5) {
        *ColorTerm::ALL.choose(rng).unwrap()
    } else {
        ColorTerm::None
    };
    let has_plural = lex.elements.iter().any(|f| f.class == class && f.plural);
    let quantifier = if !attr.is_none() {
        Quantifier::One
    } else if type_level(class) || (has_plural && rng.random_bool(0.5)) || rng.random_bool(0.3) {
        Quantifier::All
    } else {
        Quantifier::One
    };
    let mut phrases = OBJECT_PHRASES.to_vec();
    phrases.shuffle(rng);
    let n = rng.random_range(1..=3);
    let regions = phrases[..n]
        .iter()
        .map(|p| RegionDescriptor {
            phrase: p.to_string(),
            color_adj: if rng.random_bool(0.5) {
                *ColorTerm::ALL.choose(rng).unwrap()
            } else {
                ColorTerm::None
            },
        })
        .collect();
    InstructionAst {
        source: SourceDescriptor { class, attr, quantifier },
        regions,
    }
}

fn distinct_colors(elems: &[&DesignElement]) -> Vec<Rgb8> {
    let mut out: Vec<Rgb8> = Vec::new();
    for e in elems {
        if let Some(c) = e.color {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

/// Source descriptors that are well posed on `b`, with their ground truth.
fn source_candidates(b: &DesignBundle) -> Vec<(SourceDescriptor, Vec<Rgb8>, Vec<String>)> {
    let mut out = Vec::new();
    let classes = ElementClass::ALL.iter().copied().filter(|c| *c != ElementClass::Photo);
    for class in classes {
        let elems = b.elements_of(class, ColorTerm::None);
        if elems.is_empty() {
            continue;
        }
        let colors = distinct_colors(&elems);
        let ids = elems.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
        if type_level(class) {
            out.push((
                SourceDescriptor {
                    class,
                    attr: ColorTerm::None,
                    quantifier: Quantifier::All,
                },
                colors.clone(),
                ids,
            ));
        } else if colors.len() == 1 {
            out.push((
                SourceDescriptor {
                    class,
                    attr: ColorTerm::None,
                    quantifier: Quantifier::One,
                },
                colors.clone(),
                ids,
            ));
        } else {
            out.push((
                SourceDescriptor {
                    class,
                    attr: ColorTerm::None,
                    quantifier: Quantifier::All,
                },
                colors.clone(),
                ids,
            ));
        }
        let terms: BTreeSet<ColorTerm> = colors.iter().map(|c| classify_color_term(*c)).collect();
        for term in terms {
            let sub = b.elements_of(class, term);
            let sub_colors = distinct_colors(&sub);
            // Well posed only when the attribute names one color.
            if sub_colors.len() == 1 {
                out.push((
                    SourceDescriptor {
                        class,
                        attr: term,
                        quantifier: Quantifier::One,
                    },
                    sub_colors,
                    sub.iter().map(|e| e.id.clone()).collect(),
                ));
            }
        }
    }
    out
}

fn sample_regions(b: &DesignBundle, rng: &mut ChaCha8Rng) -> Vec<RegionDescriptor> {
    let with_adj = |o: &PhotoObject, rng: &mut ChaCha8Rng| RegionDescriptor {
        phrase: o.phrase.clone(),
        color_adj: if rng.random_bool(0.5) { o.color } else { ColorTerm::None },
    };
    if b.photo_objects.is_empty() {
        // Color-seed regions: name a term that dominates some part of the photo.
        let mut counts: BTreeMap<ColorTerm, usize> = BTreeMap::new();
        for p in b.photo.pixels() {
            *counts.entry(classify_color_term(Rgb8::from(*p))).or_default() += 1;
        }
        let term = counts.iter().max_by_key(|(t, n)| (**n, std::cmp::Reverse(**t))).map(|(t, _)| *t).unwrap();
        return vec![RegionDescriptor {
            phrase: "area".into(),
            color_adj: term,
        }];
    }
    let mut objs: Vec<&PhotoObject> = b.photo_objects.iter().collect();
    objs.shuffle(rng);
    let n = if objs.len() >= 2 && rng.random_bool(0.2) { 2 } else { 1 };
    objs[..n].iter().map(|o| with_adj(o, rng)).collect()
}

/// Well-posed instructions for a clean bundle, each with its ground truth.
pub fn generate_instructions(
    b: &DesignBundle,
    lex: &Lexicon,
    per_case: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<InstructionCase> {
    let mut cands = source_candidates(b);
    cands.shuffle(rng);
    cands
        .into_iter()
        .take(per_case)
        .filter_map(|(source, gt, ids)| {
            let granularity = recognize_source_granularity(&source, b).ok()?;
            let ast = InstructionAst {
                source,
                regions: sample_regions(b, rng),
            };
            let template = random_template(lex, rng);
            let text = render_instruction(lex, &ast, &template, rng);
            Some(InstructionCase {
                text,
                ast,
                template,
                granularity,
                gt_source_colors: gt,
                gt_element_ids: ids,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------------------------
// Degradation

/// Scale from the standard JPEG tables to the quantizer step at strength 1.
pub const DCT_SCALE: f64 = 0.12;
/// Peak-to-center amplitude of the fill gradient at strength 1.
pub const GRADIENT_AMPLITUDE: f64 = 4.0;

const LUMA_Q: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];
const CHROMA_Q: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99., 99.,
    99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Quantizes one 8×8 block in place through the orthonormal DCT.
fn quantize_block(block: &mut [f64; 64], table: &[f64; 64], scale: f64, c: &[[f64; 8]; 8]) {
    let mut tmp = [0.0; 64];
    let mut coef = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| c[u][y] * block[y * 8 + x]).sum();
        }
    }
    for u in 0..8 {
        for v in 0..8 {
            let f: f64 = (0..8).map(|x| tmp[u * 8 + x] * c[v][x]).sum();
            let q = (table[u * 8 + v] * scale).max(1.0);
            coef[u * 8 + v] = (f / q).round() * q;
        }
    }
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| c[u][y] * coef[u * 8 + v]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * c[v][x]).sum();
        }
    }
}

fn compress(img: &RgbImage, strength: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let n = (w * h) as usize;
    let mut planes = vec![vec![0.0; n]; 3];
    for (i, p) in img.pixels().enumerate() {
        let [r, g, b] = p.0.map(f64::from);
        planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
        planes[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
        planes[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    let c = dct_basis();
    let scale = DCT_SCALE * strength;
    for (k, plane) in planes.iter_mut().enumerate() {
        let table = if k == 0 { &LUMA_Q } else { &CHROMA_Q };
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        // Edge blocks replicate the last row and column.
                        let (sx, sy) = ((bx + x).min(w - 1), (by + y).min(h - 1));
                        block[(y * 8 + x) as usize] = plane[(sy * w + sx) as usize];
                    }
                }
                quantize_block(&mut block, table, scale, &c);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        plane[((by + y) * w + bx + x) as usize] = block[(y * 8 + x) as usize];
                    }
                }
            }
        }
    }
    RgbImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        let (yy, cb, cr) = (planes[0][i] + 128.0, planes[1][i], planes[2][i]);
        let v = [yy + 1.402 * cr, yy - 0.344136 * cb - 0.714136 * cr, yy + 1.772 * cb];
        Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
    })
}

/// Compression noise and optional fill gradients. Annotations and masks are left untouched,
/// so ground-truth colors stay the clean ones.
pub fn degrade_design(b: &DesignBundle, cfg: &DegradeConfig, rng: &mut ChaCha8Rng) -> DesignBundle {
    if cfg.strength <= 0.0 {
        return b.clone();
    }
    let mut design = b.design.clone();
    let w = design.width();
    if cfg.gradient {
        let amp = GRADIENT_AMPLITUDE * cfg.strength;
        for e in b.elements.iter().filter(|e| e.class.is_filled_based()) {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let proj: Vec<(usize, f64)> = e
                .mask
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| (i, (i as u32 % w) as f64 * dx + (i as u32 / w) as f64 * dy))
                .collect();
            let lo = proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let hi = proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1.0);
            for (i, t) in proj {
                let off = amp * (2.0 * (t - lo) / span - 1.0);
                let (x, y) = (i as u32 % w, i as u32 / w);
                let p = design.get_pixel_mut(x, y);
                p.0 = p.0.map(|v| (v as f64 + off).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let design = compress(&design, cfg.strength);
    let r = b.photo_rect;
    let photo = image::imageops::crop_imm(&design, r.x, r.y, r.w, r.h).to_image();
    DesignBundle {
        design,
        photo,
        ..b.clone()
    }
}

// ---------------------------------------------------------------------------------------------
// Cases and datasets

#[derive(Clone, Debug)]
pub struct GeneratedCase {
    pub index: usize,
    pub bundle: DesignBundle,
    pub instructions: Vec<InstructionCase>,
}

/// Case `index` of the dataset described by `cfg`.
pub fn generate_case(cfg: &GeneratorConfig, index: usize) -> Result<GeneratedCase, SynthError> {
    let photos = match &cfg.photo_dir {
        Some(d) => load_photo_list(d)?,
        None => Vec::new(),
    };
    generate_case_with(cfg, &photos, index)
}

fn generate_case_with(cfg: &GeneratorConfig, photos: &[PathBuf], index: usize) -> Result<GeneratedCase, SynthError> {
    let mut rng = case_rng(cfg.seed, index as u64);
    let clean = generate_design_with(cfg, photos, &mut rng)?;
    let instructions = generate_instructions(&clean, Lexicon::builtin(), cfg.instructions_per_case, &mut rng);
    let bundle = match &cfg.degrade {
        Some(d) => degrade_design(&clean, d, &mut rng),
        None => clean,
    };
    Ok(GeneratedCase {
        index,
        bundle,
        instructions,
    })
}

pub fn generate_cases(cfg: &GeneratorConfig) -> Result<Vec<GeneratedCase>, SynthError> {
    validate_config(cfg)?;
    let photos = match &cfg.photo_dir {
        Some(d) => load_photo_list(d)?,
        None => Vec::new(),
    };
    (0..cfg.count).into_par_iter().map(|i| generate_case_with(cfg, &photos, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub seed: u64,
    pub count: usize,
    pub degraded: bool,
    pub instructions: usize,
    pub granularity: BTreeMap<String, usize>,
    pub element_classes: BTreeMap<String, usize>,
    pub color_terms: BTreeMap<String, usize>,
    pub cases: Vec<String>,
}

pub const INSTRUCTIONS_FILE: &str = "instructions.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn case_dir_name(index: usize) -> String {
    format!("case-{index:05}")
}

pub fn summarize(cfg: &GeneratorConfig, cases: &[GeneratedCase]) -> DatasetSummary {
    let mut granularity = BTreeMap::new();
    let mut element_classes = BTreeMap::new();
    let mut color_terms = BTreeMap::new();
    for c in cases {
        for e in &c.bundle.elements {
            *element_classes.entry(e.class.as_str().to_string()).or_insert(0) += 1;
            if let Some(col) = e.color {
                *color_terms.entry(classify_color_term(col).as_str().to_string()).or_insert(0) += 1;
            }
        }
        for i in &c.instructions {
            *granularity.entry(i.granularity.to_string()).or_insert(0) += 1;
        }
    }
    DatasetSummary {
        seed: cfg.seed,
        count: cases.len(),
        degraded: cfg.degrade.as_ref().is_some_and(|d| d.strength > 0.0),
        instructions: cases.iter().map(|c| c.instructions.len()).sum(),
        granularity,
        element_classes,
        color_terms,
        cases: cases.iter().map(|c| case_dir_name(c.index)).collect(),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), SynthError> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

/// Writes `count` cases under `out`: one bundle directory per case with its instruction
/// manifest, plus `summary.json` and `config.json`.
pub fn generate_dataset(cfg: &GeneratorConfig, out: &Path) -> Result<DatasetSummary, SynthError> {
    let cases = generate_cases(cfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    cases.par_iter().try_for_each(|c| {
        let dir = out.join(case_dir_name(c.index));
        c.bundle.save(&dir)?;
        write_json(&dir.join(INSTRUCTIONS_FILE), &c.instructions)
    })?;
    let summary = summarize(cfg, &cases);
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    Ok(summary)
}

/// Reads a dataset written by `generate_dataset`, in summary order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, DesignBundle, Vec<InstructionCase>)>, SynthError> {
    let sp = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&sp).map_err(io_err(&sp))?;
    let summary: DatasetSummary = serde_json::from_str(&text).map_err(|e| SynthError::Malformed {
        path: sp.clone(),
        reason: e.to_string(),
    })?;
    summary
        .cases
        .par_iter()
        .map(|name| {
            let cd = dir.join(name);
            let b = DesignBundle::load(&cd)?;
            let ip = cd.join(INSTRUCTIONS_FILE);
            let text = fs::read_to_string(&ip).map_err(io_err(&ip))?;
            let inst = serde_json::from_str(&text).map_err(|e| SynthError::Malformed {
                path: ip.clone(),
                reason: e.to_string(),
            })?;
            Ok((name.clone(), b, inst))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::parse_instruction;
    use crate::predict::{predict_source_colors, PredictConfig};

    fn small_cfg(seed: u64, count: usize) -> GeneratorConfig {
        GeneratorConfig {
            seed,
            count,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn pool_covers_every_term_and_labels_agree() {
        let terms: BTreeSet<ColorTerm> = POOL.iter().map(|c| classify_color_term(Rgb8::from(*c))).collect();
        assert_eq!(terms.len(), 11);
        for (i, c) in POOL.iter().enumerate() {
            // Four colors per term, in the order of ColorTerm::ALL.
            assert_eq!(classify_color_term(Rgb8::from(*c)), ColorTerm::ALL[i / 4], "{c:?}");
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = small_cfg(11, 3);
        for i in 0..3 {
            let a = generate_case(&cfg, i).unwrap();
            let b = generate_case(&cfg, i).unwrap();
            assert_eq!(a.bundle, b.bundle);
            assert_eq!(a.instructions, b.instructions);
        }
    }

    #[test]
    fn distinct_colors_use_distinct_bins() {
        for i in 0..40 {
            let c = generate_case(&small_cfg(3, 40), i).unwrap();
            let colors: BTreeSet<[u8; 3]> = c.bundle.elements.iter().filter_map(|e| e.color.map(|c| c.to_array())).collect();
            let bins: BTreeSet<_> = colors.iter().map(|c| bin_index(Rgb8::from(*c))).collect();
            assert_eq!(colors.len(), bins.len());
        }
    }

    #[test]
    fn masks_hold_the_annotated_color() {
        for i in 0..30 {
            let b = generate_case(&small_cfg(5, 30), i).unwrap().bundle;
            for e in &b.elements {
                assert!(e.mask.count() > 0);
                let Some(c) = e.color else { continue };
                for (p, &m) in b.design.pixels().zip(e.mask.data()) {
                    if m {
                        assert_eq!(Rgb8::from(*p), c, "{}", e.id);
                    }
                }
            }
        }
    }

    #[test]
    fn text_contrast_against_backdrop() {
        for i in 0..200 {
            let b = generate_case(&small_cfg(17, 200), i).unwrap().bundle;
            let w = b.width();
            for t in b.elements.iter().filter(|e| e.class.is_text_based()) {
                let tc = t.color.unwrap();
                let idx: Vec<usize> = (0..t.mask.len()).filter(|&i| t.mask.get_index(i)).collect();
                let (x0, x1) = (idx.iter().map(|i| i % w as usize).min().unwrap(), idx.iter().map(|i| i % w as usize).max().unwrap());
                let (y0, y1) = (idx.iter().map(|i| i / w as usize).min().unwrap(), idx.iter().map(|i| i / w as usize).max().unwrap());
                for e in b.elements.iter().filter(|e| !e.class.is_text_based() && e.class != ElementClass::Photo) {
                    let under = (y0..=y1).any(|y| (x0..=x1).any(|x| e.mask.get_index(y * w as usize + x)));
                    if under {
                        let dl = (rgb_to_lab(tc).l - rgb_to_lab(e.color.unwrap()).l).abs();
                        assert!(dl >= MIN_TEXT_CONTRAST, "case {i} {} over {}: {dl}", t.id, e.id);
                    }
                }
            }
        }
    }

    #[test]
    fn instructions_parse_back_and_clean_voting_is_exact() {
        let cfg = small_cfg(23, 40);
        let pc = PredictConfig::default();
        for c in generate_cases(&cfg).unwrap() {
            for inst in &c.instructions {
                assert_eq!(parse_instruction(&inst.text).unwrap(), inst.ast, "{}", inst.text);
                let got = predict_source_colors(&c.bundle, &inst.ast.source, &pc).unwrap();
                assert_eq!(got.granularity, inst.granularity);
                let mut a: Vec<_> = got.colors.iter().map(|c| c.rgb.to_array()).collect();
                let mut g: Vec<_> = inst.gt_source_colors.iter().map(|c| c.to_array()).collect();
                a.sort();
                g.sort();
                assert_eq!(a, g, "{}", inst.text);
            }
        }
    }

    #[test]
    fn fine_attribute_cases_are_unambiguous() {
        for c in generate_cases(&small_cfg(29, 30)).unwrap() {
            for inst in c.instructions.iter().filter(|i| !i.ast.source.attr.is_none()) {
                assert_eq!(inst.gt_source_colors.len(), 1);
                assert_eq!(inst.granularity, Granularity::Fine);
            }
        }
    }

    #[test]
    fn random_asts_round_trip_in_both_orders() {
        let lex = Lexicon::builtin();
        let mut rng = case_rng(1, 0);
        for _ in 0..500 {
            let ast = random_ast(lex, &mut rng);
            for t in [
                Template::VerbFirst {
                    verb: "recolor".into(),
                    connector: "with".into(),
                },
                Template::UseFirst { verb: "paint".into() },
                random_template(lex, &mut rng),
            ] {
                let text = render_instruction(lex, &ast, &t, &mut rng);
                assert_eq!(parse_instruction(&text).unwrap(), ast, "{text}");
            }
        }
    }

    #[test]
    fn degrade_zero_is_identity_and_masks_survive() {
        let clean = generate_case(&small_cfg(31, 1), 0).unwrap().bundle;
        let mut rng = case_rng(0, 0);
        let same = degrade_design(
            &clean,
            &DegradeConfig {
                strength: 0.0,
                gradient: true,
            },
            &mut rng,
        );
        assert_eq!(same, clean);
        let noisy = degrade_design(
            &clean,
            &DegradeConfig {
                strength: 1.0,
                gradient: true,
            },
            &mut rng,
        );
        assert_ne!(noisy.design, clean.design);
        for (a, b) in clean.elements.iter().zip(&noisy.elements) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.color, b.color);
        }
    }

    #[test]
    fn full_strength_deviation_is_bounded() {
        let mut devs: Vec<u8> = Vec::new();
        for i in 0..100 {
            let clean = generate_case(&small_cfg(37, 100), i).unwrap().bundle;
            let mut rng = case_rng(99, i as u64);
            let noisy = degrade_design(
                &clean,
                &DegradeConfig {
                    strength: 1.0,
                    gradient: true,
                },
                &mut rng,
            );
            for (a, b) in clean.design.pixels().zip(noisy.design.pixels()) {
                for k in 0..3 {
                    devs.push(a[k].abs_diff(b[k]));
                }
            }
        }
        devs.sort_unstable();
        let p99 = devs[devs.len() * 99 / 100];
        assert!(p99 <= 8, "99th percentile deviation {p99}");
    }

    #[test]
    fn infeasible_layout_is_reported() {
        let cfg = GeneratorConfig {
            min_text_contrast: 101.0,
            ..small_cfg(1, 1)
        };
        assert!(matches!(generate_case(&cfg, 0), Err(SynthError::LayoutInfeasible { attempts: 10 })));
    }

    #[test]
    fn dataset_written_and_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(41, 4);
        let s = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(s.count, 4);
        let loaded = load_dataset(dir.path()).unwrap();
        let cases = generate_cases(&cfg).unwrap();
        for ((name, b, inst), c) in loaded.iter().zip(&cases) {
            assert_eq!(name, &case_dir_name(c.index));
            assert_eq!(b, &c.bundle);
            assert_eq!(inst, &c.instructions);
        }
    }
}
