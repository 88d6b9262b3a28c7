//! Annotated design bundles: raster design, element annotations, photo placement.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::color::{ColorTerm, Rgb8, classify_color_term};

pub const ANNOTATION_VERSION: u32 = 1;
pub const DESIGN_FILE: &str = "design.png";
pub const PHOTO_FILE: &str = "photo.png";
pub const ANNOTATION_FILE: &str = "annotations.json";

/// Element classes. Leaves are what annotations carry; `Text` and `Shape` are groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementClass {
    Background,
    Title,
    Subtitle,
    PlainText,
    ShapeWithoutContent,
    BackgroundShape,
    Photo,
    Text,
    Shape,
}

impl ElementClass {
    pub const LEAVES: [ElementClass; 7] = [
        ElementClass::Background,
        ElementClass::Title,
        ElementClass::Subtitle,
        ElementClass::PlainText,
        ElementClass::ShapeWithoutContent,
        ElementClass::BackgroundShape,
        ElementClass::Photo,
    ];

    pub const ALL: [ElementClass; 9] = [
        ElementClass::Background,
        ElementClass::Title,
        ElementClass::Subtitle,
        ElementClass::PlainText,
        ElementClass::ShapeWithoutContent,
        ElementClass::BackgroundShape,
        ElementClass::Photo,
        ElementClass::Text,
        ElementClass::Shape,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElementClass::Background => "background",
            ElementClass::Title => "title",
            ElementClass::Subtitle => "subtitle",
            ElementClass::PlainText => "plain-text",
            ElementClass::ShapeWithoutContent => "shape-without-content",
            ElementClass::BackgroundShape => "background-shape",
            ElementClass::Photo => "photo",
            ElementClass::Text => "text",
            ElementClass::Shape => "shape",
        }
    }

    pub fn is_leaf(self) -> bool {
        !matches!(self, ElementClass::Text | ElementClass::Shape)
    }

    /// Group a leaf belongs to; roots and groups have none.
    pub fn parent(self) -> Option<ElementClass> {
        match self {
            ElementClass::Title | ElementClass::Subtitle | ElementClass::PlainText => {
                Some(ElementClass::Text)
            }
            ElementClass::ShapeWithoutContent | ElementClass::BackgroundShape => {
                Some(ElementClass::Shape)
            }
            _ => None,
        }
    }

    /// True when `leaf` is `self` or a descendant of it.
    pub fn contains(self, leaf: ElementClass) -> bool {
        self == leaf || leaf.parent() == Some(self)
    }

    pub fn is_text_based(self) -> bool {
        matches!(
            self,
            ElementClass::Text | ElementClass::Title | ElementClass::Subtitle | ElementClass::PlainText
        )
    }

    pub fn is_filled_based(self) -> bool {
        matches!(
            self,
            ElementClass::Background
                | ElementClass::Shape
                | ElementClass::ShapeWithoutContent
                | ElementClass::BackgroundShape
        )
    }
}

impl fmt::Display for ElementClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElementClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ElementClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown element class `{s}`"))
    }
}

/// Binary raster mask, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RleError {
    #[error("run-length data truncated")]
    Truncated,
    #[error("run exceeds row width at row {0}")]
    RunOutOfRange(u32),
    #[error("runs overlap or are unordered at row {0}")]
    Unordered(u32),
    #[error("{0} trailing bytes after the last row")]
    Trailing(usize),
    #[error("invalid base64: {0}")]
    Base64(String),
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[(y * width + x) as usize] = f(x, y);
            }
        }
        m
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize, "mask size");
        Mask { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn get_index(&self, i: usize) -> bool {
        self.data[i]
    }

    pub fn set_index(&mut self, i: usize, v: bool) {
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of set pixels.
    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!(self.dimensions(), other.dimensions());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn intersection_over_union(&self, other: &Mask) -> f64 {
        assert_eq!(self.dimensions(), other.dimensions());
        let (mut inter, mut uni) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            uni += (a || b) as usize;
        }
        if uni == 0 { 1.0 } else { inter as f64 / uni as f64 }
    }

    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Mask {
        Mask::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    /// 0/255 grayscale raster.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Pixels at or above 128 are set.
    pub fn from_gray(img: &GrayImage) -> Mask {
        Mask::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] >= 128)
    }

    /// Binary run-length layout, all integers little-endian u32:
    /// `width, height`, then per row `run_count` followed by `run_count` pairs of `(start, len)`.
    pub fn to_rle_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.height as usize);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for y in 0..self.height {
            runs.clear();
            let row = &self.data[(y * self.width) as usize..((y + 1) * self.width) as usize];
            let mut x = 0u32;
            while x < self.width {
                if row[x as usize] {
                    let start = x;
                    while x < self.width && row[x as usize] {
                        x += 1;
                    }
                    runs.push((start, x - start));
                } else {
                    x += 1;
                }
            }
            out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
            for &(s, l) in &runs {
                out.extend_from_slice(&s.to_le_bytes());
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_rle_bytes(bytes: &[u8]) -> Result<Mask, RleError> {
        let mut words = bytes.chunks(4);
        let mut next = || -> Result<u32, RleError> {
            match words.next() {
                Some(c) if c.len() == 4 => Ok(u32::from_le_bytes(c.try_into().unwrap())),
                _ => Err(RleError::Truncated),
            }
        };
        let width = next()?;
        let height = next()?;
        let mut mask = Mask::new(width, height);
        let mut used = 8usize;
        for y in 0..height {
            let runs = next()?;
            used += 4 + 8 * runs as usize;
            let mut min_start = 0u32;
            for _ in 0..runs {
                let start = next()?;
                let len = next()?;
                if start < min_start || len == 0 {
                    return Err(RleError::Unordered(y));
                }
                let end = start.checked_add(len).ok_or(RleError::RunOutOfRange(y))?;
                if end > width {
                    return Err(RleError::RunOutOfRange(y));
                }
                for x in start..end {
                    mask.set(x, y, true);
                }
                min_start = end + 1;
            }
        }
        if used != bytes.len() {
            return Err(RleError::Trailing(bytes.len() - used));
        }
        Ok(mask)
    }

    pub fn to_rle_base64(&self) -> String {
        B64.encode(self.to_rle_bytes())
    }

    pub fn from_rle_base64(s: &str) -> Result<Mask, RleError> {
        let bytes = B64.decode(s).map_err(|e| RleError::Base64(e.to_string()))?;
        Mask::from_rle_bytes(&bytes)
    }
}

/// Axis-aligned rectangle, serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && py >= self.y && px < self.x + self.w && py < self.y + self.h
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|r| r <= width)
            && self.y.checked_add(self.h).is_some_and(|b| b <= height)
    }
}

impl From<[u32; 4]> for Rect {
    fn from(r: [u32; 4]) -> Self {
        Rect::new(r[0], r[1], r[2], r[3])
    }
}

impl From<Rect> for [u32; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignElement {
    pub id: String,
    pub class: ElementClass,
    pub color: Option<Rgb8>,
    pub mask: Mask,
}

/// A described object inside the photo with a known mask in photo coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotoObject {
    pub phrase: String,
    pub color: ColorTerm,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignBundle {
    pub design: RgbImage,
    pub photo: RgbImage,
    pub photo_rect: Rect,
    pub elements: Vec<DesignElement>,
    pub photo_objects: Vec<PhotoObject>,
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("dimension mismatch for `{id}`: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        id: String,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("unknown element class `{class}` on element `{id}`")]
    UnknownElementClass { id: String, class: String },
    #[error("malformed annotation for `{id}`: {reason}")]
    MalformedAnnotation { id: String, reason: String },
    #[error("io failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("image codec failure on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl BundleError {
    pub fn code(&self) -> &'static str {
        match self {
            BundleError::MissingFile(_) => "missing-file",
            BundleError::DimensionMismatch { .. } => "dimension-mismatch",
            BundleError::UnknownElementClass { .. } => "unknown-element-class",
            BundleError::MalformedAnnotation { .. } => "malformed-annotation",
            BundleError::Io { .. } => "io-failure",
            BundleError::Image { .. } => "invalid-image",
        }
    }

    fn malformed(id: impl Into<String>, reason: impl fmt::Display) -> Self {
        BundleError::MalformedAnnotation {
            id: id.into(),
            reason: reason.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationDoc {
    version: u32,
    photo_rect: Rect,
    elements: Vec<ElementDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    photo_objects: Vec<PhotoObjectDoc>,
}

#[derive(Serialize, Deserialize)]
struct ElementDoc {
    id: String,
    class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    color: Option<Rgb8>,
    mask_rle: String,
}

#[derive(Serialize, Deserialize)]
struct PhotoObjectDoc {
    phrase: String,
    color: ColorTerm,
    mask_rle: String,
}

impl DesignBundle {
    pub fn width(&self) -> u32 {
        self.design.width()
    }

    pub fn height(&self) -> u32 {
        self.design.height()
    }

    pub fn element(&self, id: &str) -> Option<&DesignElement> {
        self.elements.iter().find(|e| e.id == id)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), BundleError> {
        let dims = self.design.dimensions();
        if !self.photo_rect.fits_in(dims.0, dims.1) {
            return Err(BundleError::malformed("photo_rect", "rectangle outside the design"));
        }
        let pdims = (self.photo_rect.w, self.photo_rect.h);
        if self.photo.dimensions() != pdims {
            return Err(BundleError::DimensionMismatch {
                id: "photo".into(),
                expected: pdims,
                found: self.photo.dimensions(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.elements {
            if !seen.insert(e.id.as_str()) {
                return Err(BundleError::malformed(&e.id, "duplicate element id"));
            }
            if !e.class.is_leaf() {
                return Err(BundleError::malformed(&e.id, "group class on an element"));
            }
            if e.mask.dimensions() != dims {
                return Err(BundleError::DimensionMismatch {
                    id: e.id.clone(),
                    expected: dims,
                    found: e.mask.dimensions(),
                });
            }
            if e.mask.count() == 0 {
                return Err(BundleError::malformed(&e.id, "empty mask"));
            }
        }
        for (i, o) in self.photo_objects.iter().enumerate() {
            let id = format!("photo_objects[{i}]");
            if o.mask.dimensions() != pdims {
                return Err(BundleError::DimensionMismatch {
                    id,
                    expected: pdims,
                    found: o.mask.dimensions(),
                });
            }
            if o.phrase.trim().is_empty() {
                return Err(BundleError::malformed(id, "empty phrase"));
            }
        }
        Ok(())
    }

    /// Elements whose leaf class is `class` or one of its descendants, optionally
    /// filtered by color term. Unannotated elements use their voted dominant color.
    pub fn elements_of(&self, class: ElementClass, attr: ColorTerm) -> Vec<&DesignElement> {
        self.elements
            .iter()
            .filter(|e| class.contains(e.class))
            .filter(|e| {
                attr.is_none()
                    || e.color
                        .or_else(|| crate::predict::dominant_color(self, e))
                        .is_some_and(|c| classify_color_term(c) == attr)
            })
            .collect()
    }

    /// Copy of the design with `photo` pasted into the photo rectangle.
    pub fn compose_with_photo(&self, photo: &RgbImage) -> RgbImage {
        let mut out = self.design.clone();
        let r = self.photo_rect;
        for y in 0..r.h {
            for x in 0..r.w {
                out.put_pixel(r.x + x, r.y + y, *photo.get_pixel(x, y));
            }
        }
        out
    }

    fn annotation_doc(&self) -> AnnotationDoc {
        AnnotationDoc {
            version: ANNOTATION_VERSION,
            photo_rect: self.photo_rect,
            elements: self
                .elements
                .iter()
                .map(|e| ElementDoc {
                    id: e.id.clone(),
                    class: e.class.as_str().to_string(),
                    color: e.color,
                    mask_rle: e.mask.to_rle_base64(),
                })
                .collect(),
            photo_objects: self
                .photo_objects
                .iter()
                .map(|o| PhotoObjectDoc {
                    phrase: o.phrase.clone(),
                    color: o.color,
                    mask_rle: o.mask.to_rle_base64(),
                })
                .collect(),
        }
    }

    pub fn annotations_json(&self) -> String {
        serde_json::to_string_pretty(&self.annotation_doc()).expect("annotation serialization")
    }

    /// Builds a bundle from in-memory parts, validating everything.
    pub fn from_parts(
        design: RgbImage,
        photo: RgbImage,
        annotations: &str,
    ) -> Result<DesignBundle, BundleError> {
        let doc: AnnotationDoc = serde_json::from_str(annotations)
            .map_err(|e| BundleError::malformed(ANNOTATION_FILE, e))?;
        if doc.version != ANNOTATION_VERSION {
            return Err(BundleError::malformed(
                ANNOTATION_FILE,
                format!("unsupported version {}", doc.version),
            ));
        }
        let mut elements = Vec::with_capacity(doc.elements.len());
        for e in doc.elements {
            let class: ElementClass = e.class.parse().map_err(|_| BundleError::UnknownElementClass {
                id: e.id.clone(),
                class: e.class.clone(),
            })?;
            let mask = Mask::from_rle_base64(&e.mask_rle).map_err(|err| BundleError::malformed(&e.id, err))?;
            elements.push(DesignElement {
                id: e.id,
                class,
                color: e.color,
                mask,
            });
        }
        let mut photo_objects = Vec::with_capacity(doc.photo_objects.len());
        for (i, o) in doc.photo_objects.into_iter().enumerate() {
            let mask = Mask::from_rle_base64(&o.mask_rle)
                .map_err(|err| BundleError::malformed(format!("photo_objects[{i}]"), err))?;
            photo_objects.push(PhotoObject {
                phrase: o.phrase,
                color: o.color,
                mask,
            });
        }
        let bundle = DesignBundle {
            design,
            photo,
            photo_rect: doc.photo_rect,
            elements,
            photo_objects,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, dir: &Path) -> Result<(), BundleError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| BundleError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let design_path = dir.join(DESIGN_FILE);
        fs::write(&design_path, encode_png_rgb(&self.design)).map_err(io_err(&design_path))?;
        let photo_path = dir.join(PHOTO_FILE);
        fs::write(&photo_path, encode_png_rgb(&self.photo)).map_err(io_err(&photo_path))?;
        let ann_path = dir.join(ANNOTATION_FILE);
        fs::write(&ann_path, self.annotations_json()).map_err(io_err(&ann_path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<DesignBundle, BundleError> {
        let read = |name: &str| -> Result<Vec<u8>, BundleError> {
            let path = dir.join(name);
            fs::read(&path).map_err(|source| {
                if source.kind() == io::ErrorKind::NotFound {
                    BundleError::MissingFile(path.clone())
                } else {
                    BundleError::Io { path: path.clone(), source }
                }
            })
        };
        let design_bytes = read(DESIGN_FILE)?;
        let photo_bytes = read(PHOTO_FILE)?;
        let ann = read(ANNOTATION_FILE)?;
        let design = decode_png_rgb(&design_bytes).map_err(|reason| BundleError::Image {
            path: dir.join(DESIGN_FILE),
            reason,
        })?;
        let photo = decode_png_rgb(&photo_bytes).map_err(|reason| BundleError::Image {
            path: dir.join(PHOTO_FILE),
            reason,
        })?;
        let ann = String::from_utf8(ann).map_err(|e| BundleError::malformed(ANNOTATION_FILE, e))?;
        DesignBundle::from_parts(design, photo, &ann)
    }
}

pub fn load_bundle(path: &Path) -> Result<DesignBundle, BundleError> {
    DesignBundle::load(path)
}

pub fn save_bundle(b: &DesignBundle, path: &Path) -> Result<(), BundleError> {
    b.save(path)
}

/// Deterministic PNG encoding of an RGB raster.
pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encoding into memory");
    out
}

pub fn encode_png_gray(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encoding into memory");
    out
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage, String> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map(|i| i.to_rgb8())
        .map_err(|e| e.to_string())
}

pub fn decode_png_gray(bytes: &[u8]) -> Result<GrayImage, String> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map(|i| i.to_luma8())
        .map_err(|e| e.to_string())
}
