//! sRGB and CIE Lab arithmetic, basic color terms, and the 6x6x6 histogram grid.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

/// Number of histogram bins per channel.
pub const BINS_PER_CHANNEL: u32 = 6;

/// D65 reference white, 2 degree observer.
const WHITE_X: f64 = 0.95047;
const WHITE_Y: f64 = 1.0;
const WHITE_Z: f64 = 1.08883;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// An 8-bit sRGB color. Serializes as `[r, g, b]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u8; 3]", into = "[u8; 3]")]
pub struct Rgb8 {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb8 {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Rgb8 { r, g, b }
    }

    pub fn to_array(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    pub fn to_f64(self) -> [f64; 3] {
        [self.r as f64, self.g as f64, self.b as f64]
    }

    /// Rounds each channel half-up and clamps to [0, 255].
    pub fn from_f64(c: [f64; 3]) -> Self {
        let q = |v: f64| (v + 0.5).floor().clamp(0.0, 255.0) as u8;
        Rgb8::new(q(c[0]), q(c[1]), q(c[2]))
    }

    /// Rec. 601 luma in [0, 255].
    pub fn luma(self) -> f64 {
        luma(self.to_f64())
    }

    pub fn max_channel_diff(self, other: Rgb8) -> u8 {
        let d = |a: u8, b: u8| a.abs_diff(b);
        d(self.r, other.r).max(d(self.g, other.g)).max(d(self.b, other.b))
    }

    pub fn hex(self) -> String {
        format!("#{:02x}{:02x}{:02x}", self.r, self.g, self.b)
    }
}

impl From<[u8; 3]> for Rgb8 {
    fn from(c: [u8; 3]) -> Self {
        Rgb8::new(c[0], c[1], c[2])
    }
}

impl From<Rgb8> for [u8; 3] {
    fn from(c: Rgb8) -> Self {
        c.to_array()
    }
}

impl From<image::Rgb<u8>> for Rgb8 {
    fn from(p: image::Rgb<u8>) -> Self {
        Rgb8::new(p[0], p[1], p[2])
    }
}

impl From<Rgb8> for image::Rgb<u8> {
    fn from(c: Rgb8) -> Self {
        image::Rgb(c.to_array())
    }
}

impl fmt::Display for Rgb8 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.r, self.g, self.b)
    }
}

/// Rec. 601 luma of a real-valued RGB triple.
pub fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// CIE Lab color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lab {
    #[serde(rename = "L")]
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Lab { l, a, b }
    }
}

static LINEAR_LUT: LazyLock<[f64; 256]> = LazyLock::new(|| {
    let mut lut = [0.0; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        *v = srgb_to_linear(i as f64 / 255.0);
    }
    lut
});

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

fn linear_to_lab(lin: [f64; 3]) -> Lab {
    let m = &RGB_TO_XYZ;
    let x = m[0][0] * lin[0] + m[0][1] * lin[1] + m[0][2] * lin[2];
    let y = m[1][0] * lin[0] + m[1][1] * lin[1] + m[1][2] * lin[2];
    let z = m[2][0] * lin[0] + m[2][1] * lin[1] + m[2][2] * lin[2];
    let fx = lab_f(x / WHITE_X);
    let fy = lab_f(y / WHITE_Y);
    let fz = lab_f(z / WHITE_Z);
    Lab::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Converts an 8-bit sRGB color to CIE Lab (D65).
pub fn rgb_to_lab(c: Rgb8) -> Lab {
    let lut = &*LINEAR_LUT;
    linear_to_lab([lut[c.r as usize], lut[c.g as usize], lut[c.b as usize]])
}

/// Converts a real-valued sRGB triple in [0, 255] to CIE Lab.
pub fn rgb_f64_to_lab(c: [f64; 3]) -> Lab {
    linear_to_lab(c.map(|v| srgb_to_linear(v.clamp(0.0, 255.0) / 255.0)))
}

/// Inverse conversion without clamping; channels may fall outside [0, 255].
pub fn lab_to_rgb_f64(c: Lab) -> [f64; 3] {
    let fy = (c.l + 16.0) / 116.0;
    let fx = fy + c.a / 500.0;
    let fz = fy - c.b / 200.0;
    let x = lab_f_inv(fx) * WHITE_X;
    let y = if c.l > KAPPA * EPSILON {
        fy * fy * fy
    } else {
        c.l / KAPPA
    } * WHITE_Y;
    let z = lab_f_inv(fz) * WHITE_Z;
    let m = &XYZ_TO_RGB;
    let lin = [
        m[0][0] * x + m[0][1] * y + m[0][2] * z,
        m[1][0] * x + m[1][1] * y + m[1][2] * z,
        m[2][0] * x + m[2][1] * y + m[2][2] * z,
    ];
    lin.map(|v| {
        // Negative linear values have no sRGB encoding; keep the sign so callers see the excursion.
        if v < 0.0 {
            v * 12.92 * 255.0
        } else {
            linear_to_srgb(v) * 255.0
        }
    })
}

/// Converts Lab to 8-bit sRGB. Returns the color and whether any channel was clamped.
pub fn lab_to_rgb_clamped(c: Lab) -> (Rgb8, bool) {
    let f = lab_to_rgb_f64(c);
    let clamped = f.iter().any(|&v| !(-0.5..255.5).contains(&v));
    (Rgb8::from_f64(f), clamped)
}

/// Converts Lab to 8-bit sRGB, clamping out-of-gamut channels.
pub fn lab_to_rgb(c: Lab) -> Rgb8 {
    lab_to_rgb_clamped(c).0
}

/// The eleven basic color terms plus `none`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorTerm {
    Blue,
    Brown,
    Green,
    Orange,
    Pink,
    Purple,
    Red,
    Yellow,
    Black,
    Grey,
    White,
    None,
}

impl ColorTerm {
    /// The eleven real terms, excluding `None`.
    pub const ALL: [ColorTerm; 11] = [
        ColorTerm::Blue,
        ColorTerm::Brown,
        ColorTerm::Green,
        ColorTerm::Orange,
        ColorTerm::Pink,
        ColorTerm::Purple,
        ColorTerm::Red,
        ColorTerm::Yellow,
        ColorTerm::Black,
        ColorTerm::Grey,
        ColorTerm::White,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ColorTerm::Blue => "blue",
            ColorTerm::Brown => "brown",
            ColorTerm::Green => "green",
            ColorTerm::Orange => "orange",
            ColorTerm::Pink => "pink",
            ColorTerm::Purple => "purple",
            ColorTerm::Red => "red",
            ColorTerm::Yellow => "yellow",
            ColorTerm::Black => "black",
            ColorTerm::Grey => "grey",
            ColorTerm::White => "white",
            ColorTerm::None => "none",
        }
    }

    pub fn is_none(self) -> bool {
        self == ColorTerm::None
    }
}

impl fmt::Display for ColorTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ColorTerm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = match s.to_ascii_lowercase().as_str() {
            "blue" => ColorTerm::Blue,
            "brown" => ColorTerm::Brown,
            "green" => ColorTerm::Green,
            "orange" => ColorTerm::Orange,
            "pink" => ColorTerm::Pink,
            "purple" => ColorTerm::Purple,
            "red" => ColorTerm::Red,
            "yellow" => ColorTerm::Yellow,
            "black" => ColorTerm::Black,
            "grey" | "gray" => ColorTerm::Grey,
            "white" => ColorTerm::White,
            "none" => ColorTerm::None,
            other => return Err(format!("unknown color term `{other}`")),
        };
        Ok(t)
    }
}

/// Hue, saturation and lightness, with hue in degrees [0, 360) and the rest in [0, 1].
pub fn rgb_to_hsl(c: Rgb8) -> (f64, f64, f64) {
    let [r, g, b] = c.to_f64().map(|v| v / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = (max + min) / 2.0;
    let d = max - min;
    if d == 0.0 {
        return (0.0, 0.0, l);
    }
    let s = d / (1.0 - (2.0 * l - 1.0).abs());
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    (h.rem_euclid(360.0), s.min(1.0), l)
}

/// Thresholds of the HSL rule table that maps colors to basic terms.
///
/// Hue bands are half-open `[start, end)` in degrees; the red band wraps through 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRules {
    pub achromatic_saturation: f64,
    pub black_lightness: f64,
    pub white_lightness: f64,
    pub red_start: f64,
    pub orange_start: f64,
    pub yellow_start: f64,
    pub green_start: f64,
    pub blue_start: f64,
    pub purple_start: f64,
    pub pink_start: f64,
    pub brown_hue: (f64, f64),
    pub brown_lightness: f64,
    pub light_red_is_pink: f64,
}

impl Default for TermRules {
    fn default() -> Self {
        TermRules {
            achromatic_saturation: 0.12,
            black_lightness: 0.18,
            white_lightness: 0.85,
            red_start: 345.0,
            orange_start: 15.0,
            yellow_start: 45.0,
            green_start: 70.0,
            blue_start: 165.0,
            purple_start: 255.0,
            pink_start: 290.0,
            brown_hue: (10.0, 50.0),
            brown_lightness: 0.35,
            light_red_is_pink: 0.75,
        }
    }
}

impl TermRules {
    pub fn classify(&self, c: Rgb8) -> ColorTerm {
        let (h, s, l) = rgb_to_hsl(c);
        if s < self.achromatic_saturation {
            return if l < self.black_lightness {
                ColorTerm::Black
            } else if l > self.white_lightness {
                ColorTerm::White
            } else {
                ColorTerm::Grey
            };
        }
        let band = if h >= self.red_start || h < self.orange_start {
            ColorTerm::Red
        } else if h < self.yellow_start {
            ColorTerm::Orange
        } else if h < self.green_start {
            ColorTerm::Yellow
        } else if h < self.blue_start {
            ColorTerm::Green
        } else if h < self.purple_start {
            ColorTerm::Blue
        } else if h < self.pink_start {
            ColorTerm::Purple
        } else {
            ColorTerm::Pink
        };
        let in_brown_hue = h >= self.brown_hue.0 && h < self.brown_hue.1;
        match band {
            ColorTerm::Red | ColorTerm::Orange if in_brown_hue && l < self.brown_lightness => {
                ColorTerm::Brown
            }
            ColorTerm::Red if l > self.light_red_is_pink => ColorTerm::Pink,
            t => t,
        }
    }
}

static DEFAULT_RULES: LazyLock<TermRules> = LazyLock::new(TermRules::default);

/// Maps a color to one of the eleven basic terms using the default rule table. Never `None`.
pub fn classify_color_term(c: Rgb8) -> ColorTerm {
    DEFAULT_RULES.classify(c)
}

/// Cell of the uniform 6x6x6 RGB histogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinIndex {
    pub i: u8,
    pub j: u8,
    pub k: u8,
}

impl BinIndex {
    /// Flat index in [0, 216).
    pub fn flat(self) -> usize {
        let b = BINS_PER_CHANNEL as usize;
        (self.i as usize * b + self.j as usize) * b + self.k as usize
    }
}

fn bin_coord(v: u8) -> u8 {
    (v as u32 * BINS_PER_CHANNEL / 256) as u8
}

pub fn bin_index(c: Rgb8) -> BinIndex {
    BinIndex {
        i: bin_coord(c.r),
        j: bin_coord(c.g),
        k: bin_coord(c.b),
    }
}
