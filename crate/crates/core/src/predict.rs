//! Source colors from named design elements by class-aware histogram voting.

use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::color::{BinIndex, ColorTerm, Rgb8, bin_index, classify_color_term};
use crate::design::{DesignBundle, DesignElement, ElementClass};
use crate::instruction::{Granularity, GranularityError, SourceDescriptor, recognize_source_granularity};

/// Base colors kept per element.
pub const TOP_K: usize = 10;
/// Default confidence cut for reporting a source color.
pub const DEFAULT_THRESHOLD: f64 = 0.55;
/// Looser cut that is also commonly used at test time.
pub const LOOSE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            threshold: DEFAULT_THRESHOLD,
            top_k: TOP_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum PredictError {
    #[error("no element matches {class}{}", if attr.is_none() { String::new() } else { format!(" with color {attr}") })]
    NoMatchingElement { class: ElementClass, attr: ColorTerm },
    #[error("no color above confidence {threshold}")]
    NoConfidentColor { threshold: f64 },
    #[error("mask of `{element_id}` is uniform, so nothing lies above its mean")]
    EmptySelection { element_id: String },
}

impl From<GranularityError> for PredictError {
    fn from(e: GranularityError) -> Self {
        match e {
            GranularityError::NoMatchingElement { class, attr } => PredictError::NoMatchingElement { class, attr },
        }
    }
}

impl PredictError {
    pub fn code(&self) -> &'static str {
        match self {
            PredictError::NoMatchingElement { .. } => "no-matching-element",
            PredictError::NoConfidentColor { .. } => "no-confident-color",
            PredictError::EmptySelection { .. } => "empty-selection",
        }
    }
}

/// Supplies a per-pixel element mask over the design, values in [0, 1].
pub trait ElementMaskProvider: Sync {
    fn element_mask(&self, b: &DesignBundle, e: &DesignElement) -> Vec<f64>;
}

/// Uses the binary masks stored in the bundle.
pub struct AnnotatedMasks;

impl ElementMaskProvider for AnnotatedMasks {
    fn element_mask(&self, _b: &DesignBundle, e: &DesignElement) -> Vec<f64> {
        e.mask.data().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// Pixels whose mask value is strictly greater than the mask mean, as `(row-major index, color)`.
pub fn candidate_pixels(design: &RgbImage, mask: &[f64]) -> Option<Vec<(u32, Rgb8)>> {
    assert_eq!(mask.len(), (design.width() * design.height()) as usize);
    let mean = mask.iter().sum::<f64>() / mask.len() as f64;
    let out: Vec<(u32, Rgb8)> = mask
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > mean)
        .map(|(i, _)| {
            let p = design.as_raw();
            (i as u32, Rgb8::new(p[3 * i], p[3 * i + 1], p[3 * i + 2]))
        })
        .collect();
    if out.is_empty() { None } else { Some(out) }
}

/// Candidate pixels of an element under its annotated binary mask.
pub fn element_candidates(b: &DesignBundle, e: &DesignElement) -> Result<Vec<(u32, Rgb8)>, PredictError> {
    candidate_pixels(&b.design, &AnnotatedMasks.element_mask(b, e)).ok_or_else(|| PredictError::EmptySelection {
        element_id: e.id.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseColorCandidate {
    pub color: Rgb8,
    pub bin: BinIndex,
    pub pixel_count: u64,
    pub bin_score: u64,
    /// Every unique color of the bin with its pixel count, in first-occurrence order.
    pub members: Vec<(Rgb8, u64)>,
}

struct ColorStat {
    count: u64,
    first: u32,
}

/// Ranks histogram bins by class-aware score and returns one representative per bin.
///
/// Text-like classes score a bin by its most frequent unique color, filled classes by the
/// bin's total count. Ties fall back to row-major first occurrence, so pixel order never matters.
pub fn vote_base_colors(candidates: &[(u32, Rgb8)], class: ElementClass, k: usize) -> Vec<BaseColorCandidate> {
    let mut stats: HashMap<Rgb8, ColorStat> = HashMap::new();
    for &(idx, c) in candidates {
        let s = stats.entry(c).or_insert(ColorStat { count: 0, first: idx });
        s.count += 1;
        s.first = s.first.min(idx);
    }
    let mut bins: HashMap<BinIndex, Vec<(Rgb8, ColorStat)>> = HashMap::new();
    for (c, s) in stats {
        bins.entry(bin_index(c)).or_default().push((c, s));
    }
    let max_voting = class.is_text_based();
    let mut ranked: Vec<(u64, u32, BaseColorCandidate)> = bins
        .into_iter()
        .map(|(bin, mut members)| {
            members.sort_by_key(|(_, s)| s.first);
            let score = if max_voting {
                members.iter().map(|(_, s)| s.count).max().unwrap()
            } else {
                members.iter().map(|(_, s)| s.count).sum()
            };
            let (rep, rep_stat) = members
                .iter()
                .min_by_key(|(_, s)| (std::cmp::Reverse(s.count), s.first))
                .unwrap();
            let first = members[0].1.first;
            let cand = BaseColorCandidate {
                color: *rep,
                bin,
                pixel_count: rep_stat.count,
                bin_score: score,
                members: members.iter().map(|(c, s)| (*c, s.count)).collect(),
            };
            (score, first, cand)
        })
        .collect();
    ranked.sort_by_key(|(score, first, _)| (std::cmp::Reverse(*score), *first));
    ranked.into_iter().take(k).map(|(_, _, c)| c).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceColor {
    pub rgb: Rgb8,
    pub confidence: f64,
    pub element_id: String,
    pub bin: BinIndex,
}

/// Count-weighted mean of the bin members, rounded half-up per channel.
pub fn bin_mean(members: &[(Rgb8, u64)]) -> Rgb8 {
    let n: u64 = members.iter().map(|(_, c)| c).sum();
    let mut sum = [0u64; 3];
    for (c, cnt) in members {
        for (s, v) in sum.iter_mut().zip(c.to_array()) {
            *s += v as u64 * cnt;
        }
    }
    let q = |s: u64| ((2 * s + n) / (2 * n)) as u8;
    Rgb8::new(q(sum[0]), q(sum[1]), q(sum[2]))
}

/// Final color and confidence for one base color. `top_score` is the element's best bin score.
pub fn refine_source_color(
    element_id: &str,
    cand: &BaseColorCandidate,
    top_score: u64,
    attr: ColorTerm,
) -> SourceColor {
    let rgb = bin_mean(&cand.members);
    let gate = if attr.is_none() || classify_color_term(rgb) == attr { 1.0 } else { 0.0 };
    SourceColor {
        rgb,
        confidence: cand.bin_score as f64 / top_score.max(1) as f64 * gate,
        element_id: element_id.to_string(),
        bin: bin_index(rgb),
    }
}

/// All refined base colors of one element, strongest first, no threshold applied.
pub fn predict_element(
    b: &DesignBundle,
    e: &DesignElement,
    attr: ColorTerm,
    k: usize,
) -> Result<Vec<SourceColor>, PredictError> {
    let cands = element_candidates(b, e)?;
    let voted = vote_base_colors(&cands, e.class, k);
    let top = voted.first().map(|c| c.bin_score).unwrap_or(1);
    Ok(voted.iter().map(|c| refine_source_color(&e.id, c, top, attr)).collect())
}

/// The strongest voted color of an element, if its mask selects anything.
pub fn dominant_color(b: &DesignBundle, e: &DesignElement) -> Option<Rgb8> {
    predict_element(b, e, ColorTerm::None, 1).ok()?.first().map(|c| c.rgb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceColorSet {
    pub granularity: Granularity,
    pub colors: Vec<SourceColor>,
    pub threshold: f64,
}

pub fn predict_source_colors(
    b: &DesignBundle,
    src: &SourceDescriptor,
    cfg: &PredictConfig,
) -> Result<SourceColorSet, PredictError> {
    let granularity = recognize_source_granularity(src, b)?;
    let elems = b.elements_of(src.class, src.attr);
    let mut merged: Vec<SourceColor> = Vec::new();
    let mut last_err = None;
    for e in elems {
        match predict_element(b, e, src.attr, cfg.top_k) {
            Ok(colors) => {
                for c in colors {
                    match merged.iter_mut().find(|m| m.bin == c.bin) {
                        Some(m) if c.confidence > m.confidence => *m = c,
                        Some(_) => {}
                        None => merged.push(c),
                    }
                }
            }
            Err(err) => last_err = Some(err),
        }
    }
    if merged.is_empty() {
        if let Some(err) = last_err {
            return Err(err);
        }
    }
    let mut colors: Vec<SourceColor> = merged.into_iter().filter(|c| c.confidence > cfg.threshold).collect();
    // Stable: equal confidences keep element order.
    colors.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    if colors.is_empty() {
        return Err(PredictError::NoConfidentColor { threshold: cfg.threshold });
    }
    if granularity == Granularity::Fine {
        colors.truncate(1);
    }
    Ok(SourceColorSet {
        granularity,
        colors,
        threshold: cfg.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{Mask, Rect};
    use crate::instruction::Quantifier;
    use proptest::prelude::*;

    fn img(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)))
    }

    #[test]
    fn adaptive_threshold_on_binary_mask() {
        let d = img(4, 4, |x, y| [x as u8, y as u8, 0]);
        let mask: Vec<f64> = (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        let sel = candidate_pixels(&d, &mask).unwrap();
        assert_eq!(sel.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn adaptive_threshold_on_soft_mask() {
        // Mean of {0, 0.4, 0.9, 0} is 0.325; the oracle picks the two values above it.
        let d = img(2, 2, |x, y| [x as u8, y as u8, 7]);
        let mask = [0.0, 0.4, 0.9, 0.0];
        let mean: f64 = mask.iter().sum::<f64>() / 4.0;
        let oracle: Vec<u32> = (0..4).filter(|&i| mask[i as usize] > mean).collect();
        let sel: Vec<u32> = candidate_pixels(&d, &mask).unwrap().iter().map(|s| s.0).collect();
        assert_eq!(sel, oracle);
        assert_eq!(sel, vec![1, 2]);
    }

    #[test]
    fn all_ones_mask_selects_nothing() {
        let d = img(3, 3, |_, _| [1, 2, 3]);
        assert!(candidate_pixels(&d, &[1.0; 9]).is_none());
    }

    /// 100 pixels of pure blue plus 50 anti-aliased colors of 2 pixels each in one other bin.
    fn text_with_bleed() -> Vec<(u32, Rgb8)> {
        let mut v = Vec::new();
        let mut idx = 0u32;
        for _ in 0..100 {
            v.push((idx, Rgb8::new(0, 0, 255)));
            idx += 1;
        }
        for i in 0..50u8 {
            for _ in 0..2 {
                v.push((idx, Rgb8::new(180 + i % 10, 180 + i / 10, 180)));
                idx += 1;
            }
        }
        v
    }

    #[test]
    fn max_voting_beats_bleed_for_text() {
        let cands = text_with_bleed();
        let blue_bin = bin_index(Rgb8::new(0, 0, 255));
        let bleed_bin = bin_index(Rgb8::new(180, 180, 180));
        let brute = |max: bool| -> HashMap<BinIndex, u64> {
            let mut counts: HashMap<Rgb8, u64> = HashMap::new();
            for (_, c) in &cands {
                *counts.entry(*c).or_default() += 1;
            }
            let mut out: HashMap<BinIndex, u64> = HashMap::new();
            for (c, n) in counts {
                let e = out.entry(bin_index(c)).or_default();
                *e = if max { (*e).max(n) } else { *e + n };
            }
            out
        };
        let maxed = brute(true);
        assert_eq!((maxed[&blue_bin], maxed[&bleed_bin]), (100, 2));
        let summed = brute(false);
        assert_eq!((summed[&blue_bin], summed[&bleed_bin]), (100, 100));

        let voted = vote_base_colors(&cands, ElementClass::Title, TOP_K);
        assert_eq!(voted[0].color, Rgb8::new(0, 0, 255));
        assert_eq!((voted[0].bin_score, voted[1].bin_score), (100, 2));
        let voted = vote_base_colors(&cands, ElementClass::Background, TOP_K);
        assert_eq!((voted[0].bin_score, voted[1].bin_score), (100, 100));
        // Equal sums: the earlier bin wins.
        assert_eq!(voted[0].bin, blue_bin);
    }

    #[test]
    fn single_fill_is_rank_one() {
        let cands: Vec<_> = (0..500).map(|i| (i, Rgb8::new(10, 200, 30))).collect();
        let voted = vote_base_colors(&cands, ElementClass::ShapeWithoutContent, TOP_K);
        assert_eq!(voted.len(), 1);
        assert_eq!(voted[0].color, Rgb8::new(10, 200, 30));
        assert_eq!(voted[0].pixel_count, 500);
    }

    #[test]
    fn refinement_rounds_half_up() {
        let cand = BaseColorCandidate {
            color: Rgb8::new(200, 0, 0),
            bin: bin_index(Rgb8::new(200, 0, 0)),
            pixel_count: 3,
            bin_score: 4,
            members: vec![(Rgb8::new(200, 0, 0), 3), (Rgb8::new(210, 0, 0), 1)],
        };
        // (3*200 + 210) / 4 = 202.5
        let c = refine_source_color("e", &cand, 4, ColorTerm::None);
        assert_eq!(c.rgb, Rgb8::new(203, 0, 0));
        assert_eq!(c.confidence, 1.0);
        assert_eq!(refine_source_color("e", &cand, 4, ColorTerm::Green).confidence, 0.0);
        let single = BaseColorCandidate {
            members: vec![(Rgb8::new(0, 0, 255), 9)],
            ..cand.clone()
        };
        assert_eq!(refine_source_color("e", &single, 9, ColorTerm::None).rgb, Rgb8::new(0, 0, 255));
    }

    #[test]
    fn k_cap() {
        let cands: Vec<_> = (0..216u32)
            .map(|i| (i, Rgb8::new((i % 6 * 43) as u8, (i / 6 % 6 * 43) as u8, (i / 36 * 43) as u8)))
            .collect();
        assert_eq!(vote_base_colors(&cands, ElementClass::Background, TOP_K).len(), 10);
    }

    fn two_tone_bundle() -> DesignBundle {
        let (w, h) = (40, 20);
        let design = img(w, h, |x, y| {
            if (2..8).contains(&x) && (2..6).contains(&y) {
                [250, 220, 0]
            } else if (12..18).contains(&x) && (2..6).contains(&y) {
                [250, 140, 0]
            } else if (2..30).contains(&x) && (12..14).contains(&y) {
                [0, 0, 0]
            } else if y < 10 {
                [20, 60, 200]
            } else {
                [220, 220, 230]
            }
        });
        let is = |c: [u8; 3]| {
            let d = design.clone();
            Mask::from_fn(w, h, move |x, y| d.get_pixel(x, y).0 == c)
        };
        DesignBundle {
            photo: img(4, 4, |_, _| [0, 0, 0]),
            photo_rect: Rect::new(34, 14, 4, 4),
            elements: vec![
                DesignElement { id: "bg-top".into(), class: ElementClass::Background, color: Some(Rgb8::new(20, 60, 200)), mask: is([20, 60, 200]) },
                DesignElement { id: "bg-bottom".into(), class: ElementClass::Background, color: Some(Rgb8::new(220, 220, 230)), mask: is([220, 220, 230]) },
                DesignElement { id: "shape-y".into(), class: ElementClass::ShapeWithoutContent, color: Some(Rgb8::new(250, 220, 0)), mask: is([250, 220, 0]) },
                DesignElement { id: "shape-o".into(), class: ElementClass::BackgroundShape, color: Some(Rgb8::new(250, 140, 0)), mask: is([250, 140, 0]) },
                DesignElement { id: "title".into(), class: ElementClass::Title, color: Some(Rgb8::new(0, 0, 0)), mask: is([0, 0, 0]) },
            ],
            design,
            photo_objects: vec![],
        }
    }

    #[test]
    fn teaser_style_predictions() {
        let b = two_tone_bundle();
        let cfg = PredictConfig::default();
        let d = SourceDescriptor { class: ElementClass::Shape, attr: ColorTerm::Yellow, quantifier: Quantifier::One };
        let set = predict_source_colors(&b, &d, &cfg).unwrap();
        assert_eq!(set.granularity, Granularity::Fine);
        assert_eq!(set.colors.len(), 1);
        assert_eq!(set.colors[0].rgb, Rgb8::new(250, 220, 0));

        let d = SourceDescriptor { class: ElementClass::Background, attr: ColorTerm::None, quantifier: Quantifier::All };
        let set = predict_source_colors(&b, &d, &cfg).unwrap();
        assert_eq!(set.granularity, Granularity::Coarse);
        let got: Vec<_> = set.colors.iter().map(|c| c.rgb).collect();
        assert_eq!(got, vec![Rgb8::new(20, 60, 200), Rgb8::new(220, 220, 230)]);

        let d = SourceDescriptor { class: ElementClass::Title, attr: ColorTerm::Green, quantifier: Quantifier::One };
        assert!(matches!(predict_source_colors(&b, &d, &cfg), Err(PredictError::NoMatchingElement { .. })));

        let d = SourceDescriptor { class: ElementClass::Title, attr: ColorTerm::None, quantifier: Quantifier::One };
        let set = predict_source_colors(&b, &d, &cfg).unwrap();
        assert_eq!((set.granularity, set.colors[0].rgb), (Granularity::Fine, Rgb8::new(0, 0, 0)));
    }

    #[test]
    fn threshold_constants() {
        assert_eq!(DEFAULT_THRESHOLD, 0.55);
        assert_eq!(LOOSE_THRESHOLD, 0.5);
        assert_eq!(TOP_K, 10);
        assert_eq!(PredictConfig::default().threshold, 0.55);
    }

    proptest! {
        #[test]
        fn permutation_invariant(colors in prop::collection::vec((0u8..4, 0u8..4), 1..80), seed: u64) {
            let cands: Vec<(u32, Rgb8)> = colors.iter().enumerate()
                .map(|(i, &(a, b))| (i as u32, Rgb8::new(a * 60, b * 60, 90))).collect();
            let mut shuffled = cands.clone();
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            for class in [ElementClass::Title, ElementClass::Background] {
                prop_assert_eq!(vote_base_colors(&cands, class, TOP_K), vote_base_colors(&shuffled, class, TOP_K));
            }
        }

        #[test]
        fn more_winning_pixels_never_lower_confidence(extra in 1usize..50, noise in prop::collection::vec(0u8..255, 0..40)) {
            let mut cands: Vec<(u32, Rgb8)> = (0..60).map(|i| (i, Rgb8::new(0, 0, 255))).collect();
            for (i, &n) in noise.iter().enumerate() {
                cands.push((100 + i as u32, Rgb8::new(n, 128, 0)));
            }
            let conf = |c: &[(u32, Rgb8)]| {
                let v = vote_base_colors(c, ElementClass::Title, TOP_K);
                let top = v[0].bin_score;
                v.iter().find(|b| b.color == Rgb8::new(0, 0, 255)).map(|b| refine_source_color("e", b, top, ColorTerm::None).confidence).unwrap()
            };
            let before = conf(&cands);
            for j in 0..extra {
                cands.push((1000 + j as u32, Rgb8::new(0, 0, 255)));
            }
            prop_assert!(conf(&cands) >= before);
        }
    }
}
