//! End-to-end instruction flow: parse, predict source colors, build the region masks, and
//! recolor the photo once per source color per region. Photo analysis is cached per engine.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::{DesignBundle, Mask};
use crate::instruction::{parse_instruction, split_multi_region, Granularity, InstructionAst, ParseError, RegionDescriptor};
use crate::palette::{
    decompose_with, default_spatial_scale, extract_palette, rgbxy_weights, Decomposition, PaletteError, PaletteExtraction,
    PaletteSize, DEFAULT_PALETTE,
};
use crate::predict::{predict_source_colors, PredictConfig, PredictError, SourceColor, SourceColorSet};
use crate::recolor::{recolor_region, RecolorError, RecolorResult};
use crate::region::{
    build_affinity_graph, build_semantic_layers, initial_mask, refine_with_graph, AffinityGraph, InitialRegionMask,
    RefineConfig, RegionError, SoftRegionMasks, SolveReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Parse,
    Predict,
    Mask,
    Decompose,
    Refine,
    Layers,
    Select,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Parse => "parse",
            Stage::Predict => "predict",
            Stage::Mask => "mask",
            Stage::Decompose => "decompose",
            Stage::Refine => "refine",
            Stage::Layers => "layers",
            Stage::Select => "select",
        })
    }
}

/// A failure from any stage, tagged with the stage that raised it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{stage} stage failed [{code}]: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
}

impl PipelineError {
    fn new(stage: Stage, code: &str, message: impl fmt::Display) -> Self {
        PipelineError {
            stage,
            code: code.to_string(),
            message: message.to_string(),
            suggestion: None,
        }
    }
}

impl From<ParseError> for PipelineError {
    fn from(e: ParseError) -> Self {
        PipelineError {
            suggestion: Some(e.suggestion()),
            ..PipelineError::new(Stage::Parse, e.code(), &e)
        }
    }
}

impl From<PredictError> for PipelineError {
    fn from(e: PredictError) -> Self {
        PipelineError::new(Stage::Predict, e.code(), &e)
    }
}

impl From<PaletteError> for PipelineError {
    fn from(e: PaletteError) -> Self {
        PipelineError::new(Stage::Decompose, e.code(), &e)
    }
}

impl From<RecolorError> for PipelineError {
    fn from(e: RecolorError) -> Self {
        PipelineError::new(Stage::Select, e.code(), &e)
    }
}

fn region_error(stage: Stage, e: RegionError) -> PipelineError {
    PipelineError::new(stage, e.code(), &e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub palette_size: PaletteSize,
    pub predict: PredictConfig,
    pub refine: RefineConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            palette_size: PaletteSize::Fixed(DEFAULT_PALETTE),
            predict: PredictConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

/// SHA-256 over the dimensions and raw RGB bytes.
pub fn photo_hash(photo: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(photo.width().to_le_bytes());
    h.update(photo.height().to_le_bytes());
    h.update(photo.as_raw());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AnalysisKey {
    pub photo: String,
    pub palette: PaletteSize,
    pub spatial_scale_bits: u64,
}

/// Everything about a photo that does not depend on the instruction. Immutable once built,
/// except for the affinity graph, which is built on first use.
#[derive(Debug)]
pub struct PhotoAnalysis {
    pub key: AnalysisKey,
    pub extraction: PaletteExtraction,
    pub decomposition: Decomposition,
    graph: OnceLock<AffinityGraph>,
}

impl PhotoAnalysis {
    pub fn graph(&self, photo: &RgbImage, cfg: &RefineConfig) -> &AffinityGraph {
        self.graph.get_or_init(|| build_affinity_graph(photo, cfg))
    }
}

/// Builds the palette and the layer decomposition of `photo`, sharing one tessellation.
pub fn analyze_photo(photo: &RgbImage, size: PaletteSize) -> Result<PhotoAnalysis, PaletteError> {
    let lambda = default_spatial_scale(photo);
    let extraction = extract_palette(photo, size)?;
    let tess = rgbxy_weights(photo, lambda)?;
    let decomposition = decompose_with(photo, &tess, &extraction.palette)?;
    Ok(PhotoAnalysis {
        key: AnalysisKey {
            photo: photo_hash(photo),
            palette: size,
            spatial_scale_bits: lambda.to_bits(),
        },
        extraction,
        decomposition,
        graph: OnceLock::new(),
    })
}

type Slot = Arc<OnceLock<Result<Arc<PhotoAnalysis>, PipelineError>>>;

/// Runs instructions against bundles. Photo analyses are computed once per key and shared.
#[derive(Debug, Default)]
pub struct Engine {
    pub config: EngineConfig,
    cache: Mutex<HashMap<AnalysisKey, Slot>>,
}

/// Refined mask of one region of the instruction.
#[derive(Clone, Debug)]
pub struct RegionOutcome {
    pub region_index: usize,
    pub region: RegionDescriptor,
    pub initial: InitialRegionMask,
    pub soft: SoftRegionMasks,
    pub solve: SolveReport,
}

/// One recolored photo for one source color and one region.
#[derive(Clone, Debug)]
pub struct ResultOutcome {
    pub region_index: usize,
    pub source: SourceColor,
    pub recolor: RecolorResult,
    /// The design with the recolored photo pasted back in.
    pub design: RgbImage,
}

#[derive(Clone, Debug)]
pub struct InstructionOutcome {
    pub instruction: String,
    pub ast: InstructionAst,
    pub granularity: Granularity,
    pub source_colors: SourceColorSet,
    pub regions: Vec<RegionOutcome>,
    pub results: Vec<ResultOutcome>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Engine {
            config,
            cache: Mutex::default(),
        }
    }

    /// Number of photo analyses currently held.
    pub fn cached_analyses(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    /// The cached analysis of `photo`, computing it on first request. Concurrent callers for
    /// the same photo wait for a single computation.
    pub fn analysis(&self, photo: &RgbImage) -> Result<Arc<PhotoAnalysis>, PipelineError> {
        let key = AnalysisKey {
            photo: photo_hash(photo),
            palette: self.config.palette_size,
            spatial_scale_bits: default_spatial_scale(photo).to_bits(),
        };
        let slot = self.cache.lock().expect("cache lock").entry(key).or_default().clone();
        slot.get_or_init(|| {
            analyze_photo(photo, self.config.palette_size)
                .map(Arc::new)
                .map_err(PipelineError::from)
        })
        .clone()
    }

    /// Initial and refined masks for one region of the photo.
    pub fn region_masks(
        &self,
        photo: &RgbImage,
        analysis: &PhotoAnalysis,
        region_index: usize,
        region: &RegionDescriptor,
        user_mask: Option<&Mask>,
        objects: &[crate::design::PhotoObject],
    ) -> Result<RegionOutcome, PipelineError> {
        let initial = initial_mask(photo, region, user_mask, objects).map_err(|e| region_error(Stage::Mask, e))?;
        let graph = analysis.graph(photo, &self.config.refine);
        let refined =
            refine_with_graph(graph, &initial.mask, &self.config.refine).map_err(|e| region_error(Stage::Refine, e))?;
        Ok(RegionOutcome {
            region_index,
            region: region.clone(),
            initial,
            soft: refined.masks,
            solve: refined.report,
        })
    }

    /// Parses `text` and runs it against `b`. A supplied mask replaces the initial mask of
    /// every region.
    pub fn recolor_instruction(
        &self,
        b: &DesignBundle,
        text: &str,
        user_mask: Option<&Mask>,
    ) -> Result<InstructionOutcome, PipelineError> {
        let ast = parse_instruction(text)?;
        self.recolor_ast(b, text, ast, user_mask)
    }

    pub fn recolor_ast(
        &self,
        b: &DesignBundle,
        text: &str,
        ast: InstructionAst,
        user_mask: Option<&Mask>,
    ) -> Result<InstructionOutcome, PipelineError> {
        self.recolor_ast_with(b, text, ast, user_mask, &self.config.predict)
    }

    /// As `recolor_ast`, with a per-request predictor configuration.
    pub fn recolor_ast_with(
        &self,
        b: &DesignBundle,
        text: &str,
        ast: InstructionAst,
        user_mask: Option<&Mask>,
        predict: &PredictConfig,
    ) -> Result<InstructionOutcome, PipelineError> {
        let parts = split_multi_region(&ast);
        let source_colors = predict_source_colors(b, &ast.source, predict)?;
        let analysis = self.analysis(&b.photo)?;
        let mut regions = Vec::with_capacity(parts.len());
        let mut results = Vec::new();
        for (ri, part) in parts.iter().enumerate() {
            let region = self.region_masks(&b.photo, &analysis, ri, &part.regions[0], user_mask, &b.photo_objects)?;
            let layers = build_semantic_layers(&analysis.decomposition, &region.soft)
                .map_err(|e| region_error(Stage::Layers, e))?;
            let per_color: Vec<Result<ResultOutcome, PipelineError>> = source_colors
                .colors
                .par_iter()
                .map(|src| {
                    let recolor = recolor_region(&b.photo, &layers, &region.soft, src.rgb)?;
                    let design = b.compose_with_photo(&recolor.image);
                    Ok(ResultOutcome {
                        region_index: ri,
                        source: src.clone(),
                        recolor,
                        design,
                    })
                })
                .collect();
            for r in per_color {
                results.push(r?);
            }
            regions.push(region);
        }
        Ok(InstructionOutcome {
            instruction: text.to_string(),
            ast,
            granularity: source_colors.granularity,
            source_colors,
            regions,
            results,
        })
    }
}

/// The bundle with its photo replaced by `photo` and the design raster updated to match;
/// used to apply a further instruction to a chosen result.
pub fn bundle_with_photo(b: &DesignBundle, photo: RgbImage) -> DesignBundle {
    let design = b.compose_with_photo(&photo);
    DesignBundle {
        design,
        photo,
        ..b.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::Rgb8;
    use crate::design::{DesignElement, ElementClass, PhotoObject, Rect};
    use image::Rgb;

    /// 48×32 design: white background, red title strip, blue shape, and a 24×16 photo with a
    /// green disc on a warm gradient. The disc is annotated as "tree".
    fn bundle() -> DesignBundle {
        let (pw, ph) = (24u32, 16u32);
        let disc = |x: u32, y: u32| (x as i32 - 8).pow(2) + (y as i32 - 8).pow(2) <= 25;
        let photo = RgbImage::from_fn(pw, ph, |x, y| {
            if disc(x, y) {
                Rgb([30 + (x * 2) as u8, 150 + y as u8, 40])
            } else {
                Rgb([200 + (x * 2) as u8, 120 + (y * 3) as u8, 60 + x as u8])
            }
        });
        let rect = Rect::new(20, 12, pw, ph);
        let title = Mask::from_fn(48, 32, |x, y| y < 6 && (2..40).contains(&x));
        let shape = Mask::from_fn(48, 32, |x, y| (2..12).contains(&x) && (14..26).contains(&y));
        let photo_mask = Mask::from_fn(48, 32, |x, y| rect.contains(x, y));
        let mut bg = Mask::from_fn(48, 32, |_, _| true);
        for m in [&title, &shape, &photo_mask] {
            for i in 0..bg.len() {
                if m.get_index(i) {
                    bg.set_index(i, false);
                }
            }
        }
        let mut design = RgbImage::from_pixel(48, 32, Rgb([255, 255, 255]));
        for (i, p) in design.pixels_mut().enumerate() {
            if title.get_index(i) {
                *p = Rgb([220, 20, 30]);
            } else if shape.get_index(i) {
                *p = Rgb([20, 60, 200]);
            }
        }
        let mut b = DesignBundle {
            design,
            photo: photo.clone(),
            photo_rect: rect,
            elements: vec![
                DesignElement {
                    id: "bg".into(),
                    class: ElementClass::Background,
                    color: Some(Rgb8::new(255, 255, 255)),
                    mask: bg,
                },
                DesignElement {
                    id: "title".into(),
                    class: ElementClass::Title,
                    color: Some(Rgb8::new(220, 20, 30)),
                    mask: title,
                },
                DesignElement {
                    id: "shape".into(),
                    class: ElementClass::ShapeWithoutContent,
                    color: Some(Rgb8::new(20, 60, 200)),
                    mask: shape,
                },
                DesignElement {
                    id: "photo".into(),
                    class: ElementClass::Photo,
                    color: None,
                    mask: photo_mask,
                },
            ],
            photo_objects: vec![PhotoObject {
                phrase: "tree".into(),
                color: crate::color::ColorTerm::Green,
                mask: Mask::from_fn(pw, ph, disc),
            }],
        };
        b.design = b.compose_with_photo(&photo);
        b
    }

    #[test]
    fn fine_instruction_gives_one_result() {
        let b = bundle();
        let e = Engine::default();
        let out = e.recolor_instruction(&b, "use the color of the shape to recolor the tree", None).unwrap();
        assert_eq!(out.granularity, Granularity::Fine);
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.results[0].source.rgb, Rgb8::new(20, 60, 200));
        let r = &out.results[0];
        assert_eq!(r.recolor.image.dimensions(), b.photo.dimensions());
        assert!(r.recolor.report.targets.len() <= 4);
        // The disc moved towards blue; a far corner of the backdrop did not move.
        let c = r.recolor.image.get_pixel(8, 8);
        assert!(c[2] > c[1], "{c:?}");
        assert_eq!(r.recolor.image.get_pixel(23, 15), b.photo.get_pixel(23, 15));
        assert_eq!(r.design.get_pixel(28, 20), r.recolor.image.get_pixel(8, 8));
    }

    #[test]
    fn errors_carry_stage() {
        let b = bundle();
        let e = Engine::default();
        let err = e.recolor_instruction(&b, "recolor", None).unwrap_err();
        assert_eq!(err.stage, Stage::Parse);
        let err = e
            .recolor_instruction(&b, "use the color of the subtitle to recolor the tree", None)
            .unwrap_err();
        assert_eq!(err.stage, Stage::Predict);
        assert_eq!(err.code, "no-matching-element");
        let err = e
            .recolor_instruction(&b, "use the color of the shape to recolor the boat", None)
            .unwrap_err();
        assert_eq!(err.stage, Stage::Mask);
    }

    #[test]
    fn analysis_is_cached_per_photo() {
        let b = bundle();
        let e = Engine::default();
        let a1 = e.analysis(&b.photo).unwrap();
        let a2 = e.analysis(&b.photo).unwrap();
        assert!(Arc::ptr_eq(&a1, &a2));
        assert_eq!(e.cached_analyses(), 1);
        let other = bundle_with_photo(&b, RgbImage::from_fn(24, 16, |x, y| Rgb([x as u8 * 9, y as u8 * 13, 77])));
        e.analysis(&other.photo).unwrap();
        assert_eq!(e.cached_analyses(), 2);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let b = bundle();
        let text = "use the color of the title to recolor the tree";
        let a = Engine::default().recolor_instruction(&b, text, None).unwrap();
        let c = Engine::default().recolor_instruction(&b, text, None).unwrap();
        assert_eq!(a.results[0].recolor.image, c.results[0].recolor.image);
        assert_eq!(a.results[0].recolor.report, c.results[0].recolor.report);
    }

    #[test]
    fn user_mask_overrides_annotation() {
        let b = bundle();
        let e = Engine::default();
        let m = Mask::from_fn(24, 16, |x, _| x >= 16);
        let out = e
            .recolor_instruction(&b, "use the color of the shape to recolor the tree", Some(&m))
            .unwrap();
        assert_eq!(out.regions[0].initial.provider, crate::region::MaskProvider::UserSupplied);
    }

    #[test]
    fn photo_hash_depends_on_shape_and_content() {
        let a = RgbImage::from_pixel(4, 2, Rgb([1, 2, 3]));
        let b = RgbImage::from_pixel(2, 4, Rgb([1, 2, 3]));
        assert_ne!(photo_hash(&a), photo_hash(&b));
        assert_eq!(photo_hash(&a), photo_hash(&a.clone()));
    }
}
