//! Turns a pipeline outcome into a manifest plus PNG artifacts. The CLI and the service both
//! go through here, so the same request yields byte-identical rasters on either path.

use recolor_core::color::{ColorTerm, Rgb8};
use recolor_core::design::{encode_png_gray, encode_png_rgb};
use recolor_core::instruction::{Granularity, InstructionAst};
use recolor_core::pipeline::InstructionOutcome;
use recolor_core::predict::SourceColor;
use recolor_core::recolor::{OverlapScore, TargetRecolor};
use recolor_core::region::{MaskProvider, SolveReport};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    InitialMask { region: usize },
    SoftMask { region: usize },
    ResultDesign { result: usize },
    ResultPhoto { result: usize },
}

impl ArtifactKind {
    /// Stable file name used by the CLI output directory.
    pub fn file_name(&self) -> String {
        match self {
            ArtifactKind::InitialMask { region } => format!("region-{region}-initial.png"),
            ArtifactKind::SoftMask { region } => format!("region-{region}-soft.png"),
            ArtifactKind::ResultDesign { result } => format!("result-{result}-design.png"),
            ArtifactKind::ResultPhoto { result } => format!("result-{result}-photo.png"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceColorView {
    pub rgb: Rgb8,
    pub hex: String,
    pub confidence: f64,
    pub element_id: String,
}

impl From<&SourceColor> for SourceColorView {
    fn from(c: &SourceColor) -> Self {
        SourceColorView {
            rgb: c.rgb,
            hex: c.rgb.hex(),
            confidence: c.confidence,
            element_id: c.element_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionView {
    pub region_index: usize,
    pub phrase: String,
    pub color_adj: ColorTerm,
    pub provider: MaskProvider,
    pub initial_mask_ref: String,
    pub soft_mask_ref: String,
    pub solve: SolveReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultView {
    pub region_index: usize,
    /// The full design with the recolored photo.
    pub image_ref: String,
    pub photo_ref: String,
    pub source_color: SourceColorView,
    pub overlap_rates: Vec<OverlapScore>,
    pub targets: Vec<TargetRecolor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecolorManifest {
    pub instruction: String,
    pub ast: InstructionAst,
    pub granularity: Granularity,
    pub threshold: f64,
    pub source_colors: Vec<SourceColorView>,
    pub regions: Vec<RegionView>,
    pub results: Vec<ResultView>,
}

/// Encodes every raster of `o` and hands it to `emit`, which stores it and returns its ref.
pub fn render_outcome<E>(
    o: &InstructionOutcome,
    threshold: f64,
    mut emit: impl FnMut(ArtifactKind, Vec<u8>) -> Result<String, E>,
) -> Result<RecolorManifest, E> {
    let mut regions = Vec::with_capacity(o.regions.len());
    for r in &o.regions {
        let i = r.region_index;
        regions.push(RegionView {
            region_index: i,
            phrase: r.region.phrase.clone(),
            color_adj: r.region.color_adj,
            provider: r.initial.provider,
            initial_mask_ref: emit(ArtifactKind::InitialMask { region: i }, encode_png_gray(&r.initial.mask.to_gray()))?,
            soft_mask_ref: emit(ArtifactKind::SoftMask { region: i }, encode_png_gray(&r.soft.foreground_gray()))?,
            solve: r.solve.clone(),
        });
    }
    let mut results = Vec::with_capacity(o.results.len());
    for (k, r) in o.results.iter().enumerate() {
        results.push(ResultView {
            region_index: r.region_index,
            image_ref: emit(ArtifactKind::ResultDesign { result: k }, encode_png_rgb(&r.design))?,
            photo_ref: emit(ArtifactKind::ResultPhoto { result: k }, encode_png_rgb(&r.recolor.image))?,
            source_color: SourceColorView::from(&r.source),
            overlap_rates: r.recolor.report.overlap_rates.clone(),
            targets: r.recolor.report.targets.clone(),
        });
    }
    Ok(RecolorManifest {
        instruction: o.instruction.clone(),
        ast: o.ast.clone(),
        granularity: o.granularity,
        threshold,
        source_colors: o.source_colors.colors.iter().map(SourceColorView::from).collect(),
        regions,
        results,
    })
}
