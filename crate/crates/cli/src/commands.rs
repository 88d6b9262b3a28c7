//! Subcommand implementations. Usage errors are rejected by the argument parser (exit 2);
//! everything here reports failures as `CliError` (exit 1).

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgGroup, Args, Parser, Subcommand};
use image::RgbImage;
use recolor_core::design::{decode_png_rgb, encode_png_gray, encode_png_rgb, DesignBundle, Mask};
use recolor_core::eval::{evaluate_dataset, EvalConfig};
use recolor_core::instruction::{parse_instruction, split_multi_region};
use recolor_core::palette::{extract_palette, reconstruct_image, PaletteSize, DEFAULT_PALETTE};
use recolor_core::pipeline::{Engine, EngineConfig, PipelineError};
use recolor_core::predict::{predict_source_colors, PredictConfig, DEFAULT_THRESHOLD};
use recolor_core::synth::{generate_dataset, DegradeConfig, GeneratorConfig};
use serde::Serialize;

use crate::render::{render_outcome, RecolorManifest, SourceColorView};
use crate::service::{serve, AppState};
use crate::store::Store;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BATCH_FILE: &str = "batch.json";

#[derive(Debug, Parser)]
#[command(name = "recolor", version, about = "Recolor the photo inside a graphic design from an instruction")]
pub struct Cli {
    /// Palette size: an integer in [2, 12] or `auto`.
    #[arg(long, global = true, env = "RECOLOR_PALETTE_N")]
    pub palette_n: Option<PaletteSize>,
    /// Confidence threshold applied to source colors when a command does not override it.
    #[arg(long, global = true, env = "RECOLOR_THRESHOLD")]
    pub threshold_default: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated dataset.
    GenDataset(GenDatasetArgs),
    /// Apply one instruction to one bundle.
    Recolor(RecolorArgs),
    /// Print the source colors an instruction refers to.
    PredictColors(PredictArgs),
    /// Extract the photo palette.
    Palette(ImageArgs),
    /// Decompose the photo into soft color layers.
    Decompose(DecomposeArgs),
    /// Write the initial and refined masks of an instruction's regions.
    Refine(RefineArgs),
    /// Accuracy-vs-threshold evaluation of a generated dataset.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Apply one instruction to every bundle in a directory.
    Batch(BatchArgs),
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Degradation strength in [0, 1]; omitted means clean.
    #[arg(long)]
    pub degrade: Option<f64>,
    /// Skip the fill gradient when degrading.
    #[arg(long)]
    pub no_gradient: bool,
    /// Directory of PNG photos to use instead of procedural ones.
    #[arg(long)]
    pub photo_dir: Option<PathBuf>,
    /// Do not paste annotated objects into photos.
    #[arg(long)]
    pub no_objects: bool,
    #[arg(long, default_value_t = 5)]
    pub instructions_per_case: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecolorArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Grayscale PNG the size of the photo; nonzero pixels replace every region's initial mask.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["image", "bundle"])))]
pub struct ImageArgs {
    /// A PNG photo.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// A bundle directory; its photo is used.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub input: ImageArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the threshold/accuracy table here.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "RECOLOR_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "RECOLOR_STORE", default_value = "recolor-store")]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: std::net::IpAddr,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// Directory whose subdirectories are bundles.
    #[arg(long)]
    pub designs: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Pipeline(PipelineError),
    #[error("{0}")]
    Failed(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

impl CliError {
    /// The message printed to stderr, with the parser's suggestion when there is one.
    pub fn report(&self) -> String {
        match self {
            CliError::Pipeline(e) => match &e.suggestion {
                Some(s) => format!("error: {e}\nsuggestion: {s}"),
                None => format!("error: {e}"),
            },
            CliError::Failed(m) => format!("error: {m}"),
        }
    }
}

pub type CliResult = Result<(), CliError>;

pub fn engine_config(cli: &Cli) -> EngineConfig {
    EngineConfig {
        palette_size: cli.palette_n.unwrap_or(PaletteSize::Fixed(DEFAULT_PALETTE)),
        predict: PredictConfig {
            threshold: cli.threshold_default.unwrap_or(DEFAULT_THRESHOLD),
            ..PredictConfig::default()
        },
        ..EngineConfig::default()
    }
}

fn predict_config(engine: &Engine, t: Option<f64>) -> Result<PredictConfig, CliError> {
    let mut cfg = engine.config.predict.clone();
    if let Some(t) = t {
        cfg.threshold = t;
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(failed(format!("threshold must lie in [0, 1], got {}", cfg.threshold)));
    }
    Ok(cfg)
}

fn load_bundle(dir: &Path) -> Result<DesignBundle, CliError> {
    DesignBundle::load(dir).map_err(|e| failed(format!("cannot load bundle {}: {e}", dir.display())))
}

fn read_png(path: &Path) -> Result<RgbImage, CliError> {
    let bytes = fs::read(path).map_err(|e| failed(format!("cannot read {}: {e}", path.display())))?;
    decode_png_rgb(&bytes).map_err(|e| failed(format!("cannot decode {}: {e}", path.display())))
}

fn read_mask(path: &Path) -> Result<Mask, CliError> {
    let img = image::open(path).map_err(|e| failed(format!("cannot read mask {}: {e}", path.display())))?;
    Ok(Mask::from_gray(&img.to_luma8()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| failed(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    write(path, s.as_bytes())
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

/// Runs one instruction and writes `manifest.json` plus the rasters into `out`.
pub fn recolor_to_dir(
    engine: &Engine,
    b: &DesignBundle,
    instruction: &str,
    threshold: Option<f64>,
    mask: Option<&Mask>,
    out: &Path,
) -> Result<RecolorManifest, CliError> {
    let predict = predict_config(engine, threshold)?;
    let ast = parse_instruction(instruction).map_err(PipelineError::from)?;
    let outcome = engine.recolor_ast_with(b, instruction, ast, mask, &predict)?;
    fs::create_dir_all(out).map_err(|e| failed(format!("cannot create {}: {e}", out.display())))?;
    let manifest = render_outcome(&outcome, predict.threshold, |kind, bytes| {
        let name = kind.file_name();
        write(&out.join(&name), &bytes).map(|_| name)
    })?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn run(cli: Cli) -> CliResult {
    let engine = Engine::new(engine_config(&cli));
    match cli.command {
        Command::GenDataset(a) => gen_dataset(a),
        Command::Recolor(a) => {
            let b = load_bundle(&a.bundle)?;
            let mask = a.mask.as_deref().map(read_mask).transpose()?;
            let m = recolor_to_dir(&engine, &b, &a.instruction, a.threshold, mask.as_ref(), &a.out)?;
            println!(
                "{} result(s), granularity {}, written to {}",
                m.results.len(),
                m.granularity,
                a.out.display()
            );
            Ok(())
        }
        Command::PredictColors(a) => {
            let b = load_bundle(&a.bundle)?;
            let ast = parse_instruction(&a.instruction).map_err(PipelineError::from)?;
            let cfg = predict_config(&engine, a.threshold)?;
            let set = predict_source_colors(&b, &ast.source, &cfg).map_err(PipelineError::from)?;
            #[derive(Serialize)]
            struct Out {
                granularity: recolor_core::instruction::Granularity,
                threshold: f64,
                source_colors: Vec<SourceColorView>,
            }
            print_json(&Out {
                granularity: set.granularity,
                threshold: set.threshold,
                source_colors: set.colors.iter().map(SourceColorView::from).collect(),
            });
            Ok(())
        }
        Command::Palette(a) => {
            let photo = input_photo(&a)?;
            let ex = extract_palette(&photo, engine.config.palette_size).map_err(PipelineError::from)?;
            #[derive(Serialize)]
            struct Out {
                colors: Vec<String>,
                rgb: Vec<[f64; 3]>,
                rank: usize,
                initial_hull_vertices: usize,
                warnings: Vec<String>,
            }
            print_json(&Out {
                colors: ex.palette.rgb8().iter().map(|c| c.hex()).collect(),
                rgb: ex.palette.colors.clone(),
                rank: ex.rank,
                initial_hull_vertices: ex.initial_hull_vertices,
                warnings: ex.warnings.iter().map(|w| format!("{w:?}")).collect(),
            });
            Ok(())
        }
        Command::Decompose(a) => {
            let photo = input_photo(&a.input)?;
            let an = engine.analysis(&photo)?;
            let d = &an.decomposition;
            for (i, layer) in d.layers().iter().enumerate() {
                write(&a.out.join(format!("layer-{i}.png")), &encode_png_gray(&layer.to_gray(d.width, d.height)))?;
            }
            write(&a.out.join("reconstruction.png"), &encode_png_rgb(&reconstruct_image(d)))?;
            #[derive(Serialize)]
            struct Out<'a> {
                palette: Vec<String>,
                stats: &'a recolor_core::palette::DecompositionStats,
                layers: Vec<String>,
            }
            let out = Out {
                palette: d.palette.rgb8().iter().map(|c| c.hex()).collect(),
                stats: &d.stats,
                layers: (0..d.n()).map(|i| format!("layer-{i}.png")).collect(),
            };
            write_json(&a.out.join("decomposition.json"), &out)?;
            print_json(&out);
            Ok(())
        }
        Command::Refine(a) => {
            let b = load_bundle(&a.bundle)?;
            let mask = a.mask.as_deref().map(read_mask).transpose()?;
            let ast = parse_instruction(&a.instruction).map_err(PipelineError::from)?;
            let an = engine.analysis(&b.photo)?;
            #[derive(Serialize)]
            struct Region {
                phrase: String,
                provider: recolor_core::region::MaskProvider,
                initial: String,
                soft: String,
                solve: recolor_core::region::SolveReport,
            }
            let mut regions = Vec::new();
            for (i, part) in split_multi_region(&ast).iter().enumerate() {
                let r = engine.region_masks(&b.photo, &an, i, &part.regions[0], mask.as_ref(), &b.photo_objects)?;
                let (initial, soft) = (format!("region-{i}-initial.png"), format!("region-{i}-soft.png"));
                write(&a.out.join(&initial), &encode_png_gray(&r.initial.mask.to_gray()))?;
                write(&a.out.join(&soft), &encode_png_gray(&r.soft.foreground_gray()))?;
                regions.push(Region {
                    phrase: r.region.phrase.clone(),
                    provider: r.initial.provider,
                    initial,
                    soft,
                    solve: r.solve,
                });
            }
            write_json(&a.out.join("refine.json"), &regions)?;
            print_json(&regions);
            Ok(())
        }
        Command::Eval(a) => {
            let r = evaluate_dataset(&a.dataset, &EvalConfig::default()).map_err(|e| failed(format!("[{}] {e}", e.code())))?;
            if let Some(p) = &a.out {
                write_json(p, &r)?;
            }
            if let Some(p) = &a.tsv {
                write(p, r.curve_tsv().as_bytes())?;
            }
            println!("instructions\t{}", r.instructions);
            println!("best_threshold\t{:.2}", r.best_threshold);
            println!("best_accuracy\t{:.4}", r.best_accuracy);
            println!("accuracy_at_{:.2}\t{:.4}", r.default_threshold, r.default_accuracy);
            println!("color_mse\t{:.4}", r.color_mse);
            println!("round_trip_rate\t{:.4}", r.round_trip_rate);
            print!("{}", r.curve_tsv());
            Ok(())
        }
        Command::Serve(a) => {
            let store = Store::open(&a.store).map_err(failed)?;
            let state = AppState {
                store: Arc::new(store),
                engine: Arc::new(engine),
            };
            let rt = tokio::runtime::Runtime::new().map_err(failed)?;
            rt.block_on(serve(state, SocketAddr::new(a.bind, a.port))).map_err(failed)
        }
        Command::Batch(a) => batch(&engine, a),
    }
}

fn input_photo(a: &ImageArgs) -> Result<RgbImage, CliError> {
    match (&a.image, &a.bundle) {
        (Some(p), _) => read_png(p),
        (None, Some(b)) => Ok(load_bundle(b)?.photo),
        (None, None) => unreachable!("argument group requires one input"),
    }
}

fn gen_dataset(a: GenDatasetArgs) -> CliResult {
    let cfg = GeneratorConfig {
        seed: a.seed,
        count: a.count,
        degrade: a.degrade.map(|strength| DegradeConfig {
            strength,
            gradient: !a.no_gradient,
        }),
        photo_dir: a.photo_dir,
        photo_objects: !a.no_objects,
        instructions_per_case: a.instructions_per_case,
        ..GeneratorConfig::default()
    };
    let s = generate_dataset(&cfg, &a.out).map_err(|e| failed(format!("[{}] {e}", e.code())))?;
    print_json(&s);
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct BatchItem {
    pub name: String,
    pub ok: bool,
    pub results: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Bundles in `dir`: subdirectories holding an annotation file, sorted by name.
pub fn bundle_dirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| failed(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(recolor_core::design::ANNOTATION_FILE).is_file())
        .collect();
    out.sort();
    Ok(out)
}

fn batch(engine: &Engine, a: BatchArgs) -> CliResult {
    let dirs = bundle_dirs(&a.designs)?;
    if dirs.is_empty() {
        return Err(failed(format!("no bundles under {}", a.designs.display())));
    }
    let mut items = Vec::new();
    for d in &dirs {
        let name = d.file_name().unwrap().to_string_lossy().to_string();
        let res = load_bundle(d).and_then(|b| recolor_to_dir(engine, &b, &a.instruction, a.threshold, None, &a.out.join(&name)));
        items.push(match res {
            Ok(m) => BatchItem {
                name,
                ok: true,
                results: m.results.len(),
                error: None,
            },
            Err(e) => BatchItem {
                name,
                ok: false,
                results: 0,
                error: Some(e.to_string()),
            },
        });
    }
    let failures = items.iter().filter(|i| !i.ok).count();
    write_json(
        &a.out.join(BATCH_FILE),
        &serde_json::json!({ "instruction": a.instruction, "items": items }),
    )?;
    println!("{} of {} bundle(s) recolored into {}", items.len() - failures, items.len(), a.out.display());
    if failures > 0 {
        return Err(failed(format!("{failures} bundle(s) failed; see {}", a.out.join(BATCH_FILE).display())));
    }
    Ok(())
}
