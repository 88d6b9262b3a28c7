//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p recolor-core --test acceptance`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;

use recolor_core::color::{bin_index, Rgb8, BINS_PER_CHANNEL};
use recolor_core::design::{encode_png_rgb, DesignBundle, DesignElement, ElementClass, Mask, PhotoObject, Rect};
use recolor_core::eval::{evaluate_cases, EvalConfig, EvalReport};
use recolor_core::instruction::{parse_with, Lexicon, RegionDescriptor};
use recolor_core::palette::{extract_palette_n, Decomposition, DecompositionStats, Palette, PaletteSize};
use recolor_core::pipeline::{analyze_photo, Engine, EngineConfig};
use recolor_core::predict::{candidate_pixels, vote_base_colors, DEFAULT_THRESHOLD, TOP_K};
use recolor_core::recolor::{
    compute_overlap_rates, recolor_with_source, select_target_layers, OverlapScore, EMPTY_LAYER_MASS, TARGET_LAYERS,
};
use recolor_core::region::{build_semantic_layers, Side, SoftRegionMasks};
use recolor_core::synth::{
    generate_cases, generate_dataset, generate_photo, random_ast, render_instruction, DegradeConfig, GeneratorConfig,
    InstructionCase, Template,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn pool(threads: usize) -> rayon::ThreadPool {
    ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

fn natural_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/natural")
}

fn natural_photos() -> Vec<(String, RgbImage)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(natural_dir())
        .expect("natural photo dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            (name, image::open(&p).expect("natural photo").to_rgb8())
        })
        .collect()
}

fn loaded(cfg: &GeneratorConfig) -> Vec<(String, DesignBundle, Vec<InstructionCase>)> {
    generate_cases(cfg)
        .expect("dataset generation")
        .into_iter()
        .map(|c| (format!("case-{}", c.index), c.bundle, c.instructions))
        .collect()
}

fn clean_config() -> GeneratorConfig {
    GeneratorConfig {
        seed: 7,
        count: 110,
        ..Default::default()
    }
}

// ---------------------------------------------------------------------------------------------
// 1. Decomposition fidelity

fn criterion_1() -> Outcome {
    let mut photos: Vec<(String, RgbImage)> = Vec::new();
    let cfg = GeneratorConfig::default();
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let (photo, _) = generate_photo(256, 256, &cfg, &mut rng).map_err(|e| e.to_string())?;
        photos.push((format!("synthetic-{i}"), photo));
    }
    photos.extend(natural_photos());
    if photos.len() != 25 {
        return Err(format!("expected 25 photos, found {}", photos.len()));
    }
    let single = pool(1);
    let mut worst = DecompositionStats::default();
    let mut worst_time = Duration::ZERO;
    let mut slowest = String::new();
    let mut failures = Vec::new();
    for (name, photo) in &photos {
        if photo.dimensions() != (256, 256) {
            failures.push(format!("{name} is {:?}", photo.dimensions()));
            continue;
        }
        let start = Instant::now();
        let a = single.install(|| analyze_photo(photo, PaletteSize::Fixed(6)));
        let elapsed = start.elapsed();
        let a = match a {
            Ok(a) => a,
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        let s = &a.decomposition.stats;
        if a.decomposition.n() != 6 {
            failures.push(format!("{name}: palette has {} colors", a.decomposition.n()));
        }
        if s.reconstruction_rmse > 2.5 / 255.0 {
            failures.push(format!("{name}: rmse {:.3}/255", s.reconstruction_rmse * 255.0));
        }
        if s.max_sum_error > 1e-4 {
            failures.push(format!("{name}: sum error {:.2e}", s.max_sum_error));
        }
        if s.min_raw_weight < -1e-4 {
            failures.push(format!("{name}: raw weight {:.2e}", s.min_raw_weight));
        }
        if elapsed > Duration::from_secs(10) {
            failures.push(format!("{name}: {:.2}s", elapsed.as_secs_f64()));
        }
        worst.reconstruction_rmse = worst.reconstruction_rmse.max(s.reconstruction_rmse);
        worst.max_sum_error = worst.max_sum_error.max(s.max_sum_error);
        worst.min_raw_weight = worst.min_raw_weight.min(s.min_raw_weight);
        if elapsed > worst_time {
            worst_time = elapsed;
            slowest = name.clone();
        }
    }
    let detail = format!(
        "25 photos, worst rmse {:.3}/255, worst sum error {:.1e}, min raw weight {:.1e}, slowest {:.2}s ({slowest}) on 1 thread",
        worst.reconstruction_rmse * 255.0,
        worst.max_sum_error,
        worst.min_raw_weight,
        worst_time.as_secs_f64()
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------------------------------------
// 2. Palette recovery

fn mixture(gens: &[[f64; 3]], w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| {
        let raw: Vec<f64> = gens.iter().map(|_| rng.random::<f64>().powi(6)).collect();
        let s: f64 = raw.iter().sum();
        let mut c = [0.0; 3];
        for (r, g) in raw.iter().zip(gens) {
            for k in 0..3 {
                c[k] += r / s * g[k];
            }
        }
        Rgb8::from_f64(c).into()
    })
}

fn max_channel_error(palette: &Palette, g: [f64; 3]) -> f64 {
    palette
        .colors
        .iter()
        .map(|c| (0..3).map(|k| (c[k] - g[k]).abs()).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min)
}

fn criterion_2() -> Outcome {
    let tetra = [[250.0, 240.0, 10.0], [200.0, 20.0, 30.0], [20.0, 30.0, 210.0], [10.0, 200.0, 90.0]];
    // Four color quadrants.
    let img = RgbImage::from_fn(32, 32, |x, y| Rgb8::from_f64(tetra[(2 * (y / 16) + x / 16) as usize]).into());
    let ex = extract_palette_n(&img, 4).map_err(|e| e.to_string())?;
    let tetra_err = tetra.iter().map(|g| max_channel_error(&ex.palette, *g)).fold(0.0, f64::max);
    let tetra_ok = ex.palette.len() == 4 && tetra_err <= 1e-6;

    let gens = [[230.0, 200.0, 40.0], [200.0, 40.0, 60.0], [30.0, 60.0, 200.0], [40.0, 190.0, 120.0], [20.0, 20.0, 30.0]];
    let img = mixture(&gens, 96, 96, 11);
    let ex5 = extract_palette_n(&img, 5).map_err(|e| e.to_string())?;
    let mix_err = gens.iter().map(|g| max_channel_error(&ex5.palette, *g)).fold(0.0, f64::max);
    let mix_ok = ex5.palette.len() == 5 && mix_err <= 2.0;
    check(
        tetra_ok && mix_ok,
        format!(
            "tetrahedron n=4 vertex error {tetra_err:.1e} ({} colors), 5-color mixture n=5 worst channel error {mix_err:.2} ({} colors)",
            ex.palette.len(),
            ex5.palette.len()
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 3. Voting exactness

fn criterion_3(clean: &EvalReport) -> Outcome {
    let degraded_cfg = GeneratorConfig {
        degrade: Some(DegradeConfig {
            strength: 1.0,
            gradient: true,
        }),
        ..clean_config()
    };
    let degraded = evaluate_cases(&loaded(&degraded_cfg), &EvalConfig::default()).map_err(|e| e.to_string())?;
    let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let cf = &clean.filled_elements;
    let ct = &clean.text_elements;
    let df = &degraded.filled_elements;
    let dt = &degraded.text_elements;
    let clean_filled = rate(cf.exact, cf.count);
    let clean_text = rate(ct.exact, ct.count);
    let deg_filled = rate(df.within_tolerance, df.count);
    let deg_text = rate(dt.within_tolerance, dt.count);
    check(
        clean.instructions >= 500
            && cf.count > 0
            && ct.count > 0
            && clean_filled == 1.0
            && clean_text >= 0.99
            && deg_filled >= 0.95
            && deg_text >= 0.90,
        format!(
            "{} instructions; clean exact filled {}/{} text {}/{}; degraded within 6 filled {}/{} text {}/{}",
            clean.instructions, cf.exact, cf.count, ct.exact, ct.count, df.within_tolerance, df.count, dt.within_tolerance, dt.count
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 4. Algorithmic constants

fn criterion_4() -> Outcome {
    let mut failures = Vec::new();
    if BINS_PER_CHANNEL != 6 {
        failures.push(format!("bins per channel {BINS_PER_CHANNEL}"));
    }
    // 6 bins of width 256/6 per channel: 42 is in bin 0, 43 in bin 1, 213 in bin 4, 214 in bin 5.
    let b0 = bin_index(Rgb8::new(0, 42, 255));
    let b1 = bin_index(Rgb8::new(43, 213, 214));
    if (b0.i, b0.j, b0.k) != (0, 0, 5) || (b1.i, b1.j, b1.k) != (1, 4, 5) {
        failures.push(format!("bin boundaries {b0:?} {b1:?}"));
    }

    // k = 10: 15 colors in 15 distinct bins yield exactly 10 base colors.
    if TOP_K != 10 {
        failures.push(format!("top k {TOP_K}"));
    }
    let mut cands = Vec::new();
    let mut i = 0u32;
    for r in 0..3u8 {
        for g in 0..5u8 {
            let c = Rgb8::new(r * 50 + 10, g * 50 + 10, 128);
            for _ in 0..(i + 1) {
                cands.push((i, c));
            }
            i += 1;
        }
    }
    let base = vote_base_colors(&cands, ElementClass::ShapeWithoutContent, TOP_K);
    if base.len() != 10 {
        failures.push(format!("{} base colors", base.len()));
    }

    if TARGET_LAYERS != 4 {
        failures.push(format!("target layers {TARGET_LAYERS}"));
    }
    if DEFAULT_THRESHOLD != 0.55 {
        failures.push(format!("default threshold {DEFAULT_THRESHOLD}"));
    }

    // Q = 2N: foreground layers by base index, then background layers.
    let n = 5;
    let d = Decomposition {
        palette: Palette {
            colors: (0..n).map(|i| [i as f64 * 50.0, 20.0, 200.0 - i as f64 * 30.0]).collect(),
        },
        width: 2,
        height: 2,
        alpha: (0..4 * n).map(|j| if j % n == j / n % n { 1.0 } else { 0.0 }).collect(),
        stats: DecompositionStats::default(),
    };
    let masks = SoftRegionMasks::from_foreground(2, 2, &[1.0, 0.5, 0.25, 0.0]);
    match build_semantic_layers(&d, &masks) {
        Ok(layers) => {
            let order: Vec<(usize, Side)> = layers.iter().map(|l| (l.base_index, l.side)).collect();
            let want: Vec<(usize, Side)> = (0..n)
                .map(|i| (i, Side::Foreground))
                .chain((0..n).map(|i| (i, Side::Background)))
                .collect();
            if order != want {
                failures.push(format!("semantic layer order {order:?}"));
            }
        }
        Err(e) => failures.push(format!("semantic layers: {e}")),
    }

    // Adaptive pixel threshold: strictly above the mask mean.
    let design = RgbImage::from_fn(4, 1, |x, _| Rgb([x as u8, 0, 0]));
    let picked: Vec<u32> = candidate_pixels(&design, &[0.2, 0.4, 0.6, 0.8])
        .unwrap_or_default()
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    let picked_flat: Vec<u32> = candidate_pixels(&design, &[0.5, 0.5, 0.5, 0.5])
        .unwrap_or_default()
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    if picked != vec![2, 3] || !picked_flat.is_empty() {
        failures.push(format!("mask-mean threshold picked {picked:?} and {picked_flat:?}"));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "b=6, k=10, n=4, Q=2N, threshold 0.55, pixel threshold = mask mean".to_string()
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------------------------
// 5. Selection oracle

/// Overlap rates straight from the definition, then a full sort: descending rate, ties by
/// semantic layer index, zero rates dropped.
fn brute_force_top(d: &Decomposition, m_f: &[f64], n_targets: usize) -> Vec<(usize, f64)> {
    let n = d.n();
    let pixels = m_f.len();
    let mut scored = Vec::new();
    for side in 0..2 {
        for i in 0..n {
            let mut num = 0.0;
            let mut mass = 0.0;
            for p in 0..pixels {
                let a = d.alpha[p * n + i];
                let m = if side == 0 { m_f[p] } else { 1.0 - m_f[p] };
                num += a * m * m_f[p];
                mass += a;
            }
            let o = if mass > EMPTY_LAYER_MASS * pixels as f64 { num / mass } else { 0.0 };
            scored.push((side * n + i, o));
        }
    }
    let mut all: Vec<(usize, f64)> = scored.into_iter().filter(|s| s.1 > 0.0).collect();
    for i in 0..all.len() {
        for j in 0..all.len() - 1 - i {
            let (a, b) = (all[j], all[j + 1]);
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                all.swap(j, j + 1);
            }
        }
    }
    all.truncate(n_targets);
    all
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut ties = 0;
    let mut first = None;
    for case in 0..1000 {
        let n = rng.random_range(2..=8usize);
        // Dyadic values keep every sum exact, so equal rates are exact ties.
        let mut alpha = vec![0.0; 64 * n];
        for p in 0..64 {
            let live = rng.random_range(1..=n);
            for _ in 0..8 {
                alpha[p * n + rng.random_range(0..live)] += 0.125;
            }
        }
        let m_f: Vec<f64> = (0..64).map(|_| rng.random_range(0..=4) as f64 / 4.0).collect();
        let d = Decomposition {
            palette: Palette {
                colors: (0..n).map(|i| [(i * 30) as f64, 100.0, 200.0]).collect(),
            },
            width: 8,
            height: 8,
            alpha,
            stats: DecompositionStats::default(),
        };
        let masks = SoftRegionMasks::from_foreground(8, 8, &m_f);
        let layers = build_semantic_layers(&d, &masks).map_err(|e| e.to_string())?;
        let scores = compute_overlap_rates(&layers, &masks);
        let got: Vec<(usize, f64)> = match select_target_layers(&scores, TARGET_LAYERS) {
            Ok(t) => t.iter().map(|s: &OverlapScore| (s.layer, s.o)).collect(),
            Err(_) => Vec::new(),
        };
        let want = brute_force_top(&d, &m_f, TARGET_LAYERS);
        let mut rates: Vec<u64> = scores.iter().map(|s| s.o.to_bits()).collect();
        rates.sort();
        rates.dedup();
        if rates.len() < scores.len() {
            ties += 1;
        }
        if got != want {
            mismatches += 1;
            first.get_or_insert(format!("case {case}: got {got:?} want {want:?}"));
        }
    }
    check(
        mismatches == 0,
        format!(
            "1000 instances, {mismatches} mismatches, {ties} with tied rates{}",
            first.map(|f| format!("; {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 6. Recolor identity and locality

/// Centered ellipse covering about a third of the frame.
fn ellipse_mask(w: u32, h: u32) -> Mask {
    let mut m = Mask::new(w, h);
    let (cx, cy, rx, ry) = (w as f64 / 2.0, h as f64 / 2.0, w as f64 / 3.0, h as f64 / 3.0);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
            if dx * dx + dy * dy <= 1.0 {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// Identity follows the recolor contract: the dominant layer alone is recolored with its own
/// color. With all n targets the other targets take that color's chroma by definition, so
/// that deviation is reported but not bounded. Locality uses the full n-target selection and
/// an unrelated source color.
fn criterion_6() -> Outcome {
    let engine = Engine::new(EngineConfig::default());
    let cfg = GeneratorConfig::default();
    let other_source = Rgb8::new(20, 180, 60);
    let mut worst_identity = 0u8;
    let mut worst_identity_all_targets = 0u8;
    let mut worst_locality = 0u8;
    let mut local_pixels = 0usize;
    let mut regions = 0;
    let mut identity_fail = Vec::new();
    let mut cases: Vec<(String, RgbImage, Vec<PhotoObject>)> = Vec::new();
    for i in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + i);
        let (photo, objects) = generate_photo(192, 160, &cfg, &mut rng).map_err(|e| e.to_string())?;
        cases.push((format!("synthetic {i}"), photo, objects));
    }
    for (name, photo) in natural_photos().into_iter().filter(|(n, _)| n == "chelsea" || n == "coffee") {
        let object = PhotoObject {
            phrase: "subject".into(),
            color: recolor_core::color::ColorTerm::None,
            mask: ellipse_mask(photo.width(), photo.height()),
        };
        cases.push((name, photo, vec![object]));
    }
    for (i, photo, objects) in &cases {
        let analysis = engine.analysis(photo).map_err(|e| e.to_string())?;
        for obj in objects {
            let region = RegionDescriptor {
                phrase: obj.phrase.clone(),
                color_adj: obj.color,
            };
            let r = engine
                .region_masks(photo, &analysis, 0, &region, None, std::slice::from_ref(obj))
                .map_err(|e| e.to_string())?;
            let layers = build_semantic_layers(&analysis.decomposition, &r.soft).map_err(|e| e.to_string())?;
            let scores = compute_overlap_rates(&layers, &r.soft);
            let dominant = select_target_layers(&scores, 1).map_err(|e| e.to_string())?;
            let targets = select_target_layers(&scores, TARGET_LAYERS).map_err(|e| e.to_string())?;
            let c_t1 = Rgb8::from_f64(layers[dominant[0].layer].color);
            let same = recolor_with_source(photo, &layers, scores.clone(), &dominant, c_t1).map_err(|e| e.to_string())?;
            let same_all = recolor_with_source(photo, &layers, scores.clone(), &targets, c_t1).map_err(|e| e.to_string())?;
            let moved = recolor_with_source(photo, &layers, scores.clone(), &targets, other_source).map_err(|e| e.to_string())?;
            regions += 1;
            let w = photo.width();
            let mut region_max = 0u8;
            for (x, y, p) in photo.enumerate_pixels() {
                let diff = |img: &RgbImage| {
                    let q = img.get_pixel(x, y);
                    (0..3).map(|k| p[k].abs_diff(q[k])).max().unwrap()
                };
                let idx = (y * w + x) as usize;
                if r.initial.mask.get(x, y) || r.soft.m_f[idx] >= 0.5 {
                    region_max = region_max.max(diff(&same.image));
                    worst_identity_all_targets = worst_identity_all_targets.max(diff(&same_all.image));
                }
                let target_alpha: f64 = targets.iter().map(|t| layers[t.layer].alpha[idx]).sum();
                if target_alpha < 1e-3 {
                    local_pixels += 1;
                    worst_locality = worst_locality.max(diff(&moved.image));
                }
            }
            if region_max > 2 {
                identity_fail.push(format!("{i} {}: {region_max}", obj.phrase));
            }
            worst_identity = worst_identity.max(region_max);
        }
    }
    check(
        regions > 0 && local_pixels > 0 && worst_identity <= 2 && worst_locality <= 1,
        format!(
            "{regions} regions; dominant layer recolored with its own color moves region pixels by at most {worst_identity}; \
             recoloring to {} moves the {local_pixels} pixels with target alpha < 1e-3 by at most {worst_locality}; \
             with all {TARGET_LAYERS} targets the identity source moves region pixels by up to {worst_identity_all_targets}{}",
            other_source.hex(),
            if identity_fail.is_empty() { String::new() } else { format!("; over 2: {}", identity_fail.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 7. Parser round trip

fn criterion_7() -> Outcome {
    let lex = Lexicon::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = 0;
    let mut order_mismatches = 0;
    let mut first = None;
    let total = 10_000;
    for _ in 0..total {
        let ast = random_ast(lex, &mut rng);
        let verb = lex.verbs[rng.random_range(0..lex.verbs.len())].join(" ");
        let connector = lex.connectors[rng.random_range(0..lex.connectors.len())].clone();
        let verb_first = Template::VerbFirst {
            verb: verb.clone(),
            connector,
        };
        let use_first = Template::UseFirst { verb };
        let a = render_instruction(lex, &ast, &verb_first, &mut rng);
        let b = render_instruction(lex, &ast, &use_first, &mut rng);
        let pa = parse_with(lex, &a);
        let pb = parse_with(lex, &b);
        if pa.as_ref().ok() != Some(&ast) || pb.as_ref().ok() != Some(&ast) {
            failures += 1;
            first.get_or_insert(format!("{a:?} / {b:?}"));
        }
        if pa.ok() != pb.ok() {
            order_mismatches += 1;
        }
    }
    check(
        failures == 0 && order_mismatches == 0,
        format!(
            "{} of {total} round trips, {order_mismatches} template-order disagreements{}",
            total - failures,
            first.map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 8. Determinism

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("read dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).expect("read file"));
            }
        }
    }
    out
}

fn recolor_fingerprint(b: &DesignBundle, text: &str) -> Result<(Vec<u64>, Vec<Vec<u8>>), String> {
    let engine = Engine::new(EngineConfig::default());
    let a = engine.analysis(&b.photo).map_err(|e| e.to_string())?;
    let alpha_bits = a.decomposition.alpha.iter().map(|v| v.to_bits()).collect();
    let o = engine.recolor_instruction(b, text, None).map_err(|e| e.to_string())?;
    let mut pngs = Vec::new();
    for r in &o.results {
        pngs.push(encode_png_rgb(&r.design));
        pngs.push(r.recolor.image.as_raw().clone());
    }
    for r in &o.regions {
        pngs.push(r.soft.m_f.iter().flat_map(|v| v.to_le_bytes()).collect());
    }
    Ok((alpha_bits, pngs))
}

fn criterion_8() -> Outcome {
    let cfg = GeneratorConfig {
        seed: 88,
        count: 8,
        ..Default::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [(1, "a"), (4, "b"), (1, "c")];
    let mut trees = Vec::new();
    for (threads, name) in runs {
        let out = tmp.path().join(name);
        pool(threads).install(|| generate_dataset(&cfg, &out)).map_err(|e| e.to_string())?;
        trees.push(read_tree(&out));
    }
    let dataset_same = trees.windows(2).all(|w| w[0] == w[1]);

    let case = generate_cases(&GeneratorConfig { count: 1, ..cfg.clone() }).map_err(|e| e.to_string())?.remove(0);
    let obj = case.bundle.photo_objects.first().ok_or("no photo objects")?;
    let text = format!("recolor the {} with the title", obj.phrase);
    let mut prints = Vec::new();
    for threads in [1, 4, 1] {
        prints.push(pool(threads).install(|| recolor_fingerprint(&case.bundle, &text))?);
    }
    let decomp_same = prints.windows(2).all(|w| w[0].0 == w[1].0);
    let recolor_same = prints.windows(2).all(|w| w[0].1 == w[1].1);
    check(
        dataset_same && decomp_same && recolor_same,
        format!(
            "dataset of {} files {}, decomposition {}, recolor outputs {} across runs on 1 and 4 workers",
            trees[0].len(),
            if dataset_same { "identical" } else { "differs" },
            if decomp_same { "identical" } else { "differs" },
            if recolor_same { "identical" } else { "differ" },
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 9. Eval curve

fn criterion_9(clean: &EvalReport) -> Outcome {
    let low: Vec<_> = clean.curve.iter().filter(|p| p.threshold <= 0.9 + 1e-9).collect();
    let worst = low.iter().map(|p| p.accuracy).fold(f64::INFINITY, f64::min);
    let tsv = clean.curve_tsv();
    let printed: Vec<String> = clean.curve.iter().map(|p| format!("{:.2}:{:.4}", p.threshold, p.accuracy)).collect();
    check(
        !low.is_empty() && worst >= 0.99 && tsv.lines().count() > clean.curve.len(),
        format!(
            "best threshold {:.2} (accuracy {:.4}), min accuracy for t <= 0.9 is {worst:.4}; curve {}",
            clean.best_threshold,
            clean.best_accuracy,
            printed.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 10. Latency

fn latency_bundle() -> Result<DesignBundle, String> {
    let (_, chelsea) = natural_photos().into_iter().find(|(n, _)| n == "chelsea").ok_or("chelsea.png missing")?;
    let photo = imageops::resize(&chelsea, 512, 512, imageops::FilterType::CatmullRom);
    let (cw, ch) = (640u32, 700u32);
    let photo_rect = Rect::new(64, 120, 512, 512);
    let title_rect = Rect::new(64, 24, 512, 72);
    let title_color = Rgb8::new(30, 110, 200);
    let mut design = RgbImage::from_pixel(cw, ch, Rgb([245, 240, 230]));
    let mut bg = Mask::new(cw, ch);
    let mut title = Mask::new(cw, ch);
    for (x, y, px) in design.enumerate_pixels_mut() {
        if photo_rect.contains(x, y) {
            *px = *photo.get_pixel(x - photo_rect.x, y - photo_rect.y);
        } else if title_rect.contains(x, y) && (x / 6 + y / 9) % 3 != 0 {
            *px = title_color.into();
            title.set(x, y, true);
        } else {
            bg.set(x, y, true);
        }
    }
    let cat = ellipse_mask(512, 512);
    Ok(DesignBundle {
        design,
        photo,
        photo_rect,
        elements: vec![
            DesignElement {
                id: "background".into(),
                class: ElementClass::Background,
                color: Some(Rgb8::new(245, 240, 230)),
                mask: bg,
            },
            DesignElement {
                id: "title".into(),
                class: ElementClass::Title,
                color: Some(title_color),
                mask: title,
            },
        ],
        photo_objects: vec![PhotoObject {
            phrase: "cat".into(),
            color: recolor_core::color::ColorTerm::None,
            mask: cat,
        }],
    })
}

fn criterion_10() -> Outcome {
    let b = latency_bundle()?;
    let engine = Engine::new(EngineConfig::default());
    let text = "recolor the cat with the title";
    let request = || -> Result<Vec<Vec<u8>>, String> {
        let o = engine.recolor_instruction(&b, text, None).map_err(|e| e.to_string())?;
        Ok(o.results.iter().map(|r| encode_png_rgb(&r.design)).collect())
    };
    let warm = Instant::now();
    request()?;
    let warm = warm.elapsed();
    let mut times: Vec<Duration> = Vec::new();
    for _ in 0..5 {
        let t = Instant::now();
        request()?;
        times.push(t.elapsed());
    }
    times.sort();
    let median = times[times.len() / 2];
    check(
        median <= Duration::from_millis(300),
        format!(
            "512x512 photo: first request {:.0} ms including analysis, cached request median {:.0} ms over 5 (min {:.0}, max {:.0})",
            warm.as_secs_f64() * 1e3,
            median.as_secs_f64() * 1e3,
            times[0].as_secs_f64() * 1e3,
            times[4].as_secs_f64() * 1e3
        ),
    )
}

// ---------------------------------------------------------------------------------------------

fn run<T>(f: impl FnOnce() -> Result<T, String> + std::panic::UnwindSafe) -> Result<T, String> {
    match std::panic::catch_unwind(f) {
        Ok(o) => o,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

/// `ACCEPTANCE_ONLY=2,6` runs a subset; skipped criteria are listed as such.
fn selected() -> Vec<bool> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(v) if !v.trim().is_empty() => {
            let picked: Vec<usize> = v.split(',').filter_map(|s| s.trim().parse().ok()).collect();
            (1..=10).map(|i| picked.contains(&i)).collect()
        }
        _ => vec![true; 10],
    }
}

fn main() -> ExitCode {
    let names = [
        "decomposition fidelity",
        "palette recovery",
        "voting exactness",
        "algorithmic constants",
        "selection oracle",
        "recolor identity and locality",
        "parser round trip",
        "determinism",
        "eval curve and best threshold",
        "end-to-end latency",
    ];
    let on = selected();
    let clean = if on[2] || on[8] {
        run(|| evaluate_cases(&loaded(&clean_config()), &EvalConfig::default()).map_err(|e| e.to_string()))
    } else {
        Err("not needed".to_string())
    };
    let shared = |f: fn(&EvalReport) -> Outcome| match &clean {
        Ok(r) => run(std::panic::AssertUnwindSafe(|| f(r))),
        Err(e) => Err(format!("clean dataset evaluation failed: {e}")),
    };
    let plain: [fn() -> Outcome; 10] = [
        criterion_1,
        criterion_2,
        || Ok(String::new()),
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        || Ok(String::new()),
        criterion_10,
    ];
    let mut failed = 0;
    let mut skipped = 0;
    for (i, name) in names.iter().enumerate() {
        if !on[i] {
            skipped += 1;
            println!("criterion {:>2} SKIP  {name}", i + 1);
            continue;
        }
        let r = match i {
            2 => shared(criterion_3),
            8 => shared(criterion_9),
            _ => run(plain[i]),
        };
        match r {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed, {skipped} skipped", names.len() - failed - skipped);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
