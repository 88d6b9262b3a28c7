//! Sparse barycentric weights of every pixel over the vertices of the 5D (r, g, b, λx, λy)
//! convex hull, using a Delaunay tessellation of those vertices.

use std::collections::HashMap;

use image::RgbImage;
use nalgebra::{DMatrix, SMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::hull::{delaunay, hull_vertices};

/// Maximum simplex size in five dimensions.
pub const MAX_NNZ: usize = 6;
const NONE: u32 = u32::MAX;
const INSIDE_TOL: f64 = 1e-10;

/// Per-pixel weights over the hull vertices of the RGBXY point cloud.
#[derive(Clone, Debug)]
pub struct RgbxyWeights {
    pub width: u32,
    pub height: u32,
    pub spatial_scale: f64,
    /// Dimension actually tessellated (5 unless the cloud is rank-deficient).
    pub rank: usize,
    /// Original RGB colors of the hull vertices.
    pub vertex_colors: Vec<[f64; 3]>,
    /// Vertex indices per pixel; unused slots hold `u32::MAX` with weight 0.
    pub vertex_ids: Vec<[u32; MAX_NNZ]>,
    pub weights: Vec<[f64; MAX_NNZ]>,
    pub simplices: usize,
    /// Most negative barycentric coordinate seen before clamping.
    pub min_raw_weight: f64,
    /// Largest distance between a pixel's point and the point its clamped weights reproduce.
    pub max_snap_distance: f64,
    /// Pixels that needed the exhaustive search because the walk left the hull.
    pub exhaustive_lookups: usize,
}

impl RgbxyWeights {
    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn max_nonzeros(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.iter().filter(|v| **v != 0.0).count())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TessellationError {
    #[error("qhull failed: {0}")]
    Hull(String),
    #[error("tessellation has no valid simplices")]
    Empty,
}

struct Frame {
    mean: [f64; 5],
    axes: Vec<[f64; 5]>,
    identity: bool,
}

impl Frame {
    fn project(&self, p: &[f64; 5]) -> [f64; 5] {
        if self.identity {
            return *p;
        }
        let mut out = [0.0; 5];
        for (o, a) in out.iter_mut().zip(&self.axes) {
            *o = (0..5).map(|k| (p[k] - self.mean[k]) * a[k]).sum();
        }
        out
    }
}

fn principal_frame(points: &[[f64; 5]]) -> Frame {
    let n = points.len().max(1) as f64;
    let mut mean = [0.0; 5];
    for p in points {
        for k in 0..5 {
            mean[k] += p[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = SMatrix::<f64, 5, 5>::zeros();
    for p in points {
        for a in 0..5 {
            let da = p[a] - mean[a];
            for b in a..5 {
                cov[(a, b)] += da * (p[b] - mean[b]);
            }
        }
    }
    for a in 0..5 {
        for b in a..5 {
            cov[(a, b)] /= n;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| top > 1e-12 && eig.eigenvalues[i] > top * 1e-9 && eig.eigenvalues[i] > 1e-8)
        .count();
    if rank == 5 {
        return Frame {
            mean,
            axes: Vec::new(),
            identity: true,
        };
    }
    let axes = order[..rank]
        .iter()
        .map(|&i| {
            let col = eig.eigenvectors.column(i);
            let mut v = [col[0], col[1], col[2], col[3], col[4]];
            let big = (0..5)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
                .unwrap();
            if v[big] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Frame {
        mean,
        axes,
        identity: false,
    }
}

/// A tessellation in `k` dimensions with precomputed inverse edge matrices.
struct Mesh {
    k: usize,
    verts: Vec<[f64; 5]>,
    simplices: Vec<[u32; MAX_NNZ]>,
    origin: Vec<[f64; 5]>,
    inverse: Vec<[f64; 25]>,
    neighbors: Vec<[u32; MAX_NNZ]>,
    vertex_simplex: Vec<u32>,
}

impl Mesh {
    fn build(k: usize, verts: Vec<[f64; 5]>, raw: Vec<Vec<usize>>) -> Result<Self, TessellationError> {
        let scale = verts
            .iter()
            .flat_map(|v| v[..k].iter().map(|x| x.abs()))
            .fold(1.0f64, f64::max);
        let mut simplices = Vec::new();
        let mut origin = Vec::new();
        let mut inverse = Vec::new();
        for s in raw {
            let v0 = verts[s[0]];
            let mut m = DMatrix::<f64>::zeros(k, k);
            for j in 0..k {
                let vj = verts[s[j + 1]];
                for r in 0..k {
                    m[(r, j)] = (vj[r] - v0[r]) / scale;
                }
            }
            if m.determinant().abs() < 1e-12 {
                continue;
            }
            let Some(inv) = m.try_inverse() else { continue };
            let mut flat = [0.0; 25];
            for r in 0..k {
                for c in 0..k {
                    flat[r * k + c] = inv[(r, c)] / scale;
                }
            }
            let mut ids = [NONE; MAX_NNZ];
            for (slot, &v) in ids.iter_mut().zip(&s) {
                *slot = v as u32;
            }
            simplices.push(ids);
            origin.push(v0);
            inverse.push(flat);
        }
        if simplices.is_empty() {
            return Err(TessellationError::Empty);
        }
        let mut neighbors = vec![[NONE; MAX_NNZ]; simplices.len()];
        let mut facets: HashMap<Vec<u32>, (u32, usize)> = HashMap::new();
        for (si, s) in simplices.iter().enumerate() {
            for j in 0..=k {
                let key: Vec<u32> = (0..=k).filter(|&i| i != j).map(|i| s[i]).collect();
                if let Some((other, oj)) = facets.remove(&key) {
                    neighbors[si][j] = other;
                    neighbors[other as usize][oj] = si as u32;
                } else {
                    facets.insert(key, (si as u32, j));
                }
            }
        }
        let mut vertex_simplex = vec![NONE; verts.len()];
        for (si, s) in simplices.iter().enumerate() {
            for &v in &s[..=k] {
                if vertex_simplex[v as usize] == NONE {
                    vertex_simplex[v as usize] = si as u32;
                }
            }
        }
        Ok(Mesh {
            k,
            verts,
            simplices,
            origin,
            inverse,
            neighbors,
            vertex_simplex,
        })
    }

    fn bary(&self, s: usize, p: &[f64; 5]) -> [f64; MAX_NNZ] {
        let k = self.k;
        let o = &self.origin[s];
        let inv = &self.inverse[s];
        let mut d = [0.0; 5];
        for r in 0..k {
            d[r] = p[r] - o[r];
        }
        let mut b = [0.0; MAX_NNZ];
        let mut sum = 0.0;
        for r in 0..k {
            let mut acc = 0.0;
            for c in 0..k {
                acc += inv[r * k + c] * d[c];
            }
            b[r + 1] = acc;
            sum += acc;
        }
        b[0] = 1.0 - sum;
        b
    }

    fn min_coord(&self, b: &[f64; MAX_NNZ]) -> (usize, f64) {
        let mut j = 0;
        for i in 1..=self.k {
            if b[i] < b[j] {
                j = i;
            }
        }
        (j, b[j])
    }

    fn start_for(&self, p: &[f64; 5]) -> usize {
        let k = self.k;
        let mut best = (f64::INFINITY, 0usize);
        for (i, v) in self.verts.iter().enumerate() {
            if self.vertex_simplex[i] == NONE {
                continue;
            }
            let d: f64 = (0..k).map(|r| (v[r] - p[r]).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        self.vertex_simplex[best.1] as usize
    }

    /// Visibility walk from `start`. Returns the simplex, its barycentric coordinates,
    /// and whether an exhaustive search was needed.
    fn locate(&self, start: usize, p: &[f64; 5]) -> (usize, [f64; MAX_NNZ], bool) {
        let max_steps = 64 + 4 * (self.simplices.len() as f64).sqrt() as usize;
        let mut s = start;
        for _ in 0..max_steps {
            let b = self.bary(s, p);
            let (j, m) = self.min_coord(&b);
            if m >= -INSIDE_TOL {
                return (s, b, false);
            }
            let next = self.neighbors[s][j];
            if next == NONE {
                if m >= -1e-6 {
                    return (s, b, false);
                }
                break;
            }
            s = next as usize;
        }
        let mut best = (f64::NEG_INFINITY, 0usize, [0.0; MAX_NNZ]);
        for si in 0..self.simplices.len() {
            let b = self.bary(si, p);
            let (_, m) = self.min_coord(&b);
            if m > best.0 {
                best = (m, si, b);
            }
        }
        (best.1, best.2, true)
    }
}

struct RowResult {
    ids: Vec<[u32; MAX_NNZ]>,
    weights: Vec<[f64; MAX_NNZ]>,
    min_raw: f64,
    max_snap: f64,
    exhaustive: usize,
}

/// Pixels that may be vertices of the RGBXY hull. A pixel whose color is the mean of two
/// opposite neighbors, or of all four neighbors along both axes or both diagonals, is that
/// same convex combination of them in RGBXY, so it is never a vertex. The test is exact on
/// 8-bit colors.
fn hull_candidates(photo: &RgbImage) -> Vec<usize> {
    let (w, h) = photo.dimensions();
    let px = |x: u32, y: u32| photo.get_pixel(x, y).0.map(i32::from);
    let mid = |c: [i32; 3], a: [i32; 3], b: [i32; 3]| (0..3).all(|k| 2 * c[k] == a[k] + b[k]);
    let quad = |c: [i32; 3], n: [[i32; 3]; 4]| (0..3).all(|k| 4 * c[k] == n.iter().map(|v| v[k]).sum::<i32>());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x > 0 && y > 0 && x + 1 < w && y + 1 < h {
                let c = px(x, y);
                let (l, r, u, d) = (px(x - 1, y), px(x + 1, y), px(x, y - 1), px(x, y + 1));
                let (ul, dr, ur, dl) = (px(x - 1, y - 1), px(x + 1, y + 1), px(x + 1, y - 1), px(x - 1, y + 1));
                if mid(c, l, r)
                    || mid(c, u, d)
                    || mid(c, ul, dr)
                    || mid(c, ur, dl)
                    || quad(c, [l, r, u, d])
                    || quad(c, [ul, dr, ur, dl])
                {
                    continue;
                }
            }
            out.push((y * w + x) as usize);
        }
    }
    out
}

/// Tessellates the RGBXY cloud of `photo` and assigns every pixel its enclosing simplex weights.
pub fn rgbxy_weights(photo: &RgbImage, spatial_scale: f64) -> Result<RgbxyWeights, TessellationError> {
    let (w, h) = photo.dimensions();
    let points: Vec<[f64; 5]> = photo
        .enumerate_pixels()
        .map(|(x, y, p)| {
            [
                p[0] as f64,
                p[1] as f64,
                p[2] as f64,
                spatial_scale * x as f64,
                spatial_scale * y as f64,
            ]
        })
        .collect();
    let frame = principal_frame(&points);
    let k = if frame.identity { 5 } else { frame.axes.len() };
    let projected: Vec<[f64; 5]> = points.iter().map(|p| frame.project(p)).collect();
    let color_of = |i: usize| [points[i][0], points[i][1], points[i][2]];

    if k <= 1 {
        return Ok(line_weights(photo, spatial_scale, k, &projected, &points));
    }

    let cand = hull_candidates(photo);
    let coords: Vec<f64> = cand.iter().flat_map(|&i| projected[i][..k].iter().copied()).collect();
    let hv: Vec<usize> = hull_vertices(k, coords)
        .map_err(|e| TessellationError::Hull(e.0))?
        .into_iter()
        .map(|j| cand[j])
        .collect();
    let verts: Vec<[f64; 5]> = hv.iter().map(|&i| projected[i]).collect();
    let vcoords: Vec<f64> = verts.iter().flat_map(|p| p[..k].iter().copied()).collect();
    let raw = delaunay(k, &vcoords).map_err(|e| TessellationError::Hull(e.0))?;
    let mesh = Mesh::build(k, verts, raw)?;

    let rows: Vec<RowResult> = (0..h)
        .into_par_iter()
        .map(|y| {
            let base = (y * w) as usize;
            let mut s = mesh.start_for(&projected[base]);
            let mut out = RowResult {
                ids: Vec::with_capacity(w as usize),
                weights: Vec::with_capacity(w as usize),
                min_raw: 0.0,
                max_snap: 0.0,
                exhaustive: 0,
            };
            for x in 0..w as usize {
                let p = &projected[base + x];
                let (si, b, brute) = mesh.locate(s, p);
                s = si;
                out.exhaustive += brute as usize;
                let (_, m) = mesh.min_coord(&b);
                out.min_raw = out.min_raw.min(m);
                let mut wts = [0.0; MAX_NNZ];
                let mut total = 0.0;
                for i in 0..=k {
                    wts[i] = b[i].max(0.0);
                    total += wts[i];
                }
                for v in wts.iter_mut().take(k + 1) {
                    *v /= total;
                }
                let mut rec = [0.0; 5];
                for i in 0..=k {
                    let v = &mesh.verts[mesh.simplices[si][i] as usize];
                    for r in 0..k {
                        rec[r] += wts[i] * v[r];
                    }
                }
                let snap = (0..k).map(|r| (rec[r] - p[r]).powi(2)).sum::<f64>().sqrt();
                out.max_snap = out.max_snap.max(snap);
                out.ids.push(mesh.simplices[si]);
                out.weights.push(wts);
            }
            out
        })
        .collect();

    let mut result = RgbxyWeights {
        width: w,
        height: h,
        spatial_scale,
        rank: k,
        vertex_colors: hv.iter().map(|&i| color_of(i)).collect(),
        vertex_ids: Vec::with_capacity(points.len()),
        weights: Vec::with_capacity(points.len()),
        simplices: mesh.simplices.len(),
        min_raw_weight: 0.0,
        max_snap_distance: 0.0,
        exhaustive_lookups: 0,
    };
    for r in rows {
        result.vertex_ids.extend(r.ids);
        result.weights.extend(r.weights);
        result.min_raw_weight = result.min_raw_weight.min(r.min_raw);
        result.max_snap_distance = result.max_snap_distance.max(r.max_snap);
        result.exhaustive_lookups += r.exhaustive;
    }
    Ok(result)
}

/// Rank 0 or 1 clouds: every point lies on the segment between the two extreme points.
fn line_weights(
    photo: &RgbImage,
    spatial_scale: f64,
    k: usize,
    projected: &[[f64; 5]],
    points: &[[f64; 5]],
) -> RgbxyWeights {
    let n = points.len();
    let t: Vec<f64> = if k == 0 { vec![0.0; n] } else { projected.iter().map(|p| p[0]).collect() };
    let lo = (0..n).min_by(|&a, &b| t[a].total_cmp(&t[b]).then(a.cmp(&b))).unwrap_or(0);
    let hi = (0..n).max_by(|&a, &b| t[a].total_cmp(&t[b]).then(b.cmp(&a))).unwrap_or(0);
    let span = t[hi] - t[lo];
    let mut ids = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for &ti in &t {
        let mut id = [NONE; MAX_NNZ];
        let mut wt = [0.0; MAX_NNZ];
        id[0] = 0;
        if span > 0.0 {
            id[1] = 1;
            let u = ((ti - t[lo]) / span).clamp(0.0, 1.0);
            wt[0] = 1.0 - u;
            wt[1] = u;
        } else {
            wt[0] = 1.0;
        }
        ids.push(id);
        weights.push(wt);
    }
    let color = |i: usize| [points[i][0], points[i][1], points[i][2]];
    let vertex_colors = if span > 0.0 { vec![color(lo), color(hi)] } else { vec![color(lo)] };
    let (w, h) = photo.dimensions();
    RgbxyWeights {
        width: w,
        height: h,
        spatial_scale,
        rank: k,
        vertex_colors,
        vertex_ids: ids,
        weights,
        simplices: 1,
        min_raw_weight: 0.0,
        max_snap_distance: 0.0,
        exhaustive_lookups: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn reconstruct(w: &RgbxyWeights, i: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (id, wt) in w.vertex_ids[i].iter().zip(&w.weights[i]) {
            if *id == NONE {
                continue;
            }
            for k in 0..3 {
                c[k] += wt * w.vertex_colors[*id as usize][k];
            }
        }
        c
    }

    fn textured(wd: u32, ht: u32) -> RgbImage {
        RgbImage::from_fn(wd, ht, |x, y| {
            let r = (3 * x * x + 7 * y * y) % 256;
            let g = (x * x + 5 * y) % 256;
            let b = (x * y + 11) % 256;
            Rgb([r as u8, g as u8, b as u8])
        })
    }

    #[test]
    fn textured_image_reconstructs_exactly() {
        let img = textured(24, 20);
        let w = rgbxy_weights(&img, 255.0 / 24.0).unwrap();
        assert_eq!(w.rank, 5);
        assert!(w.max_nonzeros() <= MAX_NNZ);
        for (i, p) in img.pixels().enumerate() {
            let c = reconstruct(&w, i);
            for k in 0..3 {
                assert!((c[k] - p[k] as f64).abs() < 1e-6, "pixel {i} channel {k}: {} vs {}", c[k], p[k]);
            }
            let s: f64 = w.weights[i].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(w.min_raw_weight > -1e-6);
    }

    #[test]
    fn prefilter_drops_only_non_vertices() {
        // Flat blocks and an exact linear ramp, with a few textured pixels.
        let img = RgbImage::from_fn(14, 12, |x, y| match (x / 5, y / 4) {
            (0, _) => Rgb([200, 40, 40]),
            (1, 0) => Rgb([(10 * x) as u8, (20 * y) as u8, 90]),
            _ if (x * 7 + y * 3) % 11 == 0 => Rgb([(x * x * 9 % 256) as u8, (y * 31 % 256) as u8, 200]),
            _ => Rgb([30, 160, 90]),
        });
        let points: Vec<f64> = img
            .enumerate_pixels()
            .flat_map(|(x, y, p)| [p[0] as f64, p[1] as f64, p[2] as f64, 18.0 * x as f64, 18.0 * y as f64])
            .collect();
        let all = hull_vertices(5, points.clone()).unwrap();
        let cand = hull_candidates(&img);
        assert!(cand.len() < points.len() / 5);
        let coords: Vec<f64> = cand.iter().flat_map(|&i| points[5 * i..5 * i + 5].iter().copied()).collect();
        let mut filtered: Vec<usize> = hull_vertices(5, coords).unwrap().into_iter().map(|j| cand[j]).collect();
        filtered.sort_unstable();
        assert_eq!(filtered, all);
    }

    #[test]
    fn two_halves_are_one_hot_per_color() {
        let img = RgbImage::from_fn(16, 8, |x, _| if x < 8 { Rgb([200, 30, 30]) } else { Rgb([20, 40, 220]) });
        let w = rgbxy_weights(&img, 255.0 / 16.0).unwrap();
        assert_eq!(w.rank, 3);
        for (i, p) in img.pixels().enumerate() {
            for (id, wt) in w.vertex_ids[i].iter().zip(&w.weights[i]) {
                if *id != NONE && *wt > 1e-9 {
                    let vc = w.vertex_colors[*id as usize];
                    assert_eq!(vc, [p[0] as f64, p[1] as f64, p[2] as f64]);
                }
            }
        }
    }

    #[test]
    fn flat_image_is_rank_two() {
        let img = RgbImage::from_pixel(9, 7, Rgb([10, 20, 30]));
        let w = rgbxy_weights(&img, 1.0).unwrap();
        assert_eq!(w.rank, 2);
        for i in 0..w.pixel_count() {
            let c = reconstruct(&w, i);
            assert!((c[0] - 10.0).abs() < 1e-9 && (c[2] - 30.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_row_gradient_is_rank_one() {
        let img = RgbImage::from_fn(10, 1, |x, _| Rgb([(x * 20) as u8, 0, 0]));
        let w = rgbxy_weights(&img, 25.5).unwrap();
        assert_eq!(w.rank, 1);
        for i in 0..10 {
            assert!((reconstruct(&w, i)[0] - i as f64 * 20.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_pixel() {
        let img = RgbImage::from_pixel(1, 1, Rgb([1, 2, 3]));
        let w = rgbxy_weights(&img, 1.0).unwrap();
        assert_eq!(reconstruct(&w, 0), [1.0, 2.0, 3.0]);
    }
}
