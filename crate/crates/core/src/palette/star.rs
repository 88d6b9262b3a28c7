//! Generalized barycentric weights of a color over a palette, via a star triangulation of
//! the palette hull from its darkest vertex.

use super::hull::{cross3, dot3, hull2, hull3, norm3, principal_axes3, sub3, color_rank};
use crate::color::luma;

/// Piecewise-linear simplicial cover of a palette's convex hull.
#[derive(Clone, Debug)]
pub struct PaletteStar {
    colors: Vec<[f64; 3]>,
    kind: StarKind,
}

#[derive(Clone, Debug)]
enum StarKind {
    /// All colors identical.
    Point,
    /// Collinear palette: vertices sorted along `axis` with their projected parameters.
    Segment {
        origin: [f64; 3],
        axis: [f64; 3],
        order: Vec<(f64, usize)>,
    },
    /// Coplanar palette: fan triangles in plane coordinates, plus the hull polygon.
    Planar {
        origin: [f64; 3],
        axes: [[f64; 3]; 2],
        coords: Vec<[f64; 2]>,
        polygon: Vec<usize>,
        tris: Vec<[usize; 3]>,
    },
    /// Full-rank palette: tetrahedra sharing the darkest hull vertex, plus hull faces.
    Solid {
        tets: Vec<[usize; 4]>,
        faces: Vec<[usize; 3]>,
    },
}

/// Palette weights of one color: one weight per palette entry, and the snap distance
/// from the color to the point those weights reproduce.
#[derive(Clone, Debug)]
pub struct StarWeights {
    pub weights: Vec<f64>,
    pub snap: f64,
    pub min_raw: f64,
}

fn darkest(colors: &[[f64; 3]], candidates: &[usize]) -> usize {
    *candidates
        .iter()
        .min_by(|&&a, &&b| luma(colors[a]).total_cmp(&luma(colors[b])).then(a.cmp(&b)))
        .expect("non-empty candidate set")
}

fn tet_bary(p: [[f64; 3]; 4], x: [f64; 3]) -> Option<[f64; 4]> {
    let e1 = sub3(p[1], p[0]);
    let e2 = sub3(p[2], p[0]);
    let e3 = sub3(p[3], p[0]);
    let det = dot3(e1, cross3(e2, e3));
    if det.abs() < 1e-12 {
        return None;
    }
    let d = sub3(x, p[0]);
    let b1 = dot3(d, cross3(e2, e3)) / det;
    let b2 = dot3(e1, cross3(d, e3)) / det;
    let b3 = dot3(e1, cross3(e2, d)) / det;
    Some([1.0 - b1 - b2 - b3, b1, b2, b3])
}

fn tri_bary(p: [[f64; 2]; 3], x: [f64; 2]) -> Option<[f64; 3]> {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    if det.abs() < 1e-12 {
        return None;
    }
    let b1 = ((x[0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (x[1] - p[0][1])) / det;
    let b2 = ((p[1][0] - p[0][0]) * (x[1] - p[0][1]) - (x[0] - p[0][0]) * (p[1][1] - p[0][1])) / det;
    Some([1.0 - b1 - b2, b1, b2])
}

/// Closest point to `x` on triangle `abc`.
pub fn closest_on_triangle(x: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(x, a);
    let d1 = dot3(ab, ap);
    let d2 = dot3(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub3(x, b);
    let d3 = dot3(ab, bp);
    let d4 = dot3(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]];
    }
    let cp = sub3(x, c);
    let d5 = dot3(ab, cp);
    let d6 = dot3(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2])];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

fn closest_on_segment2(x: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    if len2 == 0.0 {
        return a;
    }
    let t = (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
    [a[0] + t * d[0], a[1] + t * d[1]]
}

fn min_of(b: &[f64]) -> f64 {
    b.iter().copied().fold(f64::INFINITY, f64::min)
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm3(sub3(a, b))
}

/// Clamps negatives, renormalizes, and scatters local weights into a palette-sized vector.
fn scatter(n: usize, idx: &[usize], local: &[f64]) -> (Vec<f64>, f64) {
    let min_raw = min_of(local);
    let mut w = vec![0.0; n];
    let clamped: Vec<f64> = local.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = clamped.iter().sum();
    for (i, v) in idx.iter().zip(&clamped) {
        w[*i] += if s > 0.0 { v / s } else { 1.0 / idx.len() as f64 };
    }
    (w, min_raw)
}

impl PaletteStar {
    pub fn new(colors: &[[f64; 3]]) -> Self {
        let colors = colors.to_vec();
        let (mean, vals, axes) = principal_axes3(&colors);
        let rank = color_rank(vals);
        let kind = match rank {
            0 => StarKind::Point,
            1 => segment_kind(&colors, mean, axes[0]),
            2 => planar_kind(&colors, mean, [axes[0], axes[1]]),
            _ => match solid_kind(&colors) {
                Some(k) => k,
                None => planar_kind(&colors, mean, [axes[0], axes[1]]),
            },
        };
        PaletteStar { colors, kind }
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Weights of `x` over the palette; points outside the hull are projected onto it.
    pub fn weights(&self, x: [f64; 3]) -> StarWeights {
        let n = self.colors.len();
        let (weights, min_raw) = match &self.kind {
            StarKind::Point => (vec![1.0 / n as f64; n], 0.0),
            StarKind::Segment { origin, axis, order } => {
                let t = dot3(sub3(x, *origin), *axis);
                let first = order[0];
                let last = order[order.len() - 1];
                let tc = t.clamp(first.0, last.0);
                let k = order.windows(2).position(|w| tc <= w[1].0).unwrap_or(order.len() - 2);
                let (t0, i0) = order[k];
                let (t1, i1) = order[k + 1];
                let u = if t1 > t0 { (tc - t0) / (t1 - t0) } else { 0.0 };
                scatter(n, &[i0, i1], &[1.0 - u, u])
            }
            StarKind::Planar {
                origin,
                axes,
                coords,
                polygon,
                tris,
            } => {
                let d = sub3(x, *origin);
                let q = [dot3(d, axes[0]), dot3(d, axes[1])];
                let locate = |q: [f64; 2]| {
                    let mut best: Option<([f64; 3], [usize; 3])> = None;
                    for t in tris {
                        if let Some(b) = tri_bary(t.map(|i| coords[i]), q) {
                            if best.is_none_or(|(bb, _)| min_of(&b) > min_of(&bb)) {
                                best = Some((b, *t));
                            }
                        }
                    }
                    best
                };
                let mut hit = locate(q);
                if hit.is_none_or(|(b, _)| min_of(&b) < -1e-9) && polygon.len() >= 2 {
                    let m = polygon.len();
                    let mut proj = coords[polygon[0]];
                    let mut bd = f64::INFINITY;
                    for i in 0..m {
                        let c = closest_on_segment2(q, coords[polygon[i]], coords[polygon[(i + 1) % m]]);
                        let dd = (c[0] - q[0]).powi(2) + (c[1] - q[1]).powi(2);
                        if dd < bd {
                            bd = dd;
                            proj = c;
                        }
                    }
                    hit = locate(proj);
                }
                match hit {
                    Some((b, t)) => scatter(n, &t, &b),
                    None => scatter(n, &[0], &[1.0]),
                }
            }
            StarKind::Solid { tets, faces } => {
                let locate = |x: [f64; 3]| {
                    let mut best: Option<([f64; 4], [usize; 4])> = None;
                    for t in tets {
                        if let Some(b) = tet_bary(t.map(|i| self.colors[i]), x) {
                            if best.is_none_or(|(bb, _)| min_of(&b) > min_of(&bb)) {
                                best = Some((b, *t));
                            }
                        }
                    }
                    best
                };
                let mut hit = locate(x);
                if hit.is_none_or(|(b, _)| min_of(&b) < -1e-9) {
                    let mut proj = x;
                    let mut bd = f64::INFINITY;
                    for f in faces {
                        let [a, b, c] = f.map(|i| self.colors[i]);
                        let p = closest_on_triangle(x, a, b, c);
                        let d = dist3(p, x);
                        if d < bd {
                            bd = d;
                            proj = p;
                        }
                    }
                    hit = locate(proj);
                }
                match hit {
                    Some((b, t)) => scatter(n, &t, &b),
                    None => scatter(n, &[0], &[1.0]),
                }
            }
        };
        let mut rec = [0.0; 3];
        for (w, c) in weights.iter().zip(&self.colors) {
            for k in 0..3 {
                rec[k] += w * c[k];
            }
        }
        StarWeights {
            snap: dist3(rec, x),
            weights,
            min_raw,
        }
    }
}

fn segment_kind(colors: &[[f64; 3]], origin: [f64; 3], axis: [f64; 3]) -> StarKind {
    let mut order: Vec<(f64, usize)> = colors
        .iter()
        .enumerate()
        .map(|(i, c)| (dot3(sub3(*c, origin), axis), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    StarKind::Segment { origin, axis, order }
}

fn planar_kind(colors: &[[f64; 3]], origin: [f64; 3], axes: [[f64; 3]; 2]) -> StarKind {
    let coords: Vec<[f64; 2]> = colors
        .iter()
        .map(|c| {
            let d = sub3(*c, origin);
            [dot3(d, axes[0]), dot3(d, axes[1])]
        })
        .collect();
    let ring = hull2(&coords);
    let polygon: Vec<usize> = ring
        .iter()
        .map(|p| coords.iter().position(|c| c == p).expect("hull point is an input point"))
        .collect();
    let mut tris = Vec::new();
    if polygon.len() >= 3 {
        let start = darkest(colors, &polygon);
        let s = polygon.iter().position(|&i| i == start).unwrap();
        let m = polygon.len();
        for k in 1..m - 1 {
            tris.push([start, polygon[(s + k) % m], polygon[(s + k + 1) % m]]);
        }
    }
    StarKind::Planar {
        origin,
        axes,
        coords,
        polygon,
        tris,
    }
}

fn solid_kind(colors: &[[f64; 3]]) -> Option<StarKind> {
    let hull = hull3(colors).ok()?;
    let apex = darkest(colors, &hull.vertices);
    let faces: Vec<[usize; 3]> = hull.faces.iter().map(|f| f.v).collect();
    let tets: Vec<[usize; 4]> = faces
        .iter()
        .filter(|f| !f.contains(&apex))
        .map(|f| [apex, f[0], f[1], f[2]])
        .collect();
    Some(StarKind::Solid { tets, faces })
}
