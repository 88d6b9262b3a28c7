//! Convex hulls via qhull and the enclosing edge-collapse simplification.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use qhull::Qh;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Triangle of a 3D hull; `normal` is unit and outward, and `normal . x + offset > 0` is outside.
#[derive(Clone, Debug)]
pub struct Face {
    pub v: [usize; 3],
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Face {
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        dot3(self.normal, p) + self.offset
    }
}

#[derive(Clone, Debug)]
pub struct Hull3 {
    /// Indices of the input points that are hull vertices, ascending.
    pub vertices: Vec<usize>,
    pub faces: Vec<Face>,
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

#[derive(Debug, thiserror::Error)]
#[error("qhull failed: {0}")]
pub struct HullError(pub String);

/// Triangulated 3D convex hull. Fails on flat or tiny inputs.
pub fn hull3(points: &[[f64; 3]]) -> Result<Hull3, HullError> {
    if points.len() < 4 {
        return Err(HullError("fewer than 4 points".into()));
    }
    let coords: Vec<f64> = points.iter().flatten().copied().collect();
    let qh = Qh::builder()
        .triangulate(true)
        .build_managed(3, coords)
        .map_err(|e| HullError(format!("{e:?}")))?;
    let mut faces = Vec::new();
    let mut verts = BTreeSet::new();
    for f in qh.facets() {
        let Some(vs) = f.vertices() else { continue };
        let idx: Vec<usize> = vs.iter().filter_map(|v| v.index(&qh)).collect();
        let (Some(n), true) = (f.normal(), idx.len() == 3) else {
            continue;
        };
        verts.extend(idx.iter().copied());
        faces.push(Face {
            v: [idx[0], idx[1], idx[2]],
            normal: [n[0], n[1], n[2]],
            offset: f.offset(),
        });
    }
    if faces.len() < 4 {
        return Err(HullError("degenerate hull".into()));
    }
    Ok(Hull3 {
        vertices: verts.into_iter().collect(),
        faces,
    })
}

/// Input point index of a vertex. Joggled runs work on a copy of the input, so the index
/// comes from qhull's point id rather than from pointer arithmetic on our buffer.
fn input_index(qh: &Qh, v: &qhull::Vertex, total: usize) -> Option<usize> {
    let id = v.point_id(qh).ok()?;
    usize::try_from(id).ok().filter(|&i| i < total)
}

/// qhull options per attempt: centrum premerging first, which is far faster above four
/// dimensions, then qhull's default exact merging when that reports a precision error.
const MERGE_MODES: [&[&str]; 2] = [&["C-0"], &[]];

/// Vertex indices of the convex hull of `dim`-dimensional points stored row-wise.
pub fn hull_vertices(dim: usize, coords: Vec<f64>) -> Result<Vec<usize>, HullError> {
    let mut last = None;
    for mode in MERGE_MODES {
        match hull_vertices_with(dim, coords.clone(), mode) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one merge mode"))
}

fn hull_vertices_with(dim: usize, coords: Vec<f64>, args: &[&str]) -> Result<Vec<usize>, HullError> {
    let coords_len = coords.len();
    let qh = Qh::builder()
        .qhull_args(args)
        .map_err(|e| HullError(format!("{e:?}")))?
        .build_managed(dim, coords)
        .map_err(|e| HullError(format!("{e:?}")))?;
    let total = coords_len / dim;
    let mut out: Vec<usize> = qh.vertices().filter_map(|v| input_index(&qh, &v, total)).collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Relative jitter for each Delaunay attempt within a merge mode. Smoothly shaded photos give
/// nearly degenerate vertex sets that can make qhull's facet merging fail; a tiny seeded
/// perturbation of the sites resolves that while leaving every simplex valid for the
/// unperturbed points up to roughly the jitter size. The hull itself is never jittered: that
/// turns near-coplanar points into extra vertices and slows the tessellation down. The last
/// Delaunay attempt lets qhull keep wide merged facets instead.
const JITTER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Lower-hull simplices of a Delaunay triangulation of `dim`-dimensional points.
///
/// Points are lifted onto an isotropic paraboloid centered at their mean, so the result
/// is a true Delaunay triangulation of the input (up to qhull's merging tolerance).
pub fn delaunay(dim: usize, points: &[f64]) -> Result<Vec<Vec<usize>>, HullError> {
    let mut last = None;
    for mode in MERGE_MODES {
        for (attempt, &jitter) in JITTER.iter().enumerate() {
            match delaunay_attempt(dim, points, jitter, attempt as u64, mode, false) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
    }
    delaunay_attempt(dim, points, 0.0, 0, &[], true).map_err(|e| last.unwrap_or(e))
}

fn delaunay_attempt(
    dim: usize,
    points: &[f64],
    jitter: f64,
    seed: u64,
    args: &[&str],
    wide: bool,
) -> Result<Vec<Vec<usize>>, HullError> {
    let n = points.len() / dim;
    let mut center = vec![0.0; dim];
    for p in points.chunks(dim) {
        for (c, v) in center.iter_mut().zip(p) {
            *c += v / n as f64;
        }
    }
    let scale = points
        .chunks(dim)
        .map(|p| p.iter().zip(&center).map(|(v, c)| (v - c).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lifted = Vec::with_capacity((n + 1) * (dim + 1));
    let mut top = 0.0f64;
    for p in points.chunks(dim) {
        let mut r2 = 0.0;
        for (v, c) in p.iter().zip(&center) {
            let mut d = (v - c) / scale;
            if jitter > 0.0 {
                d += jitter * rng.random_range(-1.0..1.0);
            }
            lifted.push(d);
            r2 += d * d;
        }
        lifted.push(r2);
        top = top.max(r2);
    }
    // A point above the centroid makes cocircular inputs well posed; its facets are dropped.
    lifted.extend(std::iter::repeat_n(0.0, dim));
    lifted.push(2.0 * top + 1.0);
    let qh = Qh::builder()
        .qhull_args(args)
        .map_err(|e| HullError(format!("{e:?}")))?
        .allow_wide(wide)
        .delaunay(true)
        .triangulate(true)
        .at_infinity(true)
        .build_managed(dim + 1, lifted)
        .map_err(|e| HullError(format!("{e:?}")))?;
    let mut out = Vec::new();
    for f in qh.facets() {
        if f.upper_delaunay() {
            continue;
        }
        let Some(vs) = f.vertices() else { continue };
        let mut idx: Vec<usize> = vs.iter().filter_map(|v| input_index(&qh, &v, n + 1)).collect();
        if idx.len() != dim + 1 || idx.contains(&n) {
            continue;
        }
        idx.sort_unstable();
        out.push(idx);
    }
    out.sort();
    Ok(out)
}

/// Mean and principal axes of a point cloud, eigenvalues descending.
/// Eigenvector signs are fixed so the largest-magnitude component is positive.
pub fn principal_axes3(points: &[[f64; 3]]) -> ([f64; 3], [f64; 3], [[f64; 3]; 3]) {
    let n = points.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose() / n;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let mut vals = [0.0; 3];
    let mut vecs = [[0.0; 3]; 3];
    for (slot, &i) in order.iter().enumerate() {
        vals[slot] = eig.eigenvalues[i].max(0.0);
        let col = eig.eigenvectors.column(i);
        let mut v = [col[0], col[1], col[2]];
        let big = (0..3).max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap().then(b.cmp(&a))).unwrap();
        if v[big] < 0.0 {
            v = v.map(|x| -x);
        }
        vecs[slot] = v;
    }
    (mean, vals, vecs)
}

/// Number of significant principal directions of a color cloud.
pub fn color_rank(vals: [f64; 3]) -> usize {
    let top = vals[0];
    if top <= 1e-9 {
        return 0;
    }
    vals.iter().filter(|&&v| v > top * 1e-7 && v > 1e-6).count()
}

fn solve3(rows: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let m = Matrix3::from_row_slice(&[
        rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0], rows[2][1], rows[2][2],
    ]);
    if m.determinant().abs() < 1e-10 {
        return None;
    }
    let x = m.lu().solve(&Vector3::new(rhs[0], rhs[1], rhs[2]))?;
    Some([x[0], x[1], x[2]])
}

/// Best replacement point for collapsing an edge: minimizes the volume added outside the
/// planes of `faces` while staying on or outside each of them, and inside the RGB cube when
/// `bounded`. `None` when infeasible.
fn collapse_point(points: &[[f64; 3]], faces: &[&Face], bounded: bool) -> Option<(f64, [f64; 3])> {
    let area = |f: &Face| {
        let [a, b, c] = f.v.map(|i| points[i]);
        0.5 * norm3(cross3(sub3(b, a), sub3(c, a)))
    };
    // Every constraint reads normal . v + offset >= 0; cube walls carry no volume weight.
    let mut planes: Vec<([f64; 3], f64, f64)> = faces.iter().map(|f| (f.normal, f.offset, area(f) / 3.0)).collect();
    if bounded {
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            planes.push((e, 0.0, 0.0));
            planes.push((e.map(|x| -x), 255.0, 0.0));
        }
    }
    let mut best: Option<(f64, [f64; 3])> = None;
    let m = planes.len();
    for i in 0..m {
        for j in i + 1..m {
            for k in j + 1..m {
                let (a, b, c) = (planes[i], planes[j], planes[k]);
                let Some(v) = solve3([a.0, b.0, c.0], [-a.1, -b.1, -c.1]) else {
                    continue;
                };
                if planes.iter().any(|p| dot3(p.0, v) + p.1 < -1e-7) {
                    continue;
                }
                let vol: f64 = planes.iter().map(|p| p.2 * (dot3(p.0, v) + p.1).max(0.0)).sum();
                if best.is_none_or(|(bv, _)| vol < bv) {
                    best = Some((vol, v));
                }
            }
        }
    }
    best
}

fn sort_points(points: &mut [[f64; 3]]) {
    points.sort_by(|a, b| {
        a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
    });
}

pub struct Simplified {
    pub vertices: Vec<[f64; 3]>,
    /// Hull vertex count before any collapse.
    pub initial_vertices: usize,
    /// Set when no further collapse was possible before reaching the target.
    pub stalled: bool,
}

/// Progressive enclosing simplification: repeatedly collapses the hull edge whose
/// replacement vertex adds the least volume, until at most `target` vertices remain.
/// Ties go to the edge with the lowest vertex indices in lexicographic point order.
pub fn simplify_hull(points: &[[f64; 3]], target: usize) -> Result<Simplified, HullError> {
    let hull = hull3(points)?;
    let mut pts: Vec<[f64; 3]> = hull.vertices.iter().map(|&i| points[i]).collect();
    sort_points(&mut pts);
    let initial_vertices = pts.len();
    let mut cache: HashMap<Vec<u64>, Option<(f64, [f64; 3])>> = HashMap::new();
    let target = target.max(4);
    loop {
        let hull = hull3(&pts)?;
        if hull.vertices.len() != pts.len() {
            let mut kept: Vec<[f64; 3]> = hull.vertices.iter().map(|&i| pts[i]).collect();
            sort_points(&mut kept);
            pts = kept;
            continue;
        }
        if pts.len() <= target {
            return Ok(Simplified {
                vertices: pts,
                initial_vertices,
                stalled: false,
            });
        }
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); pts.len()];
        let mut edges = BTreeSet::new();
        for (fi, f) in hull.faces.iter().enumerate() {
            for a in 0..3 {
                incident[f.v[a]].push(fi);
                let (p, q) = (f.v[a], f.v[(a + 1) % 3]);
                edges.insert((p.min(q), p.max(q)));
            }
        }
        let mut neighbourhoods = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            let mut fs: Vec<usize> = incident[a].iter().chain(&incident[b]).copied().collect();
            fs.sort_unstable();
            fs.dedup();
            let mut key: Vec<u64> = Vec::with_capacity(7 + 9 * fs.len());
            key.extend(pts[a].iter().chain(&pts[b]).map(|v| v.to_bits()));
            let mut face_keys: Vec<[u64; 9]> = fs
                .iter()
                .map(|&fi| {
                    let mut tri = hull.faces[fi].v.map(|i| pts[i]);
                    sort_points(&mut tri);
                    let mut k = [0u64; 9];
                    for (slot, v) in k.iter_mut().zip(tri.iter().flatten()) {
                        *slot = v.to_bits();
                    }
                    k
                })
                .collect();
            face_keys.sort_unstable();
            key.extend(face_keys.iter().flatten());
            neighbourhoods.push(((a, b), fs, key));
        }
        // Collapses that keep the palette inside the RGB cube win; otherwise clip afterwards.
        let mut best: Option<(f64, (usize, usize), [f64; 3])> = None;
        for bounded in [true, false] {
            for ((a, b), fs, key) in &neighbourhoods {
                let mut key = key.clone();
                key.push(bounded as u64);
                let faces: Vec<&Face> = fs.iter().map(|&i| &hull.faces[i]).collect();
                let res = *cache.entry(key).or_insert_with(|| collapse_point(&pts, &faces, bounded));
                if let Some((vol, v)) = res {
                    if best.is_none_or(|(bv, _, _)| vol < bv) {
                        best = Some((vol, (*a, *b), v));
                    }
                }
            }
            if best.is_some() {
                break;
            }
        }
        let Some((_, (a, b), v)) = best else {
            return Ok(Simplified {
                vertices: pts,
                initial_vertices,
                stalled: true,
            });
        };
        let mut next: Vec<[f64; 3]> = pts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != a && i != b)
            .map(|(_, p)| *p)
            .collect();
        next.push(v);
        sort_points(&mut next);
        pts = next;
    }
}

/// Counter-clockwise convex hull of 2D points (monotone chain), without collinear points.
pub fn hull2(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p: Vec<[f64; 2]> = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Enclosing simplification of a convex polygon: each step replaces an edge by the
/// intersection of its neighbouring edge lines, choosing the smallest added area.
pub fn simplify_polygon(mut poly: Vec<[f64; 2]>, target: usize) -> Vec<[f64; 2]> {
    let target = target.max(3);
    while poly.len() > target {
        let m = poly.len();
        let mut best: Option<(f64, usize, [f64; 2])> = None;
        for i in 0..m {
            let p0 = poly[(i + m - 1) % m];
            let p1 = poly[i];
            let p2 = poly[(i + 1) % m];
            let p3 = poly[(i + 2) % m];
            let d1 = [p1[0] - p0[0], p1[1] - p0[1]];
            let d2 = [p2[0] - p3[0], p2[1] - p3[1]];
            let den = d1[0] * d2[1] - d1[1] * d2[0];
            if den.abs() < 1e-12 {
                continue;
            }
            let r = [p2[0] - p1[0], p2[1] - p1[1]];
            let t = (r[0] * d2[1] - r[1] * d2[0]) / den;
            let s = (r[0] * d1[1] - r[1] * d1[0]) / den;
            if t < 0.0 || s < 0.0 {
                continue;
            }
            let q = [p1[0] + t * d1[0], p1[1] + t * d1[1]];
            let area = 0.5 * ((p2[0] - p1[0]) * (q[1] - p1[1]) - (p2[1] - p1[1]) * (q[0] - p1[0])).abs();
            if best.is_none_or(|(ba, _, _)| area < ba) {
                best = Some((area, i, q));
            }
        }
        let Some((_, i, q)) = best else { break };
        let j = (i + 1) % m;
        poly[i] = q;
        poly.remove(j);
    }
    poly
}
