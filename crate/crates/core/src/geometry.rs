//! Meshes, point sampling, augmentation and kNN graphs.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn face_area(&self, f: &[usize; 3]) -> f64 {
        let [a, b, c] = f.map(|i| self.vertices[i]);
        let u = sub(b, a);
        let v = sub(c, a);
        0.5 * norm(cross(u, v))
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud must be non-empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `[N, 3]` tensor of the coordinates.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let data = self
            .points
            .iter()
            .flatten()
            .map(|&v| T::of(f64::from(v)))
            .collect();
        Tensor::new(&[self.len(), 3], data).expect("non-empty cloud")
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Stacks clouds of equal size into a `[B, N, 3]` tensor.
pub fn stack_clouds<T: Float>(clouds: &[&PointCloud]) -> Result<Tensor<T>> {
    let n = clouds
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .len();
    if let Some(c) = clouds.iter().find(|c| c.len() != n) {
        return Err(Error::shape("stack_clouds", &[n, 3], &[c.len(), 3]));
    }
    let data = clouds
        .iter()
        .flat_map(|c| c.points.iter().flatten())
        .map(|&v| T::of(f64::from(v)))
        .collect();
    Tensor::new(&[clouds.len(), n, 3], data)
}

/// Parses an OFF mesh. Accepts the ModelNet variant where the counts follow
/// the `OFF` keyword on the same line. Polygons are fan-triangulated.
pub fn parse_off(text: &str) -> Result<TriangleMesh> {
    let err = |line: usize, msg: String| Error::OffParse { line, msg };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| err(hline, format!("expected `OFF` header, found `{header}`")))?
        .trim();
    let (cline, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| err(hline + 1, "missing vertex/face counts".into()))?
    } else {
        (hline, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(cline, format!("bad counts `{counts}`: {e}")))?;
    if counts.len() < 2 {
        return Err(err(cline, "expected vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut mesh = TriangleMesh::default();
    let mut last = cline;
    for vi in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(last + 1, format!("truncated: expected {nv} vertices, got {vi}")))?;
        last = ln;
        let c: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(ln, format!("bad vertex: {e}")))?;
        if c.len() != 3 || c.iter().any(|v| !v.is_finite()) {
            return Err(err(ln, "vertex needs three finite coordinates".into()));
        }
        mesh.vertices.push([c[0], c[1], c[2]]);
    }
    for fi in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(last + 1, format!("truncated: expected {nf} faces, got {fi}")))?;
        last = ln;
        let mut toks = l.split_whitespace().map(str::parse::<usize>);
        let k = toks
            .next()
            .ok_or_else(|| err(ln, "empty face".into()))?
            .map_err(|e| err(ln, format!("bad face size: {e}")))?;
        if k < 3 {
            return Err(err(ln, format!("face with {k} vertices")));
        }
        let idx: Vec<usize> = toks
            .take(k)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(ln, format!("bad face index: {e}")))?;
        if idx.len() != k {
            return Err(err(ln, format!("face declares {k} indices, found {}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(err(ln, format!("face index {bad} out of range for {nv} vertices")));
        }
        for j in 1..k - 1 {
            mesh.faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(mesh)
}

/// Draws `n` points uniformly over the mesh surface: faces are chosen with
/// probability proportional to area, then a point is drawn with uniform
/// barycentric coordinates. Zero-area faces are ignored.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let faces: Vec<(&[usize; 3], f64)> = mesh
        .faces
        .iter()
        .map(|f| (f, mesh.face_area(f)))
        .filter(|&(_, a)| a > 0.0)
        .collect();
    if faces.is_empty() {
        return Err(Error::DegenerateMesh);
    }
    let mut cum = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for &(_, a) in &faces {
        total += a;
        cum.push(total);
    }
    let mut r = rng::substream(seed, "sample_surface");
    let points = (0..n)
        .map(|_| {
            let u = r.random_range(0.0..total);
            let fi = cum.partition_point(|&c| c <= u).min(faces.len() - 1);
            let [a, b, c] = faces[fi].0.map(|i| mesh.vertices[i]);
            let (mut s, mut t): (f64, f64) = (r.random(), r.random());
            if s + t > 1.0 {
                s = 1.0 - s;
                t = 1.0 - t;
            }
            let p: [f64; 3] = std::array::from_fn(|d| a[d] + s * (b[d] - a[d]) + t * (c[d] - a[d]));
            p.map(|v| v as f32)
        })
        .collect();
    PointCloud::new(points)
}

/// Centres the cloud on its centroid and scales it so the farthest point has
/// unit norm. Coincident points map to the origin.
pub fn normalize_unit_sphere(pc: &PointCloud) -> PointCloud {
    let n = pc.len() as f64;
    let mut c = [0.0f64; 3];
    for p in &pc.points {
        for d in 0..3 {
            c[d] += f64::from(p[d]);
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let centred: Vec<[f64; 3]> = pc
        .points
        .iter()
        .map(|p| std::array::from_fn(|d| f64::from(p[d]) - c[d]))
        .collect();
    let scale = centred.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    PointCloud {
        points: centred.iter().map(|p| p.map(|v| (v / scale) as f32)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotate by a uniform angle about the up (y) axis.
    pub rotate: bool,
    /// Uniform global scale range.
    pub scale: Option<(f32, f32)>,
    /// Gaussian jitter `(sigma, clip)`.
    pub jitter: Option<(f32, f32)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            scale: Some((0.8, 1.25)),
            jitter: Some((0.01, 0.05)),
        }
    }
}

/// Rotation about y by `angle`, then scale, then clipped jitter.
pub fn augment_with_angle(pc: &PointCloud, cfg: &AugmentConfig, angle: f32, seed: u64) -> PointCloud {
    let mut r = rng::substream(seed, "augment");
    let (s, c) = angle.sin_cos();
    let scale = cfg.scale.map_or(1.0, |(lo, hi)| {
        if hi > lo {
            r.random_range(lo..hi)
        } else {
            lo
        }
    });
    let jitter = cfg
        .jitter
        .map(|(sigma, clip)| (Normal::new(0.0f32, sigma).expect("valid sigma"), clip));
    let points = pc
        .points
        .iter()
        .map(|&[x, y, z]| {
            let mut p = [x * c + z * s, y, -x * s + z * c];
            p.iter_mut().for_each(|v| *v *= scale);
            if let Some((dist, clip)) = &jitter {
                for v in &mut p {
                    *v += dist.sample(&mut r).clamp(-clip, *clip);
                }
            }
            p
        })
        .collect();
    PointCloud { points }
}

/// Training-time augmentation with a seeded random rotation angle.
pub fn augment(pc: &PointCloud, cfg: &AugmentConfig, seed: u64) -> PointCloud {
    let angle = if cfg.rotate {
        rng::substream(seed, "augment.angle").random_range(0.0..std::f32::consts::TAU)
    } else {
        0.0
    };
    augment_with_angle(pc, cfg, angle, seed)
}

/// Row `i` lists the `k` nearest neighbours of point `i`, self excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn n(&self) -> usize {
        self.indices.len() / self.k
    }
}

/// Squared Euclidean distance with a fixed accumulation order, so
/// `dist(a, b) == dist(b, a)` bitwise.
#[inline]
fn sq_dist<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Brute-force kNN over the rows of an `[n, d]` feature matrix. Ties in
/// distance go to the lower index.
pub fn knn_graph<T: Float>(features: &[T], n: usize, d: usize, k: usize) -> Result<NeighborIndex> {
    if k == 0 || k >= n {
        return Err(Error::TooFewPoints { n, k });
    }
    if features.len() != n * d {
        return Err(Error::shape("knn_graph", &[n, d], &[features.len()]));
    }
    let mut indices = vec![0usize; n * k];
    kernels::for_each_row(&mut indices, k, n * d, |i, out| {
        let xi = &features[i * d..(i + 1) * d];
        let mut cand: Vec<(T, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(xi, &features[j * d..(j + 1) * d]), j))
            .collect();
        let cmp = |a: &(T, usize), b: &(T, usize)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        for (o, (_, j)) in out.iter_mut().zip(cand) {
            *o = j;
        }
    });
    Ok(NeighborIndex { k, indices })
}

/// Neighbour differences `diffs[i][k] = x[nbrs[i][k]] - x[i]` as `[N, K, D]`.
pub fn edge_features<T: Float>(features: &Tensor<T>, nbrs: &NeighborIndex) -> Result<Tensor<T>> {
    let (n, d) = (features.rows(), features.channels());
    if nbrs.n() != n || nbrs.indices.iter().any(|&j| j >= n) {
        return Err(Error::InvalidArgument("neighbour index does not match features".into()));
    }
    let mut out = Vec::with_capacity(n * nbrs.k * d);
    for i in 0..n {
        let xi = features.row(i);
        for &j in nbrs.row(i) {
            out.extend(features.row(j).iter().zip(xi).map(|(&a, &b)| a - b));
        }
    }
    Tensor::new(&[n, nbrs.k, d], out)
}

/// Indices of a uniform subset of `keep` out of `n` points without
/// replacement, in random order.
pub fn dropout_indices(n: usize, keep: usize, seed: u64) -> Result<Vec<usize>> {
    if keep == 0 || keep > n {
        return Err(Error::InvalidArgument(format!("keep must be in 1..={n}, got {keep}")));
    }
    let mut r = rng::substream(seed, "dropout");
    Ok(rand::seq::index::sample(&mut r, n, keep).into_vec())
}

pub fn random_dropout(pc: &PointCloud, keep: usize, seed: u64) -> Result<PointCloud> {
    let idx = dropout_indices(pc.len(), keep, seed)?;
    Ok(pc.permuted(&idx))
}
