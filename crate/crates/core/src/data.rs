//! Labelled datasets: analytic synthetic shapes and the binary cloud format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{KeyValues, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, PointCloud};
use crate::model::Task;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    /// Class, or shape category for segmentation.
    pub label: usize,
    /// Per-point part labels for segmentation.
    pub point_labels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub samples: Vec<Sample>,
    /// Number of classes, or of parts for segmentation.
    pub num_outputs: usize,
    /// Part labels belonging to each category (segmentation only).
    pub category_parts: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn points_per_cloud(&self) -> Option<usize> {
        self.samples.first().map(|s| s.cloud.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Cone, Shape::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
            Shape::Torus => "torus",
        }
    }
}

/// Point on the unit sphere.
fn sphere_point(r: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(r));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

/// Uniform point on the lateral surface of a cylinder of `radius` around the
/// x axis spanning `[x0, x1]`.
fn tube_point(r: &mut Rng, radius: f64, x0: f64, x1: f64) -> [f64; 3] {
    let a = r.random_range(0.0..std::f64::consts::TAU);
    [r.random_range(x0..x1), radius * a.cos(), radius * a.sin()]
}

/// Uniform point on the lateral surface of a cone around the x axis with its
/// base circle at `x_base` and apex at `x_apex`.
fn cone_point(r: &mut Rng, radius: f64, x_base: f64, x_apex: f64) -> [f64; 3] {
    // Area grows linearly with distance from the apex.
    let t = r.random::<f64>().sqrt();
    let a = r.random_range(0.0..std::f64::consts::TAU);
    [
        x_apex + t * (x_base - x_apex),
        t * radius * a.cos(),
        t * radius * a.sin(),
    ]
}

fn disk_point(r: &mut Rng, radius: f64, x: f64) -> [f64; 3] {
    let t = r.random::<f64>().sqrt() * radius;
    let a = r.random_range(0.0..std::f64::consts::TAU);
    [x, t * a.cos(), t * a.sin()]
}

/// One point drawn uniformly from the canonical surface of `shape`.
pub fn shape_point(shape: Shape, r: &mut Rng) -> [f64; 3] {
    use std::f64::consts::PI;
    match shape {
        Shape::Sphere => sphere_point(r),
        Shape::Cube => {
            let face = r.random_range(0..6);
            let (u, v) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        Shape::Cylinder => {
            // Radius 1, axis along y from -1 to 1: lateral 4π, caps π each.
            let u = r.random_range(0.0..6.0 * PI);
            let p = if u < 4.0 * PI {
                tube_point(r, 1.0, -1.0, 1.0)
            } else {
                disk_point(r, 1.0, if u < 5.0 * PI { -1.0 } else { 1.0 })
            };
            [p[1], p[0], p[2]]
        }
        Shape::Cone => {
            // Base radius 1 at y = -1, apex at y = 1: lateral π√5, base π.
            let lateral = PI * 5f64.sqrt();
            let p = if r.random_range(0.0..lateral + PI) < lateral {
                cone_point(r, 1.0, -1.0, 1.0)
            } else {
                disk_point(r, 1.0, -1.0)
            };
            [p[1], p[0], p[2]]
        }
        Shape::Torus => {
            let (major, minor) = (1.0, 0.4);
            loop {
                let u = r.random_range(0.0..std::f64::consts::TAU);
                let v = r.random_range(0.0..std::f64::consts::TAU);
                // Accept proportionally to the local area element.
                let w = (major + minor * v.cos()) / (major + minor);
                if r.random::<f64>() <= w {
                    let ring = major + minor * v.cos();
                    return [ring * u.cos(), minor * v.sin(), ring * u.sin()];
                }
            }
        }
    }
}

/// Random pose: uniform rotation about y, a tilt about x, per-axis scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRange {
    pub max_tilt: f64,
    pub scale: (f64, f64),
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            max_tilt: 0.3,
            scale: (0.85, 1.15),
        }
    }
}

fn random_pose(r: &mut Rng, pose: &PoseRange) -> impl Fn([f64; 3]) -> [f64; 3] {
    let yaw = r.random_range(0.0..std::f64::consts::TAU);
    let tilt = if pose.max_tilt > 0.0 {
        r.random_range(-pose.max_tilt..pose.max_tilt)
    } else {
        0.0
    };
    let (lo, hi) = pose.scale;
    let scale: [f64; 3] = std::array::from_fn(|_| if hi > lo { r.random_range(lo..hi) } else { lo });
    let (sy, cy) = yaw.sin_cos();
    let (st, ct) = tilt.sin_cos();
    move |p: [f64; 3]| {
        let [x, y, z] = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
        let (x, z) = (x * cy + z * sy, -x * sy + z * cy);
        let (y, z) = (y * ct - z * st, y * st + z * ct);
        [x, y, z]
    }
}

fn to_cloud(points: &[[f64; 3]]) -> PointCloud {
    PointCloud {
        points: points.iter().map(|p| p.map(|v| v as f32)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<Shape>,
    pub samples_per_class: usize,
    pub points: usize,
    pub pose: PoseRange,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, points: usize, seed: u64) -> Result<Self> {
        if !(2..=Shape::ALL.len()).contains(&num_classes) {
            return Err(Error::Config(format!(
                "synthetic classes must be in 2..={}, got {num_classes}",
                Shape::ALL.len()
            )));
        }
        Ok(Self {
            classes: Shape::ALL[..num_classes].to_vec(),
            samples_per_class,
            points,
            pose: PoseRange::default(),
            seed,
        })
    }
}

/// Class-balanced dataset of posed, unit-sphere-normalised analytic shapes.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes.len() < 2 || spec.points == 0 {
        return Err(Error::Config("synthetic set needs >= 2 classes and >= 1 point".into()));
    }
    let mut samples = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    for (c, &shape) in spec.classes.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let mut r = rng::substream(spec.seed, &format!("synthetic/{c}/{i}"));
            let pose = random_pose(&mut r, &spec.pose);
            let pts: Vec<[f64; 3]> = (0..spec.points).map(|_| pose(shape_point(shape, &mut r))).collect();
            samples.push(Sample {
                cloud: normalize_unit_sphere(&to_cloud(&pts)),
                label: c,
                point_labels: None,
            });
        }
    }
    Ok(Dataset {
        task: Task::Classification,
        samples,
        num_outputs: spec.classes.len(),
        category_parts: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegFamily {
    /// Two balls joined by a shaft; parts: balls, shaft.
    Barbell,
    /// Shaft with a conical head; parts: shaft, head.
    Arrow,
}

impl SegFamily {
    pub const ALL: [SegFamily; 2] = [SegFamily::Barbell, SegFamily::Arrow];
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSyntheticSpec {
    pub samples_per_category: usize,
    pub points: usize,
    pub pose: PoseRange,
    pub seed: u64,
}

/// Splits `n` points across parts proportionally to `areas`, at least one each.
fn allocate(n: usize, areas: &[f64]) -> Vec<usize> {
    let total: f64 = areas.iter().sum();
    let mut counts: Vec<usize> = areas.iter().map(|a| ((a / total) * n as f64).floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let (mut i, parts) = (0, counts.len());
    while left > 0 {
        counts[i % parts] += 1;
        left -= 1;
        i += 1;
    }
    for j in 0..counts.len() {
        if counts[j] == 0 {
            let big = (0..counts.len()).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
            counts[big] -= 1;
            counts[j] = 1;
        }
    }
    counts
}

/// Two-part shapes with per-point labels. Barbells use parts {0, 1}, arrows {2, 3}.
pub fn gen_seg_synthetic(spec: &SegSyntheticSpec) -> Result<Dataset> {
    use std::f64::consts::PI;
    if spec.points < 2 {
        return Err(Error::Config("segmentation clouds need at least 2 points".into()));
    }
    let mut samples = Vec::new();
    for (c, fam) in SegFamily::ALL.iter().enumerate() {
        for i in 0..spec.samples_per_category {
            let mut r = rng::substream(spec.seed, &format!("seg/{c}/{i}"));
            let pose = random_pose(&mut r, &spec.pose);
            let mut pts: Vec<([f64; 3], usize)> = Vec::with_capacity(spec.points);
            match fam {
                SegFamily::Barbell => {
                    let (ball, shaft) = (0.45, 0.15);
                    let counts = allocate(spec.points, &[2.0 * 4.0 * PI * ball * ball, 2.0 * PI * shaft * 2.0]);
                    for j in 0..counts[0] {
                        let s = sphere_point(&mut r);
                        let cx = if j % 2 == 0 { 1.3 } else { -1.3 };
                        pts.push(([cx + ball * s[0], ball * s[1], ball * s[2]], 0));
                    }
                    for _ in 0..counts[1] {
                        pts.push((tube_point(&mut r, shaft, -1.0, 1.0), 1));
                    }
                }
                SegFamily::Arrow => {
                    let (shaft, head) = (0.12, 0.4);
                    let slant = (head * head + 0.8 * 0.8f64).sqrt();
                    let counts = allocate(spec.points, &[2.0 * PI * shaft * 1.6, PI * head * slant + PI * head * head]);
                    for _ in 0..counts[0] {
                        pts.push((tube_point(&mut r, shaft, -1.2, 0.4), 2));
                    }
                    for _ in 0..counts[1] {
                        let p = if r.random::<f64>() < slant / (slant + head) {
                            cone_point(&mut r, head, 0.4, 1.2)
                        } else {
                            disk_point(&mut r, head, 0.4)
                        };
                        pts.push((p, 3));
                    }
                }
            }
            pts.shuffle(&mut r);
            let coords: Vec<[f64; 3]> = pts.iter().map(|&(p, _)| pose(p)).collect();
            samples.push(Sample {
                cloud: normalize_unit_sphere(&to_cloud(&coords)),
                label: c,
                point_labels: Some(pts.iter().map(|&(_, l)| l).collect()),
            });
        }
    }
    Ok(Dataset {
        task: Task::Segmentation,
        samples,
        num_outputs: 4,
        category_parts: vec![vec![0, 1], vec![2, 3]],
    })
}

const CLOUD_MAGIC: &[u8; 8] = b"FPTS0001";

/// Binary point file: magic, `u32 N`, `u32 D`, `N*D` little-endian `f32`,
/// then optionally `u32 L` and `L` little-endian `u32` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudFile {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

impl CloudFile {
    pub fn from_cloud(pc: &PointCloud, labels: Option<Vec<u32>>) -> Self {
        Self {
            n: pc.len(),
            d: 3,
            data: pc.points.iter().flatten().copied().collect(),
            labels,
        }
    }

    pub fn to_cloud(&self) -> Result<PointCloud> {
        if self.d != 3 {
            return Err(Error::InvalidArgument(format!("expected 3-D points, file has D={}", self.d)));
        }
        PointCloud::new(self.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(CLOUD_MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            out.extend_from_slice(&(l.len() as u32).to_le_bytes());
            for v in l {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        if rd.take(8)? != CLOUD_MAGIC {
            return Err(Error::BadMagic { expected: "FPTS0001" });
        }
        let n = rd.u32()? as usize;
        let d = rd.u32()? as usize;
        let count = n
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidArgument("N*D overflows".into()))?;
        let data = rd.f32s(count)?;
        let labels = if rd.remaining() == 0 {
            None
        } else {
            let l = rd.u32()? as usize;
            Some(rd.u32s(l)?)
        };
        if rd.remaining() != 0 {
            return Err(Error::TrailingBytes(rd.remaining()));
        }
        Ok(Self { n, d, data, labels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated("length overflow".into()))?)?;
        Ok(raw.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated("length overflow".into()))?)?;
        Ok(raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

const META_FILE: &str = "meta.txt";

/// Writes one `.fpts` file per sample plus `meta.txt`. Classification files
/// carry `[class]`; segmentation files carry `[category, part_0, ..]`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = KeyValues::default();
    meta.set("task", match ds.task {
        Task::Classification => "classify",
        Task::Segmentation => "segment",
    });
    meta.set("outputs", &ds.num_outputs.to_string());
    meta.set("samples", &ds.len().to_string());
    let parts: Vec<String> = ds
        .category_parts
        .iter()
        .map(|p| p.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
        .collect();
    meta.set("category_parts", &parts.join(";"));
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta.render()).map_err(|e| Error::io(&meta_path, e))?;
    for (i, s) in ds.samples.iter().enumerate() {
        let mut labels = vec![s.label as u32];
        if let Some(pl) = &s.point_labels {
            labels.extend(pl.iter().map(|&l| l as u32));
        }
        CloudFile::from_cloud(&s.cloud, Some(labels)).write(&dir.join(format!("{i:06}.fpts")))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = KeyValues::parse(&text)?;
    let task = match meta.get("task") {
        Some("classify") => Task::Classification,
        Some("segment") => Task::Segmentation,
        other => return Err(Error::Config(format!("bad task in {}: {other:?}", meta_path.display()))),
    };
    let outputs: usize = meta.parse_or("outputs", 0)?;
    let samples: usize = meta.parse_or("samples", 0)?;
    let category_parts: Vec<Vec<usize>> = meta
        .get("category_parts")
        .unwrap_or("")
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|s| s.split(',').map(|v| v.trim().parse::<usize>()).collect())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad category_parts: {e}")))?;
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let path = dir.join(format!("{i:06}.fpts"));
        let f = CloudFile::read(&path)?;
        let cloud = f.to_cloud()?;
        let labels = f
            .labels
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no labels", path.display())))?;
        let (label, point_labels) = match task {
            Task::Classification if labels.len() == 1 => (labels[0] as usize, None),
            Task::Segmentation if labels.len() == cloud.len() + 1 => (
                labels[0] as usize,
                Some(labels[1..].iter().map(|&l| l as usize).collect()),
            ),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{} has {} labels for {} points",
                    path.display(),
                    labels.len(),
                    cloud.len()
                )))
            }
        };
        out.push(Sample {
            cloud,
            label,
            point_labels,
        });
    }
    Ok(Dataset {
        task,
        samples: out,
        num_outputs: outputs,
        category_parts,
    })
}

/// Train and test splits for a run: read from `dataset/{train,test}` when a
/// directory is configured, generated synthetically otherwise.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    if let Some(dir) = &cfg.data.dataset {
        return Ok((load_dataset(&dir.join("train"))?, load_dataset(&dir.join("test"))?));
    }
    let seed = cfg.train.seed;
    let d = &cfg.data;
    match cfg.model.task {
        Task::Classification => {
            let mk = |per_class: usize, split: &str| -> Result<Dataset> {
                let mut spec = SyntheticSpec::new(cfg.model.outputs, per_class, d.points, 0)?;
                spec.seed = rng::derive_seed(seed, &format!("data/{split}"));
                gen_synthetic(&spec)
            };
            Ok((mk(d.samples_per_class, "train")?, mk(d.test_per_class, "test")?))
        }
        Task::Segmentation => {
            if cfg.model.outputs != 4 {
                return Err(Error::Config("synthetic segmentation has 4 parts; set outputs = 4".into()));
            }
            let mk = |per_cat: usize, split: &str| {
                gen_seg_synthetic(&SegSyntheticSpec {
                    samples_per_category: per_cat,
                    points: d.points,
                    pose: PoseRange::default(),
                    seed: rng::derive_seed(seed, &format!("data/{split}")),
                })
            };
            Ok((mk(d.samples_per_class, "train")?, mk(d.test_per_class, "test")?))
        }
    }
}
