//! Procedural scenes with mutually consistent labels for every task.
//!
//! A scene is a stack of axis-aligned rectangles and ellipses over a far
//! background plane. Each shape is a tilted plane at its own depth level,
//! so depth, normals, segmentation, edges, saliency and parts all follow
//! from the same few scene parameters. Samples are a pure function of
//! `(seed, index)`.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::heads::{LabelKind, SEGMENTATION_CLASSES};
use crate::losses::Target;

pub const MIN_DEPTH: f64 = 0.1;
/// Depth of the background plane.
pub const FAR_PLANE: f64 = 1.0;
/// Base depth of each stacking slot. Shapes never share a slot.
pub const DEPTH_LEVELS: [f64; 6] = [0.22, 0.34, 0.46, 0.58, 0.70, 0.82];
/// Largest depth swing a tilted shape can have around its base level.
pub const MAX_TILT_SPAN: f64 = 0.025;
/// Pixels within this much of the nearest depth belong to the salient shape.
pub const SALIENCY_BAND: f64 = 0.06;
/// Physical width of the image plane, in depth units.
pub const LATERAL_EXTENT: f64 = 0.1;
pub const CACHE_ENV: &str = "MEDUSA_DATA_CACHE";

const MAX_TILT: f64 = 0.05;
const HALF_SIZE: (f64, f64) = (0.08, 0.25);
const CENTER: (f64, f64) = (0.15, 0.85);
const LIGHT: [f64; 3] = [0.3, -0.4, 0.866];
const BASE_COLORS: [[f64; 3]; SEGMENTATION_CLASSES] = [
    [0.55, 0.55, 0.55],
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.20, 0.30, 0.90],
    [0.90, 0.80, 0.20],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Half-width of the uniform per-channel pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            min_shapes: 1,
            max_shapes: 4,
            noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is below 8", self.image_size)));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > DEPTH_LEVELS.len() {
            return Err(Error::Config(format!(
                "shape count range {}..={} must be ordered and at most {}",
                self.min_shapes,
                self.max_shapes,
                DEPTH_LEVELS.len()
            )));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5)", self.noise)));
        }
        Ok(())
    }

    /// Short stable identifier of the spec, used to key the sample cache.
    fn cache_key(&self) -> String {
        format!(
            "scene-s{}-px{}-k{}to{}-e{:016x}",
            self.seed,
            self.image_size,
            self.min_shapes,
            self.max_shapes,
            self.noise.to_bits()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// One planar shape, in normalized image coordinates `u, v ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub class: usize,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub half_size: (f64, f64),
    /// Depth at the center.
    pub depth: f64,
    /// Depth change per unit of `u` and `v`.
    pub tilt: (f64, f64),
}

impl Shape {
    fn contains(&self, u: f64, v: f64) -> bool {
        let du = (u - self.center.0) / self.half_size.0;
        let dv = (v - self.center.1) / self.half_size.1;
        match self.kind {
            ShapeKind::Rectangle => du.abs() <= 1.0 && dv.abs() <= 1.0,
            ShapeKind::Ellipse => du * du + dv * dv <= 1.0,
        }
    }

    fn depth_at(&self, u: f64, v: f64) -> f64 {
        self.depth + self.tilt.0 * (u - self.center.0) + self.tilt.1 * (v - self.center.1)
    }

    fn normal(&self) -> [f64; 3] {
        normalize([-self.tilt.0 / LATERAL_EXTENT, -self.tilt.1 / LATERAL_EXTENT, 1.0])
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Draws the scene layout of sample `index`.
pub fn scene_shapes(spec: &SceneSpec, index: u64) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let n = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut levels = DEPTH_LEVELS.to_vec();
    levels.shuffle(&mut rng);
    levels
        .into_iter()
        .take(n)
        .map(|depth| {
            let class = rng.gen_range(1..SEGMENTATION_CLASSES);
            Shape {
                class,
                kind: if class % 2 == 1 {
                    ShapeKind::Rectangle
                } else {
                    ShapeKind::Ellipse
                },
                center: (rng.gen_range(CENTER.0..CENTER.1), rng.gen_range(CENTER.0..CENTER.1)),
                half_size: (
                    rng.gen_range(HALF_SIZE.0..HALF_SIZE.1),
                    rng.gen_range(HALF_SIZE.0..HALF_SIZE.1),
                ),
                depth,
                tilt: (rng.gen_range(-MAX_TILT..MAX_TILT), rng.gen_range(-MAX_TILT..MAX_TILT)),
            }
        })
        .collect()
}

/// An image with its label maps. Dense maps are C×H×W; class maps are H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: BTreeMap<LabelKind, Target>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn label(&self, kind: LabelKind) -> Result<&Target> {
        self.labels
            .get(&kind)
            .ok_or_else(|| Error::InvalidData(format!("sample has no {kind:?} label")))
    }

    pub fn dense(&self, kind: LabelKind) -> Result<&Tensor> {
        match self.label(kind)? {
            Target::Dense(t) => Ok(t),
            Target::Classes(_) => Err(Error::InvalidData(format!("{kind:?} is a class map"))),
        }
    }

    pub fn classes(&self, kind: LabelKind) -> Result<&[usize]> {
        match self.label(kind)? {
            Target::Classes(c) => Ok(c),
            Target::Dense(_) => Err(Error::InvalidData(format!("{kind:?} is a dense map"))),
        }
    }

    /// Drops a label, as when a task is withheld from a dataset.
    pub fn without(mut self, kind: LabelKind) -> Self {
        self.labels.remove(&kind);
        self
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.push("image", self.image.clone()).expect("fresh archive");
        let (h, w) = self.size();
        for (kind, target) in &self.labels {
            let t = match target {
                Target::Dense(t) => t.clone(),
                Target::Classes(c) => Tensor::new(vec![h, w], c.iter().map(|&v| v as f64).collect())
                    .expect("class map matches image size"),
            };
            a.push(label_name(*kind), t).expect("distinct label kinds");
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let image = a
            .get("image")
            .cloned()
            .ok_or_else(|| Error::Archive("sample archive has no image".into()))?;
        let mut labels = BTreeMap::new();
        for kind in ALL_LABELS {
            if let Some(t) = a.get(label_name(kind)) {
                let target = if is_class_map(kind) {
                    Target::Classes(t.data().iter().map(|&v| v as usize).collect())
                } else {
                    Target::Dense(t.clone())
                };
                labels.insert(kind, target);
            }
        }
        Ok(Self { image, labels })
    }
}

const ALL_LABELS: [LabelKind; 6] = [
    LabelKind::Depth,
    LabelKind::Segmentation,
    LabelKind::Edges,
    LabelKind::Normals,
    LabelKind::Saliency,
    LabelKind::Parts,
];

fn label_name(kind: LabelKind) -> &'static str {
    match kind {
        LabelKind::Depth => "depth",
        LabelKind::Segmentation => "segmentation",
        LabelKind::Edges => "edges",
        LabelKind::Normals => "normals",
        LabelKind::Saliency => "saliency",
        LabelKind::Parts => "parts",
    }
}

fn is_class_map(kind: LabelKind) -> bool {
    matches!(kind, LabelKind::Segmentation | LabelKind::Parts)
}

/// Renders sample `index` of the scene distribution.
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Sample {
    let shapes = scene_shapes(spec, index);
    render(spec, index, &shapes)
}

/// Renders an explicit layout, noise seeded by `(spec.seed, index)`.
pub fn render(spec: &SceneSpec, index: u64, shapes: &[Shape]) -> Sample {
    let n = spec.image_size;
    let hw = n * n;
    let coord = |i: usize| (i as f64 + 0.5) / n as f64;

    // Painter's order: farthest first, so nearer shapes overwrite.
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by(|&a, &b| shapes[b].depth.total_cmp(&shapes[a].depth));
    let mut owner: Vec<Option<usize>> = vec![None; hw];
    for &s in &order {
        for y in 0..n {
            for x in 0..n {
                if shapes[s].contains(coord(x), coord(y)) {
                    owner[y * n + x] = Some(s);
                }
            }
        }
    }

    let nearest_visible = owner
        .iter()
        .flatten()
        .copied()
        .min_by(|&a, &b| shapes[a].depth.total_cmp(&shapes[b].depth));

    let mut depth = vec![FAR_PLANE; hw];
    let mut normals = vec![0.0; 3 * hw];
    let mut segm = vec![0usize; hw];
    let mut parts = vec![0usize; hw];
    let mut saliency = vec![0.0; hw];
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let normal = match owner[p] {
                None => [0.0, 0.0, 1.0],
                Some(s) => {
                    let shape = &shapes[s];
                    depth[p] = shape.depth_at(coord(x), coord(y));
                    segm[p] = shape.class;
                    parts[p] = if coord(y) < shape.center.1 {
                        2 * shape.class - 1
                    } else {
                        2 * shape.class
                    };
                    if Some(s) == nearest_visible {
                        saliency[p] = 1.0;
                    }
                    shape.normal()
                }
            };
            for c in 0..3 {
                normals[c * hw + p] = normal[c];
            }
        }
    }
    let edges = edge_map(&segm, n, n);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_6521);
    rng.set_stream(index);
    let light = normalize(LIGHT);
    let mut image = vec![0.0; 3 * hw];
    for p in 0..hw {
        let lambert = (0..3).map(|c| normals[c * hw + p] * light[c]).sum::<f64>().max(0.0);
        // Nearer surfaces render brighter, a monocular depth cue.
        let shade = (0.3 + 0.7 * lambert) * (1.2 - 0.6 * depth[p]);
        for c in 0..3 {
            let noise = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..spec.noise)
            } else {
                0.0
            };
            image[c * hw + p] = (BASE_COLORS[segm[p]][c] * shade + noise).clamp(0.0, 1.0);
        }
    }

    let dense = |c: usize, data: Vec<f64>| Tensor::new(vec![c, n, n], data).expect("sized buffer");
    let labels = BTreeMap::from([
        (LabelKind::Depth, Target::Dense(dense(1, depth))),
        (LabelKind::Segmentation, Target::Classes(segm)),
        (LabelKind::Edges, Target::Dense(dense(1, edges))),
        (LabelKind::Normals, Target::Dense(dense(3, normals))),
        (LabelKind::Saliency, Target::Dense(dense(1, saliency))),
        (LabelKind::Parts, Target::Classes(parts)),
    ]);
    Sample {
        image: dense(3, image),
        labels,
    }
}

/// 1 where a pixel's class differs from any 4-neighbor.
pub fn edge_map(segm: &[usize], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = segm[y * w + x];
            let differs = (x > 0 && segm[y * w + x - 1] != c)
                || (x + 1 < w && segm[y * w + x + 1] != c)
                || (y > 0 && segm[(y - 1) * w + x] != c)
                || (y + 1 < h && segm[(y + 1) * w + x] != c);
            if differs {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

/// Re-derives every cross-label relation of a sample from its depth and
/// segmentation maps and returns the list of violations.
pub fn validate_sample(sample: &Sample) -> Result<Vec<String>> {
    let (h, w) = sample.size();
    let hw = h * w;
    let depth = sample.dense(LabelKind::Depth)?.data();
    let segm = sample.classes(LabelKind::Segmentation)?;
    let edges = sample.dense(LabelKind::Edges)?.data();
    let normals = sample.dense(LabelKind::Normals)?.data();
    let saliency = sample.dense(LabelKind::Saliency)?.data();
    let parts = sample.classes(LabelKind::Parts)?;
    if [depth.len(), segm.len(), edges.len(), saliency.len(), parts.len()]
        .iter()
        .any(|&l| l != hw)
        || normals.len() != 3 * hw
    {
        return Err(shape_err!("label maps do not match the {h}×{w} image"));
    }
    let mut bad = Vec::new();

    if sample.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        bad.push("image value outside [0, 1]".to_string());
    }

    for p in 0..hw {
        let n = [normals[p], normals[hw + p], normals[2 * hw + p]];
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            bad.push(format!("pixel {p}: normal norm {norm}"));
        }
        if segm[p] == 0 {
            if depth[p] != FAR_PLANE || n != [0.0, 0.0, 1.0] {
                bad.push(format!("pixel {p}: background off the far plane"));
            }
        } else if !(depth[p] > MIN_DEPTH && depth[p] < FAR_PLANE) {
            bad.push(format!("pixel {p}: depth {} outside range", depth[p]));
        }
    }

    let expected_edges = edge_map(segm, h, w);
    if let Some(p) = (0..hw).find(|&p| expected_edges[p] != edges[p]) {
        bad.push(format!("pixel {p}: edge label disagrees with segmentation"));
    }

    let nearest = (0..hw)
        .filter(|&p| segm[p] != 0)
        .map(|p| depth[p])
        .fold(f64::INFINITY, f64::min);
    if let Some(p) = (0..hw).find(|&p| {
        let salient = segm[p] != 0 && depth[p] <= nearest + SALIENCY_BAND;
        (saliency[p] == 1.0) != salient || !(saliency[p] == 0.0 || saliency[p] == 1.0)
    }) {
        bad.push(format!("pixel {p}: saliency is not the nearest shape"));
    }

    if let Some(p) = (0..hw).find(|&p| {
        let s = segm[p];
        if s == 0 {
            parts[p] != 0
        } else {
            parts[p] != 2 * s - 1 && parts[p] != 2 * s
        }
    }) {
        bad.push(format!("pixel {p}: part id {} inside class {}", parts[p], segm[p]));
    }

    // Within one planar shape, neighbouring depths are a whole tilt step
    // apart at most; across shapes they differ by a depth-level gap.
    let same_plane = |a: usize, b: usize| segm[a] != 0 && segm[a] == segm[b] && (depth[a] - depth[b]).abs() < 0.02;
    let step = LATERAL_EXTENT / w as f64;
    let step_y = LATERAL_EXTENT / h as f64;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let p = y * w + x;
            if !(same_plane(p, p + 1) && same_plane(p, p + w)) {
                continue;
            }
            let dzdx = (depth[p + 1] - depth[p]) / step;
            let dzdy = (depth[p + w] - depth[p]) / step_y;
            let expected = normalize([-dzdx, -dzdy, 1.0]);
            let err = (0..3)
                .map(|c| (expected[c] - normals[c * hw + p]).abs())
                .fold(0.0, f64::max);
            if err > 1e-6 {
                bad.push(format!("pixel {p}: normal off the depth plane by {err:e}"));
                break;
            }
        }
    }
    Ok(bad)
}

/// Disjoint, contiguous index ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Range<u64>,
    pub val: Range<u64>,
    pub test: Range<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl DatasetSplits {
    pub fn new(n_train: u64, n_val: u64, n_test: u64) -> Result<Self> {
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::InvalidArgument("split sizes must be positive".into()));
        }
        Ok(Self {
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..n_train + n_val + n_test,
        })
    }

    pub fn range(&self, split: Split) -> Range<u64> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// On-disk store of rendered samples, one archive per sample.
#[derive(Clone, Debug)]
pub struct SampleCache {
    root: PathBuf,
}

impl SampleCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// The cache named by the environment, if any.
    pub fn from_env() -> Option<Self> {
        env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(Self::new)
    }

    fn dir(&self, spec: &SceneSpec) -> PathBuf {
        self.root.join(spec.cache_key())
    }

    fn ensure_manifest(&self, spec: &SceneSpec) -> Result<PathBuf> {
        let dir = self.dir(spec);
        let manifest = dir.join("manifest.toml");
        let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
        if manifest.exists() {
            if fs::read_to_string(&manifest)? != text {
                return Err(Error::InvalidData(format!(
                    "cache manifest {} does not match the scene spec",
                    manifest.display()
                )));
            }
        } else {
            fs::create_dir_all(&dir)?;
            write_atomic(&manifest, text.as_bytes())?;
        }
        Ok(dir)
    }

    pub fn get(&self, spec: &SceneSpec, index: u64) -> Result<Sample> {
        let dir = self.ensure_manifest(spec)?;
        let path = dir.join(format!("{index:08}.bin"));
        if path.exists() {
            return Sample::from_archive(&Archive::load(&path)?);
        }
        let sample = generate_sample(spec, index);
        write_atomic(&path, &sample.to_archive().to_bytes())?;
        Ok(sample)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Samples of an index range, read through `cache` when one is given.
pub fn load_samples(spec: &SceneSpec, range: Range<u64>, cache: Option<&SampleCache>) -> Result<Vec<Sample>> {
    spec.validate()?;
    range
        .map(|i| match cache {
            Some(c) => c.get(spec, i),
            None => Ok(generate_sample(spec, i)),
        })
        .collect()
}

/// The three splits of a dataset.
pub fn dataset(
    spec: &SceneSpec,
    splits: &DatasetSplits,
    cache: Option<&SampleCache>,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    Ok((
        load_samples(spec, splits.train.clone(), cache)?,
        load_samples(spec, splits.val.clone(), cache)?,
        load_samples(spec, splits.test.clone(), cache)?,
    ))
}

/// Stacks the images of `samples` into an N×3×H×W batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack_batch(&images)
}

/// Stacks one label of `samples`, failing with invalid-data when any sample
/// lacks it.
pub fn batch_target(samples: &[&Sample], kind: LabelKind) -> Result<Target> {
    if is_class_map(kind) {
        let mut out = Vec::new();
        for s in samples {
            out.extend_from_slice(s.classes(kind)?);
        }
        Ok(Target::Classes(out))
    } else {
        let maps = samples.iter().map(|s| s.dense(kind)).collect::<Result<Vec<_>>>()?;
        Ok(Target::Dense(Tensor::stack_batch(&maps)?))
    }
}
