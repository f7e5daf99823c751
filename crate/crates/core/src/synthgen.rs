//! Synthetic object categories, surface defects and task-stream assembly.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::continual::{Sample, Task, TaskStream};
use crate::error::{Error, Result};
use crate::pointcloud::{dist, norm, Label, Point, PointCloud};
use crate::seed;

/// Minimum number of points a defect region must contain.
pub const MIN_REGION_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Cone,
    Ellipsoid,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Sphere,
        Shape::Box,
        Shape::Cylinder,
        Shape::Torus,
        Shape::Cone,
        Shape::Ellipsoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Box => "box",
            Shape::Cylinder => "cylinder",
            Shape::Torus => "torus",
            Shape::Cone => "cone",
            Shape::Ellipsoid => "ellipsoid",
        }
    }
}

// Primitive dimensions, all inside the unit ball.
const BOX_HALF: [f64; 3] = [0.7, 0.5, 0.35];
const CYL_RADIUS: f64 = 0.5;
const CYL_HALF_HEIGHT: f64 = 0.75;
const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.25;
const CONE_RADIUS: f64 = 0.6;
const CONE_HEIGHT: f64 = 1.2;
const ELLIPSOID_AXES: [f64; 3] = [1.0, 0.6, 0.4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub shape: Shape,
    pub points_per_cloud: usize,
    /// Standard deviation of the per-coordinate jitter, as a fraction of the
    /// object radius.
    pub jitter_sigma: f64,
    pub pose_randomization: bool,
}

impl CategorySpec {
    pub fn new(shape: Shape) -> Self {
        Self {
            name: shape.name().to_string(),
            shape,
            points_per_cloud: 8192,
            jitter_sigma: 0.002,
            pose_randomization: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_cloud < 64 {
            return Err(Error::Argument(format!(
                "category {}: points_per_cloud must be >= 64",
                self.name
            )));
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::Argument(format!("category {}: jitter_sigma must be >= 0", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Bump,
    Dent,
    Hole,
    NoisePatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    /// Fraction of the object radius.
    pub amplitude: f64,
    /// Region radius as a fraction of the object diameter.
    pub extent: f64,
}

impl DefectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Argument("defect amplitude must be > 0".into()));
        }
        if !(self.extent > 0.0 && self.extent < 0.5) {
            return Err(Error::Argument("defect extent must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// The default mix used for anomalous test clouds.
    pub fn default_mix() -> Vec<DefectSpec> {
        [DefectKind::Bump, DefectKind::Dent, DefectKind::Hole, DefectKind::NoisePatch]
            .into_iter()
            .map(|kind| DefectSpec {
                kind,
                amplitude: 0.2,
                extent: 0.1,
            })
            .collect()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v = [gauss(rng), gauss(rng), gauss(rng)];
        let n = norm(&v);
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn surface_point(shape: Shape, rng: &mut ChaCha8Rng) -> Point {
    match shape {
        Shape::Sphere => unit_vector(rng),
        Shape::Box => {
            let [a, b, c] = BOX_HALF;
            let areas = [b * c, a * c, a * b];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && pick >= areas[axis] {
                pick -= areas[axis];
                axis += 1;
            }
            let mut p = BOX_HALF.map(|h| rng.random_range(-h..h));
            p[axis] = if rng.random_bool(0.5) { BOX_HALF[axis] } else { -BOX_HALF[axis] };
            p
        }
        Shape::Cylinder => {
            let side = 2.0 * PI * CYL_RADIUS * 2.0 * CYL_HALF_HEIGHT;
            let cap = PI * CYL_RADIUS * CYL_RADIUS;
            let t = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..side + 2.0 * cap) < side {
                let z = rng.random_range(-CYL_HALF_HEIGHT..CYL_HALF_HEIGHT);
                [CYL_RADIUS * t.cos(), CYL_RADIUS * t.sin(), z]
            } else {
                let r = CYL_RADIUS * rng.random::<f64>().sqrt();
                let z = if rng.random_bool(0.5) { CYL_HALF_HEIGHT } else { -CYL_HALF_HEIGHT };
                [r * t.cos(), r * t.sin(), z]
            }
        }
        Shape::Torus => loop {
            let u = rng.random_range(0.0..2.0 * PI);
            let v = rng.random_range(0.0..2.0 * PI);
            let w = (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR);
            if rng.random::<f64>() <= w {
                let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                break [ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()];
            }
        },
        Shape::Cone => {
            // apex at +h/2, base at -h/2
            let slant = (CONE_RADIUS * CONE_RADIUS + CONE_HEIGHT * CONE_HEIGHT).sqrt();
            let side = PI * CONE_RADIUS * slant;
            let base = PI * CONE_RADIUS * CONE_RADIUS;
            let t = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..side + base) < side {
                let s = rng.random::<f64>().sqrt();
                let r = CONE_RADIUS * s;
                [r * t.cos(), r * t.sin(), CONE_HEIGHT * (0.5 - s)]
            } else {
                let r = CONE_RADIUS * rng.random::<f64>().sqrt();
                [r * t.cos(), r * t.sin(), -0.5 * CONE_HEIGHT]
            }
        }
        Shape::Ellipsoid => {
            let [a, b, c] = ELLIPSOID_AXES;
            let g_max = (a * b).max(a * c).max(b * c);
            loop {
                let [x, y, z] = unit_vector(rng);
                let g = ((b * c * x).powi(2) + (a * c * y).powi(2) + (a * b * z).powi(2)).sqrt();
                if rng.random::<f64>() * g_max <= g {
                    break [a * x, b * y, c * z];
                }
            }
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q = loop {
        let q = [gauss(rng), gauss(rng), gauss(rng), gauss(rng)];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break q.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// A normal cloud sampled from the category's primitive.
pub fn generate_normal(spec: &CategorySpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let rot = spec.pose_randomization.then(|| random_rotation(&mut rng));
    let sigma = spec.jitter_sigma;
    let points = (0..spec.points_per_cloud)
        .map(|_| {
            let mut p = surface_point(spec.shape, &mut rng);
            if sigma > 0.0 {
                for c in &mut p {
                    *c += sigma * gauss(&mut rng);
                }
            }
            match &rot {
                Some(r) => [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]),
                None => p,
            }
        })
        .collect();
    PointCloud::new(points, Label::Normal)
}

/// Geometry of an injected defect, for inspection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectRegion {
    pub anchor: Point,
    pub radius: f64,
}

/// The region a defect with this seed would touch: all points within
/// `extent * diameter` of a randomly drawn anchor point.
pub fn defect_region(cloud: &PointCloud, defect: &DefectSpec, seed: u64) -> DefectRegion {
    let (_, diameter) = extent_of(cloud);
    let mut rng = seed::rng(seed);
    let anchor = cloud.points()[rng.random_range(0..cloud.len())];
    DefectRegion {
        anchor,
        radius: defect.extent * diameter,
    }
}

fn extent_of(cloud: &PointCloud) -> (Point, f64) {
    let c = cloud.centroid();
    let r = cloud.points().iter().map(|p| dist(p, &c)).fold(0.0f64, f64::max);
    (c, 2.0 * r)
}

/// Apply a localized defect. Points outside the region are copied unchanged.
pub fn inject_defect(cloud: &PointCloud, defect: &DefectSpec, seed: u64) -> Result<PointCloud> {
    defect.validate()?;
    if cloud.label != Label::Normal {
        return Err(Error::Injection("defects are injected into normal clouds only".into()));
    }
    let (centroid, diameter) = extent_of(cloud);
    let object_radius = diameter / 2.0;
    let region = defect_region(cloud, defect, seed);
    let rho = region.radius;
    let inside: Vec<bool> = cloud.points().iter().map(|p| dist(p, &region.anchor) <= rho).collect();
    let count = inside.iter().filter(|&&b| b).count();
    if count < MIN_REGION_POINTS {
        return Err(Error::Injection(format!(
            "defect region holds {count} points; at least {MIN_REGION_POINTS} are needed"
        )));
    }

    let mut rng = seed::rng(seed::derive(seed, &[seed::label("defect-noise")]));
    let amp = defect.amplitude * object_radius;
    let mut points = Vec::with_capacity(cloud.len());
    let mut labels = Vec::with_capacity(cloud.len());
    match defect.kind {
        DefectKind::Bump | DefectKind::Dent => {
            let sign = if defect.kind == DefectKind::Bump { 1.0 } else { -1.0 };
            for (p, &hit) in cloud.points().iter().zip(&inside) {
                if !hit {
                    points.push(*p);
                    labels.push(false);
                    continue;
                }
                let rel = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
                let n = norm(&rel);
                let dir = if n > 0.0 { rel.map(|x| x / n) } else { [0.0, 0.0, 1.0] };
                let falloff = 0.5 * (1.0 + (PI * dist(p, &region.anchor) / rho).cos());
                let s = sign * amp * falloff;
                points.push([p[0] + s * dir[0], p[1] + s * dir[1], p[2] + s * dir[2]]);
                labels.push(true);
            }
        }
        DefectKind::NoisePatch => {
            for (p, &hit) in cloud.points().iter().zip(&inside) {
                if hit {
                    points.push(p.map(|x| x + rng.random_range(-amp..=amp)));
                } else {
                    points.push(*p);
                }
                labels.push(hit);
            }
        }
        DefectKind::Hole => {
            let ring = 1.25 * rho;
            for (p, &hit) in cloud.points().iter().zip(&inside) {
                if !hit {
                    points.push(*p);
                    labels.push(dist(p, &region.anchor) <= ring);
                }
            }
            if points.is_empty() {
                return Err(Error::Injection("hole removed every point".into()));
            }
        }
    }
    PointCloud::with_point_labels(points, Label::Anomalous, Some(labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub normal_test: usize,
    pub anomalous_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 20,
            normal_test: 10,
            anomalous_test: 10,
        }
    }
}

/// The six primitives split into three tasks of two categories each.
pub fn default_categories() -> (Vec<CategorySpec>, Vec<Vec<usize>>) {
    let cats = Shape::ALL.into_iter().map(CategorySpec::new).collect();
    (cats, vec![vec![0, 1], vec![2, 3], vec![4, 5]])
}

/// Split `count` categories into `tasks` contiguous, nearly equal groups.
pub fn even_partition(count: usize, tasks: usize) -> Result<Vec<Vec<usize>>> {
    if tasks == 0 || tasks > count {
        return Err(Error::Argument(format!("cannot split {count} categories into {tasks} tasks")));
    }
    let mut out = Vec::with_capacity(tasks);
    let mut start = 0;
    for t in 0..tasks {
        let len = count / tasks + usize::from(t < count % tasks);
        out.push((start..start + len).collect());
        start += len;
    }
    Ok(out)
}

fn sample_seed(seed: u64, category: &str, split: &str, index: usize) -> u64 {
    seed::derive(seed, &[seed::label(category), seed::label(split), index as u64])
}

/// Generate every cloud of a class-incremental stream. Train sets hold only
/// normal clouds of the task's own categories; test sets accumulate.
pub fn build_task_stream(
    categories: &[CategorySpec],
    tasks: &[Vec<usize>],
    sizes: SplitSizes,
    defects: &[DefectSpec],
    seed: u64,
) -> Result<TaskStream> {
    if tasks.is_empty() {
        return Err(Error::Argument("a stream needs at least one task".into()));
    }
    let mut seen = vec![false; categories.len()];
    for (t, task) in tasks.iter().enumerate() {
        if task.is_empty() {
            return Err(Error::Argument(format!("task {t} has no categories")));
        }
        for &c in task {
            if c >= categories.len() {
                return Err(Error::Argument(format!("task {t} names unknown category {c}")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Argument(format!("category {c} appears in more than one task")));
            }
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::Argument(format!("category {c} is not assigned to any task")));
    }
    if sizes.anomalous_test > 0 && defects.is_empty() {
        return Err(Error::Argument("anomalous test clouds requested without defects".into()));
    }
    for c in categories {
        c.validate()?;
    }
    for d in defects {
        d.validate()?;
    }

    let mut out = Vec::with_capacity(tasks.len());
    let mut cumulative: Vec<Arc<Sample>> = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let mut train = Vec::new();
        for &ci in task {
            let cat = &categories[ci];
            for i in 0..sizes.train {
                let s = sample_seed(seed, &cat.name, "train", i);
                train.push(Arc::new(Sample {
                    id: format!("{}_train_{i:03}", cat.name),
                    category: cat.name.clone(),
                    task: t,
                    seed: s,
                    defect: None,
                    cloud: generate_normal(cat, s)?,
                }));
            }
            for i in 0..sizes.normal_test {
                let s = sample_seed(seed, &cat.name, "test-normal", i);
                cumulative.push(Arc::new(Sample {
                    id: format!("{}_good_{i:03}", cat.name),
                    category: cat.name.clone(),
                    task: t,
                    seed: s,
                    defect: None,
                    cloud: generate_normal(cat, s)?,
                }));
            }
            for i in 0..sizes.anomalous_test {
                let s = sample_seed(seed, &cat.name, "test-anomalous", i);
                let defect = defects[i % defects.len()];
                let base = generate_normal(cat, s)?;
                let cloud = inject_with_retries(&base, &defect, s)?;
                cumulative.push(Arc::new(Sample {
                    id: format!("{}_{}_{i:03}", cat.name, defect_name(defect.kind)),
                    category: cat.name.clone(),
                    task: t,
                    seed: s,
                    defect: Some(defect),
                    cloud,
                }));
            }
        }
        out.push(Task {
            id: t,
            categories: task.iter().map(|&c| categories[c].name.clone()).collect(),
            train,
            test: cumulative.clone(),
        });
    }
    Ok(TaskStream::new(out))
}

/// Anchors drawn before giving up on a sparse cloud.
const DEFECT_ATTEMPTS: u64 = 16;

fn inject_with_retries(base: &PointCloud, defect: &DefectSpec, sample_seed: u64) -> Result<PointCloud> {
    let mut last = None;
    for attempt in 0..DEFECT_ATTEMPTS {
        let labels: &[u64] = if attempt == 0 { &[seed::label("defect")] } else { &[seed::label("defect"), attempt] };
        match inject_defect(base, defect, seed::derive(sample_seed, labels)) {
            Err(e @ Error::Injection(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn defect_name(kind: DefectKind) -> &'static str {
    match kind {
        DefectKind::Bump => "bump",
        DefectKind::Dent => "dent",
        DefectKind::Hole => "hole",
        DefectKind::NoisePatch => "noise_patch",
    }
}
