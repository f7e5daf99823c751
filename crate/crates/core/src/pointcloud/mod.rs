//! Point clouds: representation, normalization, farthest-point sampling and
//! adaptive-radius neighborhood grouping.

mod io;

pub use io::{read_cloud, write_cloud, CloudFormat};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[default]
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub label: Label,
    point_labels: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Label) -> Result<Self> {
        Self::with_point_labels(points, label, None)
    }

    pub fn with_point_labels(
        points: Vec<Point>,
        label: Label,
        point_labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud must contain at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Argument(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(pl) = &point_labels {
            if pl.len() != points.len() {
                return Err(Error::Argument(format!(
                    "{} point labels for {} points",
                    pl.len(),
                    points.len()
                )));
            }
        }
        Ok(Self {
            points,
            label,
            point_labels,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point_labels(&self) -> Option<&[bool]> {
        self.point_labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Apply `p -> (p - shift) * scale` to every point, keeping labels.
    pub fn map_similarity(&self, shift: Point, scale: f64) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| [(p[0] - shift[0]) * scale, (p[1] - shift[1]) * scale, (p[2] - shift[2]) * scale])
            .collect();
        PointCloud {
            points,
            label: self.label,
            point_labels: self.point_labels.clone(),
        }
    }

    pub fn into_parts(self) -> (Vec<Point>, Label, Option<Vec<bool>>) {
        (self.points, self.label, self.point_labels)
    }
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

#[inline]
pub fn norm(a: &Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Translate the centroid to the origin and scale so the farthest point has
/// unit norm.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let c = cloud.centroid();
    let max_norm = cloud
        .points
        .iter()
        .map(|p| dist(p, &c))
        .fold(0.0f64, f64::max);
    let magnitude = c.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
    if !(max_norm > 1e-12 * magnitude) {
        return Err(Error::DegenerateScale(format!(
            "all {} points coincide; cannot normalize",
            cloud.len()
        )));
    }
    Ok(cloud.map_similarity(c, 1.0 / max_norm))
}

/// Farthest-point sampling. The first center is a seeded uniform draw; every
/// later center maximizes its distance to the already-selected set, with ties
/// resolved toward the lower index. Returns indices into the cloud.
pub fn fps_indices(cloud: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    check_fps_count(cloud.len(), n)?;
    let first = seed::rng(seed).random_range(0..cloud.len());
    Ok(fps_from(cloud.points(), n, first))
}

pub fn fps_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<Vec<Point>> {
    let idx = fps_indices(cloud, n, seed)?;
    Ok(idx.into_iter().map(|i| cloud.points[i]).collect())
}

fn check_fps_count(len: usize, n: usize) -> Result<()> {
    if n > len {
        return Err(Error::Argument(format!(
            "cannot sample {n} centers from {len} points"
        )));
    }
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 centers, got {n}")));
    }
    Ok(())
}

/// FPS with an explicit first pick.
pub fn fps_from(points: &[Point], n: usize, first: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = first;
    for _ in 0..n {
        chosen.push(current);
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        current = best.1;
    }
    chosen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    /// One radius per center, averaging that center's distances to all centers.
    #[default]
    PerCenter,
    /// Every center gets the mean of the per-center radii.
    GlobalMean,
}

/// Adaptive neighborhood radii: `r_i = eta / n * sum_j |c_i - c_j|`, the
/// zero self-distance included in the mean.
pub fn adaptive_radius(centers: &[Point], eta: f64) -> Vec<f64> {
    let n = centers.len() as f64;
    centers
        .iter()
        .map(|ci| eta / n * centers.iter().map(|cj| dist(ci, cj)).sum::<f64>())
        .collect()
}

pub fn adaptive_radius_with(centers: &[Point], eta: f64, mode: RadiusMode) -> Vec<f64> {
    let radii = adaptive_radius(centers, eta);
    match mode {
        RadiusMode::PerCenter => radii,
        RadiusMode::GlobalMean => {
            let mean = radii.iter().sum::<f64>() / radii.len().max(1) as f64;
            vec![mean; radii.len()]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupingWarning {
    pub center: usize,
    pub radius: f64,
    pub reason: &'static str,
}

/// `n` fixed-size neighborhoods, each stored relative to its center.
#[derive(Debug, Clone)]
pub struct GroupedCloud {
    pub centers: Vec<Point>,
    pub radii: Vec<f64>,
    pub group_size: usize,
    /// `n * group_size` center-relative points, group-major.
    pub points: Vec<Point>,
    /// `true` where the group came from the nearest-neighbor fallback.
    pub fallback: Vec<bool>,
    pub warnings: Vec<GroupingWarning>,
}

impl GroupedCloud {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn group(&self, i: usize) -> &[Point] {
        &self.points[i * self.group_size..(i + 1) * self.group_size]
    }

    /// Reorder groups (and their centers, radii and flags) by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> GroupedCloud {
        let mut points = Vec::with_capacity(self.points.len());
        for &i in perm {
            points.extend_from_slice(self.group(i));
        }
        GroupedCloud {
            centers: perm.iter().map(|&i| self.centers[i]).collect(),
            radii: perm.iter().map(|&i| self.radii[i]).collect(),
            group_size: self.group_size,
            points,
            fallback: perm.iter().map(|&i| self.fallback[i]).collect(),
            warnings: Vec::new(),
        }
    }
}

/// Gather each center's neighbors within its radius into a group of exactly
/// `g` points: the `g` nearest if more qualify (ties by input index), cyclic
/// repetition of the nearest members if fewer. A zero radius, or a radius that
/// captures nothing, falls back to plain `g`-nearest grouping and records a
/// warning.
pub fn group_points(
    cloud: &PointCloud,
    centers: &[Point],
    radii: &[f64],
    g: usize,
) -> Result<GroupedCloud> {
    if g == 0 {
        return Err(Error::Argument("group size must be at least 1".into()));
    }
    if centers.len() != radii.len() {
        return Err(Error::Argument(format!(
            "{} centers but {} radii",
            centers.len(),
            radii.len()
        )));
    }
    let pts = cloud.points();
    let c = cloud.centroid();
    let diameter = 2.0 * pts.iter().map(|p| dist(p, &c)).fold(0.0f64, f64::max);
    let tol = 1e-9 * diameter;

    let mut points = Vec::with_capacity(centers.len() * g);
    let mut fallback = Vec::with_capacity(centers.len());
    let mut warnings = Vec::new();
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(pts.len());

    for (ci, (center, &r)) in centers.iter().zip(radii).enumerate() {
        scratch.clear();
        scratch.extend(pts.iter().enumerate().map(|(i, p)| (dist(p, center), i)));
        let in_radius = if r > 0.0 {
            let lim = r + tol;
            scratch.iter().filter(|(d, _)| *d <= lim).count()
        } else {
            0
        };

        let members: Vec<usize> = if in_radius == 0 {
            let reason = if r > 0.0 { "empty neighborhood" } else { "zero radius" };
            warn!("grouping fallback: center={ci} radius={r} reason=\"{reason}\" mode=knn g={g}");
            warnings.push(GroupingWarning {
                center: ci,
                radius: r,
                reason,
            });
            fallback.push(true);
            nearest(&mut scratch, g)
        } else {
            fallback.push(false);
            let lim = r + tol;
            scratch.retain(|(d, _)| *d <= lim);
            nearest(&mut scratch, g)
        };

        for k in 0..g {
            let p = pts[members[k % members.len()]];
            points.push([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        }
    }

    Ok(GroupedCloud {
        centers: centers.to_vec(),
        radii: radii.to_vec(),
        group_size: g,
        points,
        fallback,
        warnings,
    })
}

/// The (at most) `k` entries of `cands` closest to the center, sorted by
/// (distance, index).
fn nearest(cands: &mut [(f64, usize)], k: usize) -> Vec<usize> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let take = k.min(cands.len());
    if take < cands.len() {
        cands.select_nth_unstable_by(take, cmp);
    }
    let head = &mut cands[..take];
    head.sort_unstable_by(cmp);
    head.iter().map(|&(_, i)| i).collect()
}

/// Full grouping pipeline used for training and scoring: normalize, sample
/// centers, compute radii, group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    pub centers: usize,
    pub group_size: usize,
    pub eta: f64,
    pub radius_mode: RadiusMode,
}

pub fn prepare_groups(cloud: &PointCloud, params: &GroupingParams, seed: u64) -> Result<GroupedCloud> {
    let normalized = normalize_cloud(cloud)?;
    let n = params.centers.min(normalized.len());
    let centers = fps_sample(&normalized, n, seed)?;
    let radii = adaptive_radius_with(&centers, params.eta, params.radius_mode);
    group_points(&normalized, &centers, &radii, params.group_size)
}
