//! Point-cloud container, neighbor graphs, normal estimation and synthetic
//! shape sampling.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;
use crate::vecmath::{dist2, dot3, norm3, sub3, Vec3};

/// Default neighborhood size for normals, curvature and smoothness.
pub const DEFAULT_K: usize = 16;

const UNIT_TOLERANCE: f64 = 1e-6;

/// An ordered list of 3D points with optional unit normals.
///
/// The order only matters as bookkeeping: every metric and the classifier
/// treat the cloud as a set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    /// Builds a cloud from a flat `[x0, y0, z0, x1, ...]` coordinate list.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 3 != 0 {
            return Err(Error::invalid(format!(
                "flat coordinate list has length {}, not a multiple of 3",
                coords.len()
            )));
        }
        Self::new(coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            let len = norm3(n);
            if !len.is_finite() || (len - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(format!("normal {i} has norm {len}, expected 1")));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    /// Coordinates as one flat slice of length `3n`.
    pub fn as_flat(&self) -> &[f64] {
        self.points.as_flattened()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Copy of the cloud restricted to the given indices, normals included.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let mut out = Self::new(points)?;
        if let Some(normals) = &self.normals {
            out.normals = Some(indices.iter().map(|&i| normals[i]).collect());
        }
        Ok(out)
    }
}

/// For every point, the indices of its `k` nearest other points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks_exact(self.k)
    }
}

/// Exhaustive k-nearest-neighbor search, self excluded, ties broken by the
/// lower index.
pub fn knn(cloud: &PointCloud, k: usize) -> Result<NeighborTable> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("knn needs 1 <= k < n, got k={k}, n={n}")));
    }
    let pts = cloud.points();
    let mut indices = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, p) in pts.iter().enumerate() {
        scratch.clear();
        scratch.extend(
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist2(p, q), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(cmp);
        indices.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(NeighborTable { k, indices })
}

/// Result of [`estimate_normals`].
#[derive(Debug, Clone)]
pub struct EstimatedNormals {
    pub cloud: PointCloud,
    /// Points whose neighborhood collapsed to a single location; their normal
    /// is set to `(0, 0, 1)`.
    pub degenerate: Vec<usize>,
}

/// PCA normals: the smallest-eigenvalue eigenvector of each point's
/// neighborhood covariance, oriented away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<EstimatedNormals> {
    if k < 3 {
        return Err(Error::invalid(format!("normal estimation needs k >= 3, got {k}")));
    }
    let nbrs = knn(cloud, k)?;
    Ok(normals_from_table(cloud, &nbrs))
}

pub(crate) fn normals_from_table(cloud: &PointCloud, nbrs: &NeighborTable) -> EstimatedNormals {
    let pts = cloud.points();
    let centroid = cloud.centroid();
    let mut normals = Vec::with_capacity(pts.len());
    let mut degenerate = Vec::new();
    for (i, row) in nbrs.rows().enumerate() {
        let members = || std::iter::once(i).chain(row.iter().copied()).map(|j| &pts[j]);
        let count = (row.len() + 1) as f64;
        let mut mean = [0.0; 3];
        for p in members() {
            for d in 0..3 {
                mean[d] += p[d] / count;
            }
        }
        let mut cov = Matrix3::<f64>::zeros();
        for p in members() {
            let v = sub3(p, &mean);
            for a in 0..3 {
                for b in 0..3 {
                    cov[(a, b)] += v[a] * v[b];
                }
            }
        }
        if cov.trace() < 1e-24 {
            degenerate.push(i);
            normals.push([0.0, 0.0, 1.0]);
            continue;
        }
        let eig = SymmetricEigen::new(cov);
        let mut smallest = 0;
        for c in 1..3 {
            if eig.eigenvalues[c] < eig.eigenvalues[smallest] {
                smallest = c;
            }
        }
        let col = eig.eigenvectors.column(smallest);
        let len = col.norm();
        let mut normal = [col[0] / len, col[1] / len, col[2] / len];
        if dot3(&normal, &sub3(&pts[i], &centroid)) < 0.0 {
            normal = [-normal[0], -normal[1], -normal[2]];
        }
        normals.push(normal);
    }
    EstimatedNormals {
        cloud: PointCloud {
            points: cloud.points.clone(),
            normals: Some(normals),
        },
        degenerate,
    }
}

/// Centers the cloud on its centroid and scales it so the farthest point
/// lies on the unit sphere. Normals are carried over unchanged.
pub fn normalize_unit_ball(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let centered: Vec<Vec3> = cloud.points().iter().map(|p| sub3(p, &c)).collect();
    let radius = centered.iter().map(norm3).fold(0.0, f64::max);
    let points = if radius > 0.0 {
        centered
            .iter()
            .map(|p| [p[0] / radius, p[1] / radius, p[2] / radius])
            .collect()
    } else {
        centered
    };
    PointCloud {
        points,
        normals: cloud.normals.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape kind '{s}'")))
    }
}

// Torus radii in the raw sampling frame.
const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.4;

/// Area-uniform samples on the raw shape surface, before normalization.
///
/// Raw frames: unit sphere; cube `[-1, 1]^3`; cylinder of radius 1 over
/// `z in [-1, 1]` with both caps; torus with radii 1 and 0.4 around the z axis.
pub fn sample_surface(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 8 {
        return Err(Error::invalid(format!("shape sampling needs n >= 8, got {n}")));
    }
    let mut rng = seed::rng(seed, kind as u64);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let p = match kind {
            ShapeKind::Sphere => {
                let v: Vec3 = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let len = norm3(&v);
                if len < 1e-12 {
                    continue;
                }
                [v[0] / len, v[1] / len, v[2] / len]
            }
            ShapeKind::Cube => {
                let face = rng.random_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut p = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0];
                p.swap(2, axis);
                p[axis] = sign;
                p
            }
            ShapeKind::Cylinder => {
                // lateral area 4*pi, each cap pi
                let u: f64 = rng.random_range(0.0..6.0);
                let theta = rng.random_range(0.0..2.0 * PI);
                if u < 4.0 {
                    [theta.cos(), theta.sin(), rng.random_range(-1.0..=1.0)]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    let z = if u < 5.0 { -1.0 } else { 1.0 };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            ShapeKind::Torus => {
                let theta = rng.random_range(0.0..2.0 * PI);
                let phi = rng.random_range(0.0..2.0 * PI);
                let w = rng.random_range(0.0..1.0);
                let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
                if w > ring / (TORUS_MAJOR + TORUS_MINOR) {
                    continue;
                }
                [ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * phi.sin()]
            }
        };
        points.push(p);
    }
    PointCloud::new(points)
}

/// Samples `n` surface points of the named shape and rescales them into the
/// unit ball. Deterministic per seed.
pub fn sample_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    Ok(normalize_unit_ball(&sample_surface(kind, n, seed)?))
}
