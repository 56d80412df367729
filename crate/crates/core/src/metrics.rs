//! Imperceptibility metrics between a clean cloud `X` and an adversarial
//! cloud `Y`, plus their gradients with respect to `Y`.
//!
//! Chamfer, Hausdorff and curvature consistency contain `min`/`argmax`
//! choices. Gradients are taken of the *frozen surrogate*: nearest-neighbor
//! correspondences, the Hausdorff argmax, and the neighbor sets and normals
//! of `Y` are fixed at the current `Y`, and the resulting smooth function is
//! differentiated exactly.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{knn, normals_from_table, NeighborTable, PointCloud};
use crate::vecmath::{dist2, dot3, norm3, sub3, Vec3};

/// Default threshold multiplier for KNN smoothness.
pub const DEFAULT_SMOOTH_GAMMA: f64 = 1.05;

const COINCIDENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricId {
    L2,
    Cd,
    Hd,
    Curv,
    Smooth,
}

impl MetricId {
    pub const ALL: [MetricId; 5] = [
        MetricId::L2,
        MetricId::Cd,
        MetricId::Hd,
        MetricId::Curv,
        MetricId::Smooth,
    ];

    pub const REGULARIZERS: [MetricId; 4] = [MetricId::L2, MetricId::Cd, MetricId::Hd, MetricId::Curv];

    pub fn name(self) -> &'static str {
        match self {
            MetricId::L2 => "l2",
            MetricId::Cd => "cd",
            MetricId::Hd => "hd",
            MetricId::Curv => "curv",
            MetricId::Smooth => "smooth",
        }
    }

    /// Smooth is an evaluation-only score and has no gradient.
    pub fn is_regularizer(self) -> bool {
        self != MetricId::Smooth
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        MetricId::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| Error::invalid(format!("unknown metric '{s}'")))
    }
}

/// Parses a comma-separated regularizer list such as `l2,cd,hd`.
///
/// Duplicates are rejected, as is `smooth`, which is evaluation-only.
pub fn parse_regularizers(list: &str) -> Result<Vec<MetricId>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let id: MetricId = part.parse()?;
        if !id.is_regularizer() {
            return Err(Error::UnsupportedMetric(
                "smooth is an evaluation-only metric and cannot be used as a regularizer".into(),
            ));
        }
        if out.contains(&id) {
            return Err(Error::invalid(format!("regularizer '{id}' listed twice")));
        }
        out.push(id);
    }
    if out.is_empty() {
        return Err(Error::invalid("regularizer list is empty"));
    }
    Ok(out)
}

/// Per-point gradient of a metric with respect to the adversarial cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    rows: Vec<Vec3>,
    note: String,
}

impl GradientField {
    pub fn new(rows: Vec<Vec3>, note: impl Into<String>) -> Self {
        Self {
            rows,
            note: note.into(),
        }
    }

    pub fn zeros(n: usize, note: impl Into<String>) -> Self {
        Self::new(vec![[0.0; 3]; n], note)
    }

    pub fn from_flat(flat: &[f64], note: impl Into<String>) -> Self {
        Self::new(
            flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            note,
        )
    }

    pub fn rows(&self) -> &[Vec3] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Vec3] {
        &mut self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        self.rows.as_flattened()
    }

    /// Which discrete choices were held fixed when this field was computed.
    pub fn note(&self) -> &str {
        &self.note
    }

    pub fn norm(&self) -> f64 {
        crate::vecmath::norm(self.as_flat())
    }
}

/// All five metric values for one adversarial cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValues {
    pub l2: f64,
    pub cd: f64,
    pub hd: f64,
    pub curv: f64,
    pub smooth: f64,
}

impl MetricValues {
    pub fn get(&self, id: MetricId) -> f64 {
        match id {
            MetricId::L2 => self.l2,
            MetricId::Cd => self.cd,
            MetricId::Hd => self.hd,
            MetricId::Curv => self.curv,
            MetricId::Smooth => self.smooth,
        }
    }
}

fn check_nonempty(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("metric needs nonempty clouds"));
    }
    Ok(())
}

/// Flat-vector Euclidean distance between corresponding points.
pub fn l2_distance(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "L2 distance needs equal sizes, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.points()
        .iter()
        .zip(y.points())
        .map(|(a, b)| dist2(a, b))
        .sum::<f64>()
        .sqrt())
}

/// For each adversarial point, its nearest clean point and the squared
/// distance to it. Ties go to the lower clean index.
pub fn nearest_clean(x: &PointCloud, y: &PointCloud) -> Vec<(usize, f64)> {
    y.points()
        .iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (i, p) in x.points().iter().enumerate() {
                let d = dist2(p, q);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        })
        .collect()
}

/// Mean squared distance from each adversarial point to its nearest clean
/// point.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    check_nonempty(x, y)?;
    let corr = nearest_clean(x, y);
    Ok(corr.iter().map(|c| c.1).sum::<f64>() / y.len() as f64)
}

/// Largest squared distance from an adversarial point to its nearest clean
/// point.
pub fn hausdorff(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    check_nonempty(x, y)?;
    Ok(nearest_clean(x, y).iter().map(|c| c.1).fold(0.0, f64::max))
}

/// Local curvature statistic: mean absolute cosine between the normal at
/// point `i` and the directions to its neighbors.
pub fn curvature_kappa(i: usize, cloud: &PointCloud, nbrs: &NeighborTable) -> Result<f64> {
    let normals = cloud
        .normals()
        .ok_or_else(|| Error::invalid("curvature needs normals"))?;
    if nbrs.len() != cloud.len() {
        return Err(Error::invalid("neighbor table does not match cloud"));
    }
    Ok(kappa(cloud.points(), &normals[i], i, nbrs.neighbors(i)))
}

fn kappa(points: &[Vec3], normal: &Vec3, i: usize, nbrs: &[usize]) -> f64 {
    let xi = &points[i];
    let sum: f64 = nbrs
        .iter()
        .map(|&j| {
            let u = sub3(&points[j], xi);
            let r = norm3(&u);
            if r < COINCIDENT {
                0.0
            } else {
                (dot3(&u, normal) / r).abs()
            }
        })
        .sum();
    sum / nbrs.len() as f64
}

/// Curvature statistics of a clean cloud, computed once and reused across
/// many adversarial candidates.
#[derive(Debug, Clone)]
pub struct CurvatureReference {
    k: usize,
    clean: PointCloud,
    kappa: Vec<f64>,
}

/// Frozen curvature state of one adversarial cloud.
struct CurvatureState {
    corr: Vec<(usize, f64)>,
    nbrs: NeighborTable,
    normals: Vec<Vec3>,
    kappa: Vec<f64>,
}

impl CurvatureReference {
    /// `clean` must carry normals.
    pub fn new(clean: &PointCloud, k: usize) -> Result<Self> {
        let normals = clean
            .normals()
            .ok_or_else(|| Error::invalid("curvature consistency needs normals on the clean cloud"))?;
        if clean.len() < k + 1 {
            return Err(Error::invalid(format!(
                "curvature consistency needs at least k+1={} points, got {}",
                k + 1,
                clean.len()
            )));
        }
        let nbrs = knn(clean, k)?;
        let kappa = (0..clean.len())
            .map(|i| kappa(clean.points(), &normals[i], i, nbrs.neighbors(i)))
            .collect();
        Ok(Self {
            k,
            clean: clean.clone(),
            kappa,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn clean_kappa(&self) -> &[f64] {
        &self.kappa
    }

    fn state(&self, y: &PointCloud) -> Result<CurvatureState> {
        if y.len() < self.k + 1 {
            return Err(Error::invalid(format!(
                "curvature consistency needs at least k+1={} adversarial points, got {}",
                self.k + 1,
                y.len()
            )));
        }
        let corr = nearest_clean(&self.clean, y);
        let nbrs = knn(y, self.k)?;
        let est = normals_from_table(y, &nbrs);
        let clean_normals = self.clean.normals().expect("checked in new");
        let mut normals = est.cloud.normals().expect("estimated").to_vec();
        for (n, &(i, _)) in normals.iter_mut().zip(&corr) {
            if dot3(n, &clean_normals[i]) < 0.0 {
                *n = [-n[0], -n[1], -n[2]];
            }
        }
        let kappa = (0..y.len())
            .map(|j| kappa(y.points(), &normals[j], j, nbrs.neighbors(j)))
            .collect();
        Ok(CurvatureState {
            corr,
            nbrs,
            normals,
            kappa,
        })
    }

    pub fn consistency(&self, y: &PointCloud) -> Result<f64> {
        let st = self.state(y)?;
        let sum: f64 = st
            .kappa
            .iter()
            .zip(&st.corr)
            .map(|(ky, &(i, _))| (ky - self.kappa[i]).powi(2))
            .sum();
        Ok(sum / y.len() as f64)
    }

    /// Gradient of the frozen surrogate: correspondences, neighbor sets and
    /// normals of `y` are held at their current values.
    pub fn gradient(&self, y: &PointCloud) -> Result<GradientField> {
        let st = self.state(y)?;
        let n = y.len() as f64;
        let k = self.k as f64;
        let pts = y.points();
        let mut rows = vec![[0.0; 3]; y.len()];
        for j in 0..y.len() {
            let coef = 2.0 / n * (st.kappa[j] - self.kappa[st.corr[j].0]) / k;
            if coef == 0.0 {
                continue;
            }
            let normal = &st.normals[j];
            for &l in st.nbrs.neighbors(j) {
                let u = sub3(&pts[l], &pts[j]);
                let r = norm3(&u);
                if r < COINCIDENT {
                    continue;
                }
                let a = dot3(&u, normal) / r;
                let s = if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for d in 0..3 {
                    let g = coef * s * (normal[d] - a * u[d] / r) / r;
                    rows[l][d] += g;
                    rows[j][d] -= g;
                }
            }
        }
        Ok(GradientField::new(
            rows,
            "curv: correspondences, knn sets and normals of Y frozen",
        ))
    }
}

/// Mean squared difference between the curvature statistic at each
/// adversarial point and at its nearest clean point. Normals of `y` are
/// re-estimated with the same `k` and sign-aligned to the clean normals.
pub fn curvature_consistency(x: &PointCloud, y: &PointCloud, k: usize) -> Result<f64> {
    CurvatureReference::new(x, k)?.consistency(y)
}

/// KNN smoothness: mean of the per-point neighborhood mean squared distances
/// that exceed `mu + gamma * sigma` (population standard deviation).
pub fn knn_smoothness(y: &PointCloud, k: usize, gamma: f64) -> Result<f64> {
    let nbrs = knn(y, k)?;
    let pts = y.points();
    let d: Vec<f64> = nbrs
        .rows()
        .enumerate()
        .map(|(i, row)| row.iter().map(|&j| dist2(&pts[i], &pts[j])).sum::<f64>() / k as f64)
        .collect();
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let sigma = (d.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mu + gamma * sigma;
    Ok(d.iter().filter(|&&v| v > threshold).sum::<f64>() / n)
}

fn l2_gradient(x: &PointCloud, y: &PointCloud) -> Result<GradientField> {
    let dist = l2_distance(x, y)?;
    if dist == 0.0 {
        return Ok(GradientField::zeros(y.len(), "l2: zero at minimum"));
    }
    let rows = x
        .points()
        .iter()
        .zip(y.points())
        .map(|(a, b)| {
            let d = sub3(b, a);
            [d[0] / dist, d[1] / dist, d[2] / dist]
        })
        .collect();
    Ok(GradientField::new(rows, "l2: exact"))
}

fn chamfer_gradient(x: &PointCloud, y: &PointCloud) -> Result<GradientField> {
    check_nonempty(x, y)?;
    let scale = 2.0 / y.len() as f64;
    let rows = nearest_clean(x, y)
        .iter()
        .zip(y.points())
        .map(|(&(i, _), q)| {
            let d = sub3(q, x.point(i));
            [scale * d[0], scale * d[1], scale * d[2]]
        })
        .collect();
    Ok(GradientField::new(rows, "cd: nearest-clean correspondences frozen"))
}

fn hausdorff_gradient(x: &PointCloud, y: &PointCloud) -> Result<GradientField> {
    check_nonempty(x, y)?;
    let corr = nearest_clean(x, y);
    let mut arg = 0;
    for (j, c) in corr.iter().enumerate() {
        if c.1 > corr[arg].1 {
            arg = j;
        }
    }
    let mut field = GradientField::zeros(y.len(), "hd: argmax point and its correspondence frozen");
    let d = sub3(y.point(arg), x.point(corr[arg].0));
    field.rows[arg] = [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]];
    Ok(field)
}

/// Gradient with respect to `y` of the frozen surrogate of the given metric.
///
/// `k` is only used by `Curv`, which also needs normals on `x`.
pub fn metric_gradient(id: MetricId, x: &PointCloud, y: &PointCloud, k: usize) -> Result<GradientField> {
    match id {
        MetricId::L2 => l2_gradient(x, y),
        MetricId::Cd => chamfer_gradient(x, y),
        MetricId::Hd => hausdorff_gradient(x, y),
        MetricId::Curv => CurvatureReference::new(x, k)?.gradient(y),
        MetricId::Smooth => Err(Error::UnsupportedMetric(
            "smooth is evaluation-only and has no gradient".into(),
        )),
    }
}

/// Everything needed to evaluate metrics against one clean cloud repeatedly.
#[derive(Debug, Clone)]
pub struct DistanceContext {
    clean: PointCloud,
    curvature: CurvatureReference,
    smooth_gamma: f64,
}

impl DistanceContext {
    /// Normals are estimated on `clean` with the same `k` when it has none.
    pub fn new(clean: &PointCloud, k: usize) -> Result<Self> {
        let clean = match clean.normals() {
            Some(_) => clean.clone(),
            None => crate::geometry::estimate_normals(clean, k)?.cloud,
        };
        Ok(Self {
            curvature: CurvatureReference::new(&clean, k)?,
            clean,
            smooth_gamma: DEFAULT_SMOOTH_GAMMA,
        })
    }

    pub fn with_smooth_gamma(mut self, gamma: f64) -> Self {
        self.smooth_gamma = gamma;
        self
    }

    pub fn clean(&self) -> &PointCloud {
        &self.clean
    }

    pub fn k(&self) -> usize {
        self.curvature.k
    }

    pub fn value(&self, id: MetricId, y: &PointCloud) -> Result<f64> {
        match id {
            MetricId::L2 => l2_distance(&self.clean, y),
            MetricId::Cd => chamfer(&self.clean, y),
            MetricId::Hd => hausdorff(&self.clean, y),
            MetricId::Curv => self.curvature.consistency(y),
            MetricId::Smooth => knn_smoothness(y, self.k(), self.smooth_gamma),
        }
    }

    pub fn sum(&self, ids: &[MetricId], y: &PointCloud) -> Result<f64> {
        ids.iter().map(|&id| self.value(id, y)).sum()
    }

    pub fn gradient(&self, id: MetricId, y: &PointCloud) -> Result<GradientField> {
        match id {
            MetricId::Curv => self.curvature.gradient(y),
            other => metric_gradient(other, &self.clean, y, self.k()),
        }
    }

    pub fn all(&self, y: &PointCloud) -> Result<MetricValues> {
        Ok(MetricValues {
            l2: self.value(MetricId::L2, y)?,
            cd: self.value(MetricId::Cd, y)?,
            hd: self.value(MetricId::Hd, y)?,
            curv: self.value(MetricId::Curv, y)?,
            smooth: self.value(MetricId::Smooth, y)?,
        })
    }
}
