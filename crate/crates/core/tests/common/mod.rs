//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use pcadv::classifier::ClassifierParams;
use pcadv::geometry::{sample_shape, PointCloud, ShapeKind};
use pcadv::metrics::MetricId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type V3 = [f64; 3];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut impl Rng, n: usize) -> Vec<V3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new(random_points(rng, n)).unwrap()
}

pub fn jitter(rng: &mut impl Rng, cloud: &PointCloud, sigma: f64) -> PointCloud {
    let pts = cloud
        .points()
        .iter()
        .map(|p| {
            [
                p[0] + sigma * rng.random_range(-1.0..1.0),
                p[1] + sigma * rng.random_range(-1.0..1.0),
                p[2] + sigma * rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

pub fn d2(a: &V3, b: &V3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// All-pairs sort, ties by index.
pub fn brute_knn(pts: &[V3], k: usize) -> Vec<Vec<usize>> {
    (0..pts.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| (d2(&pts[i], &pts[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|p| p.1).collect()
        })
        .collect()
}

/// Nearest clean index for every adversarial point, ties by index.
pub fn brute_nearest(x: &[V3], y: &[V3]) -> Vec<(usize, f64)> {
    y.iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (i, p) in x.iter().enumerate() {
                let d = d2(p, q);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        })
        .collect()
}

pub fn scalar_kappa(pts: &[V3], normal: &V3, i: usize, nbrs: &[usize]) -> f64 {
    let mut total = 0.0;
    for &j in nbrs {
        let u = [pts[j][0] - pts[i][0], pts[j][1] - pts[i][1], pts[j][2] - pts[i][2]];
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if r >= 1e-12 {
            total += ((u[0] * normal[0] + u[1] * normal[1] + u[2] * normal[2]) / r).abs();
        }
    }
    total / nbrs.len() as f64
}

/// Discrete choices of a metric, fixed at one adversarial iterate.
pub struct Frozen {
    pub nearest: Vec<usize>,
    pub worst: usize,
    pub y_nbrs: Vec<Vec<usize>>,
    pub y_normals: Vec<V3>,
    pub clean_kappa: Vec<f64>,
}

pub fn freeze(x: &PointCloud, y: &PointCloud, k: usize) -> Frozen {
    let xp = x.points();
    let yp = y.points();
    let nn = brute_nearest(xp, yp);
    let mut worst = 0;
    for (j, &(_, d)) in nn.iter().enumerate() {
        if d > nn[worst].1 {
            worst = j;
        }
    }
    let x_nbrs = brute_knn(xp, k);
    let xn = x.normals().expect("clean normals");
    let clean_kappa = (0..xp.len()).map(|i| scalar_kappa(xp, &xn[i], i, &x_nbrs[i])).collect();
    let y_normals = pcadv::geometry::estimate_normals(y, k)
        .unwrap()
        .cloud
        .normals()
        .unwrap()
        .to_vec();
    Frozen {
        nearest: nn.iter().map(|p| p.0).collect(),
        worst,
        y_nbrs: brute_knn(yp, k),
        y_normals,
        clean_kappa,
    }
}

fn rows(flat: &[f64]) -> Vec<V3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Value of the frozen surrogate of `id` at the flat coordinates `y`.
pub fn frozen_value(id: MetricId, x: &PointCloud, f: &Frozen, y: &[f64]) -> f64 {
    let yp = rows(y);
    let xp = x.points();
    let n = yp.len() as f64;
    match id {
        MetricId::L2 => xp.iter().zip(&yp).map(|(a, b)| d2(a, b)).sum::<f64>().sqrt(),
        MetricId::Cd => yp.iter().enumerate().map(|(j, q)| d2(&xp[f.nearest[j]], q)).sum::<f64>() / n,
        MetricId::Hd => d2(&xp[f.nearest[f.worst]], &yp[f.worst]),
        MetricId::Curv => {
            (0..yp.len())
                .map(|j| {
                    let ky = scalar_kappa(&yp, &f.y_normals[j], j, &f.y_nbrs[j]);
                    (ky - f.clean_kappa[f.nearest[j]]).powi(2)
                })
                .sum::<f64>()
                / n
        }
        MetricId::Smooth => unreachable!("no gradient"),
    }
}

/// Smallest `|<u, n>| / |u|` over the frozen neighborhood terms; FD checks
/// are meaningless when this is near zero because of the absolute value.
pub fn min_curv_cosine(y: &[f64], f: &Frozen) -> f64 {
    let yp = rows(y);
    let mut m = f64::INFINITY;
    for (i, nb) in f.y_nbrs.iter().enumerate() {
        for &j in nb {
            let u = [yp[j][0] - yp[i][0], yp[j][1] - yp[i][1], yp[j][2] - yp[i][2]];
            let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            let n = &f.y_normals[i];
            m = m.min(((u[0] * n[0] + u[1] * n[1] + u[2] * n[2]) / r).abs());
        }
    }
    m
}

pub fn central_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error below `1e-4` per component, absolute below `1e-8` for
/// components of magnitude under `1e-8`.
pub fn check_gradient(analytic: &[f64], fd: &[f64]) -> Result<(), String> {
    for (i, (a, b)) in analytic.iter().zip(fd).enumerate() {
        let scale = a.abs().max(b.abs());
        let ok = if scale < 1e-8 {
            (a - b).abs() < 1e-8
        } else {
            (a - b).abs() / scale < 1e-4
        };
        if !ok {
            return Err(format!("component {i}: analytic {a}, finite difference {b}"));
        }
    }
    Ok(())
}

/// Loop-based forward pass. `pool` overrides the max-pool indices.
pub struct ScalarForward {
    pub logits: Vec<f64>,
    pub argmax: Vec<usize>,
}

pub fn scalar_forward(p: &ClassifierParams, pts: &[V3], pool: Option<&[usize]>) -> ScalarForward {
    let [l1, l2, l3, l4] = p.layers();
    let dense = |layer: &pcadv::classifier::Dense, input: &[f64], act: bool| -> Vec<f64> {
        (0..layer.outputs)
            .map(|o| {
                let mut s = layer.bias[o];
                for i in 0..layer.inputs {
                    s += layer.weight[o * layer.inputs + i] * input[i];
                }
                if act {
                    s.tanh()
                } else {
                    s
                }
            })
            .collect()
    };
    let feats: Vec<Vec<f64>> = pts
        .iter()
        .map(|q| dense(l2, &dense(l1, q, true), true))
        .collect();
    let width = l2.outputs;
    let mut argmax = vec![0; width];
    let mut pooled = vec![0.0; width];
    for c in 0..width {
        let mut best = 0;
        for (i, f) in feats.iter().enumerate() {
            if f[c] > feats[best][c] {
                best = i;
            }
        }
        let chosen = pool.map_or(best, |fixed| fixed[c]);
        argmax[c] = best;
        pooled[c] = feats[chosen][c];
    }
    let logits = dense(l4, &dense(l3, &pooled, true), false);
    ScalarForward { logits, argmax }
}

/// Margin with the rival class chosen at lowest index on ties, or fixed.
pub fn scalar_margin(logits: &[f64], t: usize, rival: Option<usize>) -> (f64, usize) {
    let r = rival.unwrap_or_else(|| {
        let mut best: Option<usize> = None;
        for (k, v) in logits.iter().enumerate() {
            if k != t && best.is_none_or(|b| *v > logits[b]) {
                best = Some(k);
            }
        }
        best.unwrap()
    });
    (logits[t] - logits[r], r)
}

/// `per_class` clouds of each shape in [`ShapeKind::ALL`] order.
pub fn toy_set(per_class: usize, points: usize, seed: u64) -> Vec<(PointCloud, usize)> {
    let mut out = Vec::new();
    for (label, kind) in ShapeKind::ALL.iter().enumerate() {
        for i in 0..per_class {
            let s = seed.wrapping_mul(1_000_003).wrapping_add((label * per_class + i) as u64);
            out.push((sample_shape(*kind, points, s).unwrap(), label));
        }
    }
    out
}
