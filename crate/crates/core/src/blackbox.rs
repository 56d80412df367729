//! Query-based black-box variant of the attack.
//!
//! Points are expressed in per-point tangent frames (first two axes span the
//! tangent plane, third axis is the normal). A surrogate model supplies one
//! gradient in that frame; its tangent-plane magnitude ranks the points.
//! Each ranked point is probed with a tangent step of `+-eps1` against the
//! label-only target. After the first misclassification a Gram-Schmidt
//! refinement with step `eps2` reduces the regularizers, keeping the best
//! adversarial candidate.

use std::time::Instant;

use crate::attack::{
    cosine_diagnostics, gram_schmidt, AttackResult, BestUpdate, Phase, TraceEntry, WhiteBoxModel,
};
use crate::classifier::ClassifierParams;
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals, PointCloud, DEFAULT_K};
use crate::metrics::{DistanceContext, GradientField, MetricId};
use crate::vecmath::{dot3, norm3, sub3, Vec3};

/// A classifier that only reveals its predicted label.
pub trait LabelOracle: Sync {
    fn label(&self, cloud: &PointCloud) -> usize;
}

impl LabelOracle for ClassifierParams {
    fn label(&self, cloud: &PointCloud) -> usize {
        self.predict(cloud)
    }
}

/// Adapts a closure into a [`LabelOracle`].
pub struct FnOracle<F>(pub F);

impl<F: Fn(&PointCloud) -> usize + Sync> LabelOracle for FnOracle<F> {
    fn label(&self, cloud: &PointCloud) -> usize {
        (self.0)(cloud)
    }
}

/// Per-point orthonormal frames `[e1, e2, normal]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    frames: Vec<[Vec3; 3]>,
}

/// Tangent frame for a unit normal. The first axis is the global x axis
/// projected onto the tangent plane, or the y axis when x is nearly parallel
/// to the normal; the second is `normal x e1`.
pub fn tangent_frame(normal: &Vec3) -> [Vec3; 3] {
    let project = |axis: Vec3| {
        let d = dot3(&axis, normal);
        [axis[0] - d * normal[0], axis[1] - d * normal[1], axis[2] - d * normal[2]]
    };
    let mut e1 = project([1.0, 0.0, 0.0]);
    if norm3(&e1) < 1e-6 {
        e1 = project([0.0, 1.0, 0.0]);
    }
    let len = norm3(&e1);
    let e1 = [e1[0] / len, e1[1] / len, e1[2] / len];
    let n = normal;
    let e2 = [
        n[1] * e1[2] - n[2] * e1[1],
        n[2] * e1[0] - n[0] * e1[2],
        n[0] * e1[1] - n[1] * e1[0],
    ];
    [e1, e2, *normal]
}

impl FrameRecord {
    pub fn frames(&self) -> &[[Vec3; 3]] {
        &self.frames
    }

    fn local(frame: &[Vec3; 3], v: &Vec3) -> Vec3 {
        [dot3(&frame[0], v), dot3(&frame[1], v), dot3(&frame[2], v)]
    }

    fn global(frame: &[Vec3; 3], v: &Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for (axis, c) in frame.iter().zip(v) {
            for d in 0..3 {
                out[d] += c * axis[d];
            }
        }
        out
    }

    /// Expresses a global-frame field in the per-point frames.
    pub fn field_to_local(&self, field: &GradientField) -> GradientField {
        let rows = self
            .frames
            .iter()
            .zip(field.rows())
            .map(|(f, r)| Self::local(f, r))
            .collect();
        GradientField::new(rows, field.note())
    }
}

/// Rewrites every point in its own tangent frame.
pub fn rsi_transform(cloud: &PointCloud) -> Result<(PointCloud, FrameRecord)> {
    let normals = cloud
        .normals()
        .ok_or_else(|| Error::invalid("tangent-frame transform needs normals"))?;
    let frames: Vec<[Vec3; 3]> = normals.iter().map(tangent_frame).collect();
    let local = frames
        .iter()
        .zip(cloud.points())
        .map(|(f, p)| FrameRecord::local(f, p))
        .collect();
    Ok((PointCloud::new(local)?, FrameRecord { frames }))
}

/// Undoes [`rsi_transform`].
pub fn rsi_inverse(local: &PointCloud, record: &FrameRecord) -> Result<PointCloud> {
    inverse_flat(local.as_flat(), record)
}

fn inverse_flat(local: &[f64], record: &FrameRecord) -> Result<PointCloud> {
    if local.len() != 3 * record.frames.len() {
        return Err(Error::invalid("frame record does not match the cloud size"));
    }
    let pts = record
        .frames
        .iter()
        .zip(local.chunks_exact(3))
        .map(|(f, c)| FrameRecord::global(f, &[c[0], c[1], c[2]]))
        .collect();
    PointCloud::new(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityEntry {
    pub index: usize,
    /// Tangent-plane gradient magnitude.
    pub score: f64,
}

/// Points ranked by tangent-plane gradient magnitude, descending, lower
/// index first on ties.
pub fn sensitivity_map(local_gradient: &GradientField) -> Vec<SensitivityEntry> {
    let mut entries: Vec<SensitivityEntry> = local_gradient
        .rows()
        .iter()
        .enumerate()
        .map(|(index, g)| SensitivityEntry {
            index,
            score: (g[0] * g[0] + g[1] * g[1]).sqrt(),
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    entries
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackboxConfig {
    /// Probe step while searching for a misclassification.
    pub step_probe: f64,
    /// Step of the refinement after the first misclassification.
    pub step_refine: f64,
    pub regularizers: Vec<MetricId>,
    /// Maximum number of target queries, the initial check included.
    pub budget: usize,
    pub k: usize,
    /// Recompute the surrogate gradient after every accepted probe and
    /// re-rank the points not yet probed.
    pub refresh_gradient: bool,
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        Self {
            step_probe: 0.32,
            step_refine: 0.16,
            regularizers: vec![MetricId::L2],
            budget: 2000,
            k: DEFAULT_K,
            refresh_gradient: false,
        }
    }
}

impl BlackboxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_probe > 0.0) || !(self.step_refine > 0.0) {
            return Err(Error::invalid("black-box step sizes must be positive"));
        }
        if self.regularizers.is_empty() {
            return Err(Error::invalid("regularizer set is empty"));
        }
        if let Some(bad) = self.regularizers.iter().find(|m| !m.is_regularizer()) {
            return Err(Error::UnsupportedMetric(format!(
                "{bad} is evaluation-only and cannot be a regularizer"
            )));
        }
        if self.budget == 0 {
            return Err(Error::invalid("query budget must be positive"));
        }
        Ok(())
    }
}

/// Target queries spent by one black-box run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryCount {
    /// The check that the clean cloud is classified correctly.
    pub initial: usize,
    pub probes: usize,
    pub refinement: usize,
}

impl QueryCount {
    pub fn total(&self) -> usize {
        self.initial + self.probes + self.refinement
    }
}

/// One tangent probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRecord {
    pub point: usize,
    pub eta: f64,
    /// Displacement of the probed point in the global frame, measured on the
    /// reconstructed clouds.
    pub displacement: Vec3,
    pub fooled_target: bool,
}

#[derive(Debug, Clone)]
pub struct BlackboxResult {
    pub attack: AttackResult,
    pub queries: QueryCount,
    pub points_probed: usize,
    pub probes: Vec<ProbeRecord>,
    /// Normals of the clean cloud that defined the tangent frames.
    pub normals: Vec<Vec3>,
}

struct Budgeted<'a, O: LabelOracle + ?Sized> {
    target: &'a O,
    budget: usize,
    count: QueryCount,
}

impl<O: LabelOracle + ?Sized> Budgeted<'_, O> {
    fn exhausted(&self) -> bool {
        self.count.total() >= self.budget
    }
}

fn local_direction(frames: &FrameRecord, grad: &GradientField) -> (GradientField, Vec<f64>) {
    let g_local = frames.field_to_local(grad);
    let n = g_local.norm();
    let g_hat = if n < 1e-12 {
        vec![0.0; g_local.as_flat().len()]
    } else {
        g_local.as_flat().iter().map(|v| v / n).collect()
    };
    (g_local, g_hat)
}

/// Black-box attack on `target` guided by the gradient of `surrogate`.
///
/// Probes keep the candidate that lowers the surrogate margin the most when
/// neither fools the target. The surrogate gradient is computed once.
pub fn blackbox_attack<S, O>(
    surrogate: &S,
    target: &O,
    clean: &PointCloud,
    label: usize,
    cfg: &BlackboxConfig,
) -> Result<BlackboxResult>
where
    S: WhiteBoxModel + ?Sized,
    O: LabelOracle + ?Sized,
{
    cfg.validate()?;
    let start = Instant::now();
    let clean = match clean.normals() {
        Some(_) => clean.clone(),
        None => estimate_normals(clean, cfg.k)?.cloud,
    };
    let ctx = DistanceContext::new(&clean, cfg.k)?;
    let regs = &cfg.regularizers;
    let mut oracle = Budgeted {
        target,
        budget: cfg.budget,
        count: QueryCount::default(),
    };

    oracle.count.initial += 1;
    if oracle.target.label(&clean) != label {
        return Err(Error::invalid(format!(
            "target does not classify the clean cloud as label {label}"
        )));
    }

    let (local, frames) = rsi_transform(&clean)?;
    let (loss0, grad) = surrogate.margin_and_gradient(&clean.clone().without_normals(), label)?;
    let (mut g_local, mut g_hat) = local_direction(&frames, &grad);
    let mut remaining: Vec<usize> = sensitivity_map(&g_local).iter().map(|e| e.index).collect();

    let mut cur = local.as_flat().to_vec();
    let mut cur_global = clean.clone().without_normals();
    let mut cur_margin = loss0;
    let mut cur_adversarial = false;
    let mut best: Option<PointCloud> = None;
    let mut best_score = f64::INFINITY;
    let mut best_updates = Vec::new();
    let mut trace = Vec::new();
    let mut probes = Vec::new();
    let mut points_probed = 0;

    'points: while !remaining.is_empty() {
        if cur_adversarial || oracle.exhausted() {
            break;
        }
        let round = points_probed;
        let i = remaining.remove(0);
        let g = g_local.rows()[i];
        let theta = g[1].atan2(g[0]);
        let q = [theta.cos(), theta.sin(), 0.0];
        points_probed += 1;
        trace.push(TraceEntry {
            iteration: round,
            phase: Phase::In,
            loss: cur_margin,
            reg_sum: ctx.sum(regs, &cur_global)?,
            cosines: Vec::new(),
            gradient_leak: 0.0,
        });

        let mut fallback: Option<(f64, Vec<f64>, PointCloud)> = None;
        for eta in [-cfg.step_probe, cfg.step_probe] {
            if oracle.exhausted() {
                break 'points;
            }
            let mut cand = cur.clone();
            for d in 0..3 {
                cand[3 * i + d] -= eta * q[d];
            }
            let cand_global = inverse_flat(&cand, &frames)?;
            oracle.count.probes += 1;
            let fooled = oracle.target.label(&cand_global) != label;
            probes.push(ProbeRecord {
                point: i,
                eta,
                displacement: sub3(cand_global.point(i), cur_global.point(i)),
                fooled_target: fooled,
            });
            if fooled {
                let score = ctx.sum(regs, &cand_global)?;
                if score < best_score {
                    best_score = score;
                    best = Some(cand_global.clone());
                    best_updates.push(BestUpdate {
                        iteration: round,
                        score,
                    });
                }
                cur = cand;
                cur_global = cand_global;
                cur_adversarial = true;
                break;
            }
            let m = surrogate.margin(&cand_global, label)?;
            if m < cur_margin && fallback.as_ref().is_none_or(|f| m < f.0) {
                fallback = Some((m, cand, cand_global));
            }
        }

        if !cur_adversarial {
            if let Some((m, cand, cand_global)) = fallback {
                cur_margin = m;
                cur = cand;
                cur_global = cand_global;
                if cfg.refresh_gradient {
                    let grad = surrogate.margin_and_gradient(&cur_global, label)?.1;
                    (g_local, g_hat) = local_direction(&frames, &grad);
                    let score = |j: usize| {
                        let g = g_local.rows()[j];
                        (g[0] * g[0] + g[1] * g[1]).sqrt()
                    };
                    remaining.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
                }
            }
            continue;
        }

        // refinement along regularizer directions orthogonal to the gradient
        let grads = regs
            .iter()
            .map(|&id| ctx.gradient(id, &cur_global).map(|f| frames.field_to_local(&f)))
            .collect::<Result<Vec<_>>>()?;
        let mut input = vec![g_hat.clone()];
        input.extend(grads.iter().map(|f| {
            let n = f.norm();
            if n < 1e-12 {
                vec![0.0; f.as_flat().len()]
            } else {
                f.as_flat().iter().map(|v| v / n).collect()
            }
        }));
        let dirs = gram_schmidt(&input)?;
        let mut entry = TraceEntry {
            iteration: round,
            phase: Phase::Out,
            loss: surrogate.margin(&cur_global, label)?,
            reg_sum: ctx.sum(regs, &cur_global)?,
            cosines: cosine_diagnostics(&g_local, &grads),
            gradient_leak: 0.0,
        };
        for v in &dirs {
            if oracle.exhausted() {
                break;
            }
            entry.gradient_leak = entry
                .gradient_leak
                .max(crate::vecmath::dot(v, &g_hat).abs());
            crate::vecmath::axpy(&mut cur, -cfg.step_refine, v);
            cur_global = inverse_flat(&cur, &frames)?;
            oracle.count.refinement += 1;
            cur_adversarial = oracle.target.label(&cur_global) != label;
            if cur_adversarial {
                let score = ctx.sum(regs, &cur_global)?;
                if score < best_score {
                    best_score = score;
                    best = Some(cur_global.clone());
                    best_updates.push(BestUpdate {
                        iteration: round,
                        score,
                    });
                }
            }
        }
        cur_margin = surrogate.margin(&cur_global, label)?;
        trace.push(entry);
    }

    let distances = best.as_ref().map(|b| ctx.all(b)).transpose()?;
    Ok(BlackboxResult {
        attack: AttackResult {
            success: best.is_some(),
            adversarial: best,
            distances,
            iterations: points_probed,
            stalled: false,
            wall_time: start.elapsed(),
            trace,
            best_updates,
        },
        queries: oracle.count,
        points_probed,
        probes,
        normals: clean.normals().expect("estimated above").to_vec(),
    })
}
