//! The two-phase white-box attack.
//!
//! Starting from the clean cloud, every iteration computes the normalized
//! margin-loss gradient `g`. While the iterate is still classified as the
//! true label it steps down `g` (IN phase). Once it is adversarial it steps
//! along regularizer descent directions made orthogonal to `g` (OUT phase):
//! a single projected direction for [`eidos_base`], a Gram-Schmidt set applied
//! one after another for [`eidos`]. The best adversarial iterate with respect
//! to the regularizer sum is returned.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::classifier::{rival_class, ClassifierParams};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, DEFAULT_K};
use crate::metrics::{DistanceContext, GradientField, MetricId, MetricValues};
use crate::vecmath::{axpy, dot, norm};

/// Residual norm below which Gram-Schmidt drops a vector.
pub const GS_DROP_TOLERANCE: f64 = 1e-8;
/// Gradient norm below which the IN phase is considered stalled.
pub const STALL_TOLERANCE: f64 = 1e-12;

/// A differentiable classifier the white-box attack can query.
pub trait WhiteBoxModel: Sync {
    fn predict(&self, cloud: &PointCloud) -> usize;

    /// Margin loss at `cloud` and its gradient with respect to the
    /// coordinates.
    fn margin_and_gradient(&self, cloud: &PointCloud, label: usize) -> Result<(f64, GradientField)>;

    fn margin(&self, cloud: &PointCloud, label: usize) -> Result<f64> {
        Ok(self.margin_and_gradient(cloud, label)?.0)
    }
}

impl WhiteBoxModel for ClassifierParams {
    fn predict(&self, cloud: &PointCloud) -> usize {
        ClassifierParams::predict(self, cloud)
    }

    fn margin_and_gradient(&self, cloud: &PointCloud, label: usize) -> Result<(f64, GradientField)> {
        ClassifierParams::margin_and_gradient(self, cloud, label)
    }

    fn margin(&self, cloud: &PointCloud, label: usize) -> Result<f64> {
        ClassifierParams::margin(self, cloud, label)
    }
}

/// `logits[t] - max_{k != t} logits[k]`; negative exactly when some other
/// class scores strictly higher than `t`.
pub fn margin_loss(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::invalid("margin loss needs at least two classes"));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(logits[label] - logits[rival_class(logits, label)])
}

/// Classical Gram-Schmidt in input order.
///
/// The first vector is the loss-gradient direction; it takes part in the
/// orthogonalization but is not returned. Vectors whose residual norm falls
/// below [`GS_DROP_TOLERANCE`] are dropped, so the output holds at most
/// `vectors.len() - 1` unit vectors, each orthogonal to the first input and
/// to one another.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("Gram-Schmidt needs at least one vector"))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::invalid("Gram-Schmidt input vectors must be nonempty"));
    }
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::invalid("Gram-Schmidt input vectors differ in length"));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    let mut out = Vec::with_capacity(vectors.len() - 1);
    for (idx, v) in vectors.iter().enumerate() {
        let coeffs: Vec<f64> = basis.iter().map(|b| dot(v, b)).collect();
        let mut r = v.clone();
        for (b, c) in basis.iter().zip(coeffs) {
            axpy(&mut r, -c, b);
        }
        let len = norm(&r);
        if len < GS_DROP_TOLERANCE {
            continue;
        }
        r.iter_mut().for_each(|x| *x /= len);
        if idx > 0 {
            out.push(r.clone());
        }
        basis.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Fixed,
    /// `eps_i = eps * (1 - decay)^i`
    Adaptive { decay: f64 },
}

/// Default decay of the adaptive schedule.
pub const DEFAULT_DECAY: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Imperceptibility regularizers used in the OUT phase.
    pub regularizers: Vec<MetricId>,
    pub step: f64,
    pub schedule: StepSchedule,
    pub max_iters: usize,
    /// Neighborhood size for normals and curvature.
    pub k: usize,
    /// Seed for randomized components (defense draws); the plain attack is
    /// deterministic.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            regularizers: vec![MetricId::L2],
            step: 0.06,
            schedule: StepSchedule::Fixed,
            max_iters: 100,
            k: DEFAULT_K,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step)));
        }
        if let StepSchedule::Adaptive { decay } = self.schedule {
            if !(decay > 0.0 && decay < 1.0) {
                return Err(Error::invalid(format!("decay must lie in (0, 1), got {decay}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max iterations must be at least 1"));
        }
        if self.k < 3 {
            return Err(Error::invalid(format!("neighborhood size must be >= 3, got {}", self.k)));
        }
        check_regularizers(&self.regularizers)
    }
}

fn check_regularizers(regs: &[MetricId]) -> Result<()> {
    if regs.is_empty() {
        return Err(Error::invalid("regularizer set is empty"));
    }
    if let Some(bad) = regs.iter().find(|m| !m.is_regularizer()) {
        return Err(Error::UnsupportedMetric(format!(
            "{bad} is evaluation-only and cannot be a regularizer"
        )));
    }
    Ok(())
}

/// Step size at iteration `i`.
pub fn step_size(i: usize, cfg: &AttackConfig) -> f64 {
    match cfg.schedule {
        StepSchedule::Fixed => cfg.step,
        StepSchedule::Adaptive { decay } => cfg.step * (1.0 - decay).powi(i as i32),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Cosines between the loss gradient and each regularizer gradient, followed
/// by the cosines of every regularizer pair `(j, k)` with `j < k`.
pub fn cosine_diagnostics(g: &GradientField, d_list: &[GradientField]) -> Vec<f64> {
    let mut out: Vec<f64> = d_list.iter().map(|d| cosine(g.as_flat(), d.as_flat())).collect();
    for (j, a) in d_list.iter().enumerate() {
        for b in &d_list[j + 1..] {
            out.push(cosine(a.as_flat(), b.as_flat()));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    In,
    Out,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::In => "IN",
            Phase::Out => "OUT",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: f64,
    /// Regularizer sum of the iterate at the start of the iteration.
    pub reg_sum: f64,
    pub cosines: Vec<f64>,
    /// Largest `|<v, g_hat>|` over the directions applied this iteration.
    pub gradient_leak: f64,
}

/// One improvement of the best adversarial iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestUpdate {
    pub iteration: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Best adversarial cloud found, if any.
    pub adversarial: Option<PointCloud>,
    pub success: bool,
    /// All five metrics of `adversarial` against the clean cloud.
    pub distances: Option<MetricValues>,
    pub iterations: usize,
    /// The IN phase hit a vanishing gradient.
    pub stalled: bool,
    pub wall_time: Duration,
    pub trace: Vec<TraceEntry>,
    pub best_updates: Vec<BestUpdate>,
}

impl AttackResult {
    /// Equality of everything except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.adversarial == other.adversarial
            && self.success == other.success
            && self.distances == other.distances
            && self.iterations == other.iterations
            && self.stalled == other.stalled
            && self.trace == other.trace
            && self.best_updates == other.best_updates
    }
}

/// Tab-separated trace: iteration, phase, loss, regularizer sum, cosines.
pub fn format_trace(trace: &[TraceEntry]) -> String {
    let mut out = String::new();
    for e in trace {
        let _ = write!(out, "{}\t{}\t{}\t{}", e.iteration, e.phase.name(), e.loss, e.reg_sum);
        for c in &e.cosines {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum OutRule {
    /// One direction, projected onto the tangent hyperplane of the loss.
    Projected,
    /// Gram-Schmidt set, applied sequentially.
    Orthogonalized,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < STALL_TOLERANCE {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Single-regularizer attack: the OUT phase moves along the regularizer's
/// descent direction projected orthogonally to the loss gradient.
pub fn eidos_base<M: WhiteBoxModel + ?Sized>(
    model: &M,
    clean: &PointCloud,
    label: usize,
    metric: MetricId,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let cfg = AttackConfig {
        regularizers: vec![metric],
        ..cfg.clone()
    };
    run(model, clean, label, &cfg, OutRule::Projected)
}

/// Multi-regularizer attack: the OUT phase orthonormalizes the loss gradient
/// and every regularizer direction and steps along each surviving direction
/// in turn, keeping the best adversarial candidate by regularizer sum.
pub fn eidos<M: WhiteBoxModel + ?Sized>(
    model: &M,
    clean: &PointCloud,
    label: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    run(model, clean, label, cfg, OutRule::Orthogonalized)
}

fn run<M: WhiteBoxModel + ?Sized>(
    model: &M,
    clean: &PointCloud,
    label: usize,
    cfg: &AttackConfig,
    rule: OutRule,
) -> Result<AttackResult> {
    cfg.validate()?;
    let start = Instant::now();
    if model.predict(clean) != label {
        return Err(Error::invalid(format!(
            "clean cloud is not classified as label {label}; nothing to attack"
        )));
    }
    let ctx = DistanceContext::new(clean, cfg.k)?;
    let regs = &cfg.regularizers;

    let mut y = clean.clone().without_normals();
    let mut y_pred = label;
    let mut best: Option<PointCloud> = None;
    let mut best_score = f64::INFINITY;
    let mut best_updates = Vec::new();
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut stalled = false;
    let mut iterations = 0;

    for i in 0..cfg.max_iters {
        iterations = i + 1;
        let eps = step_size(i, cfg);
        let (loss, grad) = model.margin_and_gradient(&y, label)?;
        let g_hat = normalized(grad.as_flat());
        let reg_sum = ctx.sum(regs, &y)?;
        let mut candidates = Vec::new();
        let mut entry = TraceEntry {
            iteration: i,
            phase: Phase::In,
            loss,
            reg_sum,
            cosines: Vec::new(),
            gradient_leak: 0.0,
        };

        if y_pred == label {
            if grad.norm() < STALL_TOLERANCE {
                stalled = true;
                trace.push(entry);
                break;
            }
            let mut next = y.as_flat().to_vec();
            axpy(&mut next, -eps, &g_hat);
            candidates.push(PointCloud::from_flat(&next)?);
        } else {
            entry.phase = Phase::Out;
            let grads = regs
                .iter()
                .map(|&id| ctx.gradient(id, &y))
                .collect::<Result<Vec<_>>>()?;
            entry.cosines = cosine_diagnostics(&grad, &grads);
            let dirs: Vec<Vec<f64>> = grads.iter().map(|d| normalized(d.as_flat())).collect();
            let steps = match rule {
                OutRule::Projected => {
                    let d = &dirs[0];
                    let mut v = d.clone();
                    axpy(&mut v, -dot(d, &g_hat), &g_hat);
                    vec![v]
                }
                OutRule::Orthogonalized => {
                    let mut input = Vec::with_capacity(dirs.len() + 1);
                    input.push(g_hat.clone());
                    input.extend(dirs);
                    gram_schmidt(&input)?
                }
            };
            let mut next = y.as_flat().to_vec();
            for v in &steps {
                entry.gradient_leak = entry.gradient_leak.max(dot(v, &g_hat).abs());
                axpy(&mut next, -eps, v);
                candidates.push(PointCloud::from_flat(&next)?);
            }
        }
        trace.push(entry);

        for cand in candidates {
            let pred = model.predict(&cand);
            if pred != label {
                let score = ctx.sum(regs, &cand)?;
                if score < best_score {
                    best_score = score;
                    best = Some(cand.clone());
                    best_updates.push(BestUpdate {
                        iteration: i,
                        score,
                    });
                }
            }
            y = cand;
            y_pred = pred;
        }
    }

    let distances = best.as_ref().map(|b| ctx.all(b)).transpose()?;
    Ok(AttackResult {
        success: best.is_some(),
        adversarial: best,
        distances,
        iterations,
        stalled,
        wall_time: start.elapsed(),
        trace,
        best_updates,
    })
}

/// Which attack variant a batch run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// [`eidos_base`] with the first configured regularizer.
    Base,
    /// [`eidos`] with all configured regularizers.
    Full,
}

/// Attacks every `(cloud, label)` pair on up to `jobs` threads. Results come
/// back in input order.
pub fn attack_batch<M: WhiteBoxModel + ?Sized>(
    model: &M,
    samples: &[(PointCloud, usize)],
    cfg: &AttackConfig,
    variant: Variant,
    jobs: usize,
) -> Result<Vec<Result<AttackResult>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(|| {
        samples
            .par_iter()
            .map(|(cloud, label)| match variant {
                Variant::Base => eidos_base(model, cloud, *label, cfg.regularizers[0], cfg),
                Variant::Full => eidos(model, cloud, *label, cfg),
            })
            .collect()
    }))
}
