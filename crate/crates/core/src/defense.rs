//! Input-purification defenses and gradient averaging over their randomness.

use rand::seq::index;

use crate::attack::WhiteBoxModel;
use crate::blackbox::LabelOracle;
use crate::classifier::ClassifierParams;
use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud};
use crate::metrics::GradientField;
use crate::seed;
use crate::vecmath::dist2;

pub const DEFAULT_SOR_K: usize = 2;
pub const DEFAULT_SOR_ALPHA: f64 = 1.1;
pub const DEFAULT_SRS_DROP: usize = 500;
pub const DEFAULT_EOT_SAMPLES: usize = 100;

/// A purified cloud and where its points came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Purified {
    pub cloud: PointCloud,
    /// Indices into the input cloud, ascending.
    pub kept: Vec<usize>,
    /// SOR would have removed every point; the single least-suspicious point
    /// was kept instead.
    pub fallback: bool,
}

/// Statistical outlier removal: drops every point whose mean distance to its
/// `k` nearest neighbors exceeds `mu + alpha * sigma` of that statistic.
pub fn sor(cloud: &PointCloud, k: usize, alpha: f64) -> Result<Purified> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("SOR alpha must be positive, got {alpha}")));
    }
    let stats = sor_statistic(cloud, k)?;
    let n = stats.len() as f64;
    let mu = stats.iter().sum::<f64>() / n;
    let sigma = (stats.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mu + alpha * sigma;
    let mut kept: Vec<usize> = (0..stats.len()).filter(|&i| stats[i] <= threshold).collect();
    let fallback = kept.is_empty();
    if fallback {
        let mut best = 0;
        for (i, s) in stats.iter().enumerate() {
            if *s < stats[best] {
                best = i;
            }
        }
        kept.push(best);
    }
    Ok(Purified {
        cloud: cloud.select(&kept)?,
        kept,
        fallback,
    })
}

/// Mean Euclidean distance from each point to its `k` nearest neighbors.
pub fn sor_statistic(cloud: &PointCloud, k: usize) -> Result<Vec<f64>> {
    let nbrs = knn(cloud, k)?;
    let pts = cloud.points();
    Ok(nbrs
        .rows()
        .enumerate()
        .map(|(i, row)| row.iter().map(|&j| dist2(&pts[i], &pts[j]).sqrt()).sum::<f64>() / k as f64)
        .collect())
}

/// Simple random sampling: keeps a uniformly random subset of `n - drop`
/// points in their original order.
pub fn srs(cloud: &PointCloud, drop: usize, seed: u64) -> Result<Purified> {
    let n = cloud.len();
    if drop >= n {
        return Err(Error::invalid(format!("SRS drop {drop} must be below the cloud size {n}")));
    }
    let mut rng = seed::rng(seed, 0x5253);
    let mut kept = index::sample(&mut rng, n, n - drop).into_vec();
    kept.sort_unstable();
    Ok(Purified {
        cloud: cloud.select(&kept)?,
        kept,
        fallback: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Purifier {
    Sor { k: usize, alpha: f64 },
    Srs { drop: usize },
}

impl Purifier {
    pub fn apply(&self, cloud: &PointCloud, seed: u64) -> Result<Purified> {
        match *self {
            Purifier::Sor { k, alpha } => sor(cloud, k, alpha),
            Purifier::Srs { drop } => srs(cloud, drop, seed),
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self, Purifier::Srs { .. })
    }
}

/// Margin loss and gradient averaged over `n_samples` purifier draws. Points
/// removed by a draw receive no gradient from it.
pub fn eot_margin_and_gradient(
    params: &ClassifierParams,
    purifier: &Purifier,
    cloud: &PointCloud,
    label: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, GradientField)> {
    if n_samples == 0 {
        return Err(Error::invalid("EOT needs at least one sample"));
    }
    let draws = if purifier.is_randomized() { n_samples } else { 1 };
    let mut loss = 0.0;
    let mut rows = vec![[0.0; 3]; cloud.len()];
    for s in 0..draws {
        let purified = purifier.apply(cloud, seed::mix(seed, s as u64))?;
        let (l, g) = params.margin_and_gradient(&purified.cloud, label)?;
        loss += l;
        for (&i, row) in purified.kept.iter().zip(g.rows()) {
            for d in 0..3 {
                rows[i][d] += row[d];
            }
        }
    }
    if draws > 1 {
        let scale = 1.0 / draws as f64;
        loss *= scale;
        rows.iter_mut().flatten().for_each(|v| *v *= scale);
    }
    Ok((
        loss,
        GradientField::new(rows, format!("eot over {draws} purifier draws; removed points zero")),
    ))
}

pub fn eot_gradient(
    params: &ClassifierParams,
    purifier: &Purifier,
    cloud: &PointCloud,
    label: usize,
    n_samples: usize,
    seed: u64,
) -> Result<GradientField> {
    Ok(eot_margin_and_gradient(params, purifier, cloud, label, n_samples, seed)?.1)
}

/// A classifier behind a purifier. Purifier randomness is keyed by the seed
/// and the content of the cloud, so predictions are pure functions.
#[derive(Debug, Clone)]
pub struct DefendedClassifier {
    pub params: ClassifierParams,
    pub purifier: Purifier,
    pub eot_samples: usize,
    pub seed: u64,
}

impl DefendedClassifier {
    fn key(&self, cloud: &PointCloud) -> u64 {
        seed::mix(self.seed, seed::hash_coords(cloud.as_flat()))
    }

    pub fn purify(&self, cloud: &PointCloud) -> Result<Purified> {
        self.purifier.apply(cloud, seed::mix(self.key(cloud), u64::MAX))
    }

    pub fn try_predict(&self, cloud: &PointCloud) -> Result<usize> {
        Ok(self.params.predict(&self.purify(cloud)?.cloud))
    }
}

impl WhiteBoxModel for DefendedClassifier {
    /// Panics if the purifier rejects the cloud, e.g. an SRS drop larger than
    /// the cloud; callers validate sizes up front with [`Self::try_predict`].
    fn predict(&self, cloud: &PointCloud) -> usize {
        self.try_predict(cloud).expect("purifier parameters fit the cloud")
    }

    fn margin_and_gradient(&self, cloud: &PointCloud, label: usize) -> Result<(f64, GradientField)> {
        eot_margin_and_gradient(
            &self.params,
            &self.purifier,
            cloud,
            label,
            self.eot_samples,
            self.key(cloud),
        )
    }
}

impl LabelOracle for DefendedClassifier {
    fn label(&self, cloud: &PointCloud) -> usize {
        WhiteBoxModel::predict(self, cloud)
    }
}
