//! Per-time-point margins: cutoff estimation by the method of moments,
//! empirical normal-score maps for continuous and truncated values, and the
//! univariate latent conditional means used to build latent trajectories.

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeContext;
use crate::error::{FsgcError, Result};
use crate::normal;

/// Measurement scale of a functional variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VariableKind {
    Binary,
    Ordinal { levels: usize },
    Truncated,
    Continuous,
}

impl VariableKind {
    pub fn ordinal(levels: usize) -> Result<Self> {
        let kind = VariableKind::Ordinal { levels };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            VariableKind::Ordinal { levels } if levels < 3 => Err(FsgcError::InvalidInput(
                format!("ordinal variables need at least 3 levels, got {levels}"),
            )),
            _ => Ok(()),
        }
    }

    /// Number of interior latent cutoffs per time point.
    pub fn n_cutoffs(self) -> usize {
        match self {
            VariableKind::Binary | VariableKind::Truncated => 1,
            VariableKind::Ordinal { levels } => levels - 1,
            VariableKind::Continuous => 0,
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, VariableKind::Binary | VariableKind::Ordinal { .. })
    }

    /// Whether `x` is a legal observed value for this kind.
    pub fn conforms(self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        match self {
            VariableKind::Binary => x == 0.0 || x == 1.0,
            VariableKind::Ordinal { levels } => x >= 0.0 && x.fract() == 0.0 && x < levels as f64,
            VariableKind::Truncated => x >= 0.0,
            VariableKind::Continuous => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VariableKind::Binary => "binary",
            VariableKind::Ordinal { .. } => "ordinal",
            VariableKind::Truncated => "truncated",
            VariableKind::Continuous => "continuous",
        }
    }
}

/// Latent thresholds per time point. Time points whose margins are
/// degenerate carry `None` and are excluded from fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffSet {
    pub kind: VariableKind,
    pub grid: Vec<f64>,
    pub cutoffs: Vec<Option<Vec<f64>>>,
    /// Cutoffs estimated from all time points pooled; used only to map
    /// latent values at unusable time points.
    pub pooled: Option<Vec<f64>>,
}

impl CutoffSet {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn at(&self, j: usize) -> Option<&[f64]> {
        self.cutoffs.get(j).and_then(|c| c.as_deref())
    }

    pub fn is_usable(&self, j: usize) -> bool {
        self.at(j).is_some()
    }

    /// Own cutoffs when usable, otherwise the pooled fallback.
    pub fn effective(&self, j: usize) -> Option<&[f64]> {
        self.at(j).or(self.pooled.as_deref())
    }

    pub fn usable_count(&self) -> usize {
        self.cutoffs.iter().filter(|c| c.is_some()).count()
    }

    /// Bridging context for the time-point pair `(j, k)`, if both are usable.
    pub fn bridge_context(&self, j: usize, k: usize) -> Option<BridgeContext> {
        let a = self.at(j)?;
        let b = self.at(k)?;
        BridgeContext::new(self.kind, a.to_vec(), b.to_vec()).ok()
    }
}

/// Method-of-moments cutoffs for one time point.
///
/// Binary and truncated: `Φ⁻¹(share of zeros)`. Ordinal with `l` levels:
/// `Φ⁻¹(share ≤ k−1)` for `k = 1, …, l−1`. Continuous: no cutoffs.
pub fn estimate_cutoffs_at(values: &[f64], kind: VariableKind, time_index: usize) -> Result<Vec<f64>> {
    kind.validate()?;
    if values.is_empty() {
        return Err(FsgcError::DegenerateMargin {
            time_index,
            detail: "no observations".into(),
        });
    }
    if let Some(bad) = values.iter().find(|&&x| !kind.conforms(x)) {
        return Err(FsgcError::InvalidInput(format!(
            "value {bad} does not conform to {} kind",
            kind.name()
        )));
    }
    let n = values.len() as f64;
    let proportions: Vec<f64> = match kind {
        VariableKind::Continuous => return Ok(Vec::new()),
        VariableKind::Binary | VariableKind::Truncated => {
            vec![values.iter().filter(|&&x| x == 0.0).count() as f64 / n]
        }
        VariableKind::Ordinal { levels } => {
            let mut counts = vec![0usize; levels];
            for &x in values {
                counts[x as usize] += 1;
            }
            let mut cum = 0usize;
            counts[..levels - 1]
                .iter()
                .map(|&c| {
                    cum += c;
                    cum as f64 / n
                })
                .collect()
        }
    };
    let mut out = Vec::with_capacity(proportions.len());
    for (k, &p) in proportions.iter().enumerate() {
        if p <= 0.0 || p >= 1.0 {
            return Err(FsgcError::DegenerateMargin {
                time_index,
                detail: format!("cumulative proportion {p} at cutoff {} is not inside (0, 1)", k + 1),
            });
        }
        let q = normal::quantile(p);
        if let Some(&prev) = out.last() {
            if q <= prev {
                return Err(FsgcError::DegenerateMargin {
                    time_index,
                    detail: format!("empty category below cutoff {}", k + 1),
                });
            }
        }
        out.push(q);
    }
    Ok(out)
}

/// Cutoffs for every time point; degenerate time points are flagged unusable.
pub fn estimate_cutoffs(columns: &[Vec<f64>], grid: &[f64], kind: VariableKind) -> Result<CutoffSet> {
    if columns.len() != grid.len() {
        return Err(FsgcError::GridMismatch {
            expected: grid.len(),
            actual: columns.len(),
        });
    }
    let mut cutoffs = Vec::with_capacity(columns.len());
    for (j, col) in columns.iter().enumerate() {
        match estimate_cutoffs_at(col, kind, j) {
            Ok(c) => cutoffs.push(Some(c)),
            Err(FsgcError::DegenerateMargin { .. }) => cutoffs.push(None),
            Err(e) => return Err(e),
        }
    }
    let pooled_values: Vec<f64> = columns.iter().flatten().copied().collect();
    let pooled = estimate_cutoffs_at(&pooled_values, kind, usize::MAX).ok();
    Ok(CutoffSet {
        kind,
        grid: grid.to_vec(),
        cutoffs,
        pooled,
    })
}

/// Mid-ranks (1-based) of `values`, ties receiving their average rank.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Winsorized empirical normal scores: rank `r` maps to
/// `Φ⁻¹(clamp(r/(n+1), δₙ, 1−δₙ))` with `δₙ = 1/(4 n^{1/4})`.
pub fn normal_score_transform(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 2 {
        return Err(FsgcError::InsufficientData(format!(
            "normal scores need at least 2 values, got {n}"
        )));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(FsgcError::InvalidInput("non-finite value in normal-score input".into()));
    }
    let nf = n as f64;
    let delta = 1.0 / (4.0 * nf.powf(0.25));
    Ok(mid_ranks(values)
        .into_iter()
        .map(|r| normal::quantile((r / (nf + 1.0)).clamp(delta, 1.0 - delta)))
        .collect())
}

/// Stored monotone map between observed values and latent normal scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalScoreMap {
    /// Strictly increasing observed values.
    pub values: Vec<f64>,
    /// Non-decreasing latent scores paired with `values`.
    pub scores: Vec<f64>,
}

impl NormalScoreMap {
    /// Builds the map from one time point's sample. For truncated data only
    /// the positive part is stored, scored by rank within the full sample.
    pub fn from_sample(values: &[f64], kind: VariableKind) -> Result<Self> {
        let scores = normal_score_transform(values)?;
        let mut pairs: Vec<(f64, f64)> = values
            .iter()
            .zip(&scores)
            .filter(|(&x, _)| kind != VariableKind::Truncated || x > 0.0)
            .map(|(&x, &s)| (x, s))
            .collect();
        if pairs.is_empty() {
            return Err(FsgcError::InsufficientData("no positive values to score".into()));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.dedup_by(|a, b| a.0 == b.0);
        let (values, scores) = pairs.into_iter().unzip();
        Ok(NormalScoreMap { values, scores })
    }

    /// `f̂(x)`: exact for stored values, linear between them, constant beyond.
    pub fn forward(&self, x: f64) -> f64 {
        interpolate(&self.values, &self.scores, x)
    }

    /// `f̂⁻¹(v)` with the same interpolation and extrapolation rules.
    pub fn inverse(&self, v: f64) -> f64 {
        interpolate(&self.scores, &self.values, v)
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let last = xs.len() - 1;
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[last] {
        return ys[last];
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    if xs[lo] == x || xs[hi] == xs[lo] {
        return ys[lo];
    }
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + w * (ys[hi] - ys[lo])
}

/// Per-time-point normal-score maps (continuous and truncated kinds only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTransform {
    pub maps: Vec<Option<NormalScoreMap>>,
}

impl MarginalTransform {
    pub fn estimate(columns: &[Vec<f64>], kind: VariableKind) -> Self {
        let maps = columns
            .iter()
            .map(|col| match kind {
                VariableKind::Continuous | VariableKind::Truncated => {
                    NormalScoreMap::from_sample(col, kind).ok()
                }
                _ => None,
            })
            .collect();
        MarginalTransform { maps }
    }

    pub fn at(&self, j: usize) -> Option<&NormalScoreMap> {
        self.maps.get(j).and_then(|m| m.as_ref())
    }
}

/// Everything needed to move between observed and latent scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub cutoffs: CutoffSet,
    pub transform: MarginalTransform,
}

impl Marginals {
    pub fn estimate(columns: &[Vec<f64>], grid: &[f64], kind: VariableKind) -> Result<Self> {
        Ok(Marginals {
            cutoffs: estimate_cutoffs(columns, grid, kind)?,
            transform: MarginalTransform::estimate(columns, kind),
        })
    }

    pub fn kind(&self) -> VariableKind {
        self.cutoffs.kind
    }

    /// Latent conditional mean of an observation at grid index `j`, or `None`
    /// when the time point carries no usable margin.
    pub fn latent_mean(&self, j: usize, x: f64) -> Result<Option<f64>> {
        let kind = self.kind();
        let Some(cut) = self.cutoffs.effective(j) else {
            return Ok(None);
        };
        let map = self.transform.at(j);
        let needs_map = match kind {
            VariableKind::Continuous => true,
            VariableKind::Truncated => x > 0.0,
            _ => false,
        };
        if needs_map && map.is_none() {
            return Ok(None);
        }
        conditional_latent_mean(x, kind, cut, map).map(Some)
    }

    /// Maps a latent value at grid index `j` back to the observed scale.
    pub fn observed_value(&self, j: usize, latent: f64) -> Option<f64> {
        let cut = self.cutoffs.effective(j)?;
        match self.kind() {
            VariableKind::Binary => Some(if latent > cut[0] { 1.0 } else { 0.0 }),
            VariableKind::Ordinal { .. } => {
                Some(cut.iter().filter(|&&c| c <= latent).count() as f64)
            }
            VariableKind::Truncated => {
                if latent <= cut[0] {
                    Some(0.0)
                } else {
                    self.transform.at(j).map(|m| m.inverse(latent))
                }
            }
            VariableKind::Continuous => self.transform.at(j).map(|m| m.inverse(latent)),
        }
    }
}

/// `E[Z | a ≤ Z < b]` for a standard normal `Z`, with infinite endpoints allowed.
fn interval_mean(a: f64, b: f64) -> Option<f64> {
    // Use the tail on the side away from the mode for accuracy.
    let prob = if a > 0.0 {
        normal::cdf(-a) - normal::cdf(-b)
    } else {
        normal::cdf(b) - normal::cdf(a)
    };
    if !(prob > 0.0) {
        return None;
    }
    Some((normal::pdf(a) - normal::pdf(b)) / prob)
}

/// Univariate latent conditional mean `E[V(t) | X(t) = x]`.
///
/// Binary and ordinal observations use truncated-normal means over the
/// category interval; truncated zeros use the lower tail; positive truncated
/// and continuous values use the stored normal-score map.
pub fn conditional_latent_mean(
    x: f64,
    kind: VariableKind,
    cutoffs: &[f64],
    map: Option<&NormalScoreMap>,
) -> Result<f64> {
    if !kind.conforms(x) {
        return Err(FsgcError::InvalidInput(format!(
            "value {x} does not conform to {} kind",
            kind.name()
        )));
    }
    if cutoffs.len() != kind.n_cutoffs() {
        return Err(FsgcError::InvalidInput(format!(
            "expected {} cutoffs, got {}",
            kind.n_cutoffs(),
            cutoffs.len()
        )));
    }
    let degenerate = || FsgcError::DegenerateMargin {
        time_index: usize::MAX,
        detail: format!("category of value {x} has zero latent probability"),
    };
    let need_map = || FsgcError::InsufficientData("no normal-score map at this time point".into());
    match kind {
        VariableKind::Binary => {
            let (a, b) = if x == 1.0 {
                (cutoffs[0], f64::INFINITY)
            } else {
                (f64::NEG_INFINITY, cutoffs[0])
            };
            interval_mean(a, b).ok_or_else(degenerate)
        }
        VariableKind::Ordinal { levels } => {
            let k = x as usize;
            let a = if k == 0 { f64::NEG_INFINITY } else { cutoffs[k - 1] };
            let b = if k == levels - 1 { f64::INFINITY } else { cutoffs[k] };
            interval_mean(a, b).ok_or_else(degenerate)
        }
        VariableKind::Truncated => {
            if x == 0.0 {
                interval_mean(f64::NEG_INFINITY, cutoffs[0]).ok_or_else(degenerate)
            } else {
                map.map(|m| m.forward(x)).ok_or_else(need_map)
            }
        }
        VariableKind::Continuous => map.map(|m| m.forward(x)).ok_or_else(need_map),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_sample(zeros: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| if i < zeros { 0.0 } else { 1.0 }).collect()
    }

    #[test]
    fn binary_cutoffs() {
        let c = estimate_cutoffs_at(&binary_sample(5, 10), VariableKind::Binary, 0).unwrap();
        assert_eq!(c, vec![0.0]);
        let c = estimate_cutoffs_at(&binary_sample(3, 10), VariableKind::Binary, 0).unwrap();
        // Φ⁻¹(0.3) from 40-digit arithmetic.
        assert!((c[0] + 0.524_400_512_708_040_82).abs() < 1e-14);
    }

    #[test]
    fn ordinal_cutoffs() {
        let mut v = vec![0.0; 2];
        v.extend(vec![1.0; 5]);
        v.extend(vec![2.0; 3]);
        let c = estimate_cutoffs_at(&v, VariableKind::ordinal(3).unwrap(), 0).unwrap();
        assert!((c[0] + 0.841_621_233_572_914_17).abs() < 1e-14);
        assert!((c[1] - 0.524_400_512_708_040_66).abs() < 1e-14);
    }

    #[test]
    fn degenerate_margins_are_errors() {
        let err = estimate_cutoffs_at(&binary_sample(10, 10), VariableKind::Binary, 4).unwrap_err();
        assert!(matches!(err, FsgcError::DegenerateMargin { time_index: 4, .. }));
        // Empty middle ordinal category.
        let v = [0.0, 0.0, 2.0, 2.0, 1.0 + 1.0];
        assert!(estimate_cutoffs_at(&v, VariableKind::ordinal(3).unwrap(), 0).is_err());
    }

    #[test]
    fn unusable_time_points_are_flagged() {
        let cols = vec![binary_sample(5, 10), binary_sample(10, 10), binary_sample(3, 10)];
        let set = estimate_cutoffs(&cols, &[0.0, 0.5, 1.0], VariableKind::Binary).unwrap();
        assert!(set.is_usable(0) && !set.is_usable(1) && set.is_usable(2));
        let pooled = set.pooled.as_ref().unwrap()[0];
        assert!((pooled - normal::quantile(18.0 / 30.0)).abs() < 1e-15);
        assert_eq!(set.effective(1), Some(&[pooled][..]));
    }

    #[test]
    fn normal_scores_examples() {
        let s = normal_score_transform(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s[1], 0.0);
        assert!((s[0] + s[2]).abs() < 1e-15);
        let s = normal_score_transform(&[5.0, 1.0]).unwrap();
        assert!((s[0] - 0.430_727_299_295_457_39).abs() < 1e-14);
        assert!((s[1] + 0.430_727_299_295_457_54).abs() < 1e-14);
        assert!(normal_score_transform(&[1.0]).is_err());
    }

    #[test]
    fn normal_scores_are_winsorized() {
        let v: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let s = normal_score_transform(&v).unwrap();
        let delta = 1.0 / (4.0 * 10_000f64.powf(0.25));
        assert!((s[0] - normal::quantile(delta)).abs() < 1e-15);
        assert!(s.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn binary_conditional_means() {
        let half_normal = (2.0 / std::f64::consts::PI).sqrt();
        let up = conditional_latent_mean(1.0, VariableKind::Binary, &[0.0], None).unwrap();
        let down = conditional_latent_mean(0.0, VariableKind::Binary, &[0.0], None).unwrap();
        assert!((up - half_normal).abs() < 1e-15);
        assert!((down + half_normal).abs() < 1e-15);
    }

    #[test]
    fn ordinal_lowest_category_matches_binary_zero() {
        let kind = VariableKind::ordinal(4).unwrap();
        let cuts = [-0.6, 0.1, 0.6];
        let low = conditional_latent_mean(0.0, kind, &cuts, None).unwrap();
        let bin = conditional_latent_mean(0.0, VariableKind::Binary, &[-0.6], None).unwrap();
        assert!((low - bin).abs() < 1e-15);
    }

    #[test]
    fn conditional_means_average_to_zero() {
        let kind = VariableKind::ordinal(5).unwrap();
        let cuts = [-1.3, -0.2, 0.4, 2.1];
        let padded = [f64::NEG_INFINITY, -1.3, -0.2, 0.4, 2.1, f64::INFINITY];
        let mut total = 0.0;
        let mut prev = f64::NEG_INFINITY;
        for k in 0..5 {
            let m = conditional_latent_mean(k as f64, kind, &cuts, None).unwrap();
            assert!(m > prev);
            prev = m;
            total += (normal::cdf(padded[k + 1]) - normal::cdf(padded[k])) * m;
        }
        assert!(total.abs() < 1e-10);
    }

    #[test]
    fn extreme_tail_is_finite() {
        let m = conditional_latent_mean(1.0, VariableKind::Binary, &[9.0], None).unwrap();
        assert!(m > 9.0 && m < 9.2);
    }

    #[test]
    fn score_map_round_trip() {
        let col = [0.0, 0.0, 3.0, 1.5, 0.0, 7.0, 2.0];
        let map = NormalScoreMap::from_sample(&col, VariableKind::Truncated).unwrap();
        assert_eq!(map.values, vec![1.5, 2.0, 3.0, 7.0]);
        for (&x, &s) in map.values.iter().zip(&map.scores) {
            assert_eq!(map.forward(x), s);
            assert_eq!(map.inverse(s), x);
        }
        assert_eq!(map.inverse(100.0), 7.0);
        assert_eq!(map.forward(-5.0), map.scores[0]);
    }
}
