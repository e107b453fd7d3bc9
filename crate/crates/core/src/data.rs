//! Conditional Gaussian mixtures with exact moments.
//!
//! A [`MixtureSpec`] assigns each diagonal Gaussian component to a condition
//! label. Within a label the component weights sum to one; labels are drawn
//! uniformly unless explicit priors are given.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Cond;
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub label: usize,
    pub center: Vec<Real>,
    /// Diagonal covariance.
    pub cov: Vec<Real>,
    pub weight: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub dim: usize,
    #[serde(rename = "labels")]
    pub label_count: usize,
    pub components: Vec<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_priors: Option<Vec<Real>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn conds(&self) -> Vec<Cond> {
        self.labels.iter().map(|&l| Cond::Label(l)).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Points belonging to one label.
    pub fn points_with_label(&self, label: usize) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == label).collect();
        self.points.gather_rows(&idx)
    }
}

/// Per-sample (across-coordinate) mean and variance targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerTargets {
    pub mu_target: Real,
    pub var_target: Real,
}

const WEIGHT_TOL: Real = 1e-9;

impl MixtureSpec {
    /// Eight modes on a radius-2 circle, two adjacent modes per label, with a
    /// 0.7/0.3 split on label 0 and 0.5/0.5 elsewhere.
    pub fn gmm8() -> Self {
        let sigma: Real = 0.15;
        let mut components = Vec::new();
        for label in 0..4 {
            let weights = if label == 0 { [0.7, 0.3] } else { [0.5, 0.5] };
            for (j, w) in weights.into_iter().enumerate() {
                let angle = (2 * label + j) as Real * std::f64::consts::FRAC_PI_4 as Real;
                components.push(Component {
                    label,
                    center: vec![2.0 * angle.cos(), 2.0 * angle.sin()],
                    cov: vec![sigma * sigma; 2],
                    weight: w,
                });
            }
        }
        MixtureSpec {
            dim: 2,
            label_count: 4,
            components,
            label_priors: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MixtureSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MixtureSpec::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.label_count == 0 {
            return Err(Error::invalid("mixture needs dim > 0 and at least one label"));
        }
        for c in &self.components {
            if c.label >= self.label_count {
                return Err(Error::UnknownLabel(c.label));
            }
            if c.center.len() != self.dim || c.cov.len() != self.dim {
                return Err(Error::invalid("component dimension does not match spec dim"));
            }
            if c.cov.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::invalid("covariances must be strictly positive"));
            }
            if c.center.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("component center is not finite"));
            }
        }
        for label in 0..self.label_count {
            self.check_label_weights(label)?;
        }
        if let Some(p) = &self.label_priors {
            if p.len() != self.label_count || p.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("label priors must be one non-negative value per label"));
            }
            if ((p.iter().sum::<Real>()) - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::invalid("label priors must sum to 1"));
            }
        }
        Ok(())
    }

    fn check_label_weights(&self, label: usize) -> Result<()> {
        let comps = self.components_of(label);
        if comps.is_empty() {
            return Err(Error::invalid(format!("label {label} has no components")));
        }
        if comps.iter().any(|c| !(c.weight > 0.0)) {
            return Err(Error::invalid("component weights must be positive"));
        }
        let total: Real = comps.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!("weights of label {label} sum to {total}")));
        }
        Ok(())
    }

    pub fn components_of(&self, label: usize) -> Vec<&Component> {
        self.components.iter().filter(|c| c.label == label).collect()
    }

    pub fn label_prior(&self, label: usize) -> Real {
        match &self.label_priors {
            Some(p) => p[label],
            None => 1.0 / self.label_count as Real,
        }
    }

    pub fn sample_label(&self, rng: &mut impl Rng) -> usize {
        match &self.label_priors {
            None => rng.random_range(0..self.label_count),
            Some(p) => categorical(rng, p),
        }
    }

    /// Draws a point from the given label's conditional mixture.
    pub fn sample_point(&self, label: usize, rng: &mut impl Rng, out: &mut [Real]) {
        let comps = self.components_of(label);
        let weights: Vec<Real> = comps.iter().map(|c| c.weight).collect();
        let c = comps[categorical(rng, &weights)];
        for ((o, &m), &v) in out.iter_mut().zip(&c.center).zip(&c.cov) {
            *o = m + v.sqrt() * rng::normal(rng);
        }
    }
}

fn categorical(rng: &mut impl Rng, weights: &[Real]) -> usize {
    let total: Real = weights.iter().sum();
    let mut u = rng::uniform(rng, 0.0, total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// `n` i.i.d. labeled points.
pub fn sample_dataset(spec: &MixtureSpec, n: usize, rng: &mut impl Rng) -> Result<LabeledBatch> {
    if n == 0 {
        return Err(Error::invalid("sample_dataset needs n > 0"));
    }
    spec.validate()?;
    let mut points = vec![0.0; n * spec.dim];
    let mut labels = Vec::with_capacity(n);
    for row in points.chunks_exact_mut(spec.dim) {
        let label = spec.sample_label(rng);
        spec.sample_point(label, rng, row);
        labels.push(label);
    }
    Ok(LabeledBatch {
        points: Tensor::from_parts(vec![n, spec.dim], points),
        labels,
    })
}

/// `n` points all drawn from one label.
pub fn sample_label(spec: &MixtureSpec, label: usize, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if label >= spec.label_count {
        return Err(Error::UnknownLabel(label));
    }
    let mut points = vec![0.0; n * spec.dim];
    for row in points.chunks_exact_mut(spec.dim) {
        spec.sample_point(label, rng, row);
    }
    Ok(Tensor::from_parts(vec![n, spec.dim], points))
}

fn weighted_components(spec: &MixtureSpec, label: usize) -> Result<Vec<&Component>> {
    if label >= spec.label_count {
        return Err(Error::UnknownLabel(label));
    }
    let comps = spec.components_of(label);
    let total: Real = comps.iter().map(|c| c.weight).sum();
    if comps.is_empty() || (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::invalid(format!("label {label} weights do not sum to 1")));
    }
    Ok(comps)
}

/// Exact per-coordinate mean and variance of one label's mixture.
pub fn target_stats(spec: &MixtureSpec, label: usize) -> Result<(Vec<Real>, Vec<Real>)> {
    let comps = weighted_components(spec, label)?;
    let mut mean = vec![0.0; spec.dim];
    let mut second = vec![0.0; spec.dim];
    for c in &comps {
        for j in 0..spec.dim {
            mean[j] += c.weight * c.center[j];
            second[j] += c.weight * (c.cov[j] + c.center[j] * c.center[j]);
        }
    }
    let var = second.iter().zip(&mean).map(|(s, m)| (s - m * m).max(0.0)).collect();
    Ok((mean, var))
}

/// Expected per-sample mean and population variance (taken across the
/// coordinates of one point) under one label's mixture.
///
/// For a diagonal component with center `c` and variances `s`, the expected
/// across-coordinate variance is `mean_j (c_j - mean(c))^2 + (1 - 1/d) mean_j s_j`.
pub fn per_sample_targets(spec: &MixtureSpec, label: usize) -> Result<RegularizerTargets> {
    let comps = weighted_components(spec, label)?;
    let d = spec.dim as Real;
    let mut mu = 0.0;
    let mut var = 0.0;
    for c in &comps {
        let cbar = c.center.iter().sum::<Real>() / d;
        let spread = c.center.iter().map(|v| (v - cbar) * (v - cbar)).sum::<Real>() / d;
        let noise = (1.0 - 1.0 / d) * c.cov.iter().sum::<Real>() / d;
        mu += c.weight * cbar;
        var += c.weight * (spread + noise);
    }
    Ok(RegularizerTargets {
        mu_target: mu,
        var_target: var,
    })
}

/// Label-prior-weighted average of [`per_sample_targets`].
pub fn global_per_sample_targets(spec: &MixtureSpec) -> Result<RegularizerTargets> {
    let mut out = RegularizerTargets {
        mu_target: 0.0,
        var_target: 0.0,
    };
    for label in 0..spec.label_count {
        let t = per_sample_targets(spec, label)?;
        let p = spec.label_prior(label);
        out.mu_target += p * t.mu_target;
        out.var_target += p * t.var_target;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn single(center: Vec<Real>, cov: Vec<Real>) -> MixtureSpec {
        MixtureSpec {
            dim: center.len(),
            label_count: 1,
            components: vec![Component {
                label: 0,
                center,
                cov,
                weight: 1.0,
            }],
            label_priors: None,
        }
    }

    fn column_mean(t: &Tensor, j: usize) -> Real {
        (0..t.rows()).map(|i| t.row(i)[j]).sum::<Real>() / t.rows() as Real
    }

    #[test]
    fn single_component_mean() {
        let spec = single(vec![3.0, 3.0], vec![0.01, 0.01]);
        let b = sample_dataset(&spec, 10_000, &mut seeded(1, 0)).unwrap();
        for j in 0..2 {
            assert!((column_mean(&b.points, j) - 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn symmetric_pair_mean() {
        let spec = MixtureSpec {
            dim: 2,
            label_count: 1,
            components: vec![
                Component { label: 0, center: vec![-1.0, 0.0], cov: vec![0.01, 0.01], weight: 0.5 },
                Component { label: 0, center: vec![1.0, 0.0], cov: vec![0.01, 0.01], weight: 0.5 },
            ],
            label_priors: None,
        };
        let b = sample_dataset(&spec, 10_000, &mut seeded(2, 0)).unwrap();
        assert!(column_mean(&b.points, 0).abs() < 0.05);
        assert!(column_mean(&b.points, 1).abs() < 0.05);
    }

    #[test]
    fn single_draw() {
        let spec = MixtureSpec::gmm8();
        let b = sample_dataset(&spec, 1, &mut seeded(3, 0)).unwrap();
        assert_eq!(b.points.shape(), &[1, 2]);
        assert_eq!(b.len(), 1);
        assert!(b.labels[0] < 4);
        assert!(sample_dataset(&spec, 0, &mut seeded(3, 0)).is_err());
    }

    #[test]
    fn seeded_determinism() {
        let spec = MixtureSpec::gmm8();
        let a = sample_dataset(&spec, 500, &mut seeded(9, 1)).unwrap();
        let b = sample_dataset(&spec, 500, &mut seeded(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_stats_closed_forms() {
        let spec = single(vec![1.0, -2.0], vec![0.3, 0.4]);
        let (m, v) = target_stats(&spec, 0).unwrap();
        assert_eq!(m, vec![1.0, -2.0]);
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.4).abs() < 1e-15);

        let (mu, s2) = (1.5, 0.2);
        let pair = MixtureSpec {
            dim: 2,
            label_count: 1,
            components: vec![
                Component { label: 0, center: vec![mu, 0.0], cov: vec![s2, s2], weight: 0.5 },
                Component { label: 0, center: vec![-mu, 0.0], cov: vec![s2, s2], weight: 0.5 },
            ],
            label_priors: None,
        };
        let (m, v) = target_stats(&pair, 0).unwrap();
        assert!(m[0].abs() < 1e-15);
        assert!((v[0] - (s2 + mu * mu)).abs() < 1e-12);
        assert!((v[1] - s2).abs() < 1e-12);

        let point = MixtureSpec {
            dim: 2,
            label_count: 1,
            components: vec![
                Component { label: 0, center: vec![0.5, 0.5], cov: vec![0.0, 0.0], weight: 0.25 },
                Component { label: 0, center: vec![0.5, 0.5], cov: vec![0.0, 0.0], weight: 0.75 },
            ],
            label_priors: None,
        };
        let (_, v) = target_stats(&point, 0).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(matches!(target_stats(&point, 1), Err(Error::UnknownLabel(1))));
    }

    #[test]
    fn empirical_moments_converge() {
        let spec = MixtureSpec::gmm8();
        let n = 100_000;
        let mut rng = seeded(4, 0);
        for label in 0..spec.label_count {
            let pts = sample_label(&spec, label, n, &mut rng).unwrap();
            let (m, v) = target_stats(&spec, label).unwrap();
            for j in 0..2 {
                let em = column_mean(&pts, j);
                let sd = v[j].sqrt();
                assert!((em - m[j]).abs() < 5.0 * sd / (n as Real).sqrt(), "label {label} coord {j}");
                let ev = (0..n).map(|i| (pts.row(i)[j] - em).powi(2)).sum::<Real>() / n as Real;
                // Var of the sample variance is bounded by the fourth moment; a
                // loose 5% check is plenty for 1e5 draws here.
                assert!((ev - v[j]).abs() < 0.05 * v[j]);
            }
        }
    }

    #[test]
    fn per_sample_targets_match_simulation() {
        let spec = MixtureSpec::gmm8();
        let mut rng = seeded(8, 0);
        for label in 0..spec.label_count {
            let t = per_sample_targets(&spec, label).unwrap();
            let pts = sample_label(&spec, label, 200_000, &mut rng).unwrap();
            let (mut mu, mut var) = (0.0, 0.0);
            for i in 0..pts.rows() {
                let r = pts.row(i);
                let m = (r[0] + r[1]) / 2.0;
                mu += m;
                var += ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
            }
            mu /= pts.rows() as Real;
            var /= pts.rows() as Real;
            assert!((mu - t.mu_target).abs() < 0.01, "label {label}");
            assert!((var - t.var_target).abs() < 0.02 * t.var_target.max(0.1), "label {label}");
        }
    }

    #[test]
    fn json_schema() {
        let text = r#"{"dim": 2, "labels": 1, "components": [
            {"label": 0, "center": [0.0, 1.0], "cov": [0.1, 0.1], "weight": 1.0}]}"#;
        let spec = MixtureSpec::from_json(text).unwrap();
        assert_eq!(spec.dim, 2);
        let back = MixtureSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(spec, back);
        let bad = r#"{"dim": 2, "labels": 1, "components": [
            {"label": 0, "center": [0.0, 1.0], "cov": [0.1, 0.1], "weight": 0.4}]}"#;
        assert!(MixtureSpec::from_json(bad).is_err());
        let neg = r#"{"dim": 2, "labels": 1, "components": [
            {"label": 0, "center": [0.0, 1.0], "cov": [0.0, 0.1], "weight": 1.0}]}"#;
        assert!(MixtureSpec::from_json(neg).is_err());
        assert!(MixtureSpec::gmm8().validate().is_ok());
    }
}
