//! Distribution-quality metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MixtureSpec;
use crate::error::{Error, Result};
use crate::flowsim::renoise;
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_PROJECTIONS: usize = 128;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub sw2: Real,
    pub mean_of_means: Real,
    pub mean_of_vars: Real,
    pub mode_coverage: Real,
    pub loss_proxy: Real,
    pub loss_fake: Real,
    pub loss_reg: Real,
    pub tau_ca: Real,
    pub tau_dm: Real,
    pub t: Real,
}

impl MetricRecord {
    pub const CSV_HEADER: &'static str =
        "iteration,sw2,mean_of_means,mean_of_vars,mode_coverage,loss_proxy,loss_fake,loss_reg,tau_ca,tau_dm,t";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.sw2,
            self.mean_of_means,
            self.mean_of_vars,
            self.mode_coverage,
            self.loss_proxy,
            self.loss_fake,
            self.loss_reg,
            self.tau_ca,
            self.tau_dm,
            self.t
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::invalid(format!("metrics row has {} fields, expected 11", f.len())));
        }
        let num = |i: usize| -> Result<Real> {
            f[i].parse::<Real>()
                .map_err(|_| Error::invalid(format!("bad number `{}` in metrics row", f[i])))
        };
        Ok(MetricRecord {
            iteration: f[0].parse().map_err(|_| Error::invalid("bad iteration in metrics row"))?,
            sw2: num(1)?,
            mean_of_means: num(2)?,
            mean_of_vars: num(3)?,
            mode_coverage: num(4)?,
            loss_proxy: num(5)?,
            loss_fake: num(6)?,
            loss_reg: num(7)?,
            tau_ca: num(8)?,
            tau_dm: num(9)?,
            t: num(10)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        [
            self.sw2,
            self.mean_of_means,
            self.mean_of_vars,
            self.mode_coverage,
            self.loss_proxy,
            self.loss_fake,
            self.loss_reg,
            self.tau_ca,
            self.tau_dm,
            self.t,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Exact 2-Wasserstein distance between two sorted 1-D empirical samples.
///
/// Integrates the squared difference of the two quantile functions; the
/// breakpoints `i / n` and `j / m` are tracked in integer units of `1 / (n m)`.
pub fn wasserstein2_sorted(a: &[Real], b: &[Real]) -> Real {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return 0.0;
    }
    let total = (n * m) as Real;
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0usize;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += d * d * (next - pos) as Real;
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    (acc / total).sqrt()
}

fn sort(v: &mut [Real]) {
    v.sort_by(|x, y| x.total_cmp(y));
}

/// Random unit directions, reusable across comparisons.
pub fn random_projections(dim: usize, n_proj: usize, rng: &mut impl Rng) -> Vec<Vec<Real>> {
    (0..n_proj)
        .map(|_| loop {
            let v: Vec<Real> = (0..dim).map(|_| rng::normal(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Sliced W2 over the given projection directions.
pub fn sliced_wasserstein2_with(a: &Tensor, b: &Tensor, projections: &[Vec<Real>]) -> Result<Real> {
    let dim = a.cols();
    if dim == 0 || !a.is_matrix() || !b.is_matrix() {
        return Err(Error::invalid("sliced Wasserstein needs point matrices with dim > 0"));
    }
    if b.cols() != dim {
        return Err(Error::ShapeMismatch {
            context: "sliced_wasserstein2",
            expected: vec![b.rows(), dim],
            got: b.shape().to_vec(),
        });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid("sliced Wasserstein needs non-empty sets"));
    }
    if projections.is_empty() {
        return Err(Error::invalid("need at least one projection"));
    }
    let project = |t: &Tensor, dir: &[Real]| -> Vec<Real> {
        let mut out: Vec<Real> = (0..t.rows())
            .map(|i| t.row(i).iter().zip(dir).map(|(x, d)| x * d).sum())
            .collect();
        sort(&mut out);
        out
    };
    let mut acc = 0.0;
    for dir in projections {
        acc += wasserstein2_sorted(&project(a, dir), &project(b, dir));
    }
    Ok(acc / projections.len() as Real)
}

/// Average 1-D W2 over `n_proj` random unit projections.
pub fn sliced_wasserstein2(a: &Tensor, b: &Tensor, n_proj: usize, rng: &mut impl Rng) -> Result<Real> {
    if a.cols() == 0 {
        return Err(Error::invalid("sliced Wasserstein needs dim > 0"));
    }
    let proj = random_projections(a.cols(), n_proj, rng);
    sliced_wasserstein2_with(a, b, &proj)
}

/// Per-sample mean and population variance across each row's coordinates.
pub fn batch_sample_stats(batch: &Tensor) -> Result<(Vec<Real>, Vec<Real>)> {
    let d = batch.cols();
    if !batch.is_matrix() || d < 2 {
        return Err(Error::invalid("per-sample variance needs dim >= 2"));
    }
    let mut means = Vec::with_capacity(batch.rows());
    let mut vars = Vec::with_capacity(batch.rows());
    for i in 0..batch.rows() {
        let r = batch.row(i);
        let m = r.iter().sum::<Real>() / d as Real;
        let v = r.iter().map(|x| (x - m) * (x - m)).sum::<Real>() / d as Real;
        means.push(m);
        vars.push(v);
    }
    Ok((means, vars))
}

/// Fraction of a label's modes with at least one sample within
/// `radius_mult * sigma` of the center, `sigma` being the component's largest
/// standard deviation.
pub fn mode_coverage(samples: &Tensor, spec: &MixtureSpec, label: usize, radius_mult: Real) -> Result<Real> {
    if !(radius_mult > 0.0) {
        return Err(Error::invalid("radius_mult must be positive"));
    }
    if label >= spec.label_count {
        return Err(Error::UnknownLabel(label));
    }
    let comps = spec.components_of(label);
    if comps.is_empty() {
        return Err(Error::UnknownLabel(label));
    }
    if samples.rows() == 0 {
        return Ok(0.0);
    }
    let hit = comps
        .iter()
        .filter(|c| {
            let sigma = c.cov.iter().copied().fold(0.0, Real::max).sqrt();
            let r2 = (radius_mult * sigma).powi(2);
            (0..samples.rows()).any(|i| {
                samples.row(i).iter().zip(&c.center).map(|(x, m)| (x - m) * (x - m)).sum::<Real>() <= r2
            })
        })
        .count();
    Ok(hit as Real / comps.len() as Real)
}

/// Scott's-rule bandwidth per coordinate: `sd_j * n^(-1/(d+4))`.
pub fn scott_bandwidth(x: &Tensor) -> Vec<Real> {
    let (n, d) = (x.rows(), x.cols());
    let factor = (n as Real).powf(-1.0 / (d as Real + 4.0));
    (0..d)
        .map(|j| {
            let m = (0..n).map(|i| x.row(i)[j]).sum::<Real>() / n as Real;
            let v = (0..n).map(|i| (x.row(i)[j] - m).powi(2)).sum::<Real>() / (n.max(2) - 1) as Real;
            (v.sqrt() * factor).max(1e-6)
        })
        .collect()
}

/// Log of a Gaussian product-kernel density at `point`, optionally leaving
/// out one sample.
fn kde_log_density(samples: &Tensor, h: &[Real], point: &[Real], skip: Option<usize>) -> Real {
    let d = samples.cols();
    let log_norm: Real = h.iter().map(|hj| (hj * (2.0 * std::f64::consts::PI as Real).sqrt()).ln()).sum();
    let mut exps = Vec::with_capacity(samples.rows());
    for i in 0..samples.rows() {
        if Some(i) == skip {
            continue;
        }
        let r = samples.row(i);
        let mut q = 0.0;
        for j in 0..d {
            let z = (point[j] - r[j]) / h[j];
            q += z * z;
        }
        exps.push(-0.5 * q);
    }
    let count = exps.len() as Real;
    let mx = exps.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let s: Real = exps.iter().map(|e| (e - mx).exp()).sum();
    mx + s.ln() - count.ln() - log_norm
}

/// KDE plug-in estimate of `KL(p || q)` from samples; p's density at its own
/// samples is evaluated leave-one-out.
pub fn kde_kl(p: &Tensor, q: &Tensor, bandwidth: Option<Real>) -> Result<Real> {
    if p.cols() != q.cols() || p.rows() < 2 || q.rows() < 1 {
        return Err(Error::invalid("kde_kl needs matching dims and at least two p samples"));
    }
    let (hp, hq) = match bandwidth {
        Some(h) if h > 0.0 => (vec![h; p.cols()], vec![h; q.cols()]),
        Some(_) => return Err(Error::invalid("bandwidth must be positive")),
        None => (scott_bandwidth(p), scott_bandwidth(q)),
    };
    let mut acc = 0.0;
    for i in 0..p.rows() {
        let x = p.row(i);
        acc += kde_log_density(p, &hp, x, Some(i)) - kde_log_density(q, &hq, x, None);
    }
    Ok(acc / p.rows() as Real)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IklEstimate {
    pub value: Real,
    pub std_err: Real,
}

pub const IKL_MAX_DIM: usize = 3;

/// Monte-Carlo estimate of `int KL(p_tau || q_tau) dtau`, `tau ~ U(lo, hi)`.
///
/// `lo == hi` evaluates a single noise level. Both sample sets are re-noised
/// with fresh noise at each draw. The result is clamped at zero.
#[allow(clippy::too_many_arguments)]
pub fn ikl_estimate<R: Rng>(
    mut sampler_p: impl FnMut(usize, &mut R) -> Result<Tensor>,
    mut sampler_q: impl FnMut(usize, &mut R) -> Result<Tensor>,
    n_tau: usize,
    n_samples: usize,
    bandwidth: Option<Real>,
    tau_range: (Real, Real),
    rng: &mut R,
) -> Result<IklEstimate> {
    let (lo, hi) = tau_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::invalid("tau range must lie in [0, 1] with lo <= hi"));
    }
    if n_tau == 0 {
        return Err(Error::invalid("n_tau must be positive"));
    }
    let mut values = Vec::with_capacity(n_tau);
    for _ in 0..n_tau {
        let tau = if lo == hi { lo } else { rng::uniform(rng, lo, hi) };
        let p = sampler_p(n_samples, rng)?;
        let q = sampler_q(n_samples, rng)?;
        if p.cols() > IKL_MAX_DIM {
            return Err(Error::invalid(format!(
                "KDE-based IKL is limited to dim <= {IKL_MAX_DIM}, got {}",
                p.cols()
            )));
        }
        let eps_p = rng::normal_tensor(rng, p.rows(), p.cols());
        let eps_q = rng::normal_tensor(rng, q.rows(), q.cols());
        let pt = renoise(&p, &vec![tau; p.rows()], &eps_p)?;
        let qt = renoise(&q, &vec![tau; q.rows()], &eps_q)?;
        values.push(kde_kl(&pt, &qt, bandwidth)?);
    }
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    let std_err = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(IklEstimate {
        value: mean.max(0.0),
        std_err,
    })
}
