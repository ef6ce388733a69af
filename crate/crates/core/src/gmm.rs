//! Diagonal-covariance Gaussian mixture models fit by EM.
//!
//! The E-step works in log space (log-sum-exp), so widely separated
//! components and small variances stay finite. Component variances are
//! floored during the M-step. If a component's total responsibility collapses
//! below `1e-8`, it is reseeded at the point farthest (in the min-distance
//! sense) from the current means, with the global data variance and a uniform
//! prior share — the event is recorded in [`FitDiagnostics::reseeded`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) const LN_2PI: f64 = 1.8378770664093453;
/// Total responsibility below which a component counts as empty.
const EMPTY_COMPONENT: f64 = 1e-8;

/// Mixture of `k` axis-aligned Gaussians over `dim`-dimensional data.
///
/// `means` and `variances` are row-major `(k, dim)`; `weights` are the mixing
/// priors, non-negative and summing to one.
#[derive(Clone, Debug)]
pub struct GmmModel<S: Scalar> {
    k: usize,
    dim: usize,
    weights: Vec<S>,
    means: Vec<S>,
    variances: Vec<S>,
}

impl<S: Scalar> GmmModel<S> {
    pub fn new(
        k: usize,
        dim: usize,
        weights: Vec<S>,
        means: Vec<S>,
        variances: Vec<S>,
    ) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config("gmm needs k >= 1 and dim >= 1".into()));
        }
        if weights.len() != k || means.len() != k * dim || variances.len() != k * dim {
            return Err(Error::Shape(format!(
                "gmm arrays disagree with k={k}, dim={dim}: {} weights, {} means, {} variances",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| *w < S::zero() || !w.is_finite()) {
            return Err(Error::Input("gmm weights must be non-negative and finite".into()));
        }
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("gmm weights sum to {total}, expected 1")));
        }
        if variances.iter().any(|v| *v <= S::zero() || !v.is_finite()) {
            return Err(Error::Input("gmm variances must be positive and finite".into()));
        }
        // absorb the allowed rounding slack so downstream sums are exact
        let mut weights = weights;
        let inv = S::cast(1.0 / total);
        for w in &mut weights {
            *w *= inv;
        }
        Ok(GmmModel { k, dim, weights, means, variances })
    }

    /// Uniform-weight mixture, a common construction for derived models.
    pub fn with_uniform_weights(k: usize, dim: usize, means: Vec<S>, variances: Vec<S>) -> Result<Self> {
        let w = vec![S::cast(1.0 / k as f64); k];
        Self::new(k, dim, w, means, variances)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn means(&self) -> &[S] {
        &self.means
    }

    pub fn variances(&self) -> &[S] {
        &self.variances
    }

    pub fn mean(&self, j: usize) -> &[S] {
        &self.means[j * self.dim..(j + 1) * self.dim]
    }

    pub fn variance(&self, j: usize) -> &[S] {
        &self.variances[j * self.dim..(j + 1) * self.dim]
    }

    /// Log density of component `j` at `x` (without the mixing weight).
    pub fn log_component_density(&self, j: usize, x: &[S]) -> S {
        debug_assert_eq!(x.len(), self.dim);
        let mu = self.mean(j);
        let var = self.variance(j);
        let mut acc = S::zero();
        for ((&xv, &m), &v) in x.iter().zip(mu).zip(var) {
            let d = xv - m;
            acc += v.ln() + d * d / v;
        }
        S::cast(-0.5) * (acc + S::cast(self.dim as f64 * LN_2PI))
    }

    /// Log of the full mixture density at one point.
    pub fn log_density(&self, x: &[S]) -> Result<S> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "point has {} dims, model has {}",
                x.len(),
                self.dim
            )));
        }
        let mut lps = vec![S::zero(); self.k];
        for j in 0..self.k {
            lps[j] = self.weights[j].ln() + self.log_component_density(j, x);
        }
        Ok(log_sum_exp(&lps))
    }

    /// Posterior component probabilities for `m` stacked points.
    pub fn responsibilities(&self, x: &[S], m: usize) -> Result<Responsibilities<S>> {
        if x.len() != m * self.dim {
            return Err(Error::Shape(format!(
                "{} values cannot hold {m} points of dim {}",
                x.len(),
                self.dim
            )));
        }
        let mut tau = vec![S::zero(); m * self.k];
        let (k, dim) = (self.k, self.dim);
        tau.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
            let xi = &x[i * dim..(i + 1) * dim];
            for j in 0..k {
                row[j] = self.weights[j].ln() + self.log_component_density(j, xi);
            }
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        });
        Ok(Responsibilities { tau, samples: m, k })
    }

    /// Most probable component per point; ties resolve to the lowest index.
    pub fn hard_assign(&self, x: &[S], m: usize) -> Result<Vec<usize>> {
        let r = self.responsibilities(x, m)?;
        Ok((0..m)
            .map(|i| {
                let row = r.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = GmmJson {
            version: GMM_JSON_VERSION.to_string(),
            k: self.k,
            dim: self.dim,
            weights: self.weights.iter().map(|v| v.as_f64()).collect(),
            means: self.means.iter().map(|v| v.as_f64()).collect(),
            variances: self.variances.iter().map(|v| v.as_f64()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: GmmJson = serde_json::from_str(text)?;
        if doc.version != GMM_JSON_VERSION {
            return Err(Error::format(
                0,
                format!("unsupported gmm document version '{}'", doc.version),
            ));
        }
        GmmModel::new(
            doc.k,
            doc.dim,
            doc.weights.into_iter().map(S::cast).collect(),
            doc.means.into_iter().map(S::cast).collect(),
            doc.variances.into_iter().map(S::cast).collect(),
        )
    }
}

const GMM_JSON_VERSION: &str = "gmm-v1";

#[derive(Serialize, Deserialize)]
struct GmmJson {
    version: String,
    k: usize,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

/// Posterior matrix `(samples, k)`; every row sums to 1.
#[derive(Clone, Debug)]
pub struct Responsibilities<S: Scalar> {
    pub tau: Vec<S>,
    pub samples: usize,
    pub k: usize,
}

impl<S: Scalar> Responsibilities<S> {
    pub fn row(&self, i: usize) -> &[S] {
        &self.tau[i * self.k..(i + 1) * self.k]
    }
}

fn log_sum_exp<S: Scalar>(vals: &[S]) -> S {
    let mx = vals.iter().cloned().fold(S::neg_infinity(), S::max);
    if !mx.is_finite() {
        return mx;
    }
    let sum: S = vals.iter().map(|&v| (v - mx).exp()).sum();
    mx + sum.ln()
}

/// K-means++ seeding: the first center is uniform, each further center is
/// drawn with probability proportional to the squared distance to the nearest
/// center already chosen. Fully determined by `seed`.
pub fn kmeanspp_init<S: Scalar>(
    x: &[S],
    m: usize,
    dim: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<S>> {
    if k == 0 || dim == 0 {
        return Err(Error::Config("kmeans++ needs k >= 1 and dim >= 1".into()));
    }
    if m < k {
        return Err(Error::Input(format!("cannot place {k} centers on {m} points")));
    }
    if x.len() != m * dim {
        return Err(Error::Shape(format!("{} values cannot hold {m} points of dim {dim}", x.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; m];

    let first = rng.random_range(0..m);
    centers.extend_from_slice(&x[first * dim..(first + 1) * dim]);
    chosen[first] = true;

    let mut mind2 = vec![f64::INFINITY; m];
    for _ in 1..k {
        let latest = &centers[centers.len() - dim..];
        for i in 0..m {
            let mut d2 = 0.0;
            for (c, &cv) in latest.iter().enumerate() {
                let d = x[i * dim + c].as_f64() - cv.as_f64();
                d2 += d * d;
            }
            if d2 < mind2[i] {
                mind2[i] = d2;
            }
        }
        let total: f64 = mind2.iter().sum();
        let mut pick = None;
        if total > 0.0 && total.is_finite() {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for i in 0..m {
                acc += mind2[i];
                if acc > r && !chosen[i] {
                    pick = Some(i);
                    break;
                }
            }
        }
        // weight mass exhausted (duplicates, rounding): first unchosen point
        let pick = match pick {
            Some(i) => i,
            None => (0..m).find(|&i| !chosen[i]).expect("m >= k leaves a point"),
        };
        centers.extend_from_slice(&x[pick * dim..(pick + 1) * dim]);
        chosen[pick] = true;
    }
    Ok(centers)
}

/// Knobs for [`em_fit`].
#[derive(Clone, Copy, Debug)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tol: f64,
    /// Lower bound applied to every variance in the M-step.
    pub var_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { max_iter: 200, tol: 1e-6, var_floor: 1e-6 }
    }
}

/// What happened during an EM fit.
#[derive(Clone, Debug, Default)]
pub struct FitDiagnostics {
    /// Mean log-likelihood after each iteration's E-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `(iteration, component)` pairs where an empty component was reseeded.
    pub reseeded: Vec<(usize, usize)>,
}

/// Run EM from the given initial means.
pub fn em_fit<S: Scalar>(
    x: &[S],
    m: usize,
    dim: usize,
    k: usize,
    init_means: &[S],
    opts: &EmOptions,
) -> Result<(GmmModel<S>, FitDiagnostics)> {
    if m == 0 {
        return Err(Error::Input("em_fit needs at least one point".into()));
    }
    if x.len() != m * dim {
        return Err(Error::Shape(format!("{} values cannot hold {m} points of dim {dim}", x.len())));
    }
    if init_means.len() != k * dim {
        return Err(Error::Shape(format!(
            "{} initial means cannot seed k={k}, dim={dim}",
            init_means.len()
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::Config("em max_iter must be positive".into()));
    }

    // global per-dim variance: EM's initial spread and the reseeding fallback
    let global_var: Vec<S> = {
        let mut mean = vec![0.0f64; dim];
        for i in 0..m {
            for c in 0..dim {
                mean[c] += x[i * dim + c].as_f64();
            }
        }
        for v in &mut mean {
            *v /= m as f64;
        }
        let mut var = vec![0.0f64; dim];
        for i in 0..m {
            for c in 0..dim {
                let d = x[i * dim + c].as_f64() - mean[c];
                var[c] += d * d;
            }
        }
        var.into_iter().map(|v| S::cast((v / m as f64).max(opts.var_floor))).collect()
    };

    let mut model = GmmModel::new(
        k,
        dim,
        vec![S::cast(1.0 / k as f64); k],
        init_means.to_vec(),
        global_var.iter().cloned().cycle().take(k * dim).collect(),
    )?;

    let mut diag = FitDiagnostics::default();
    let floor = S::cast(opts.var_floor);

    for iter in 0..opts.max_iter {
        // E-step
        let resp = model.responsibilities(x, m)?;
        let mut ll = 0.0f64;
        for i in 0..m {
            let xi = &x[i * dim..(i + 1) * dim];
            ll += model.log_density(xi)?.as_f64();
        }
        let mean_ll = ll / m as f64;
        let prev = diag.log_likelihood.last().copied();
        diag.log_likelihood.push(mean_ll);
        diag.iterations = iter + 1;
        if let Some(prev) = prev {
            if (mean_ll - prev).abs() < opts.tol {
                diag.converged = true;
                break;
            }
        }

        // M-step
        let mut nk = vec![0.0f64; k];
        for i in 0..m {
            for (j, &t) in resp.row(i).iter().enumerate() {
                nk[j] += t.as_f64();
            }
        }
        let mut new_means = vec![S::zero(); k * dim];
        let mut new_vars = vec![S::zero(); k * dim];
        let mut new_weights = vec![S::zero(); k];
        let mut reseed: Vec<usize> = Vec::new();
        for j in 0..k {
            if nk[j] < EMPTY_COMPONENT {
                reseed.push(j);
                continue;
            }
            let inv = S::cast(1.0 / nk[j]);
            for i in 0..m {
                let t = resp.row(i)[j];
                for c in 0..dim {
                    new_means[j * dim + c] += t * x[i * dim + c];
                }
            }
            for c in 0..dim {
                new_means[j * dim + c] *= inv;
            }
            for i in 0..m {
                let t = resp.row(i)[j];
                for c in 0..dim {
                    let d = x[i * dim + c] - new_means[j * dim + c];
                    new_vars[j * dim + c] += t * d * d;
                }
            }
            for c in 0..dim {
                new_vars[j * dim + c] = (new_vars[j * dim + c] * inv).max(floor);
            }
            new_weights[j] = S::cast(nk[j] / m as f64);
        }
        for &j in &reseed {
            // farthest point from the surviving means, by min distance
            let far = farthest_point(x, m, dim, &new_means, (0..k).filter(|j| !reseed.contains(j)));
            new_means[j * dim..(j + 1) * dim].copy_from_slice(&x[far * dim..(far + 1) * dim]);
            new_vars[j * dim..(j + 1) * dim].copy_from_slice(&global_var);
            new_weights[j] = S::cast(1.0 / k as f64);
            diag.reseeded.push((iter, j));
        }
        let wsum: f64 = new_weights.iter().map(|w| w.as_f64()).sum();
        let norm = S::cast(1.0 / wsum);
        for w in &mut new_weights {
            *w *= norm;
        }
        model = GmmModel::new(k, dim, new_weights, new_means, new_vars)?;
    }
    Ok((model, diag))
}

fn farthest_point<S: Scalar>(
    x: &[S],
    m: usize,
    dim: usize,
    means: &[S],
    alive: impl Iterator<Item = usize> + Clone,
) -> usize {
    let mut best = 0usize;
    let mut best_d = -1.0f64;
    for i in 0..m {
        let mut min_d = f64::INFINITY;
        for j in alive.clone() {
            let mut d2 = 0.0;
            for c in 0..dim {
                let d = x[i * dim + c].as_f64() - means[j * dim + c].as_f64();
                d2 += d * d;
            }
            min_d = min_d.min(d2);
        }
        if !min_d.is_finite() {
            min_d = 0.0;
        }
        if min_d > best_d {
            best_d = min_d;
            best = i;
        }
    }
    best
}

/// K-means++ seeding followed by EM, the standard two-stage fit.
pub fn fit_gmm<S: Scalar>(
    x: &[S],
    m: usize,
    dim: usize,
    k: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<(GmmModel<S>, FitDiagnostics)> {
    let centers = kmeanspp_init(x, m, dim, k, seed)?;
    em_fit(x, m, dim, k, &centers, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_log_density() {
        // N(0,1) at 0: -0.5*ln(2*pi)
        let g = GmmModel::<f64>::new(1, 1, vec![1.0], vec![0.0], vec![1.0]).unwrap();
        assert!((g.log_density(&[0.0]).unwrap() + 0.5 * LN_2PI).abs() < 1e-12);
        // at x=2: -0.5*ln(2*pi) - 2
        assert!((g.log_density(&[2.0]).unwrap() + 0.5 * LN_2PI + 2.0).abs() < 1e-12);
    }

    #[test]
    fn responsibilities_rows_sum_to_one_and_prefer_near_component() {
        let g = GmmModel::<f64>::new(
            2,
            1,
            vec![0.5, 0.5],
            vec![-5.0, 5.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let r = g.responsibilities(&[-4.9, 4.9, 0.0], 3).unwrap();
        for i in 0..3 {
            let s: f64 = r.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(r.row(0)[0] > 0.99);
        assert!(r.row(1)[1] > 0.99);
        assert!((r.row(2)[0] - 0.5).abs() < 1e-9); // symmetric point
    }

    #[test]
    fn equal_weights_at_midpoint_even_with_tiny_variances() {
        // log-space evaluation must survive variances that underflow densities
        let g = GmmModel::<f64>::new(
            2,
            1,
            vec![0.5, 0.5],
            vec![-30.0, 30.0],
            vec![1e-4, 1e-4],
        )
        .unwrap();
        let r = g.responsibilities(&[0.0], 1).unwrap();
        assert!(r.row(0).iter().all(|v| v.is_finite()));
        assert!((r.row(0)[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn weights_must_be_a_distribution() {
        assert!(GmmModel::<f64>::new(2, 1, vec![0.9, 0.3], vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(GmmModel::<f64>::new(2, 1, vec![-0.5, 1.5], vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(GmmModel::<f64>::new(2, 1, vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn kmeanspp_with_k_equal_m_is_a_permutation() {
        let x: Vec<f64> = vec![0.0, 1.0, 2.0, 3.0, 10.0, 11.0];
        let centers = kmeanspp_init(&x, 3, 2, 3, 7).unwrap();
        let mut rows: Vec<[f64; 2]> = centers.chunks(2).map(|c| [c[0], c[1]]).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<[f64; 2]> = x.chunks(2).map(|c| [c[0], c[1]]).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, want);
    }

    #[test]
    fn kmeanspp_is_seed_deterministic() {
        let x: Vec<f64> = (0..100).map(|i| (i * 37 % 100) as f64).collect();
        let a = kmeanspp_init(&x, 50, 2, 5, 42).unwrap();
        let b = kmeanspp_init(&x, 50, 2, 5, 42).unwrap();
        let c = kmeanspp_init(&x, 50, 2, 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn json_round_trip_preserves_model() {
        let g = GmmModel::<f64>::new(
            2,
            2,
            vec![0.25, 0.75],
            vec![0.0, 1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let s = g.to_json_string().unwrap();
        assert!(s.contains("\"version\": \"gmm-v1\""));
        let h = GmmModel::<f64>::from_json_str(&s).unwrap();
        assert_eq!(g.weights(), h.weights());
        assert_eq!(g.means(), h.means());
        assert_eq!(g.variances(), h.variances());
        let bad = s.replace("gmm-v1", "gmm-v9");
        assert!(GmmModel::<f64>::from_json_str(&bad).is_err());
    }

    #[test]
    fn em_recovers_two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        for _ in 0..300 {
            x.push(-4.0 + gauss(&mut rng) * 0.5);
        }
        for _ in 0..700 {
            x.push(3.0 + gauss(&mut rng) * 0.7);
        }
        let (model, diag) = fit_gmm(&x, 1000, 1, 2, 9, &EmOptions::default()).unwrap();
        assert!(diag.converged);
        for pair in diag.log_likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "log-likelihood decreased: {pair:?}");
        }
        let mut means: Vec<f64> = model.means().to_vec();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] + 4.0).abs() < 0.2, "means: {means:?}");
        assert!((means[1] - 3.0).abs() < 0.2, "means: {means:?}");
    }

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller is plenty for test data
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
