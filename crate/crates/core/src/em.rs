//! Expectation-maximization for diagonal Gaussian mixtures.
//!
//! A non-gradient fitting route used to cross-check the mixture likelihood
//! code and the distributions learned by the sequence model. The E-step
//! evaluates its own per-component log densities rather than calling the
//! mixture module, so the two likelihood paths stay independent.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, GmmParams};
use crate::rng::rng_from_seed;

const LN_2PI: f64 = 1.8378770664093453;

/// A component whose responsibility mass falls below this is considered
/// empty and re-seeded from the worst-explained data point.
const EMPTY_COMPONENT_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    pub n_components: usize,
    pub max_iters: usize,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tolerance: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            n_components: 1,
            max_iters: 200,
            tolerance: 1e-6,
            variance_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Fit result: mixture parameters plus the mean log-likelihood trace, one
/// entry per E-step (the last entry is the likelihood of the returned
/// parameters).
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: GmmParams,
    pub trace: Vec<f64>,
}

struct EStep {
    responsibilities: Array2<f64>,
    mean_loglik: f64,
}

fn component_log_density(
    point: ndarray::ArrayView1<'_, f64>,
    mean: ndarray::ArrayView1<'_, f64>,
    var: ndarray::ArrayView1<'_, f64>,
) -> f64 {
    let mut lp = 0.0;
    for d in 0..point.len() {
        let diff = point[d] - mean[d];
        lp += -0.5 * (LN_2PI + var[d].ln() + diff * diff / var[d]);
    }
    lp
}

fn e_step(params: &GmmParams, data: ArrayView2<'_, f64>) -> EStep {
    let n = data.nrows();
    let m = params.n_components();
    let mut responsibilities = Array2::zeros((n, m));
    let mut total = 0.0;
    let mut lps = vec![0.0; m];
    for (idx, point) in data.rows().into_iter().enumerate() {
        for i in 0..m {
            lps[i] = params.weights[i].ln()
                + component_log_density(point, params.means.row(i), params.variances.row(i));
        }
        let lse = log_sum_exp(&lps);
        total += lse;
        for i in 0..m {
            responsibilities[[idx, i]] = (lps[i] - lse).exp();
        }
    }
    EStep {
        responsibilities,
        mean_loglik: total / n as f64,
    }
}

fn pooled_variance(data: ArrayView2<'_, f64>, floor: f64) -> Array1<f64> {
    let n = data.nrows() as f64;
    let mean = data.mean_axis(ndarray::Axis(0)).unwrap();
    let mut var = Array1::<f64>::zeros(data.ncols());
    for point in data.rows() {
        for d in 0..data.ncols() {
            let diff = point[d] - mean[d];
            var[d] += diff * diff;
        }
    }
    var.mapv(|v| (v / n).max(floor))
}

/// k-means++ style seeding: first center uniform, later centers drawn with
/// probability proportional to squared distance from the nearest center.
fn kmeans_pp_centers(
    data: ArrayView2<'_, f64>,
    m: usize,
    rng: &mut crate::rng::Rng,
) -> Vec<usize> {
    let n = data.nrows();
    let mut centers = Vec::with_capacity(m);
    centers.push(rng.gen_range(0..n));
    let mut d2 = vec![0.0f64; n];
    while centers.len() < m {
        let mut total = 0.0;
        for (i, point) in data.rows().into_iter().enumerate() {
            let mut best = f64::INFINITY;
            for &c in &centers {
                let mut dist = 0.0;
                for d in 0..data.ncols() {
                    let diff = point[d] - data[[c, d]];
                    dist += diff * diff;
                }
                best = best.min(dist);
            }
            d2[i] = best;
            total += best;
        }
        if total <= 0.0 || !total.is_finite() {
            // all remaining mass sits on chosen centers: fall back to uniform
            centers.push(rng.gen_range(0..n));
            continue;
        }
        let u: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        centers.push(pick);
    }
    centers
}

fn m_step(
    responsibilities: &Array2<f64>,
    data: ArrayView2<'_, f64>,
    pooled: &Array1<f64>,
    current_loglik_per_point: impl Fn(ndarray::ArrayView1<'_, f64>) -> f64,
    floor: f64,
) -> GmmParams {
    let (n, m) = responsibilities.dim();
    let dim = data.ncols();
    let mut weights = Array1::zeros(m);
    let mut means = Array2::zeros((m, dim));
    let mut variances = Array2::zeros((m, dim));

    let mass: Vec<f64> = (0..m)
        .map(|i| responsibilities.column(i).sum())
        .collect();

    for i in 0..m {
        if mass[i] < EMPTY_COMPONENT_MASS {
            // restart rule: re-seed the component at the point the current
            // mixture explains worst, with pooled variance and a nominal
            // weight of 1/n (weights are renormalized below)
            let worst = data
                .rows()
                .into_iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    current_loglik_per_point(*a)
                        .partial_cmp(&current_loglik_per_point(*b))
                        .unwrap()
                })
                .map(|(idx, _)| idx)
                .unwrap();
            weights[i] = 1.0 / n as f64;
            means.row_mut(i).assign(&data.row(worst));
            variances.row_mut(i).assign(pooled);
            continue;
        }
        weights[i] = mass[i] / n as f64;
        for (idx, point) in data.rows().into_iter().enumerate() {
            let r = responsibilities[[idx, i]];
            for d in 0..dim {
                means[[i, d]] += r * point[d];
            }
        }
        for d in 0..dim {
            means[[i, d]] /= mass[i];
        }
        for (idx, point) in data.rows().into_iter().enumerate() {
            let r = responsibilities[[idx, i]];
            for d in 0..dim {
                let diff = point[d] - means[[i, d]];
                variances[[i, d]] += r * diff * diff;
            }
        }
        for d in 0..dim {
            variances[[i, d]] = (variances[[i, d]] / mass[i]).max(floor);
        }
    }

    let z: f64 = weights.sum();
    weights.mapv_inplace(|w| w / z);
    GmmParams {
        weights,
        means,
        variances,
    }
}

/// Fit a diagonal mixture by EM with k-means++ seeding.
pub fn em_fit(data: ArrayView2<'_, f64>, cfg: &EmConfig) -> Result<EmFit> {
    let n = data.nrows();
    let m = cfg.n_components;
    if m == 0 {
        return Err(Error::invalid("n_components must be >= 1"));
    }
    if n < m {
        return Err(Error::invalid(format!(
            "{n} data points cannot support {m} components"
        )));
    }
    if data.ncols() == 0 {
        return Err(Error::invalid("data has zero dimensions"));
    }
    if !(cfg.tolerance > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite value in data"));
    }

    let mut rng = rng_from_seed(cfg.seed);
    let pooled = pooled_variance(data, cfg.variance_floor);
    let centers = kmeans_pp_centers(data, m, &mut rng);
    let mut means = Array2::zeros((m, data.ncols()));
    for (i, &c) in centers.iter().enumerate() {
        means.row_mut(i).assign(&data.row(c));
    }
    let mut variances = Array2::zeros((m, data.ncols()));
    for i in 0..m {
        variances.row_mut(i).assign(&pooled);
    }
    let mut params = GmmParams {
        weights: Array1::from_elem(m, 1.0 / m as f64),
        means,
        variances,
    };

    let mut stats = e_step(&params, data);
    let mut trace = vec![stats.mean_loglik];
    for _ in 0..cfg.max_iters {
        let prev_params = params.clone();
        params = m_step(
            &stats.responsibilities,
            data,
            &pooled,
            |point| {
                let m = prev_params.n_components();
                let mut lps = vec![0.0; m];
                for i in 0..m {
                    lps[i] = prev_params.weights[i].ln()
                        + component_log_density(
                            point,
                            prev_params.means.row(i),
                            prev_params.variances.row(i),
                        );
                }
                log_sum_exp(&lps)
            },
            cfg.variance_floor,
        );
        let prev_ll = stats.mean_loglik;
        stats = e_step(&params, data);
        trace.push(stats.mean_loglik);
        if stats.mean_loglik - prev_ll < cfg.tolerance {
            break;
        }
    }

    params.validate()?;
    Ok(EmFit { params, trace })
}
