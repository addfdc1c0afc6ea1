//! Diagonal-covariance Gaussian mixtures parameterized by unconstrained
//! network outputs.
//!
//! A mixture head produces, per step, a weight logit vector, a mean matrix
//! and a log-variance matrix. [`activate`] maps those onto valid mixture
//! parameters (softmax weights, exponentiated and floored variances),
//! [`log_density`] evaluates the mixture log-density via log-sum-exp,
//! [`nll_grad`] returns the analytic gradient of the negative log-likelihood
//! with respect to the unconstrained head, and [`sample`] draws ancestrally.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smallest variance a component may report after activation.
///
/// `exp(v)` is clamped from below so a component collapsing onto a data point
/// cannot drive the likelihood to infinity. Components sitting on the clamp
/// receive a zero log-variance gradient.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Unconstrained mixture head: one weight logit per component plus a mean and
/// a log-variance per component per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMdnHead {
    /// Weight logits, length M.
    pub logits: Array1<f64>,
    /// Unconstrained means, M x D.
    pub means: Array2<f64>,
    /// Unconstrained log-variances, M x D.
    pub log_variances: Array2<f64>,
}

impl RawMdnHead {
    pub fn n_components(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Check shape consistency and finiteness, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let m = self.logits.len();
        if m == 0 {
            return Err(Error::invalid("head has zero components"));
        }
        if self.means.nrows() != m || self.log_variances.nrows() != m {
            return Err(Error::invalid(format!(
                "head fields disagree on component count: logits {}, means {}, log_variances {}",
                m,
                self.means.nrows(),
                self.log_variances.nrows()
            )));
        }
        if self.means.ncols() == 0 {
            return Err(Error::invalid("head has zero dimensions"));
        }
        if self.means.ncols() != self.log_variances.ncols() {
            return Err(Error::invalid(format!(
                "head fields disagree on dimension: means {}, log_variances {}",
                self.means.ncols(),
                self.log_variances.ncols()
            )));
        }
        for (name, ok) in [
            ("logits", self.logits.iter().all(|v| v.is_finite())),
            ("means", self.means.iter().all(|v| v.is_finite())),
            (
                "log_variances",
                self.log_variances.iter().all(|v| v.is_finite()),
            ),
        ] {
            if !ok {
                return Err(Error::invalid(format!("non-finite value in field `{name}`")));
            }
        }
        Ok(())
    }
}

/// Constrained mixture parameters: positive weights summing to one, means,
/// and strictly positive diagonal variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    /// Mixture weights, length M.
    pub weights: Array1<f64>,
    /// Component means, M x D.
    pub means: Array2<f64>,
    /// Per-dimension variances, M x D.
    pub variances: Array2<f64>,
}

impl GmmParams {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 || self.means.ncols() == 0 {
            return Err(Error::invalid("mixture must have M >= 1 and D >= 1"));
        }
        if self.means.nrows() != m || self.variances.dim() != self.means.dim() {
            return Err(Error::invalid("mixture fields disagree on shape"));
        }
        if !self.weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::invalid("weights must be finite and strictly positive"));
        }
        let sum: f64 = self.weights.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
        }
        if !self.means.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite mean"));
        }
        if !self.variances.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::invalid("variances must be finite and strictly positive"));
        }
        Ok(())
    }
}

/// Gradient of a scalar loss with respect to a [`RawMdnHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub d_logits: Array1<f64>,
    pub d_means: Array2<f64>,
    pub d_log_variances: Array2<f64>,
}

impl HeadGrad {
    pub fn zeros(n_components: usize, dim: usize) -> Self {
        HeadGrad {
            d_logits: Array1::zeros(n_components),
            d_means: Array2::zeros((n_components, dim)),
            d_log_variances: Array2::zeros((n_components, dim)),
        }
    }
}

/// Numerically stable `log(sum(exp(x)))` over a slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf (or an empty slice): the sum is zero.
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Map an unconstrained head onto valid mixture parameters.
///
/// Weights come from a max-subtracted softmax of the logits; variances are
/// `exp` of the log-variances clamped to [`VARIANCE_FLOOR`]; means pass
/// through unchanged.
pub fn activate(raw: &RawMdnHead) -> Result<GmmParams> {
    raw.validate()?;
    let max = raw.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Array1<f64> = raw.logits.mapv(|a| (a - max).exp());
    let z = weights.sum();
    weights.mapv_inplace(|w| w / z);
    let variances = raw.log_variances.mapv(|v| v.exp().max(VARIANCE_FLOOR));
    Ok(GmmParams {
        weights,
        means: raw.means.clone(),
        variances,
    })
}

/// Per-component log densities `ln w_i + ln N(y; mu_i, diag(sigma_i^2))`.
fn component_log_densities(gmm: &GmmParams, y: ArrayView1<'_, f64>) -> Vec<f64> {
    let m = gmm.n_components();
    let mut lps = Vec::with_capacity(m);
    for i in 0..m {
        let mut lp = gmm.weights[i].ln();
        for d in 0..gmm.dim() {
            let var = gmm.variances[[i, d]];
            let diff = y[d] - gmm.means[[i, d]];
            lp += -0.5 * (LN_2PI + var.ln() + diff * diff / var);
        }
        lps.push(lp);
    }
    lps
}

fn check_observation(gmm: &GmmParams, y: ArrayView1<'_, f64>) -> Result<()> {
    if y.len() != gmm.dim() {
        return Err(Error::invalid(format!(
            "observation has dimension {}, mixture expects {}",
            y.len(),
            gmm.dim()
        )));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite value in observation"));
    }
    Ok(())
}

/// Mixture log-density `log sum_i w_i N(y; mu_i, diag(sigma_i^2))`.
pub fn log_density(gmm: &GmmParams, y: ArrayView1<'_, f64>) -> Result<f64> {
    check_observation(gmm, y)?;
    Ok(log_sum_exp(&component_log_densities(gmm, y)))
}

/// Negative log-likelihood of `y` under the mixture.
pub fn nll(gmm: &GmmParams, y: ArrayView1<'_, f64>) -> Result<f64> {
    Ok(-log_density(gmm, y)?)
}

/// NLL together with the analytic gradient with respect to the raw head.
///
/// With responsibilities `gamma_i = w_i N_i / sum_j w_j N_j`:
///
/// * `d/d logit_i   = w_i - gamma_i`
/// * `d/d mean_id   = gamma_i (mu_id - y_d) / var_id`
/// * `d/d logvar_id = gamma_i * 0.5 * (1 - (y_d - mu_id)^2 / var_id)`,
///   zero when the variance sits on [`VARIANCE_FLOOR`].
pub fn nll_grad(raw: &RawMdnHead, y: ArrayView1<'_, f64>) -> Result<(f64, HeadGrad)> {
    let gmm = activate(raw)?;
    check_observation(&gmm, y)?;
    let m = gmm.n_components();
    let dim = gmm.dim();

    let lps = component_log_densities(&gmm, y);
    let lse = log_sum_exp(&lps);
    let mut grad = HeadGrad::zeros(m, dim);

    for i in 0..m {
        let gamma = (lps[i] - lse).exp();
        grad.d_logits[i] = gmm.weights[i] - gamma;
        for d in 0..dim {
            let var = gmm.variances[[i, d]];
            let diff = y[d] - gmm.means[[i, d]];
            grad.d_means[[i, d]] = gamma * (gmm.means[[i, d]] - y[d]) / var;
            // The clamp is flat in v, so a floored component contributes no
            // log-variance gradient.
            let clamped = raw.log_variances[[i, d]].exp() < VARIANCE_FLOOR;
            grad.d_log_variances[[i, d]] = if clamped {
                0.0
            } else {
                gamma * 0.5 * (1.0 - diff * diff / var)
            };
        }
    }
    Ok((-lse, grad))
}

/// Ancestral draw: pick a component by its weight, then draw each dimension
/// from a normal whose standard deviation is scaled by `temperature`.
///
/// `temperature = 0` returns the selected component's mean exactly. The
/// random stream advances by the same amount for every temperature.
pub fn sample(gmm: &GmmParams, rng: &mut Rng, temperature: f64) -> Result<Array1<f64>> {
    Ok(sample_with_index(gmm, rng, temperature)?.1)
}

/// [`sample`], but also reporting which component was drawn.
pub fn sample_with_index(
    gmm: &GmmParams,
    rng: &mut Rng,
    temperature: f64,
) -> Result<(usize, Array1<f64>)> {
    gmm.validate()?;
    if !(temperature >= 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be >= 0, got {temperature}"
        )));
    }
    let u: f64 = rng.gen();
    let mut cdf = 0.0;
    let mut index = gmm.n_components() - 1;
    for (i, w) in gmm.weights.iter().enumerate() {
        cdf += w;
        if u < cdf {
            index = i;
            break;
        }
    }
    let mut value = Array1::zeros(gmm.dim());
    for d in 0..gmm.dim() {
        let noise: f64 = rng.sample(StandardNormal);
        value[d] = gmm.means[[index, d]] + temperature * gmm.variances[[index, d]].sqrt() * noise;
    }
    Ok((index, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn head(logits: &[f64], means: &[[f64; 1]], log_vars: &[[f64; 1]]) -> RawMdnHead {
        RawMdnHead {
            logits: arr1(logits),
            means: arr2(means),
            log_variances: arr2(log_vars),
        }
    }

    #[test]
    fn softmax_symmetric() {
        let raw = head(&[0.0, 0.0], &[[0.0], [0.0]], &[[0.0], [0.0]]);
        let gmm = activate(&raw).unwrap();
        assert_eq!(gmm.weights[0], 0.5);
        assert_eq!(gmm.weights[1], 0.5);
    }

    #[test]
    fn zero_log_variance_gives_unit_variance() {
        let raw = head(&[0.0], &[[1.5]], &[[0.0]]);
        let gmm = activate(&raw).unwrap();
        assert_eq!(gmm.variances[[0, 0]], 1.0);
    }

    #[test]
    fn softmax_ratio_one_to_three() {
        let raw = head(&[0.0, 3f64.ln()], &[[0.0], [0.0]], &[[0.0], [0.0]]);
        let gmm = activate(&raw).unwrap();
        assert!((gmm.weights[0] - 0.25).abs() < 1e-15, "w0={}", gmm.weights[0]);
        assert!((gmm.weights[1] - 0.75).abs() < 1e-15, "w1={}", gmm.weights[1]);
    }

    #[test]
    fn activate_rejects_non_finite_naming_field() {
        let raw = head(&[f64::NAN, 0.0], &[[0.0], [0.0]], &[[0.0], [0.0]]);
        let err = activate(&raw).unwrap_err().to_string();
        assert!(err.contains("logits"), "error should name the field: {err}");

        let raw = head(&[0.0, 0.0], &[[f64::INFINITY], [0.0]], &[[0.0], [0.0]]);
        let err = activate(&raw).unwrap_err().to_string();
        assert!(err.contains("means"), "error should name the field: {err}");
    }

    #[test]
    fn standard_normal_log_density_at_mode() {
        let raw = head(&[0.0], &[[0.0]], &[[0.0]]);
        let gmm = activate(&raw).unwrap();
        let ld = log_density(&gmm, arr1(&[0.0]).view()).unwrap();
        let expected = -0.5 * LN_2PI; // -0.918939...
        assert!((ld - expected).abs() < 1e-12, "ld={ld}");
        assert!((ld + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn mixture_of_identical_components_matches_single() {
        let raw = head(&[0.3, 0.3], &[[0.0], [0.0]], &[[0.0], [0.0]]);
        let gmm = activate(&raw).unwrap();
        let ld = log_density(&gmm, arr1(&[0.0]).view()).unwrap();
        assert!((ld + 0.5 * LN_2PI).abs() < 1e-12, "ld={ld}");
    }

    #[test]
    fn symmetric_two_component_mixture() {
        let raw = head(&[0.0, 0.0], &[[-1.0], [1.0]], &[[0.0], [0.0]]);
        let gmm = activate(&raw).unwrap();
        let ld = log_density(&gmm, arr1(&[0.0]).view()).unwrap();
        // Both components contribute N(1; 0, 1): ld = -0.5 ln(2 pi) - 0.5.
        let expected = -0.5 * LN_2PI - 0.5;
        assert!((ld - expected).abs() < 1e-12, "ld={ld}");
        let n = nll(&gmm, arr1(&[0.0]).view()).unwrap();
        assert!((n - 1.418939).abs() < 1e-6, "nll={n}");
    }

    #[test]
    fn nll_negates_log_density() {
        let raw = head(&[0.0], &[[0.0]], &[[0.0]]);
        let gmm = activate(&raw).unwrap();
        let n = nll(&gmm, arr1(&[0.0]).view()).unwrap();
        assert!((n - 0.918939).abs() < 1e-6, "nll={n}");
    }

    /// Direct-evaluation oracle: weighted sum of component densities without
    /// log-sum-exp.
    fn naive_log_density(gmm: &GmmParams, y: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..gmm.n_components() {
            let mut dens = gmm.weights[i];
            for d in 0..gmm.dim() {
                let var = gmm.variances[[i, d]];
                let diff = y[d] - gmm.means[[i, d]];
                dens *= (-0.5 * diff * diff / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            total += dens;
        }
        total.ln()
    }

    #[test]
    fn log_sum_exp_matches_naive_evaluation() {
        let raw = RawMdnHead {
            logits: arr1(&[0.2, -0.4, 1.1]),
            means: arr2(&[[0.5, -0.3], [-1.2, 0.8], [2.0, 1.5]]),
            log_variances: arr2(&[[0.1, -0.5], [0.3, 0.0], [-0.2, 0.4]]),
        };
        let gmm = activate(&raw).unwrap();
        let y = arr1(&[0.7, 0.1]);
        let lse = log_density(&gmm, y.view()).unwrap();
        let naive = naive_log_density(&gmm, y.as_slice().unwrap());
        assert!((lse - naive).abs() < 1e-10, "lse={lse} naive={naive}");
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let raw = head(&[0.0], &[[0.0]], &[[0.0]]);
        let gmm = activate(&raw).unwrap();
        assert!(log_density(&gmm, arr1(&[0.0, 1.0]).view()).is_err());
    }

    #[test]
    fn symmetric_case_has_zero_logit_gradient() {
        let raw = head(&[0.4, 0.4], &[[-1.0], [1.0]], &[[0.0], [0.0]]);
        let (_, grad) = nll_grad(&raw, arr1(&[0.0]).view()).unwrap();
        // responsibilities equal the weights by symmetry, up to one rounding
        // of exp(-ln 2)
        assert!(grad.d_logits[0].abs() < 1e-15);
        assert!(grad.d_logits[1].abs() < 1e-15);
    }

    #[test]
    fn singleton_mixture_has_exactly_zero_logit_gradient() {
        let raw = head(&[1.7], &[[0.3]], &[[-0.2]]);
        let (_, grad) = nll_grad(&raw, arr1(&[0.9]).view()).unwrap();
        assert_eq!(grad.d_logits[0], 0.0);
    }

    #[test]
    fn floored_variance_gets_zero_log_variance_gradient() {
        let raw = head(&[0.0], &[[0.0]], &[[-20.0]]); // exp(-20) < 1e-6 floor
        let (_, grad) = nll_grad(&raw, arr1(&[0.5]).view()).unwrap();
        assert_eq!(grad.d_log_variances[[0, 0]], 0.0);
    }

    #[test]
    fn zero_temperature_single_component_returns_mean() {
        let raw = head(&[0.0], &[[2.5]], &[[1.0]]);
        let gmm = activate(&raw).unwrap();
        let mut rng = crate::rng::rng_from_seed(3);
        let y = sample(&gmm, &mut rng, 0.0).unwrap();
        assert_eq!(y[0], 2.5);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let raw = RawMdnHead {
            logits: arr1(&[0.1, -0.3]),
            means: arr2(&[[1.0, -1.0], [0.5, 2.0]]),
            log_variances: arr2(&[[0.0, 0.2], [-0.4, 0.1]]),
        };
        let gmm = activate(&raw).unwrap();
        let mut a = crate::rng::rng_from_seed(11);
        let mut b = crate::rng::rng_from_seed(11);
        for _ in 0..8 {
            let ya = sample(&gmm, &mut a, 1.0).unwrap();
            let yb = sample(&gmm, &mut b, 1.0).unwrap();
            assert_eq!(ya, yb);
        }
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
