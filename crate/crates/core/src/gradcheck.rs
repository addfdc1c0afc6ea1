//! Finite-difference verification of the analytic gradients.
//!
//! Central differences with step 1e-5 probe the loss along every coordinate;
//! only forward evaluations are used, so the check is independent of the
//! reverse-mode code it validates. Per-coordinate relative error is
//! `|analytic - fd| / max(1e-4, |analytic| + |fd|)`.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::error::Result;
use crate::gmm::{self, RawMdnHead};
use crate::predictor::{Mode, PredictorConfig, PredictorModel};
use crate::rng::{derive_stream, Rng};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Threshold for the mixture-head check.
pub const GMM_TOLERANCE: f64 = 1e-4;

/// Threshold for the sequence-model check.
pub const SEQUENCE_TOLERANCE: f64 = 1e-3;

/// Sign-flip one parameter group's analytic gradient before comparing.
/// Test hook for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault(pub &'static str);

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: &'static str,
    pub threshold: f64,
    pub cases: usize,
    /// (parameter group, max relative error over all cases and coordinates)
    pub groups: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|(_, err)| *err < self.threshold)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|(_, err)| *err >= self.threshold)
            .map(|(name, _)| name.as_str())
            .collect()
    }

    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-4)
}

/// Check `gmm::nll_grad` against central differences on randomized heads
/// with M in 1..=5 and D in 1..=4.
pub fn check_gmm_gradients(cases: usize, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let mut rng = derive_stream(seed, 0);
    let mut worst = [0.0f64; 3]; // logits, means, log_variances

    for _ in 0..cases {
        let m = rng.gen_range(1..=5usize);
        let d = rng.gen_range(1..=4usize);
        let raw = RawMdnHead {
            logits: Array1::from_shape_fn(m, |_| rng.gen_range(-2.0..2.0)),
            means: Array2::from_shape_fn((m, d), |_| rng.gen_range(-3.0..3.0)),
            log_variances: Array2::from_shape_fn((m, d), |_| rng.gen_range(-2.0..2.0)),
        };
        let y = Array1::from_shape_fn(d, |_| rng.gen_range(-3.0..3.0));

        let (_, mut grad) = gmm::nll_grad(&raw, y.view())?;
        if let Some(Fault(group)) = fault {
            match group {
                "logits" => grad.d_logits.mapv_inplace(|v| -v),
                "means" => grad.d_means.mapv_inplace(|v| -v),
                "log_variances" => grad.d_log_variances.mapv_inplace(|v| -v),
                other => panic!("unknown gmm parameter group `{other}`"),
            }
        }

        let nll_at = |raw: &RawMdnHead| -> f64 {
            gmm::nll(&gmm::activate(raw).unwrap(), y.view()).unwrap()
        };
        for i in 0..m {
            let mut hi = raw.clone();
            hi.logits[i] += FD_STEP;
            let mut lo = raw.clone();
            lo.logits[i] -= FD_STEP;
            let fd = (nll_at(&hi) - nll_at(&lo)) / (2.0 * FD_STEP);
            worst[0] = worst[0].max(rel_err(grad.d_logits[i], fd));
            for j in 0..d {
                let mut hi = raw.clone();
                hi.means[[i, j]] += FD_STEP;
                let mut lo = raw.clone();
                lo.means[[i, j]] -= FD_STEP;
                let fd = (nll_at(&hi) - nll_at(&lo)) / (2.0 * FD_STEP);
                worst[1] = worst[1].max(rel_err(grad.d_means[[i, j]], fd));

                let mut hi = raw.clone();
                hi.log_variances[[i, j]] += FD_STEP;
                let mut lo = raw.clone();
                lo.log_variances[[i, j]] -= FD_STEP;
                let fd = (nll_at(&hi) - nll_at(&lo)) / (2.0 * FD_STEP);
                worst[2] = worst[2].max(rel_err(grad.d_log_variances[[i, j]], fd));
            }
        }
    }

    Ok(GradCheckReport {
        label: "mixture-head",
        threshold: GMM_TOLERANCE,
        cases,
        groups: vec![
            ("logits".to_string(), worst[0]),
            ("means".to_string(), worst[1]),
            ("log_variances".to_string(), worst[2]),
        ],
    })
}

fn random_ctx(rng: &mut Rng, k: usize, h: usize) -> Array2<f64> {
    Array2::from_shape_fn((k, h), |_| rng.gen_range(-1.0..1.0))
}

/// Central differences are only meaningful where the loss is smooth around
/// the probe point, so instances whose ReLU pre-activations sit within this
/// margin of the kink are redrawn.
const RELU_KINK_MARGIN: f64 = 1e-3;

fn min_relu_margin(model: &PredictorModel, ctx: &Array2<f64>) -> f64 {
    let pre1 = model.conv1.forward(ctx);
    let act1 = crate::nn::relu(&pre1);
    let (normed1, _) = model.norm1.forward(&act1);
    let pre2 = model.conv2.forward(&normed1);
    pre1.iter()
        .chain(pre2.iter())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Check `PredictorModel::sequence_grad` against central differences on
/// randomized small models and sequences (dropout disabled).
pub fn check_sequence_gradients(
    cases: usize,
    seed: u64,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let mut rng = derive_stream(seed, 1);
    let mut groups: Vec<(String, f64)> = Vec::new();

    for _ in 0..cases {
        let mut drawn = None;
        for _ in 0..200 {
            let config = PredictorConfig {
                context_width: rng.gen_range(2..=4),
                embedding_dim: rng.gen_range(1..=3),
                n_components: rng.gen_range(1..=3),
                conv_channels: rng.gen_range(2..=4),
                conv_kernel: 3,
                recurrent_width: rng.gen_range(2..=4),
                dropout_rate: 0.0,
            };
            let model = PredictorModel::init(config, &mut rng)?;
            let k = rng.gen_range(1..=4usize);
            let ctx = random_ctx(&mut rng, k, config.context_width);
            if min_relu_margin(&model, &ctx) > RELU_KINK_MARGIN {
                drawn = Some((config, model, ctx));
                break;
            }
        }
        let (config, model, ctx) =
            drawn.expect("no smooth gradient-check instance found in 200 draws");
        let k = ctx.nrows();
        let target = Array2::from_shape_fn((k, config.embedding_dim), |_| rng.gen_range(-1.5..1.5));

        let (_, grad) = model.sequence_grad(&ctx, &target, &mut Mode::Eval)?;
        let mut grad_flat = grad.to_flat();
        let layout = model.param_groups();
        if let Some(Fault(group)) = fault {
            let mut offset = 0;
            let mut found = false;
            for (name, len) in &layout {
                if *name == group {
                    for v in &mut grad_flat[offset..offset + len] {
                        *v = -*v;
                    }
                    found = true;
                }
                offset += len;
            }
            assert!(found, "unknown predictor parameter group `{group}`");
        }

        if groups.is_empty() {
            groups = layout.iter().map(|(n, _)| (n.to_string(), 0.0)).collect();
        }

        let base = model.to_flat();
        let mut probe = model.clone();
        let mut offset = 0;
        for (gi, (_, len)) in layout.iter().enumerate() {
            for i in offset..offset + len {
                let mut hi = base.clone();
                hi[i] += FD_STEP;
                probe.load_flat(&hi);
                let up = probe.sequence_nll(&ctx, &target, &mut Mode::Eval)?;
                let mut lo = base.clone();
                lo[i] -= FD_STEP;
                probe.load_flat(&lo);
                let down = probe.sequence_nll(&ctx, &target, &mut Mode::Eval)?;
                let fd = (up - down) / (2.0 * FD_STEP);
                let err = rel_err(grad_flat[i], fd);
                if err > groups[gi].1 {
                    groups[gi].1 = err;
                }
            }
            offset += len;
        }
    }

    Ok(GradCheckReport {
        label: "sequence-model",
        threshold: SEQUENCE_TOLERANCE,
        cases,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmm_gradients_pass_on_randomized_heads() {
        let report = check_gmm_gradients(100, 12345, None).unwrap();
        assert!(
            report.passed(),
            "max relative error {} (groups {:?})",
            report.max_error(),
            report.groups
        );
    }

    #[test]
    fn sequence_gradients_pass_on_randomized_instances() {
        let report = check_sequence_gradients(20, 999, None).unwrap();
        assert!(
            report.passed(),
            "max relative error {} (groups {:?})",
            report.max_error(),
            report.groups
        );
    }

    #[test]
    fn sign_flip_fault_is_caught_and_named() {
        let report = check_gmm_gradients(20, 4, Some(Fault("means"))).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing_groups(), vec!["means"]);

        let report = check_sequence_gradients(3, 5, Some(Fault("proj.weight"))).unwrap();
        assert!(!report.passed());
        assert!(report.failing_groups().contains(&"proj.weight"));
        // the fault must not implicate other groups
        assert_eq!(report.failing_groups().len(), 1);
    }
}
