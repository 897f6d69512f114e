//! Finite-difference verification of the analytic gradients.
//!
//! Runs the full pipeline loss (forward, cross-entropy, backward) on one
//! bag, then perturbs sampled parameters and compares central differences
//! against the analytic gradient. Everything runs in `f64`; `f32` forward
//! noise would drown the comparison.
//!
//! The error metric is `|numeric - analytic| / max(|numeric| + |analytic|,
//! 1e-4)`. The absolute floor matters: a conv bias that feeds straight into
//! batch normalisation has a *true* gradient of exactly zero (the mean
//! subtraction absorbs any constant channel shift), so both sides of the
//! comparison are pure rounding noise. Central differences on an O(1) loss
//! cannot resolve gradients below roughly `ulp / (2 * eps)`; the floor
//! turns the comparison absolute in that regime instead of reporting a
//! meaningless ratio of noises.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::bce_loss;
use super::model::MilModel;
use super::ops::BnMode;
use super::tensor::Tensor;
use super::MilError;

/// Sampling and step-size settings.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// How many elements to probe per parameter group (groups smaller than
    /// this are probed exhaustively).
    pub samples_per_group: usize,
    /// Central-difference step.
    pub eps: f64,
    /// Seed for choosing which elements to probe.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples_per_group: 5,
            eps: 1e-4,
            seed: 0,
        }
    }
}

/// Worst relative error seen in one parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over every probed element.
    pub max_rel_error: f64,
    pub per_group: Vec<GroupReport>,
}

fn group_names(model: &MilModel<f64>) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..model.layers.len() {
        for part in ["kernel", "bias", "gamma", "beta"] {
            names.push(format!("layer{i}.{part}"));
        }
    }
    names.push("head_w".into());
    names.push("head_b".into());
    names.push("alpha".into());
    names
}

fn loss_of(model: &MilModel<f64>, bag: &Tensor<f64>, label: f64) -> Result<f64, MilError> {
    let fwd = model.forward_bag(bag, BnMode::Train)?;
    Ok(bce_loss(fwd.bag_score, label).0)
}

/// Compares analytic gradients of the bag loss against central differences.
///
/// The relative error of each probe is
/// `|numeric - analytic| / max(|numeric| + |analytic|, 1e-4)`; see the
/// module docs for why the floor sits at the finite-difference noise scale.
pub fn grad_check(
    model: &MilModel<f64>,
    bag: &Tensor<f64>,
    label: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, MilError> {
    if cfg.samples_per_group == 0 {
        return Err(MilError::BadConfig(
            "samples_per_group must be at least 1".into(),
        ));
    }
    if !(cfg.eps > 0.0) || !cfg.eps.is_finite() {
        return Err(MilError::BadConfig(format!(
            "eps must be positive and finite, got {}",
            cfg.eps
        )));
    }
    if !(0.0..=1.0).contains(&label) {
        return Err(MilError::BadConfig(format!(
            "label must lie in [0, 1], got {label}"
        )));
    }

    let fwd = model.forward_bag(bag, BnMode::Train)?;
    let (_, d_score) = bce_loss(fwd.bag_score, label);
    let analytic = model.backward_bag(&fwd, d_score)?;
    let analytic_slices: Vec<Vec<f64>> =
        analytic.slices().iter().map(|s| s.to_vec()).collect();

    let names = group_names(model);
    let sizes = model.param_group_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = model.clone();
    let mut per_group = Vec::with_capacity(sizes.len());
    let mut max_rel = 0.0f64;

    for (g, (&len, name)) in sizes.iter().zip(&names).enumerate() {
        let indices: Vec<usize> = if len <= cfg.samples_per_group {
            (0..len).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, len, cfg.samples_per_group)
                .into_vec();
            idx.sort_unstable();
            idx
        };
        let mut group_max = 0.0f64;
        for &i in &indices {
            let original = work.param_slices()[g][i];
            work.param_slices_mut()[g][i] = original + cfg.eps;
            let plus = loss_of(&work, bag, label)?;
            work.param_slices_mut()[g][i] = original - cfg.eps;
            let minus = loss_of(&work, bag, label)?;
            work.param_slices_mut()[g][i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let ana = analytic_slices[g][i];
            let rel = (numeric - ana).abs() / (numeric.abs() + ana.abs()).max(1e-4);
            group_max = group_max.max(rel);
        }
        max_rel = max_rel.max(group_max);
        per_group.push(GroupReport {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: group_max,
        });
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::super::model::MilConfig;
    use super::*;
    use rand::Rng;

    fn tiny_setup() -> (MilModel<f64>, Tensor<f64>) {
        let cfg = MilConfig {
            blocks: 2,
            convs_per_block: 1,
            filters: 3,
            in_channels: 3,
            kernel: 3,
            ..MilConfig::default()
        };
        let model = MilModel::<f64>::init(&cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f64> = (0..4 * 8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let bag = Tensor::from_vec(&[4, 8, 8, 3], data).unwrap();
        (model, bag)
    }

    #[test]
    fn analytic_gradients_agree_with_central_differences() {
        let (model, bag) = tiny_setup();
        let cfg = GradCheckConfig::default();
        for label in [0.0, 1.0] {
            let report = grad_check(&model, &bag, label, &cfg).unwrap();
            assert!(
                report.max_rel_error < 1e-5,
                "label {label}: worst relative error {} (per group: {:?})",
                report.max_rel_error,
                report
                    .per_group
                    .iter()
                    .map(|g| (g.name.clone(), g.max_rel_error))
                    .collect::<Vec<_>>()
            );
            // The pooling sharpness gradient is an order tighter still.
            let alpha = report.per_group.last().unwrap();
            assert!(
                alpha.max_rel_error < 1e-6,
                "alpha relative error {}",
                alpha.max_rel_error
            );
        }
    }

    #[test]
    fn every_parameter_group_is_probed() {
        let (model, bag) = tiny_setup();
        let report = grad_check(&model, &bag, 1.0, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.per_group.len(), model.param_group_sizes().len());
        let alpha = report.per_group.last().unwrap();
        assert_eq!(alpha.name, "alpha");
        assert_eq!(alpha.checked, 1);
        assert!(report.per_group.iter().all(|g| g.checked > 0));
    }

    #[test]
    fn check_leaves_the_model_untouched() {
        let (model, bag) = tiny_setup();
        let before: Vec<Vec<f64>> = model.param_slices().iter().map(|s| s.to_vec()).collect();
        grad_check(&model, &bag, 0.0, &GradCheckConfig::default()).unwrap();
        let after: Vec<Vec<f64>> = model.param_slices().iter().map(|s| s.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn bad_settings_are_rejected() {
        let (model, bag) = tiny_setup();
        let mut cfg = GradCheckConfig::default();
        cfg.samples_per_group = 0;
        assert!(grad_check(&model, &bag, 1.0, &cfg).is_err());
        let mut cfg = GradCheckConfig::default();
        cfg.eps = 0.0;
        assert!(grad_check(&model, &bag, 1.0, &cfg).is_err());
        let cfg = GradCheckConfig::default();
        assert!(grad_check(&model, &bag, 1.5, &cfg).is_err());
    }
}
