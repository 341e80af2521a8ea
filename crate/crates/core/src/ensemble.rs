//! Deep ensembles of Gaussian sequence networks.
//!
//! Members are trained independently with seeds `base_seed + k` and combined
//! as a uniform Gaussian mixture. Uncertainty is split per time step into an
//! aleatoric part, the mean member log-variance, and an epistemic part, the
//! excess of the mixture log-variance over it. Entropy constants are dropped
//! from all three quantities so that `u_tot = u_al + u_ep` holds exactly.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cmapss::{window_count, UnitFeatures};
use crate::math::{self, pivot_mean};
use crate::nn::{train_pnn, Architecture, Evaluator, PnnParams, SequenceSet, TrainConfig, TrainHistory};
use crate::{Error, Result};

/// Trained ensemble. Members share one architecture and were trained on the
/// same normalized data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub architecture: Architecture,
    pub members: Vec<PnnParams>,
    pub member_seeds: Vec<u64>,
}

impl EnsembleModel {
    pub fn new(members: Vec<PnnParams>, member_seeds: Vec<u64>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InvalidArgument("an ensemble needs at least one member".to_string()));
        };
        if member_seeds.len() != members.len() {
            return Err(Error::InvalidArgument(format!(
                "{} members but {} seeds",
                members.len(),
                member_seeds.len()
            )));
        }
        let architecture = first.architecture.clone();
        if let Some(k) = members.iter().position(|m| m.architecture != architecture) {
            return Err(Error::InvalidArgument(format!(
                "member {k} has a different architecture"
            )));
        }
        for (i, a) in member_seeds.iter().enumerate() {
            if member_seeds[..i].contains(a) {
                return Err(Error::InvalidArgument(format!("member seed {a} is used twice")));
            }
        }
        Ok(Self {
            architecture,
            members,
            member_seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Seed of member `k`.
pub fn member_seed(base_seed: u64, k: usize) -> u64 {
    base_seed.wrapping_add(k as u64)
}

/// Trains member `k`; failures are wrapped in [`Error::Member`].
pub fn train_member<S: SequenceSet + ?Sized>(
    architecture: &Architecture,
    windows: &S,
    config: &TrainConfig,
    base_seed: u64,
    k: usize,
) -> Result<(PnnParams, TrainHistory)> {
    train_pnn(architecture, windows, config, member_seed(base_seed, k)).map_err(|e| Error::Member {
        member: k,
        source: Box::new(e),
    })
}

/// Trains `m` members one after another. The result does not depend on the
/// order members are trained in, so callers may run [`train_member`] in
/// parallel and assemble with [`EnsembleModel::new`] instead.
pub fn train_ensemble<S: SequenceSet + ?Sized>(
    architecture: &Architecture,
    windows: &S,
    config: &TrainConfig,
    base_seed: u64,
    m: usize,
) -> Result<(EnsembleModel, Vec<TrainHistory>)> {
    if m == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".to_string()));
    }
    let mut members = Vec::with_capacity(m);
    let mut histories = Vec::with_capacity(m);
    for k in 0..m {
        let (params, history) = train_member(architecture, windows, config, base_seed, k)?;
        members.push(params);
        histories.push(history);
    }
    let seeds = (0..m).map(|k| member_seed(base_seed, k)).collect();
    Ok((EnsembleModel::new(members, seeds)?, histories))
}

/// Mean and variance of the uniform mixture of `N(means[i], vars[i])`.
///
/// The variance is evaluated as `mean(σ²) + mean((μ − μ*)²)`, which equals
/// `mean(σ² + μ²) − μ*²` but is exact when all members agree.
pub fn mixture_moments(means: &[f64], vars: &[f64]) -> Result<(f64, f64)> {
    if means.is_empty() || means.len() != vars.len() {
        return Err(Error::InvalidArgument(format!(
            "mixture needs matching nonempty means and variances, got {} and {}",
            means.len(),
            vars.len()
        )));
    }
    if let Some(v) = vars.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidArgument(format!("member variance {v} is not positive")));
    }
    let mu = pivot_mean(means);
    let spread = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / means.len() as f64;
    let var = pivot_mean(vars) + spread;
    if !mu.is_finite() || !var.is_finite() {
        return Err(Error::NonFinite("mixture moments".to_string()));
    }
    Ok((mu, var))
}

/// Aleatoric, epistemic and total uncertainty in nats, up to a shared
/// additive constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    pub u_al: f64,
    pub u_ep: f64,
    pub u_tot: f64,
}

pub fn decompose_uncertainty(member_vars: &[f64], var_star: f64) -> Result<UncertaintyDecomposition> {
    if member_vars.is_empty() {
        return Err(Error::InvalidArgument("no member variances".to_string()));
    }
    if let Some(v) = member_vars.iter().chain([&var_star]).find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("variance {v} is not positive and finite")));
    }
    let logs: Vec<f64> = member_vars.iter().map(|&v| math::ln(v)).collect();
    let u_al = pivot_mean(&logs);
    let u_tot = math::ln(var_star);
    Ok(UncertaintyDecomposition {
        u_al,
        u_ep: u_tot - u_al,
        u_tot,
    })
}

/// Ensemble output for one input sequence. Member matrices are `[M][T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub mu_star: Vec<f64>,
    pub var_star: Vec<f64>,
    pub member_means: Vec<Vec<f64>>,
    pub member_vars: Vec<Vec<f64>>,
}

impl EnsemblePrediction {
    /// Combines per-member predictions of equal length.
    pub fn from_members(member_means: Vec<Vec<f64>>, member_vars: Vec<Vec<f64>>) -> Result<Self> {
        let steps = member_means.first().map_or(0, Vec::len);
        if steps == 0
            || member_means.len() != member_vars.len()
            || member_means.iter().chain(&member_vars).any(|r| r.len() != steps)
        {
            return Err(Error::InvalidArgument(
                "member predictions must be nonempty [M × T] matrices of one shape".to_string(),
            ));
        }
        let mut mu_star = Vec::with_capacity(steps);
        let mut var_star = Vec::with_capacity(steps);
        let mut means = Vec::with_capacity(member_means.len());
        let mut vars = Vec::with_capacity(member_means.len());
        for t in 0..steps {
            means.clear();
            vars.clear();
            means.extend(member_means.iter().map(|r| r[t]));
            vars.extend(member_vars.iter().map(|r| r[t]));
            let (mu, var) = mixture_moments(&means, &vars)?;
            mu_star.push(mu);
            var_star.push(var);
        }
        Ok(Self {
            mu_star,
            var_star,
            member_means,
            member_vars,
        })
    }

    pub fn len(&self) -> usize {
        self.mu_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_star.is_empty()
    }

    pub fn members(&self) -> usize {
        self.member_means.len()
    }

    pub fn decomposition(&self, t: usize) -> Result<UncertaintyDecomposition> {
        let vars: Vec<f64> = self.member_vars.iter().map(|r| r[t]).collect();
        decompose_uncertainty(&vars, self.var_star[t])
    }

    pub fn decompositions(&self) -> Result<Vec<UncertaintyDecomposition>> {
        (0..self.len()).map(|t| self.decomposition(t)).collect()
    }
}

/// Mixture summary at a single time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub mu_star: f64,
    pub var_star: f64,
    pub uncertainty: UncertaintyDecomposition,
}

pub fn step_view(pred: &EnsemblePrediction, t: usize) -> Result<StepSummary> {
    if t >= pred.len() {
        return Err(Error::InvalidArgument(format!(
            "step {t} is outside a prediction of length {}",
            pred.len()
        )));
    }
    Ok(StepSummary {
        mu_star: pred.mu_star[t],
        var_star: pred.var_star[t],
        uncertainty: pred.decomposition(t)?,
    })
}

pub fn last_step_view(pred: &EnsemblePrediction) -> Result<StepSummary> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty prediction".to_string()));
    }
    step_view(pred, pred.len() - 1)
}

/// Runs every member on `inputs` (`[T × F]`, normalized like the training
/// data) and aggregates.
pub fn predict_ensemble(model: &EnsembleModel, inputs: &[f64]) -> Result<EnsemblePrediction> {
    EnsemblePredictor::new(model).predict(inputs)
}

/// Reuses network buffers across many [`predict_ensemble`] calls.
pub struct EnsemblePredictor<'a> {
    model: &'a EnsembleModel,
    eval: Evaluator,
}

impl<'a> EnsemblePredictor<'a> {
    pub fn new(model: &'a EnsembleModel) -> Self {
        Self {
            model,
            eval: Evaluator::new(&model.architecture),
        }
    }

    pub fn predict(&mut self, inputs: &[f64]) -> Result<EnsemblePrediction> {
        let mut means = Vec::with_capacity(self.model.len());
        let mut vars = Vec::with_capacity(self.model.len());
        for params in &self.model.members {
            let p = self.eval.forward(params, inputs)?;
            means.push(p.means);
            vars.push(p.variances);
        }
        EnsemblePrediction::from_members(means, vars)
    }
}

/// Last-step summary of one unit's full history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitUncertainty {
    pub unit_id: u32,
    /// Cycle of the summarized step, 1-based.
    pub cycle: u32,
    pub summary: StepSummary,
}

/// One entry per unit, in unit order, from the last step of the full history.
pub fn dataset_uncertainty_profile(
    model: &EnsembleModel,
    units: &[UnitFeatures],
) -> Result<Vec<UnitUncertainty>> {
    let mut predictor = EnsemblePredictor::new(model);
    units
        .iter()
        .map(|u| {
            let pred = predictor.predict(&u.values)?;
            Ok(UnitUncertainty {
                unit_id: u.unit_id,
                cycle: u.len() as u32,
                summary: last_step_view(&pred)?,
            })
        })
        .collect()
}

/// Like [`dataset_uncertainty_profile`] but with one entry per sliding window
/// (`window_length`, `stride`), each summarized at its last step. A unit
/// shorter than one window contributes its full history once.
pub fn window_uncertainty_profile(
    model: &EnsembleModel,
    units: &[UnitFeatures],
    window_length: usize,
    stride: usize,
) -> Result<Vec<UnitUncertainty>> {
    if window_length == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window length and stride must be positive".to_string(),
        ));
    }
    let mut predictor = EnsemblePredictor::new(model);
    let mut out = Vec::new();
    for u in units {
        let f = u.n_features;
        let count = window_count(u.len(), window_length, stride);
        let spans: Vec<(usize, usize)> = if count == 0 {
            alloc::vec![(0, u.len())]
        } else {
            (0..count).map(|k| (k * stride, k * stride + window_length)).collect()
        };
        for (start, end) in spans {
            let pred = predictor.predict(&u.values[start * f..end * f])?;
            out.push(UnitUncertainty {
                unit_id: u.unit_id,
                cycle: end as u32,
                summary: last_step_view(&pred)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Sequence};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn two_member_mixture() {
        let (mu, var) = mixture_moments(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(mu, 1.0);
        assert_eq!(var, 2.0);
        let d = decompose_uncertainty(&[1.0, 1.0], var).unwrap();
        assert_eq!(d.u_al, 0.0);
        assert!(close(d.u_ep, core::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn equal_means_average_variances() {
        let (mu, var) = mixture_moments(&[4.5, 4.5], &[1.0, 3.0]).unwrap();
        assert_eq!((mu, var), (4.5, 2.0));
    }

    #[test]
    fn equal_log_variances() {
        let e2 = libm::exp(2.0);
        let (_, var) = mixture_moments(&[1.0, 1.0], &[e2, e2]).unwrap();
        let d = decompose_uncertainty(&[e2, e2], var).unwrap();
        assert!(close(d.u_al, 2.0, 1e-15));
        assert_eq!(d.u_ep, 0.0);
    }

    #[test]
    fn identical_members_collapse_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in 1..20 {
            let mu: f64 = rng.random_range(-200.0..200.0);
            let var: f64 = rng.random_range(1e-6..500.0);
            let (ms, vs) = mixture_moments(&vec![mu; m], &vec![var; m]).unwrap();
            assert_eq!((ms, vs), (mu, var));
            assert_eq!(decompose_uncertainty(&vec![var; m], vs).unwrap().u_ep, 0.0);
        }
    }

    #[test]
    fn matches_monte_carlo_mixture() {
        // Sample the mixture directly: pick a component, then draw from it.
        let means = [3.0, -1.0, 10.0, 4.0, 0.5];
        let vars = [1.0, 4.0, 0.25, 9.0, 2.0];
        let (mu, var) = mixture_moments(&means, &vars).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let k = rng.random_range(0..means.len());
            let x = Normal::new(means[k], libm::sqrt(vars[k])).unwrap().sample(&mut rng);
            s1 += x;
            s2 += x * x;
        }
        let m1 = s1 / n as f64;
        let v1 = s2 / n as f64 - m1 * m1;
        let se_mean = libm::sqrt(var / n as f64);
        assert!(close(m1, mu, 4.0 * se_mean), "{m1} vs {mu}");
        assert!((v1 / var - 1.0).abs() < 0.01, "{v1} vs {var}");
    }

    #[test]
    fn eq3_form_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let m = rng.random_range(1..16);
            let means: Vec<f64> = (0..m).map(|_| rng.random_range(-50.0..150.0)).collect();
            let vars: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..400.0)).collect();
            let (mu, var) = mixture_moments(&means, &vars).unwrap();
            let second: f64 = means.iter().zip(&vars).map(|(a, v)| v + a * a).sum::<f64>() / m as f64;
            assert!(close(var, second - mu * mu, 1e-9 * second));
        }
    }

    #[test]
    fn decomposition_identity_and_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let m = rng.random_range(1..16);
            let means: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
            let vars: Vec<f64> = (0..m).map(|_| libm::exp(rng.random_range(-10.0..8.0))).collect();
            let (_, var) = mixture_moments(&means, &vars).unwrap();
            let d = decompose_uncertainty(&vars, var).unwrap();
            assert!((d.u_tot - (d.u_al + d.u_ep)).abs() <= 1e-12);
            assert!(d.u_ep >= -1e-9, "{d:?}");
            if m == 1 {
                assert_eq!(d.u_ep, 0.0);
            }
        }
    }

    #[test]
    fn permutation_leaves_outputs_unchanged() {
        let means = vec![vec![1.0, 2.0], vec![5.0, -1.0], vec![0.25, 3.0]];
        let vars = vec![vec![1.0, 0.5], vec![2.0, 4.0], vec![3.0, 0.1]];
        let a = EnsemblePrediction::from_members(means.clone(), vars.clone()).unwrap();
        let order = [2, 0, 1];
        let b = EnsemblePrediction::from_members(
            order.iter().map(|&i| means[i].clone()).collect(),
            order.iter().map(|&i| vars[i].clone()).collect(),
        )
        .unwrap();
        for t in 0..2 {
            assert!(close(a.mu_star[t], b.mu_star[t], 1e-14));
            assert!(close(a.var_star[t], b.var_star[t], 1e-13));
            let (da, db) = (a.decomposition(t).unwrap(), b.decomposition(t).unwrap());
            assert!(close(da.u_ep, db.u_ep, 1e-13));
        }
    }

    #[test]
    fn rejects_bad_variances() {
        assert!(mixture_moments(&[0.0], &[0.0]).is_err());
        assert!(mixture_moments(&[], &[]).is_err());
        assert!(decompose_uncertainty(&[1.0, -1.0], 1.0).is_err());
        assert!(decompose_uncertainty(&[1.0], 0.0).is_err());
    }

    #[test]
    fn last_step_and_constant_predictions() {
        let p = EnsemblePrediction::from_members(vec![vec![7.0]], vec![vec![2.0]]).unwrap();
        let s = last_step_view(&p).unwrap();
        assert_eq!((s.mu_star, s.var_star, s.uncertainty.u_ep), (7.0, 2.0, 0.0));
        let p = EnsemblePrediction::from_members(vec![vec![3.0; 4], vec![5.0; 4]], vec![vec![1.0; 4]; 2]).unwrap();
        let last = last_step_view(&p).unwrap();
        assert_eq!(last, step_view(&p, 1).unwrap());
        assert!(step_view(&p, 4).is_err());
    }

    fn random_members(arch: &Architecture, seeds: &[u64]) -> EnsembleModel {
        let members = seeds.iter().map(|&s| init_params(arch, s).unwrap()).collect();
        EnsembleModel::new(members, seeds.to_vec()).unwrap()
    }

    #[test]
    fn single_member_matches_network() {
        let arch = Architecture::new(2, vec![3], vec![2]).unwrap();
        let model = random_members(&arch, &[9]);
        let x = [0.1, -0.2, 0.3, 0.4, -1.0, 0.0];
        let pred = predict_ensemble(&model, &x).unwrap();
        let net = crate::nn::forward(&model.members[0], &x).unwrap();
        assert_eq!(pred.mu_star, net.means);
        assert_eq!(pred.var_star, net.variances);
        assert!(pred.decompositions().unwrap().iter().all(|d| d.u_ep == 0.0));
    }

    #[test]
    fn model_invariants() {
        let arch = Architecture::new(2, vec![3], vec![2]).unwrap();
        let other = Architecture::new(2, vec![4], vec![2]).unwrap();
        assert!(EnsembleModel::new(vec![], vec![]).is_err());
        let p = init_params(&arch, 1).unwrap();
        assert!(EnsembleModel::new(vec![p.clone(), p.clone()], vec![1, 1]).is_err());
        assert!(EnsembleModel::new(vec![p.clone(), init_params(&other, 2).unwrap()], vec![1, 2]).is_err());
        assert!(EnsembleModel::new(vec![p], vec![1, 2]).is_err());
    }

    #[test]
    fn member_seeds_follow_base() {
        let seeds: Vec<u64> = (0..15).map(|k| member_seed(237, k)).collect();
        assert_eq!(seeds, (237..252).collect::<Vec<u64>>());
    }

    #[test]
    fn ensemble_training_is_order_independent() {
        let arch = Architecture::new(1, vec![3], vec![2]).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 8.0; 4]).collect();
        let ys: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 4.0; 4]).collect();
        let batch: Vec<Sequence> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| Sequence { inputs: x, targets: y, n_features: 1 })
            .collect();
        let config = TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let (model, histories) = train_ensemble(&arch, &batch[..], &config, 237, 3).unwrap();
        assert_eq!(model.member_seeds, vec![237, 238, 239]);
        assert_eq!(histories.len(), 3);
        let (second, _) = train_member(&arch, &batch[..], &config, 237, 1).unwrap();
        assert_eq!(second, model.members[1]);
        assert_ne!(model.members[0].values, model.members[1].values);
        assert!(train_ensemble(&arch, &batch[..], &config, 237, 0).is_err());
    }

    #[test]
    fn member_failure_names_member() {
        let arch = Architecture::new(1, vec![2], vec![2]).unwrap();
        let x = [f64::NAN, 1.0];
        let y = [1.0, 1.0];
        let batch = [Sequence { inputs: &x, targets: &y, n_features: 1 }];
        let err = train_ensemble(&arch, &batch[..], &TrainConfig::default(), 0, 2).unwrap_err();
        assert!(matches!(err, Error::Member { member: 0, .. }), "{err}");
    }

    #[test]
    fn profiles() {
        let arch = Architecture::new(1, vec![2], vec![2]).unwrap();
        let model = random_members(&arch, &[1, 2, 3]);
        let unit = |id: u32, len: usize| UnitFeatures {
            unit_id: id,
            n_features: 1,
            values: (0..len).map(|t| t as f64 * 0.1).collect(),
            true_final_rul: None,
        };
        let units = vec![unit(1, 5), unit(2, 2)];
        assert!(dataset_uncertainty_profile(&model, &[]).unwrap().is_empty());
        let prof = dataset_uncertainty_profile(&model, &units).unwrap();
        assert_eq!(prof.iter().map(|p| (p.unit_id, p.cycle)).collect::<Vec<_>>(), vec![(1, 5), (2, 2)]);
        let full = predict_ensemble(&model, &units[0].values).unwrap();
        assert_eq!(prof[0].summary, last_step_view(&full).unwrap());

        let win = window_uncertainty_profile(&model, &units, 3, 1).unwrap();
        assert_eq!(
            win.iter().map(|p| (p.unit_id, p.cycle)).collect::<Vec<_>>(),
            vec![(1, 3), (1, 4), (1, 5), (2, 2)]
        );
        let w = predict_ensemble(&model, &units[0].values[1..4]).unwrap();
        assert_eq!(win[1].summary, last_step_view(&w).unwrap());
    }
}
