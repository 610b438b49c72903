//! Trajectory simulation and the ergodic / discounted estimators of the
//! expert mean field and feature expectation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::mdp::Policy;
use crate::model::{ModelSpec, SimplexVector};
use crate::numerics::norm2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(state, action)` for `t = 0..T`.
    pub steps: Vec<(usize, usize)>,
    pub seed: u64,
    /// Stream index within the seed.
    pub index: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl EstimatorConfig {
    pub fn new(n_trajectories: usize, horizon: usize, seed: u64) -> Self {
        Self {
            n_trajectories,
            horizon,
            seed,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(Error::BadParameter("need at least one trajectory".into()));
        }
        if self.horizon == 0 {
            return Err(Error::BadParameter("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Smallest horizon `T` with `β^T · max‖f‖ / (1−β) ≤ tol`.
pub fn horizon_for_tolerance(spec: &ModelSpec, mu: &[f64], tol: f64) -> usize {
    let fmax = max_feature_norm(spec, mu);
    let beta = spec.beta();
    if fmax == 0.0 || beta == 0.0 {
        return 1;
    }
    let t = ((tol * (1.0 - beta) / fmax).ln() / beta.ln()).ceil();
    t.max(1.0) as usize
}

fn max_feature_norm(spec: &ModelSpec, mu: &[f64]) -> f64 {
    spec.features_at(mu).iter().map(norm2).fold(0.0, f64::max)
}

fn sampler(weights: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights)
        .map_err(|e| Error::Validation(format!("cannot sample from {weights:?}: {e}")))
}

/// Simulates `d` trajectories of length `T` under `π` with the kernel frozen
/// at `μ`. Trajectory `i` draws from ChaCha8 stream `i` of `seed`.
pub fn simulate(
    spec: &ModelSpec,
    pi: &Policy,
    mu: &SimplexVector,
    mu0: &SimplexVector,
    config: &EstimatorConfig,
) -> Result<Vec<Trajectory>> {
    config.validate()?;
    let (nx, na) = (spec.n_states(), spec.n_actions());
    if pi.n_states() != nx || pi.n_actions() != na || mu.len() != nx || mu0.len() != nx {
        return Err(Error::DimensionMismatch(
            "policy or distributions do not match the model".into(),
        ));
    }
    let kernel = spec.kernel_at(mu);
    let initial = sampler(mu0)?;
    let actions = (0..nx)
        .map(|x| sampler(pi.row(x)))
        .collect::<Result<Vec<_>>>()?;
    let transitions = (0..nx)
        .flat_map(|x| (0..na).map(move |a| (x, a)))
        .map(|(x, a)| sampler(kernel.row(x, a)))
        .collect::<Result<Vec<_>>>()?;
    let seed = config.seed;
    let horizon = config.horizon;
    Ok(exec::map_indexed(
        config.execution,
        config.n_trajectories,
        |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut x = initial.sample(&mut rng);
            let mut steps = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let a = actions[x].sample(&mut rng);
                steps.push((x, a));
                if t + 1 < horizon {
                    x = transitions[x * na + a].sample(&mut rng);
                }
            }
            Trajectory {
                steps,
                seed,
                index: i as u64,
            }
        },
    ))
}

/// `μ̂(x) = (1/(T·d)) Σ_i Σ_t 1{x_i(t) = x}`, pooling all steps.
pub fn estimate_mean_field(trajectories: &[Trajectory], n_states: usize) -> Result<SimplexVector> {
    let mut counts = vec![0u64; n_states];
    let mut total = 0u64;
    for tr in trajectories {
        for &(x, _) in &tr.steps {
            if x >= n_states {
                return Err(Error::DimensionMismatch(format!("state {x} out of range")));
            }
            counts[x] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyData);
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    SimplexVector::normalized(&weights)
}

/// Discounted feature-expectation estimate with its truncation tail bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEstimate {
    pub value: Vec<f64>,
    /// `β^T · max‖f‖ / (1−β)`, with `T` the shortest horizon.
    pub tail_bound: f64,
    /// Per-component standard error across trajectories.
    pub std_error: Vec<f64>,
}

/// `(1/d) Σ_i Σ_{t<T} β^t f(x_i(t), a_i(t), μ̂)`.
pub fn estimate_feature_expectation(
    spec: &ModelSpec,
    trajectories: &[Trajectory],
    mu_hat: &SimplexVector,
    beta: f64,
) -> Result<FeatureEstimate> {
    if trajectories.is_empty() || trajectories.iter().all(|t| t.steps.is_empty()) {
        return Err(Error::EmptyData);
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::BadParameter(format!(
            "discount factor {beta} not in [0, 1)"
        )));
    }
    let feats = spec.features_at(mu_hat);
    let (nx, na, k) = (spec.n_states(), spec.n_actions(), spec.feature_dim());
    let per_traj: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|tr| {
            let mut acc = vec![0.0; k];
            let mut w = 1.0;
            for &(x, a) in &tr.steps {
                debug_assert!(x < nx && a < na);
                for (s, f) in acc.iter_mut().zip(feats.get(x, a)) {
                    *s += w * f;
                }
                w *= beta;
            }
            acc
        })
        .collect();
    let d = per_traj.len() as f64;
    let value: Vec<f64> = (0..k)
        .map(|j| per_traj.iter().map(|v| v[j]).sum::<f64>() / d)
        .collect();
    let std_error = (0..k)
        .map(|j| {
            if per_traj.len() < 2 {
                return f64::NAN;
            }
            let var = per_traj
                .iter()
                .map(|v| (v[j] - value[j]).powi(2))
                .sum::<f64>()
                / (d - 1.0);
            (var / d).sqrt()
        })
        .collect();
    let t_min = trajectories
        .iter()
        .map(Trajectory::horizon)
        .min()
        .unwrap_or(0);
    let fmax = feats.iter().map(norm2).fold(0.0, f64::max);
    let tail_bound = beta.powi(t_min as i32) * fmax / (1.0 - beta);
    Ok(FeatureEstimate {
        value,
        tail_bound,
        std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp;
    use crate::model::tests::malware2;
    use crate::model::ModelDocument;

    fn reset_model() -> ModelSpec {
        // every pair moves to state 0; a single constant feature
        ModelSpec::from_document(ModelDocument {
            n_states: 3,
            n_actions: 2,
            feature_dim: 1,
            beta: 0.5,
            theta: None,
            state_labels: None,
            p0: vec![
                vec![vec![1.0; 2]; 3],
                vec![vec![0.0; 2]; 3],
                vec![vec![0.0; 2]; 3],
            ],
            p1: None,
            f0: vec![vec![vec![1.0]; 2]; 3],
            f1: None,
        })
        .unwrap()
    }

    fn cycle_model() -> ModelSpec {
        // deterministic 0 → 1 → 2 → 0
        let mut p0 = vec![vec![vec![0.0; 1]; 3]; 3];
        for x in 0..3 {
            p0[(x + 1) % 3][x][0] = 1.0;
        }
        ModelSpec::from_document(ModelDocument {
            n_states: 3,
            n_actions: 1,
            feature_dim: 1,
            beta: 0.9,
            theta: None,
            state_labels: None,
            p0,
            p1: None,
            f0: vec![vec![vec![1.0]]; 3],
            f1: None,
        })
        .unwrap()
    }

    #[test]
    fn deterministic_path() {
        let spec = cycle_model();
        let pi = Policy::uniform(3, 1);
        let cfg = EstimatorConfig::new(2, 7, 42);
        let trs = simulate(
            &spec,
            &pi,
            &SimplexVector::uniform(3),
            &SimplexVector::dirac(3, 1),
            &cfg,
        )
        .unwrap();
        for tr in &trs {
            let states: Vec<usize> = tr.steps.iter().map(|s| s.0).collect();
            assert_eq!(states, vec![1, 2, 0, 1, 2, 0, 1]);
        }
    }

    #[test]
    fn reset_kernel() {
        let spec = reset_model();
        let pi = Policy::uniform(3, 2);
        let cfg = EstimatorConfig::new(20, 30, 1);
        let trs = simulate(
            &spec,
            &pi,
            &SimplexVector::uniform(3),
            &SimplexVector::uniform(3),
            &cfg,
        )
        .unwrap();
        for tr in &trs {
            assert_eq!(tr.horizon(), 30);
            assert!(tr.steps[1..].iter().all(|s| s.0 == 0));
        }
    }

    #[test]
    fn reproducible_and_execution_independent() {
        let spec = malware2();
        let pi = Policy::from_rows(&[[0.6, 0.4], [0.0, 1.0]]).unwrap();
        let mu = SimplexVector::new(vec![0.65, 0.35]).unwrap();
        let mut cfg = EstimatorConfig::new(50, 40, 9);
        cfg.execution = Execution::Sequential;
        let a = simulate(&spec, &pi, &mu, &mu, &cfg).unwrap();
        cfg.execution = Execution::Parallel;
        let b = simulate(&spec, &pi, &mu, &mu, &cfg).unwrap();
        assert_eq!(a, b);
        cfg.n_trajectories = 10;
        let c = simulate(&spec, &pi, &mu, &mu, &cfg).unwrap();
        assert_eq!(&a[..10], &c[..]);
        cfg.seed = 10;
        let d = simulate(&spec, &pi, &mu, &mu, &cfg).unwrap();
        assert_ne!(&a[..10], &d[..]);
    }

    #[test]
    fn transition_frequencies_within_binomial_bounds() {
        let spec = malware2();
        let pi = Policy::uniform(2, 2);
        let mu = SimplexVector::new(vec![0.65, 0.35]).unwrap();
        let cfg = EstimatorConfig::new(1, 100_000, 3);
        let trs = simulate(&spec, &pi, &mu, &mu, &cfg).unwrap();
        let kernel = spec.kernel_at(&mu);
        let mut counts = [[[0u64; 2]; 2]; 2];
        for w in trs[0].steps.windows(2) {
            let ((x, a), (y, _)) = (w[0], w[1]);
            counts[x][a][y] += 1;
        }
        for x in 0..2 {
            for a in 0..2 {
                let n = (counts[x][a][0] + counts[x][a][1]) as f64;
                assert!(n > 1000.0);
                for y in 0..2 {
                    let p = kernel.prob(y, x, a);
                    let sd = (p * (1.0 - p) / n).sqrt();
                    let freq = counts[x][a][y] as f64 / n;
                    assert!(
                        (freq - p).abs() <= 3.0 * sd + 1e-12,
                        "({x},{a})→{y}: {freq} vs {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn mean_field_cases() {
        let tr = |s: usize, t: usize| Trajectory {
            steps: vec![(s, 0); t],
            seed: 0,
            index: 0,
        };
        assert_eq!(
            estimate_mean_field(&[tr(2, 5)], 3).unwrap().as_slice(),
            &[0.0, 0.0, 1.0]
        );
        assert_eq!(
            estimate_mean_field(&[tr(0, 4), tr(1, 4)], 2)
                .unwrap()
                .as_slice(),
            &[0.5, 0.5]
        );
        assert!(matches!(estimate_mean_field(&[], 2), Err(Error::EmptyData)));
        assert!(estimate_mean_field(&[tr(3, 1)], 2).is_err());
    }

    #[test]
    fn ergodic_mean_field_at_equilibrium() {
        let spec = malware2();
        let mu = SimplexVector::new(vec![29.0 / 45.0, 16.0 / 45.0]).unwrap();
        let repair = 1.0 - (16.0 / 45.0) / (0.9 * 29.0 / 45.0);
        let pi = Policy::from_rows(&[[1.0 - repair, repair], [0.0, 1.0]]).unwrap();
        let cfg = EstimatorConfig::new(10, 100_000, 0);
        let trs = simulate(&spec, &pi, &mu, &mu, &cfg).unwrap();
        let hat = estimate_mean_field(&trs, 2).unwrap();
        assert!((hat[0] - mu[0]).abs() < 0.01);
        assert!((hat[0] - 0.65).abs() <= 0.01);
    }

    #[test]
    fn feature_expectation_cases() {
        let spec = reset_model();
        let pi = Policy::uniform(3, 2);
        let u = SimplexVector::uniform(3);
        let trs = simulate(&spec, &pi, &u, &u, &EstimatorConfig::new(5, 12, 0)).unwrap();
        let est = estimate_feature_expectation(&spec, &trs, &u, 0.5).unwrap();
        let exact = (1.0 - 0.5f64.powi(12)) / 0.5;
        assert!((est.value[0] - exact).abs() < 1e-15);
        assert!((est.tail_bound - 0.5f64.powi(12) * 2.0).abs() < 1e-15);

        let spec = malware2();
        let mu = SimplexVector::new(vec![0.65, 0.35]).unwrap();
        let pi = Policy::from_rows(&[[0.6, 0.4], [0.0, 1.0]]).unwrap();
        let trs = simulate(&spec, &pi, &mu, &mu, &EstimatorConfig::new(200, 10, 0)).unwrap();
        let est = estimate_feature_expectation(&spec, &trs, &mu, 1e-9).unwrap();
        let feats = spec.features_at(&mu);
        let mean0: Vec<f64> = (0..3)
            .map(|j| {
                trs.iter()
                    .map(|t| feats.get(t.steps[0].0, t.steps[0].1)[j])
                    .sum::<f64>()
                    / 200.0
            })
            .collect();
        for (a, b) in est.value.iter().zip(&mean0) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(matches!(
            estimate_feature_expectation(&spec, &[], &mu, 0.5),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn feature_expectation_agrees_with_exact() {
        let spec = malware2();
        let mu = SimplexVector::new(vec![0.65, 0.35]).unwrap();
        let pi = Policy::from_rows(&[[0.6, 0.4], [0.0, 1.0]]).unwrap();
        let exact = mdp::feature_expectation(&spec, &pi, &mu, &mu).unwrap();
        let t = horizon_for_tolerance(&spec, &mu, 1e-4);
        let trs = simulate(&spec, &pi, &mu, &mu, &EstimatorConfig::new(10_000, t, 0)).unwrap();
        let est = estimate_feature_expectation(&spec, &trs, &mu, spec.beta()).unwrap();
        assert!(est.tail_bound <= 1e-4);
        for j in 0..3 {
            let tol = 3.0 * est.std_error[j] + est.tail_bound;
            assert!(
                (est.value[j] - exact[j]).abs() <= tol,
                "{j}: {} vs {}",
                est.value[j],
                exact[j]
            );
        }
    }

    #[test]
    fn error_shrinks_with_sample_size() {
        let spec = malware2();
        let mu = SimplexVector::new(vec![0.65, 0.35]).unwrap();
        let pi = Policy::from_rows(&[[0.6, 0.4], [0.0, 1.0]]).unwrap();
        let exact = mdp::feature_expectation(&spec, &pi, &mu, &mu).unwrap();
        let t = horizon_for_tolerance(&spec, &mu, 1e-6);
        let errs: Vec<f64> = [100, 1000, 10_000]
            .iter()
            .map(|&d| {
                (0..8u64)
                    .map(|rep| {
                        let trs =
                            simulate(&spec, &pi, &mu, &mu, &EstimatorConfig::new(d, t, 100 + rep))
                                .unwrap();
                        let est =
                            estimate_feature_expectation(&spec, &trs, &mu, spec.beta()).unwrap();
                        norm2(
                            &est.value
                                .iter()
                                .zip(&exact)
                                .map(|(a, b)| a - b)
                                .collect::<Vec<_>>(),
                        )
                    })
                    .sum::<f64>()
                    / 8.0
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn horizon_for_tolerance_cases() {
        let spec = malware2();
        let mu = [0.65, 0.35];
        let t = horizon_for_tolerance(&spec, &mu, 1e-4);
        let fmax = max_feature_norm(&spec, &mu);
        assert!(0.8f64.powi(t as i32) * fmax / 0.2 <= 1e-4);
        assert!(0.8f64.powi(t as i32 - 1) * fmax / 0.2 > 1e-4);
    }

    #[test]
    fn rejects_bad_config() {
        let spec = malware2();
        let u = SimplexVector::uniform(2);
        let pi = Policy::uniform(2, 2);
        assert!(simulate(&spec, &pi, &u, &u, &EstimatorConfig::new(0, 5, 0)).is_err());
        assert!(simulate(&spec, &pi, &u, &u, &EstimatorConfig::new(5, 0, 0)).is_err());
        assert!(simulate(
            &spec,
            &Policy::uniform(3, 2),
            &u,
            &u,
            &EstimatorConfig::new(1, 1, 0)
        )
        .is_err());
    }
}
