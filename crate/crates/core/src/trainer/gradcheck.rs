//! Central finite-difference check of the composite training objective.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{init_params, model_forward, Hyper, ModelParams};
use crate::dataio::{generate_synthetic, EmbeddingSet, GroupSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::neighborhood::{decompose, knn_all, NeighborCluster};

use super::{batch_loss, batch_step, TrainConfig};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub hyper: Hyper,
    pub trials: usize,
    pub seed: u64,
    pub lambda: f64,
    pub step: f64,
    pub batch_size: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            hyper: Hyper {
                d: 8,
                n: 8,
                k: 2,
                n_block: 1,
                n_head: 2,
                ff_dim: 16,
            },
            trials: 5,
            seed: 0,
            lambda: 1.0,
            step: 1e-5,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorError>,
    pub trials_run: usize,
    /// Trials dropped because a purity sat within 1e-3 of the batch mean.
    pub trials_skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&TensorError> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn trial_set(hyper: &Hyper, seed: u64) -> Result<EmbeddingSet> {
    generate_synthetic(&SyntheticSpec {
        groups: vec![
            GroupSpec {
                group_id: 0,
                identity_count: 4,
                images_per_identity: (3, 8),
                noise_scale: 0.5,
            },
            GroupSpec {
                group_id: 1,
                identity_count: 3,
                images_per_identity: (2, 6),
                noise_scale: 0.9,
            },
        ],
        dim: hyper.d,
        seed,
    })
}

fn perturbed_params(hyper: Hyper, seed: u64) -> Result<ModelParams> {
    let mut params = init_params(hyper, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let noise = Normal::new(0.0, 0.2).expect("valid normal");
    for (_, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(params)
}

fn objective(
    set: &EmbeddingSet,
    clusters: &[&NeighborCluster],
    params: &ModelParams,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let q: Vec<Array1<f64>> = clusters
        .iter()
        .map(|c| decompose(c, params.hyper.k, set).map(|b| model_forward(&b, params).0))
        .collect::<Result<_>>()?;
    Ok(batch_loss(&q, clusters, lambda, cfg)?.objective.total)
}

/// Compare analytic and central-difference gradients over every parameter.
pub fn gradient_check(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    gc.hyper.validate()?;
    if gc.hyper.d > 16 || gc.hyper.n > 16 {
        return Err(Error::Config(
            "gradient checks need d <= 16 and n <= 16".into(),
        ));
    }
    let cfg = TrainConfig {
        exec: Exec::Sequential,
        ..TrainConfig::default()
    };
    let mut report = GradCheckReport::default();
    if gc.trials == 0 {
        return Ok(report);
    }
    let mut attempt = 0u64;
    while report.trials_run < gc.trials {
        if attempt >= 20 * gc.trials as u64 {
            return Err(Error::Invalid(
                "could not find batches away from the purity kink".into(),
            ));
        }
        let seed = gc.seed.wrapping_add(attempt);
        attempt += 1;
        let set = trial_set(&gc.hyper, seed)?;
        let all = knn_all(&set, gc.hyper.n, Exec::Sequential)?;
        let stride = (all.len() / gc.batch_size).max(1);
        let batch: Vec<&NeighborCluster> = all.iter().step_by(stride).take(gc.batch_size).collect();
        let mut params = perturbed_params(gc.hyper, seed)?;
        let analytic = batch_step(&set, &batch, &params, gc.lambda, &cfg, None)?;
        if gc.lambda > 0.0 {
            let mean = analytic.gammas.iter().sum::<f64>() / analytic.gammas.len() as f64;
            if analytic.gammas.iter().any(|g| (g - mean).abs() < 1e-3) {
                report.trials_skipped += 1;
                continue;
            }
        }
        let grads: Vec<(String, Vec<f64>)> = analytic
            .grads
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        for (ti, (name, grad)) in grads.iter().enumerate() {
            let mut worst = 0.0f64;
            for (j, &a) in grad.iter().enumerate() {
                let original = params.tensors_mut()[ti].1[j];
                params.tensors_mut()[ti].1[j] = original + gc.step;
                let plus = objective(&set, &batch, &params, gc.lambda, &cfg)?;
                params.tensors_mut()[ti].1[j] = original - gc.step;
                let minus = objective(&set, &batch, &params, gc.lambda, &cfg)?;
                params.tensors_mut()[ti].1[j] = original;
                worst = worst.max(rel_error(a, (plus - minus) / (2.0 * gc.step)));
            }
            match report.tensors.iter_mut().find(|t| &t.name == name) {
                Some(t) => {
                    t.max_rel_error = t.max_rel_error.max(worst);
                    t.checked += grad.len();
                }
                None => report.tensors.push(TensorError {
                    name: name.clone(),
                    max_rel_error: worst,
                    checked: grad.len(),
                }),
            }
        }
        report.trials_run += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_give_an_empty_report() {
        let r = gradient_check(&GradCheckConfig {
            trials: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(r.tensors.is_empty());
        assert_eq!(r.trials_run, 0);
    }

    #[test]
    fn tiny_model_matches_finite_differences() {
        let r = gradient_check(&GradCheckConfig {
            trials: 2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.trials_run, 2);
        assert!(r.max_rel_error() < 1e-4, "{r:#?}");
        assert!(r.get("correlation").is_some());
        assert!(r.get("rank_embedding").is_some());
    }

    #[test]
    fn single_subcluster_leaves_correlation_dead() {
        let hyper = Hyper {
            k: 1,
            ..GradCheckConfig::default().hyper
        };
        let r = gradient_check(&GradCheckConfig {
            hyper,
            trials: 1,
            lambda: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.get("correlation").unwrap().max_rel_error, 0.0);
    }

    #[test]
    fn oversized_models_are_refused() {
        let hyper = Hyper {
            d: 32,
            ..GradCheckConfig::default().hyper
        };
        assert!(gradient_check(&GradCheckConfig {
            hyper,
            ..Default::default()
        })
        .is_err());
    }
}
