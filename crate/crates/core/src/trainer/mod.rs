//! Mini-batch training of the cluster transformer.
//!
//! Each batch holds `B` neighbor clusters. The objective is the mean
//! clustering loss over the batch plus `lambda` times the purity-consistency
//! penalty over the batch's soft purities. Group IDs are never read here.

mod gradcheck;
mod optim;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{model_backward, model_forward, ForwardTrace, ModelParams};
use crate::dataio::EmbeddingSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{
    bce_loss, bce_loss_grad, combined_objective, confusion_counts, fairness_loss,
    fairness_loss_grad, fmi_loss, fmi_loss_grad, purity, purity_grad, FairnessReference,
    ObjectiveValue, PurityMode,
};
use crate::neighborhood::{decompose, knn_all, NeighborCluster, SubClusterBatch};

pub use gradcheck::{
    gradient_check, rel_error, GradCheckConfig, GradCheckReport, TensorError, REL_ERROR_FLOOR,
};
pub use optim::{adam_step, cosine_lr, lambda_schedule, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusteringLoss {
    #[default]
    Fmi,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_epochs: usize,
    pub lambda_max: f64,
    pub seed: u64,
    pub clustering_loss: ClusteringLoss,
    pub fairness_reference: FairnessReference,
    pub purity_mode: PurityMode,
    /// Global gradient-norm clip; off when `None`.
    pub max_grad_norm: Option<f64>,
    /// Train on a seeded subsample of centroids each epoch.
    pub clusters_per_epoch: Option<usize>,
    /// Apply a random signed coordinate permutation to every training
    /// cluster. Similarities are unchanged; identity memorization is not.
    pub augment: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr0: 1e-4,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_epochs: 2,
            lambda_max: 1.0,
            seed: 0,
            clustering_loss: ClusteringLoss::Fmi,
            fairness_reference: FairnessReference::BatchMean,
            purity_mode: PurityMode::Ratio,
            max_grad_norm: None,
            clusters_per_epoch: None,
            augment: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs={} exceeds epochs={}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.lr_min > self.lr0 {
            return Err(Error::Config("lr_min must not exceed lr0".into()));
        }
        if self.lambda_max.is_nan() || self.lambda_max < 0.0 {
            return Err(Error::Config("lambda_max must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub lambda: f64,
    /// Mean soft Fowlkes-Mallows loss over the epoch's clusters.
    pub fmi_loss: f64,
    pub fair_loss: f64,
    pub total: f64,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    /// The clustering term actually optimized (equals `fmi_loss` unless BCE is used).
    pub clustering_loss: f64,
}

/// Objective value, gradients and diagnostics for one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub objective: ObjectiveValue,
    pub grads: ModelParams,
    pub gammas: Vec<f64>,
    pub fmi_losses: Vec<f64>,
}

fn targets_of(cluster: &NeighborCluster) -> Result<&[f64]> {
    cluster
        .targets
        .as_deref()
        .ok_or_else(|| Error::Config("training requires ground-truth labels".into()))
}

/// Per-cluster losses and `dL/dq`, shared by training and gradient checks.
pub(crate) struct BatchLoss {
    pub objective: ObjectiveValue,
    pub gammas: Vec<f64>,
    pub fmi_losses: Vec<f64>,
    pub dq: Vec<Array1<f64>>,
}

pub(crate) fn batch_loss(
    predictions: &[Array1<f64>],
    clusters: &[&NeighborCluster],
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let b = clusters.len() as f64;
    let mut clustering = 0.0;
    let mut gammas = Vec::with_capacity(clusters.len());
    let mut gamma_grads = Vec::with_capacity(clusters.len());
    let mut fmi_losses = Vec::with_capacity(clusters.len());
    let mut dq = Vec::with_capacity(clusters.len());
    for (q, cluster) in predictions.iter().zip(clusters) {
        let t = targets_of(cluster)?;
        let q = q.as_slice().expect("contiguous");
        let fmi = fmi_loss(&confusion_counts(q, t, None)?);
        fmi_losses.push(fmi);
        let (loss, grad) = match cfg.clustering_loss {
            ClusteringLoss::Fmi => (fmi, fmi_loss_grad(q, t)?),
            ClusteringLoss::Bce => (bce_loss(q, t)?, bce_loss_grad(q, t)?),
        };
        clustering += loss / b;
        dq.push(Array1::from(grad) / b);
        let p = purity(q, t, None, cfg.purity_mode)?;
        gammas.push(p.gamma);
        gamma_grads.push(purity_grad(&p, cfg.purity_mode));
    }
    let fairness = fairness_loss(&gammas, cfg.fairness_reference)?;
    if lambda > 0.0 {
        let dgamma = fairness_loss_grad(&gammas, cfg.fairness_reference)?;
        for ((g, dg), dpur) in dq.iter_mut().zip(dgamma).zip(gamma_grads) {
            g.mapv_inplace(|v| v + lambda * dg * dpur);
        }
    }
    Ok(BatchLoss {
        objective: combined_objective(clustering, fairness, lambda)?,
        gammas,
        fmi_losses,
        dq,
    })
}

/// Permute embedding coordinates and flip their signs, identically for
/// every token of the batch, so all inner products are preserved.
pub fn signed_permutation(batch: &mut SubClusterBatch, seed: u64) {
    let Some(d) = batch.sequences.first().map(|s| s.ncols()) else {
        return;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let signs: Vec<f64> = (0..d)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    for seq in &mut batch.sequences {
        let original = seq.clone();
        for (c, (&src, &sign)) in perm.iter().zip(&signs).enumerate() {
            seq.column_mut(c).assign(&(&original.column(src) * sign));
        }
    }
}

/// Forward, loss and backward over one mini-batch of clusters. With
/// `augment_seed`, cluster `i` is transformed by [`signed_permutation`]
/// seeded from `augment_seed + i`.
pub fn batch_step(
    set: &EmbeddingSet,
    clusters: &[&NeighborCluster],
    params: &ModelParams,
    lambda: f64,
    cfg: &TrainConfig,
    augment_seed: Option<u64>,
) -> Result<BatchResult> {
    let k = params.hyper.k;
    let forwards: Vec<(Array1<f64>, ForwardTrace)> = cfg
        .exec
        .map(clusters.len(), |i| {
            let mut batch = decompose(clusters[i], k, set)?;
            if let Some(seed) = augment_seed {
                signed_permutation(&mut batch, seed.wrapping_add(i as u64));
            }
            Ok(model_forward(&batch, params))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let predictions: Vec<Array1<f64>> = forwards.iter().map(|(q, _)| q.clone()).collect();
    let loss = batch_loss(&predictions, clusters, lambda, cfg)?;
    let partial = cfg.exec.map(clusters.len(), |i| {
        model_backward(params, &forwards[i].1, loss.dq[i].view())
    });
    let mut grads = params.zeros_like();
    for g in &partial {
        grads.add_scaled(g, 1.0);
    }
    Ok(BatchResult {
        objective: loss.objective,
        grads,
        gammas: loss.gammas,
        fmi_losses: loss.fmi_losses,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Build neighborhoods for `set` and train on them.
pub fn train(
    set: &EmbeddingSet,
    model: ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    model.hyper.validate()?;
    let clusters = knn_all(set, model.hyper.n, cfg.exec)?;
    train_on_clusters(set, &clusters, model, cfg)
}

/// Train on precomputed neighborhoods (one per centroid).
pub fn train_on_clusters(
    set: &EmbeddingSet,
    clusters: &[NeighborCluster],
    mut params: ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    cfg.validate()?;
    params.hyper.validate()?;
    if cfg.epochs == 0 {
        return Ok((params, Vec::new()));
    }
    if set.labels.is_none() {
        return Err(Error::Config(
            "training requires ground-truth labels".into(),
        ));
    }
    if let Some(c) = clusters.iter().find(|c| c.len() != params.hyper.n) {
        return Err(Error::Config(format!(
            "cluster of size {} does not match model n={}",
            c.len(),
            params.hyper.n
        )));
    }
    if clusters.is_empty() {
        return Err(Error::EmptySet);
    }
    let per_epoch = cfg
        .clusters_per_epoch
        .unwrap_or(clusters.len())
        .min(clusters.len());
    let batches_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lambda = lambda_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut lr = cfg.lr0;
        let mut gammas = Vec::with_capacity(per_epoch);
        let mut fmi_sum = 0.0;
        let (mut clustering_sum, mut fair_sum) = (0.0, 0.0);
        for chunk in order[..per_epoch].chunks(cfg.batch_size) {
            let batch: Vec<&NeighborCluster> = chunk.iter().map(|&i| &clusters[i]).collect();
            let augment_seed = cfg.augment.then(|| rng.random::<u64>());
            let mut result = batch_step(set, &batch, &params, lambda, cfg, augment_seed)?;
            if let Some(max_norm) = cfg.max_grad_norm {
                let norm = result.grads.l2_norm();
                if norm > max_norm {
                    let scaled = result.grads.clone();
                    result.grads = result.grads.zeros_like();
                    result.grads.add_scaled(&scaled, max_norm / norm);
                }
            }
            lr = cosine_lr(step, total_steps, cfg)?;
            adam_step(&mut params, &result.grads, &mut state, lr, cfg)?;
            step += 1;
            let w = batch.len() as f64 / per_epoch as f64;
            clustering_sum += w * result.objective.clustering_term;
            fair_sum += w * result.objective.fairness_term;
            fmi_sum += result.fmi_losses.iter().sum::<f64>();
            gammas.extend(result.gammas);
        }
        let objective = combined_objective(clustering_sum, fair_sum, lambda)?;
        let (gamma_mean, gamma_std) = mean_std(&gammas);
        let entry = EpochLog {
            epoch,
            step: state.step,
            lr,
            lambda,
            fmi_loss: fmi_sum / per_epoch as f64,
            fair_loss: objective.fairness_term,
            total: objective.total,
            gamma_mean,
            gamma_std,
            clustering_loss: objective.clustering_term,
        };
        log::debug!("{}", serde_json::to_string(&entry).unwrap_or_default());
        logs.push(entry);
    }
    Ok((params, logs))
}

/// Model probabilities for every cluster.
pub fn predict(
    set: &EmbeddingSet,
    clusters: &[NeighborCluster],
    params: &ModelParams,
    exec: Exec,
) -> Result<Vec<Array1<f64>>> {
    exec.map(clusters.len(), |i| {
        decompose(&clusters[i], params.hyper.k, set).map(|b| model_forward(&b, params).0)
    })
    .into_iter()
    .collect()
}

/// Mean soft Fowlkes-Mallows loss of a model over labelled clusters.
pub fn evaluate_fmi(predictions: &[Array1<f64>], clusters: &[NeighborCluster]) -> Result<f64> {
    let mut sum = 0.0;
    for (q, c) in predictions.iter().zip(clusters) {
        sum += fmi_loss(&confusion_counts(as_slice(q.view()), targets_of(c)?, None)?);
    }
    Ok(sum / clusters.len().max(1) as f64)
}

fn as_slice(v: ArrayView1<'_, f64>) -> &[f64] {
    v.to_slice().expect("contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{init_params, Hyper};
    use crate::dataio::{generate_synthetic, GroupSpec, SyntheticSpec};

    fn small_set(noise: f64, seed: u64) -> EmbeddingSet {
        generate_synthetic(&SyntheticSpec {
            groups: vec![GroupSpec {
                group_id: 0,
                identity_count: 12,
                images_per_identity: (4, 10),
                noise_scale: noise,
            }],
            dim: 8,
            seed,
        })
        .unwrap()
    }

    fn small_hyper() -> Hyper {
        Hyper {
            d: 8,
            n: 8,
            k: 2,
            n_block: 1,
            n_head: 2,
            ff_dim: 16,
        }
    }

    #[test]
    fn separable_data_is_fit() {
        let set = generate_synthetic(&SyntheticSpec {
            groups: vec![GroupSpec {
                group_id: 0,
                identity_count: 60,
                images_per_identity: (4, 4),
                noise_scale: 1e-6,
            }],
            dim: 8,
            seed: 7,
        })
        .unwrap();
        let hyper = Hyper {
            d: 8,
            n: 8,
            k: 2,
            n_block: 1,
            n_head: 2,
            ff_dim: 16,
        };
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            lr0: 3e-3,
            batch_size: 8,
            seed: 1,
            ..Default::default()
        };
        let (_, log) = train(&set, init_params(hyper, 1).unwrap(), &cfg).unwrap();
        let last = log.last().unwrap().fmi_loss;
        assert!(last < 0.05, "final soft FMI loss {last}");
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let set = small_set(0.3, 1);
        let p = init_params(small_hyper(), 1).unwrap();
        let (out, log) = train(
            &set,
            p.clone(),
            &TrainConfig {
                epochs: 0,
                warmup_epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out, p);
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logs_are_consistent() {
        let set = small_set(0.3, 2);
        let cfg = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            lr0: 3e-3,
            batch_size: 8,
            seed: 5,
            ..Default::default()
        };
        let p = init_params(small_hyper(), 3).unwrap();
        let (a, la) = train(&set, p.clone(), &cfg).unwrap();
        let (b, lb) = train(
            &set,
            p,
            &TrainConfig {
                exec: Exec::Sequential,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la[0].lambda, 0.0);
        for e in &la {
            assert!((e.total - (e.clustering_loss + e.lambda * e.fair_loss)).abs() < 1e-9);
            assert!((e.fmi_loss - e.clustering_loss).abs() < 1e-12);
        }
        assert!(la
            .windows(2)
            .all(|w| w[1].lr <= w[0].lr && w[1].step > w[0].step));
    }

    #[test]
    fn warmup_updates_ignore_fairness() {
        let set = small_set(0.4, 3);
        let clusters = knn_all(&set, 8, Exec::Sequential).unwrap();
        let batch: Vec<&NeighborCluster> = clusters.iter().take(6).collect();
        let p = init_params(small_hyper(), 4).unwrap();
        let cfg = TrainConfig::default();
        let with_fair = batch_step(&set, &batch, &p, 0.0, &cfg, None).unwrap();
        let plain = batch_step(
            &set,
            &batch,
            &p,
            0.0,
            &TrainConfig {
                fairness_reference: FairnessReference::Fixed(9.0),
                ..cfg
            },
            None,
        )
        .unwrap();
        assert_eq!(with_fair.grads, plain.grads);
        assert_eq!(
            with_fair.objective.total,
            with_fair.objective.clustering_term
        );
    }

    #[test]
    fn signed_permutation_preserves_inner_products() {
        let set = small_set(0.4, 5);
        let clusters = knn_all(&set, 8, Exec::Sequential).unwrap();
        let plain = decompose(&clusters[3], 2, &set).unwrap();
        let mut moved = plain.clone();
        signed_permutation(&mut moved, 11);
        let (a, b) = (plain.flatten(), moved.flatten());
        assert_ne!(a, b);
        let diff = (a.dot(&a.t()) - b.dot(&b.t()))
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12);
    }

    #[test]
    fn unlabelled_sets_are_rejected() {
        let mut set = small_set(0.3, 4);
        set.labels = None;
        let p = init_params(small_hyper(), 1).unwrap();
        assert!(matches!(
            train(&set, p, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
