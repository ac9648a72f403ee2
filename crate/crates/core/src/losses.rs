//! Objective terms: Fowlkes-Mallows loss (hard and soft), BCE baseline,
//! cluster purity, the purity-consistency fairness loss and their
//! combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard on the purity denominator.
pub const PURITY_EPS: f64 = 1e-6;

const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
    pub tn: f64,
}

impl ConfusionCounts {
    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_lengths(q: &[f64], targets: &[f64]) -> Result<()> {
    if q.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: targets.len(),
            got: q.len(),
        });
    }
    Ok(())
}

/// Confusion counts of predictions against binary targets.
///
/// With a threshold, predictions are binarized by `q > threshold` first.
/// Without one the counts are soft: `tp = sum q*t`, `fp = sum q - tp`,
/// `fn = sum t - tp`.
pub fn confusion_counts(
    q: &[f64],
    targets: &[f64],
    threshold: Option<f64>,
) -> Result<ConfusionCounts> {
    check_lengths(q, targets)?;
    let binarize = |v: f64| match threshold {
        Some(t) => {
            if v > t {
                1.0
            } else {
                0.0
            }
        }
        None => v,
    };
    let mut tp = 0.0;
    let mut sum_q = 0.0;
    let mut sum_t = 0.0;
    let mut tn = 0.0;
    for (&p, &t) in q.iter().zip(targets) {
        let p = binarize(p);
        tp += p * t;
        sum_q += p;
        sum_t += t;
        tn += (1.0 - p) * (1.0 - t);
    }
    Ok(ConfusionCounts {
        tp,
        fp: sum_q - tp,
        fn_: sum_t - tp,
        tn,
    })
}

/// `(fn + fp) / (2 tp + fn + fp)`, or 0 when the denominator vanishes.
pub fn fmi_loss(c: &ConfusionCounts) -> f64 {
    let denom = 2.0 * c.tp + c.fn_ + c.fp;
    if denom == 0.0 {
        0.0
    } else {
        (c.fn_ + c.fp) / denom
    }
}

/// `tp / sqrt((tp + fn)(tp + fp))`, 0 when either factor is empty.
pub fn fowlkes_mallows_index(c: &ConfusionCounts) -> f64 {
    let denom = ((c.tp + c.fn_) * (c.tp + c.fp)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        c.tp / denom
    }
}

/// Gradient of the soft Fowlkes-Mallows loss with respect to each `q_j`.
///
/// With `S = sum q + sum t`, the loss is `1 - 2 tp / S`, so
/// `dL/dq_j = 2 (tp - t_j S) / S^2`.
pub fn fmi_loss_grad(q: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_lengths(q, targets)?;
    let tp: f64 = q.iter().zip(targets).map(|(a, b)| a * b).sum();
    let total: f64 = q.iter().sum::<f64>() + targets.iter().sum::<f64>();
    if total == 0.0 {
        return Ok(vec![0.0; q.len()]);
    }
    let s2 = total * total;
    Ok(targets
        .iter()
        .map(|&t| 2.0 * (tp - t * total) / s2)
        .collect())
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss(q: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(q, targets)?;
    if q.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = q
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / q.len() as f64)
}

pub fn bce_loss_grad(q: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_lengths(q, targets)?;
    let n = q.len() as f64;
    Ok(q.iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            (p - t) / (p * (1.0 - p)) / n
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurityMode {
    /// Positives over predicted positives, unbounded above.
    #[default]
    Ratio,
    /// The ratio capped at 1.
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurityValue {
    pub gamma: f64,
    /// Ground-truth positives in the cluster.
    pub numerator: f64,
    /// `n - n_neg`, the (soft) count of predicted positives.
    pub denominator: f64,
}

/// Ratio of ground-truth positives to predicted positives in one cluster.
pub fn purity(
    q: &[f64],
    targets: &[f64],
    threshold: Option<f64>,
    mode: PurityMode,
) -> Result<PurityValue> {
    check_lengths(q, targets)?;
    let numerator: f64 = targets.iter().sum();
    let negatives: f64 = match threshold {
        Some(t) => q.iter().filter(|&&v| v <= t).count() as f64,
        None => q.iter().map(|v| 1.0 - v).sum(),
    };
    let denominator = q.len() as f64 - negatives;
    let mut gamma = numerator / denominator.max(PURITY_EPS);
    if mode == PurityMode::Clamped {
        gamma = gamma.min(1.0);
    }
    Ok(PurityValue {
        gamma,
        numerator,
        denominator,
    })
}

/// `d gamma / d q_j` of the soft purity; identical for every member.
pub fn purity_grad(value: &PurityValue, mode: PurityMode) -> f64 {
    if value.denominator <= PURITY_EPS {
        return 0.0;
    }
    if mode == PurityMode::Clamped && value.numerator / value.denominator > 1.0 {
        return 0.0;
    }
    -value.numerator / (value.denominator * value.denominator)
}

/// Reference purity the batch is pulled toward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessReference {
    /// Batch mean, differentiated through.
    #[default]
    BatchMean,
    /// Batch mean treated as a constant.
    DetachedBatchMean,
    Fixed(f64),
}

impl FairnessReference {
    fn value(&self, gammas: &[f64]) -> f64 {
        match *self {
            FairnessReference::BatchMean | FairnessReference::DetachedBatchMean => {
                gammas.iter().sum::<f64>() / gammas.len() as f64
            }
            FairnessReference::Fixed(v) => v,
        }
    }
}

/// `(1/B) sum |gamma_i - gamma_f|`.
pub fn fairness_loss(gammas: &[f64], reference: FairnessReference) -> Result<f64> {
    if gammas.is_empty() {
        return Err(Error::Invalid("fairness loss over an empty batch".into()));
    }
    let r = reference.value(gammas);
    Ok(gammas.iter().map(|g| (g - r).abs()).sum::<f64>() / gammas.len() as f64)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`fairness_loss`] with respect to each purity.
pub fn fairness_loss_grad(gammas: &[f64], reference: FairnessReference) -> Result<Vec<f64>> {
    if gammas.is_empty() {
        return Err(Error::Invalid("fairness loss over an empty batch".into()));
    }
    let b = gammas.len() as f64;
    let r = reference.value(gammas);
    let signs: Vec<f64> = gammas.iter().map(|g| sign(g - r)).collect();
    let through_mean = match reference {
        FairnessReference::BatchMean => signs.iter().sum::<f64>() / b,
        _ => 0.0,
    };
    Ok(signs.iter().map(|s| (s - through_mean) / b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub clustering_term: f64,
    pub fairness_term: f64,
    pub lambda: f64,
}

pub fn combined_objective(clustering: f64, fairness: f64, lambda: f64) -> Result<ObjectiveValue> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Invalid(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(ObjectiveValue {
        total: clustering + lambda * fairness,
        clustering_term: clustering,
        fairness_term: fairness,
        lambda,
    })
}

/// `|mu_i - mu_j| <= mu_i + mu_j` for non-negative group losses.
pub fn gap_within_sum(mu_i: f64, mu_j: f64) -> Result<bool> {
    if mu_i < 0.0 || mu_j < 0.0 || mu_i.is_nan() || mu_j.is_nan() {
        return Err(Error::Invalid(format!(
            "group losses must be non-negative, got ({mu_i}, {mu_j})"
        )));
    }
    Ok((mu_i - mu_j).abs() <= mu_i + mu_j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hard_counts_example() {
        let c = confusion_counts(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0], Some(0.5)).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1.0, 1.0, 0.0, 1.0));
        assert!((fmi_loss(&c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let q = [0.9, 0.8, 0.0, 0.7];
        let t = [1.0, 1.0, 0.0, 1.0];
        let c = confusion_counts(&q, &t, Some(0.6)).unwrap();
        assert_eq!((c.fp, c.fn_), (0.0, 0.0));
        assert_eq!(fmi_loss(&c), 0.0);
    }

    #[test]
    fn soft_counts_example() {
        let c = confusion_counts(&[0.5, 0.5], &[1.0, 0.0], None).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0.5, 0.5, 0.5));
        assert!((c.total() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fmi_loss_edges() {
        let worst = ConfusionCounts {
            tp: 0.0,
            fp: 2.0,
            fn_: 1.0,
            tn: 0.0,
        };
        assert_eq!(fmi_loss(&worst), 1.0);
        assert_eq!(fmi_loss(&ConfusionCounts::default()), 0.0);
        assert!(confusion_counts(&[0.1], &[1.0, 0.0], None).is_err());
    }

    #[test]
    fn fmi_grad_matches_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..16)
            .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let g = fmi_loss_grad(&q, &t).unwrap();
        let f = |q: &[f64]| fmi_loss(&confusion_counts(q, &t, None).unwrap());
        let h = 1e-6;
        for j in 0..16 {
            let mut up = q.clone();
            up[j] += h;
            let mut dn = q.clone();
            dn[j] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(
                (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-12) < 1e-6,
                "j={j}"
            );
        }
        // At q = t = 1 the loss is 0 but the optimum sits on the q <= 1 face:
        // the raw gradient is -1/(2n) and the projected gradient vanishes.
        let at_opt = fmi_loss_grad(&[1.0; 4], &[1.0; 4]).unwrap();
        assert!(at_opt.iter().all(|&v| (v + 0.125).abs() < 1e-15));
        assert!(at_opt.iter().all(|&v| v.max(0.0) == 0.0));
    }

    #[test]
    fn bce_examples() {
        let q = [1.0 - 1e-9; 3];
        assert!(bce_loss(&q, &[1.0; 3]).unwrap() < 1e-8);
        assert!((bce_loss(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let q = [0.2, 0.7, 0.95];
        let t = [0.0, 1.0, 0.0];
        let oracle = (-(0.8f64.ln()) - 0.7f64.ln() - 0.05f64.ln()) / 3.0;
        assert!((bce_loss(&q, &t).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn purity_examples() {
        let t = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let perfect = purity(
            &[0.9, 0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1],
            &t,
            Some(0.5),
            PurityMode::Ratio,
        )
        .unwrap();
        assert_eq!(perfect.gamma, 1.0);
        let all = purity(&[0.9; 8], &t, Some(0.5), PurityMode::Ratio).unwrap();
        assert_eq!(all.gamma, 0.625);
        let six_neg = [0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        let under = purity(&six_neg, &t, Some(0.5), PurityMode::Ratio).unwrap();
        assert_eq!(under.gamma, 2.5);
        assert_eq!(
            purity(&six_neg, &t, Some(0.5), PurityMode::Clamped)
                .unwrap()
                .gamma,
            1.0
        );
    }

    #[test]
    fn purity_grad_matches_difference() {
        let q = [0.3, 0.8, 0.6, 0.2];
        let t = [1.0, 1.0, 0.0, 0.0];
        let v = purity(&q, &t, None, PurityMode::Ratio).unwrap();
        let g = purity_grad(&v, PurityMode::Ratio);
        let h = 1e-6;
        let mut up = q;
        up[2] += h;
        let mut dn = q;
        dn[2] -= h;
        let fd = (purity(&up, &t, None, PurityMode::Ratio).unwrap().gamma
            - purity(&dn, &t, None, PurityMode::Ratio).unwrap().gamma)
            / (2.0 * h);
        assert!((fd - g).abs() < 1e-8);
    }

    #[test]
    fn fairness_examples() {
        assert!(
            (fairness_loss(&[0.5, 1.0], FairnessReference::BatchMean).unwrap() - 0.25).abs()
                < 1e-15
        );
        assert_eq!(
            fairness_loss(&[0.7; 5], FairnessReference::BatchMean).unwrap(),
            0.0
        );
        assert_eq!(
            fairness_loss(&[0.3], FairnessReference::BatchMean).unwrap(),
            0.0
        );
        assert!(fairness_loss(&[], FairnessReference::BatchMean).is_err());
        assert!(
            (fairness_loss(&[0.5, 1.0], FairnessReference::Fixed(1.0)).unwrap() - 0.25).abs()
                < 1e-15
        );
    }

    #[test]
    fn fairness_grad_matches_differences() {
        let gammas = [0.4, 1.3, 0.9, 0.2, 0.75];
        for reference in [FairnessReference::BatchMean, FairnessReference::Fixed(0.8)] {
            let g = fairness_loss_grad(&gammas, reference).unwrap();
            let h = 1e-7;
            for j in 0..gammas.len() {
                let mut up = gammas;
                up[j] += h;
                let mut dn = gammas;
                dn[j] -= h;
                let fd = (fairness_loss(&up, reference).unwrap()
                    - fairness_loss(&dn, reference).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - g[j]).abs() < 1e-5 * fd.abs().max(1e-3),
                    "{reference:?} j={j}"
                );
            }
        }
    }

    #[test]
    fn objective_examples() {
        assert!((combined_objective(0.3, 0.2, 1.0).unwrap().total - 0.5).abs() < 1e-15);
        assert_eq!(combined_objective(0.3, 0.2, 0.0).unwrap().total, 0.3);
        assert!((combined_objective(0.3, 0.2, 0.5).unwrap().total - 0.4).abs() < 1e-15);
        assert!(combined_objective(0.3, 0.2, -1.0).is_err());
    }

    #[test]
    fn gap_examples() {
        assert!(gap_within_sum(0.4, 0.1).unwrap());
        assert!(gap_within_sum(0.0, 0.0).unwrap());
        assert!(gap_within_sum(-0.1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn soft_counts_reduce_to_hard(bits in proptest::collection::vec(any::<(bool, bool)>(), 1..20)) {
            let q: Vec<f64> = bits.iter().map(|b| b.0 as u8 as f64).collect();
            let t: Vec<f64> = bits.iter().map(|b| b.1 as u8 as f64).collect();
            let soft = confusion_counts(&q, &t, None).unwrap();
            let hard = confusion_counts(&q, &t, Some(0.5)).unwrap();
            prop_assert_eq!(soft, hard);
        }

        #[test]
        fn loss_bounds_and_zero_set(tp in 0u32..30, fp in 0u32..30, fn_ in 0u32..30) {
            let c = ConfusionCounts { tp: tp as f64, fp: fp as f64, fn_: fn_ as f64, tn: 0.0 };
            let l = fmi_loss(&c);
            prop_assert!((0.0..=1.0).contains(&l));
            if tp > 0 {
                prop_assert_eq!(l == 0.0, fp == 0 && fn_ == 0);
            }
        }

        #[test]
        fn fairness_is_nonnegative(g in proptest::collection::vec(0.0f64..3.0, 1..12)) {
            prop_assert!(fairness_loss(&g, FairnessReference::BatchMean).unwrap() >= 0.0);
        }
    }
}
