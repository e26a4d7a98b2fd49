//! Loss functions with analytic gradients.
//!
//! Everything here is generic over the float type so gradients can be checked
//! against finite differences in double precision.

use num_traits::Float;

use super::HeadsError;

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

fn c<F: Float>(v: f64) -> F {
    F::from(v).unwrap()
}

pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Numerically stable per-element binary cross-entropy on a logit.
pub fn bce_term<F: Float>(logit: F, label: F) -> F {
    logit.max(F::zero()) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over logits and its gradient. Empty input is 0.
pub fn bce_with_logits<F: Float>(logits: &[F], labels: &[F]) -> (F, Vec<F>) {
    assert_eq!(logits.len(), labels.len(), "bce input lengths");
    if logits.is_empty() {
        return (F::zero(), Vec::new());
    }
    let n = F::from(logits.len()).unwrap();
    let loss = logits.iter().zip(labels).fold(F::zero(), |acc, (&x, &y)| acc + bce_term(x, y)) / n;
    let grad = logits.iter().zip(labels).map(|(&x, &y)| (sigmoid(x) - y) / n).collect();
    (loss, grad)
}

/// Summed smooth-L1 (Huber with transition `beta`) and its gradient w.r.t. `pred`.
pub fn smooth_l1<F: Float>(pred: &[F], target: &[F], beta: F) -> (F, Vec<F>) {
    assert_eq!(pred.len(), target.len(), "smooth-l1 input lengths");
    let half = c::<F>(0.5);
    let mut loss = F::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < beta {
                loss = loss + half * d * d / beta;
                d / beta
            } else {
                loss = loss + d.abs() - half * beta;
                d.signum()
            }
        })
        .collect();
    (loss, grad)
}

/// Classification plus box-regression loss over a sampled set of anchors or
/// proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLoss<F> {
    pub cls: F,
    pub reg: F,
    pub d_logits: Vec<F>,
    /// Gradient for each positive's six predicted deltas.
    pub d_deltas: Vec<[F; 6]>,
    /// Set when nothing was sampled; the loss is then defined as zero.
    pub empty: bool,
}

impl<F: Float> DetectionLoss<F> {
    pub fn total(&self) -> F {
        self.cls + self.reg
    }
}

/// `cls` is the mean BCE over all sampled logits; `reg` is the smooth-L1
/// (beta 1) summed over the six delta terms and averaged over positives.
pub fn detection_loss<F: Float>(
    logits: &[F],
    labels: &[F],
    pos_pred: &[[F; 6]],
    pos_target: &[[F; 6]],
) -> DetectionLoss<F> {
    assert_eq!(pos_pred.len(), pos_target.len(), "positive delta counts");
    let (cls, d_logits) = bce_with_logits(logits, labels);
    let mut reg = F::zero();
    let mut d_deltas = Vec::with_capacity(pos_pred.len());
    if !pos_pred.is_empty() {
        let n = F::from(pos_pred.len()).unwrap();
        for (p, t) in pos_pred.iter().zip(pos_target) {
            let (l, g) = smooth_l1(p, t, F::one());
            reg = reg + l / n;
            d_deltas.push([0, 1, 2, 3, 4, 5].map(|j| g[j] / n));
        }
    }
    DetectionLoss {
        cls,
        reg,
        d_logits,
        d_deltas,
        empty: logits.is_empty(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceLoss<F> {
    pub loss: F,
    /// Per-pair gradient w.r.t. the predicted probabilities.
    pub d_pred: Vec<Vec<F>>,
    pub dice: Vec<F>,
    pub empty: bool,
}

/// `1 - mean(dice)` with `dice = (2·Σpg + ε) / (Σp + Σg + ε)` per pair.
pub fn soft_dice_loss<F: Float>(pred: &[&[F]], gt: &[&[F]]) -> Result<DiceLoss<F>, HeadsError> {
    if pred.len() != gt.len() {
        return Err(HeadsError::PairCount {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Ok(DiceLoss {
            loss: F::zero(),
            d_pred: Vec::new(),
            dice: Vec::new(),
            empty: true,
        });
    }
    let eps = c::<F>(DICE_EPS);
    let two = c::<F>(2.0);
    let n = F::from(pred.len()).unwrap();
    let mut dice = Vec::with_capacity(pred.len());
    let mut d_pred = Vec::with_capacity(pred.len());
    for (pair, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(HeadsError::MaskShapeMismatch {
                pair,
                pred: p.len(),
                gt: g.len(),
            });
        }
        let inter = p.iter().zip(g.iter()).fold(F::zero(), |a, (&p, &g)| a + p * g);
        let sp = p.iter().fold(F::zero(), |a, &v| a + v);
        let sg = g.iter().fold(F::zero(), |a, &v| a + v);
        let num = two * inter + eps;
        let den = sp + sg + eps;
        dice.push(num / den);
        // d(1 - mean dice)/dp_i = -(2 g_i den - num) / (den² n)
        d_pred.push(g.iter().map(|&gi| -(two * gi * den - num) / (den * den * n)).collect());
    }
    let mean = dice.iter().fold(F::zero(), |a, &d| a + d) / n;
    Ok(DiceLoss {
        loss: F::one() - mean,
        d_pred,
        dice,
        empty: false,
    })
}
