//! Per-class Dice loss, per-class cross-entropy, and their weighted
//! composite objective.
//!
//! The composite combines, per class n, `w_n · (0.5·dice_n + 0.5·ce_n)`,
//! where the damage-class weights come from the square-root
//! inverse-frequency table ([`crate::schema::ClassWeightTable`]) and the
//! background weight follows that table's convention. Dice is computed on
//! softmax probabilities (soft Dice) so the objective stays differentiable,
//! and per-class cross-entropy is the masked mean over that class's pixels.
//!
//! Classes absent from a tile contribute zero to both terms: sparse tiles
//! would otherwise produce degenerate ratios and spurious gradients.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::schema::{ClassWeightTable, DamageClass, NUM_CLASSES};
use crate::tensor::{Scalar, Tape, Tensor};

/// Default Dice smoothing constant.
pub const DEFAULT_SMOOTHING: f64 = 1.0;

/// Per-class loss terms plus the weighted total.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub per_class_dice: BTreeMap<DamageClass, f64>,
    pub per_class_ce: BTreeMap<DamageClass, f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Re-evaluates the weighted sum from the stored parts; `total` must
    /// always equal this within 1e-6.
    pub fn recomputed_total(&self, weights: &ClassWeightTable) -> f64 {
        DamageClass::ALL
            .iter()
            .map(|&class| {
                let d = self.per_class_dice.get(&class).copied().unwrap_or(0.0);
                let c = self.per_class_ce.get(&class).copied().unwrap_or(0.0);
                weights.weight_of(class) * (0.5 * d + 0.5 * c)
            })
            .sum()
    }
}

fn check_spatial(ch: usize, h: usize, w: usize, th: usize, tw: usize) -> Result<()> {
    if (h, w) != (th, tw) {
        return Err(Error::InvalidInput(format!(
            "target {th}x{tw} does not match prediction {h}x{w}"
        )));
    }
    if ch == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidInput("empty prediction grid".into()));
    }
    Ok(())
}

/// Soft Dice loss for one class over a single tile.
///
/// `1 − (2·Σ p_c·g_c + s)/(Σ p_c + Σ g_c + s)` with `g_c` the one-hot target
/// plane. For `s > 0` the value lies in `[0, 1)`; `s = 0` is accepted as the
/// limit form (an empty class with an empty prediction yields 0).
pub fn dice_loss<S: Scalar>(
    probabilities: ArrayView3<'_, S>,
    target: ArrayView2<'_, u8>,
    class_id: usize,
    smoothing: f64,
) -> Result<f64> {
    let (c, h, w) = probabilities.dim();
    let (th, tw) = target.dim();
    check_spatial(c, h, w, th, tw)?;
    if class_id >= c {
        return Err(Error::InvalidInput(format!(
            "class id {class_id} out of range for {c} channels"
        )));
    }
    if smoothing < 0.0 {
        return Err(Error::InvalidInput("smoothing must be >= 0".into()));
    }
    for r in 0..h {
        for cc in 0..w {
            let sum: f64 = (0..c).map(|k| probabilities[[k, r, cc]].into_f64()).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(format!(
                    "probabilities at ({r}, {cc}) sum to {sum}, expected 1"
                )));
            }
        }
    }

    let mut intersection = 0.0;
    let mut pred_mass = 0.0;
    let mut target_mass = 0.0;
    for r in 0..h {
        for cc in 0..w {
            let p = probabilities[[class_id, r, cc]].into_f64();
            pred_mass += p;
            if target[[r, cc]] as usize == class_id {
                intersection += p;
                target_mass += 1.0;
            }
        }
    }
    let denom = pred_mass + target_mass + smoothing;
    if denom == 0.0 {
        return Ok(0.0); // limit form: empty class, empty prediction
    }
    Ok(1.0 - (2.0 * intersection + smoothing) / denom)
}

/// Per-class cross-entropy: mean of `−log softmax(logits)[class_id]` over
/// the pixels labeled `class_id`; 0 when the class is absent.
pub fn cross_entropy_loss<S: Scalar>(
    logits: ArrayView3<'_, S>,
    target: ArrayView2<'_, u8>,
    class_id: usize,
) -> Result<f64> {
    let (c, h, w) = logits.dim();
    let (th, tw) = target.dim();
    check_spatial(c, h, w, th, tw)?;
    if class_id >= c {
        return Err(Error::InvalidInput(format!(
            "class id {class_id} out of range for {c} channels"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..h {
        for cc in 0..w {
            if target[[r, cc]] as usize != class_id {
                continue;
            }
            let max = (0..c)
                .map(|k| logits[[k, r, cc]].into_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = (0..c)
                .map(|k| (logits[[k, r, cc]].into_f64() - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            total += lse - logits[[class_id, r, cc]].into_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

fn check_weight_coverage(channels: usize, weights: &ClassWeightTable) -> Result<()> {
    if channels != NUM_CLASSES {
        return Err(Error::Config(format!(
            "composite loss expects {NUM_CLASSES} channels (background + {}), got {channels}",
            NUM_CLASSES - 1
        )));
    }
    for class in DamageClass::DAMAGE {
        if !weights.weights.contains_key(&class) {
            return Err(Error::Config(format!(
                "weight table does not cover class {class}"
            )));
        }
    }
    Ok(())
}

/// Weighted composite loss over a single `(C, H, W)` tile.
pub fn composite_loss<S: Scalar>(
    logits: ArrayView3<'_, S>,
    target: ArrayView2<'_, u8>,
    weights: &ClassWeightTable,
    smoothing: f64,
) -> Result<LossBreakdown> {
    let (c, h, w) = logits.dim();
    let (th, tw) = target.dim();
    check_spatial(c, h, w, th, tw)?;
    check_weight_coverage(c, weights)?;
    if let Some(&bad) = target.iter().find(|&&v| v as usize >= c) {
        return Err(Error::InvalidInput(format!("target value {bad} out of range")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }

    // Softmax probabilities, computed once in f64.
    let mut probs = Array3::<f64>::zeros((c, h, w));
    for r in 0..h {
        for cc in 0..w {
            let max = (0..c)
                .map(|k| logits[[k, r, cc]].into_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for k in 0..c {
                let e = (logits[[k, r, cc]].into_f64() - max).exp();
                probs[[k, r, cc]] = e;
                denom += e;
            }
            for k in 0..c {
                probs[[k, r, cc]] /= denom;
            }
        }
    }

    let mut per_class_dice = BTreeMap::new();
    let mut per_class_ce = BTreeMap::new();
    let mut total = 0.0;
    for class in DamageClass::ALL {
        let n = class.id() as usize;
        let present = target.iter().any(|&v| v as usize == n);
        let (d, ce) = if present {
            (
                dice_loss(probs.view(), target, n, smoothing)?,
                cross_entropy_loss(logits, target, n)?,
            )
        } else {
            (0.0, 0.0) // absent-class convention
        };
        per_class_dice.insert(class, d);
        per_class_ce.insert(class, ce);
        total += weights.weight_of(class) * (0.5 * d + 0.5 * ce);
    }
    Ok(LossBreakdown { per_class_dice, per_class_ce, total })
}

/// Differentiable composite loss over a `(B, C, H, W)` logits node.
///
/// The batch dimension is pooled into the per-class sums (a batch is treated
/// as one large tile), matching [`composite_loss`] on the equivalent stacked
/// grid. Returns the scalar loss node plus the evaluated breakdown.
pub fn composite_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Tensor,
    target: &Array3<u8>,
    weights: &ClassWeightTable,
    smoothing: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidInput(format!(
            "graph loss expects (B, C, H, W) logits, got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    check_weight_coverage(c, weights)?;
    if target.dim() != (b, h, w) {
        return Err(Error::InvalidInput(format!(
            "target shape {:?} does not match logits {shape:?}",
            target.dim()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&v| v as usize >= c) {
        return Err(Error::InvalidInput(format!("target value {bad} out of range")));
    }

    let probs = tape.softmax_channels(logits);
    let log_probs = tape.log_softmax_channels(logits);

    let mut per_class_dice = BTreeMap::new();
    let mut per_class_ce = BTreeMap::new();
    let mut total: Option<Tensor> = None;
    for class in DamageClass::ALL {
        let n = class.id() as usize;
        let count = target.iter().filter(|&&v| v as usize == n).count();
        if count == 0 {
            per_class_dice.insert(class, 0.0);
            per_class_ce.insert(class, 0.0);
            continue;
        }
        let mask = tape.leaf(
            target
                .mapv(|v| if v as usize == n { S::one() } else { S::zero() })
                .into_dyn(),
        );

        // dice_n = 1 − (2·I + s)/(P + G + s)
        let p_n = tape.select_channel(probs, n);
        let masked = tape.mul(p_n, mask);
        let intersection = tape.sum_all(masked);
        let pred_mass = tape.sum_all(p_n);
        let num = {
            let i2 = tape.mul_scalar(intersection, S::from_f64(2.0));
            tape.add_scalar(i2, S::from_f64(smoothing))
        };
        let den = tape.add_scalar(pred_mass, S::from_f64(count as f64 + smoothing));
        let ratio = tape.div(num, den);
        let neg_ratio = tape.neg(ratio);
        let dice = tape.add_scalar(neg_ratio, S::one());

        // ce_n = −(Σ masked log p_n)/G
        let lp_n = tape.select_channel(log_probs, n);
        let masked_lp = tape.mul(lp_n, mask);
        let sum_lp = tape.sum_all(masked_lp);
        let ce = tape.mul_scalar(sum_lp, S::from_f64(-1.0 / count as f64));

        per_class_dice.insert(class, tape.scalar_value(dice).into_f64());
        per_class_ce.insert(class, tape.scalar_value(ce).into_f64());

        let pair = tape.add(dice, ce);
        let term = tape.mul_scalar(pair, S::from_f64(0.5 * weights.weight_of(class)));
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }

    let total = total.expect("target cannot be empty");
    let breakdown = LossBreakdown {
        per_class_dice,
        per_class_ce,
        total: tape.scalar_value(total).into_f64(),
    };
    Ok((total, breakdown))
}
