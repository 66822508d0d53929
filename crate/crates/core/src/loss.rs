//! Hybrid cross-entropy + soft Dice loss on softmax probabilities.

use bafnet_tensor::{Real, Tensor, Var};

use crate::config::LossForm;
use crate::error::{data_err, shape_err, Result};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-6;
/// Label value for pixels that are never scored (tile padding, unlabeled).
pub const IGNORE_LABEL: u8 = 255;

/// One-hot targets plus the set of pixels that count towards the loss.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    /// `(B, C, H, W)`; all-zero at excluded pixels.
    pub onehot: Tensor<T>,
    /// `(B, 1, H, W)` with 1 at scored pixels; `None` when all are scored.
    pub mask: Option<Tensor<T>>,
    /// Number of scored pixels (the `N` of both loss terms).
    pub count: usize,
}

impl<T: Real> Targets<T> {
    /// From a label map `(B, H, W)` in row-major order. `IGNORE_LABEL` pixels
    /// and, if given, pixels of `exclude` are left out of the loss.
    pub fn from_labels(labels: &[u8], shape: [usize; 3], num_classes: usize, exclude: Option<usize>) -> Result<Self> {
        let [b, h, w] = shape;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(shape_err(format!("{} labels for shape {shape:?}", labels.len())));
        }
        let mut onehot = vec![T::zero(); b * num_classes * plane];
        let mut mask = vec![T::zero(); b * plane];
        let mut count = 0;
        for (i, &l) in labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let c = l as usize;
            if c >= num_classes {
                return Err(data_err(format!("label {c} outside 0..{num_classes}")));
            }
            if Some(c) == exclude {
                continue;
            }
            let (n, p) = (i / plane, i % plane);
            onehot[(n * num_classes + c) * plane + p] = T::one();
            mask[i] = T::one();
            count += 1;
        }
        let onehot = Tensor::new(&[b, num_classes, h, w], onehot)?;
        let mask = if count == b * plane { None } else { Some(Tensor::new(&[b, 1, h, w], mask)?) };
        Ok(Targets { onehot, mask, count })
    }

    /// Every pixel must carry exactly one 1 and otherwise zeros.
    pub fn from_onehot(onehot: Tensor<T>) -> Result<Self> {
        let s = onehot.shape().to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("one-hot targets must be (B, C, H, W), got {s:?}")));
        }
        let (c, plane) = (s[1], s[2] * s[3]);
        let d = onehot.data();
        for n in 0..s[0] {
            for p in 0..plane {
                let mut ones = 0;
                for k in 0..c {
                    let v = d[(n * c + k) * plane + p];
                    if v == T::one() {
                        ones += 1;
                    } else if v != T::zero() {
                        return Err(data_err(format!("one-hot value {} is neither 0 nor 1", v.to_f64c())));
                    }
                }
                if ones != 1 {
                    return Err(data_err(format!("pixel {p} of sample {n} has {ones} hot classes")));
                }
            }
        }
        Ok(Targets { count: s[0] * plane, onehot, mask: None })
    }

    fn check(&self, probs: &Var<'_, T>) -> Result<()> {
        if probs.shape() != self.onehot.shape() {
            return Err(shape_err(format!("probabilities {:?} vs targets {:?}", probs.shape(), self.onehot.shape())));
        }
        Ok(())
    }

    /// Sum over classes, then over scored pixels.
    fn masked_sum<'g>(&self, per_class: &Var<'g, T>) -> Result<Var<'g, T>> {
        let per_pixel = per_class.sum_axis(1)?;
        let kept = match &self.mask {
            Some(m) => per_pixel.mul(&per_pixel.graph().constant(m.clone()))?,
            None => per_pixel,
        };
        Ok(kept.sum_all()?)
    }
}

/// Channel softmax of `(B, C, H, W)` logits, clamped for the logs.
pub fn probabilities<'g, T: Real>(logits: &Var<'g, T>) -> Result<Var<'g, T>> {
    let lo = T::from_f64c(PROB_CLAMP);
    Ok(logits.softmax(1)?.clamp(lo, T::one() - lo)?)
}

/// Cross-entropy averaged over scored pixels. `Literal` sums a binary
/// cross-entropy over classes, `-(1/N) Σ Σ_c [y log p + (1-y) log(1-p)]`;
/// `Categorical` keeps only the first term.
pub fn ce_loss<'g, T: Real>(probs: &Var<'g, T>, t: &Targets<T>, form: LossForm) -> Result<Var<'g, T>> {
    t.check(probs)?;
    let g = probs.graph();
    if t.count == 0 {
        return Ok(probs.scale(T::zero())?.sum_all()?);
    }
    let y = g.constant(t.onehot.clone());
    let mut term = probs.ln()?.mul(&y)?;
    if form == LossForm::Literal {
        let not_y = g.constant(t.onehot.map(|v| T::one() - v));
        term = term.add(&probs.affine(-T::one(), T::one())?.ln()?.mul(&not_y)?)?;
    }
    let n = T::from_f64c(t.count as f64);
    Ok(t.masked_sum(&term)?.scale(-T::one() / n)?)
}

/// Soft Dice, `1 - (2/N) Σ Σ_c p y / (p + y + eps)`, over scored pixels.
pub fn dice_loss<'g, T: Real>(probs: &Var<'g, T>, t: &Targets<T>) -> Result<Var<'g, T>> {
    t.check(probs)?;
    if t.count == 0 {
        return Ok(probs.scale(T::zero())?.sum_all()?);
    }
    let y = probs.graph().constant(t.onehot.clone());
    let ratio = probs.mul(&y)?.div(&probs.add(&y)?.add_scalar(T::from_f64c(DICE_EPS))?)?;
    let n = T::from_f64c(t.count as f64);
    Ok(t.masked_sum(&ratio)?.affine(-(T::one() + T::one()) / n, T::one())?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.dice.is_finite() && self.total.is_finite()
    }
}

/// `ce + dice` as a graph scalar, with the three values read back.
pub fn hybrid_loss<'g, T: Real>(
    probs: &Var<'g, T>,
    t: &Targets<T>,
    form: LossForm,
) -> Result<(Var<'g, T>, LossReport)> {
    let ce = ce_loss(probs, t, form)?;
    let dice = dice_loss(probs, t)?;
    let total = ce.add(&dice)?;
    let report = LossReport {
        ce: ce.value().item().to_f64c(),
        dice: dice.value().item().to_f64c(),
        total: total.value().item().to_f64c(),
    };
    Ok((total, report))
}
