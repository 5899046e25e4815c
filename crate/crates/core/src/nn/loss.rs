//! Weighted pixel-wise softmax cross-entropy, evaluated in log space.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform pixel weights summing to one, the plain mean-loss case.
pub fn uniform_weights<F: Scalar>(h: usize, w: usize) -> Vec<F> {
    let inv = F::one() / F::from_f64_lossy((h * w) as f64);
    vec![inv; h * w]
}

/// Indicator weights for one class, normalized over that class's pixel count.
/// `None` when the mask holds no pixel of the class.
pub fn class_indicator_weights<F: Scalar>(mask: &[u8], class: usize) -> Option<Vec<F>> {
    let count = mask.iter().filter(|&&m| m as usize == class).count();
    if count == 0 {
        return None;
    }
    let inv = F::one() / F::from_f64_lossy(count as f64);
    Some(mask.iter().map(|&m| if m as usize == class { inv } else { F::zero() }).collect())
}

/// Weighted cross-entropy over pixels. `logits` is `[classes, h, w]`, `mask`
/// a row-major `h*w` label array, `weights` one weight per pixel.
pub fn pixel_loss<F: Scalar>(logits: &Tensor<F>, mask: &[u8], weights: &[F]) -> Result<F> {
    let classes = logits.dims()[0];
    let npix = logits.dims()[1] * logits.dims()[2];
    if mask.len() != npix || weights.len() != npix {
        return Err(Error::Shape(format!(
            "loss over {npix} pixels got mask of {} and weights of {}",
            mask.len(),
            weights.len()
        )));
    }
    let data = logits.data();
    let mut total = F::zero();
    for px in 0..npix {
        let label = mask[px] as usize;
        if label >= classes {
            return Err(Error::InvalidLabel { label, classes });
        }
        let w = weights[px];
        if w == F::zero() {
            continue;
        }
        // log-sum-exp over the class column at this pixel
        let mut hi = F::neg_infinity();
        for c in 0..classes {
            hi = hi.max(data[c * npix + px]);
        }
        let mut acc = F::zero();
        for c in 0..classes {
            acc += (data[c * npix + px] - hi).exp();
        }
        let lse = hi + acc.ln();
        total += w * (lse - data[label * npix + px]);
    }
    Ok(total)
}

/// Gradient of [`pixel_loss`] with respect to the logits:
/// `w * (softmax - onehot)` at every pixel.
pub fn pixel_loss_backward<F: Scalar>(logits: &Tensor<F>, mask: &[u8], weights: &[F]) -> Result<Tensor<F>> {
    let classes = logits.dims()[0];
    let npix = logits.dims()[1] * logits.dims()[2];
    if mask.len() != npix || weights.len() != npix {
        return Err(Error::Shape("loss backward: mask/weights do not cover the logits".into()));
    }
    let data = logits.data();
    let mut grad = Tensor::zeros(logits.dims());
    let gd = grad.data_mut();
    for px in 0..npix {
        let label = mask[px] as usize;
        if label >= classes {
            return Err(Error::InvalidLabel { label, classes });
        }
        let w = weights[px];
        if w == F::zero() {
            continue;
        }
        let mut hi = F::neg_infinity();
        for c in 0..classes {
            hi = hi.max(data[c * npix + px]);
        }
        let mut acc = F::zero();
        for c in 0..classes {
            acc += (data[c * npix + px] - hi).exp();
        }
        let lse = hi + acc.ln();
        for c in 0..classes {
            let p = (data[c * npix + px] - lse).exp();
            let onehot = if c == label { F::one() } else { F::zero() };
            gd[c * npix + px] = w * (p - onehot);
        }
    }
    Ok(grad)
}

/// Cross-entropy of a single flat logit vector against one label.
pub fn label_loss<F: Scalar>(logits: &Tensor<F>, label: usize) -> Result<F> {
    let classes = logits.len();
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    let lse = crate::scalar::log_sum_exp(logits.data());
    Ok(lse - logits.data()[label])
}

/// Gradient of [`label_loss`]: `softmax - onehot`.
pub fn label_loss_backward<F: Scalar>(logits: &Tensor<F>, label: usize) -> Result<Tensor<F>> {
    let classes = logits.len();
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    let lse = crate::scalar::log_sum_exp(logits.data());
    let data = logits
        .data()
        .iter()
        .enumerate()
        .map(|(c, &z)| {
            let p = (z - lse).exp();
            if c == label {
                p - F::one()
            } else {
                p
            }
        })
        .collect();
    Ok(Tensor::from_vec(&[classes], data))
}
