use crate::error::{Error, Result};

/// Smoothing term added to numerator and denominator of every class.
pub const DICE_EPS: f64 = 1e-5;

struct Sums {
    inter: Vec<f64>,
    p2: Vec<f64>,
    g2: Vec<f64>,
}

fn class_sums<T: Copy + Into<f64>>(
    probs: &[T],
    target: &[T],
    batch: usize,
    classes: usize,
) -> Result<(Sums, usize)> {
    if probs.len() != target.len() || batch == 0 || classes == 0 || probs.len() % (batch * classes) != 0 {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} targets for batch {batch} × {classes} classes",
            probs.len(),
            target.len()
        )));
    }
    let spatial = probs.len() / (batch * classes);
    for b in 0..batch {
        for s in 0..spatial {
            let mut ones = 0;
            for c in 0..classes {
                let g: f64 = target[(b * classes + c) * spatial + s].into();
                if g == 1.0 {
                    ones += 1;
                } else if g != 0.0 {
                    return Err(Error::Argument(format!("target value {g} is not 0/1")));
                }
            }
            if ones != 1 {
                return Err(Error::Argument(format!(
                    "target voxel {s} of sample {b} has {ones} active classes"
                )));
            }
        }
    }
    let mut sums = Sums {
        inter: vec![0.0; classes],
        p2: vec![0.0; classes],
        g2: vec![0.0; classes],
    };
    for b in 0..batch {
        for c in 0..classes {
            let range = (b * classes + c) * spatial..(b * classes + c + 1) * spatial;
            for (p, g) in probs[range.clone()].iter().zip(&target[range]) {
                let (p, g): (f64, f64) = ((*p).into(), (*g).into());
                sums.inter[c] += p * g;
                sums.p2[c] += p * p;
                sums.g2[c] += g * g;
            }
        }
    }
    Ok((sums, spatial))
}

/// Negative sum over classes of the squared-denominator soft Dice coefficient,
/// with sums taken over the whole batch:
/// `-Σ_c (2 Σ p g + ε) / (Σ p² + Σ g² + ε)`.
///
/// Layout of both arguments is `[batch][class][voxel]`; `target` must be one-hot.
pub fn soft_dice_loss<T: Copy + Into<f64>>(
    probs: &[T],
    target: &[T],
    batch: usize,
    classes: usize,
) -> Result<f64> {
    let (s, _) = class_sums(probs, target, batch, classes)?;
    Ok(-(0..classes)
        .map(|c| (2.0 * s.inter[c] + DICE_EPS) / (s.p2[c] + s.g2[c] + DICE_EPS))
        .sum::<f64>())
}

/// Loss value and its gradient with respect to `probs`.
pub fn soft_dice_loss_grad<T: Copy + Into<f64>>(
    probs: &[T],
    target: &[T],
    batch: usize,
    classes: usize,
) -> Result<(f64, Vec<f64>)> {
    let (s, spatial) = class_sums(probs, target, batch, classes)?;
    let mut loss = 0.0;
    let mut num = vec![0.0; classes];
    let mut den = vec![0.0; classes];
    for c in 0..classes {
        num[c] = 2.0 * s.inter[c] + DICE_EPS;
        den[c] = s.p2[c] + s.g2[c] + DICE_EPS;
        loss -= num[c] / den[c];
    }
    let mut grad = vec![0.0; probs.len()];
    for b in 0..batch {
        for c in 0..classes {
            let range = (b * classes + c) * spatial..(b * classes + c + 1) * spatial;
            let d2 = den[c] * den[c];
            for ((gr, p), g) in grad[range.clone()].iter_mut().zip(&probs[range.clone()]).zip(&target[range]) {
                let (p, g): (f64, f64) = ((*p).into(), (*g).into());
                *gr = -(2.0 * g * den[c] - num[c] * 2.0 * p) / d2;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
        let n = labels.len();
        let mut t = vec![0.0; n * classes];
        for (s, &l) in labels.iter().enumerate() {
            t[l * n + s] = 1.0;
        }
        t
    }

    #[test]
    fn perfect_prediction_gives_minus_classes() {
        let labels: Vec<usize> = (0..32).map(|i| i % 8).collect();
        let t = one_hot(&labels, 8);
        let loss = soft_dice_loss(&t, &t, 1, 8).unwrap();
        assert!((loss + 8.0).abs() < 1e-4);
    }

    #[test]
    fn absent_class_with_uniform_probs() {
        let labels: Vec<usize> = (0..28).map(|i| i % 7).collect();
        let t = one_hot(&labels, 8);
        let p = vec![1.0 / 8.0; t.len()];
        let loss = soft_dice_loss(&p, &t, 1, 8).unwrap();
        assert!(loss > -8.0);
        // The absent class contributes only ε / (Σp² + ε).
        let absent = DICE_EPS / (28.0 / 64.0 + DICE_EPS);
        assert!(absent < 1e-4);
    }

    #[test]
    fn rejects_non_one_hot() {
        let t = vec![1.0, 0.0, 1.0, 0.0];
        assert!(matches!(soft_dice_loss(&t, &t, 1, 2), Err(Error::Argument(_))));
        let t = vec![0.5, 0.5];
        assert!(matches!(soft_dice_loss(&t, &t, 1, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (batch, classes, spatial) = (2, 2, 16);
        let labels: Vec<usize> = (0..batch * spatial).map(|_| rng.random_range(0..classes)).collect();
        let mut target = vec![0.0; batch * classes * spatial];
        for b in 0..batch {
            for s in 0..spatial {
                target[(b * classes + labels[b * spatial + s]) * spatial + s] = 1.0;
            }
        }
        let probs: Vec<f64> = (0..target.len()).map(|_| rng.random_range(0.01..0.99)).collect();
        let (_, grad) = soft_dice_loss_grad(&probs, &target, batch, classes).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..probs.len() {
            let mut up = probs.clone();
            up[i] += h;
            let mut dn = probs.clone();
            dn[i] -= h;
            let fd = (soft_dice_loss(&up, &target, batch, classes).unwrap()
                - soft_dice_loss(&dn, &target, batch, classes).unwrap())
                / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-12));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
