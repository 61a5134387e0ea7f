//! The full training objective: identity-preserving pixel + perceptual
//! terms for the generator, margin + reconstruction terms for the
//! discriminator, and the adversarial min-max pair, combined with the
//! multi-task weights.

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Multi-task weights and margin-loss parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_mes: f64,
    pub lambda_mer: f64,
    /// Perceptual term weight inside the identity-preserving loss.
    pub alpha: f64,
    /// Reconstruction term weight inside the classification loss.
    pub beta: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_k: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 0.1,
            lambda_mes: 1.0,
            lambda_mer: 1.0,
            alpha: 0.1,
            beta: 5e-4,
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_k: 0.5,
        }
    }
}

const PROB_CLAMP: f64 = 1e-7;

/// Mean absolute difference; the pixel-wise reconstruction term.
pub fn l_pixel(tape: &mut Tape, x_syn: Var, target: Var) -> Result<Var> {
    if tape.shape(x_syn) != tape.shape(target) {
        return Err(Error::ShapeMismatch {
            context: "l_pixel".into(),
            lhs: tape.shape(x_syn).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let d = tape.sub(x_syn, target)?;
    let a = tape.abs_(d);
    Ok(tape.mean(a))
}

/// Mean squared difference.
pub fn l_mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            context: "mse".into(),
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Fixed-weight convolutional feature extractor standing in for a
/// pre-trained cost network. Weights are drawn once from the given seed and
/// never trained; taps are taken after layers 2 and 4.
pub struct PerceptualNet {
    layers: Vec<(Tensor, Tensor)>,
    pub seed: u64,
}

impl PerceptualNet {
    const PLAN: [(usize, usize); 4] = [(1, 8), (8, 16), (16, 16), (16, 16)];

    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, "perceptual-net");
        let mut layers = Vec::new();
        for (c_in, c_out) in Self::PLAN {
            let fan_in = (c_in * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = Tensor::new(
                vec![c_out, c_in, 3, 3],
                rng::normal_vec(&mut r, c_out * c_in * 9, std),
            )
            .expect("static shape");
            let b = Tensor::zeros(&[c_out, 1, 1]);
            layers.push((w, b));
        }
        PerceptualNet { layers, seed }
    }

    /// Tapped features of `x`; weights enter the tape as constants.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let geom = ConvGeom {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut h = x;
        let mut taps = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = tape.constant(w.shape.clone(), w.data.clone());
            let bv = tape.constant(b.shape.clone(), b.data.clone());
            let y = tape.conv2d(h, wv, geom)?;
            let y = tape.add(y, bv)?;
            h = tape.relu(y);
            if i == 1 || i == 3 {
                taps.push(h);
            }
        }
        Ok(taps)
    }

    /// Perceptual distance: mean squared feature difference averaged over
    /// the taps. Symmetric in its arguments.
    pub fn loss(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        let mut acc: Option<Var> = None;
        for (va, vb) in fa.iter().zip(&fb) {
            let term = l_mse(tape, *va, *vb)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        let total = acc.expect("at least one tap");
        Ok(tape.scale(total, 1.0 / fa.len() as f64))
    }
}

/// Identity-preserving loss: `L_pixel(x_syn, pixel_target) +
/// alpha * L_per(perceptual_target, x_syn)`.
pub fn l_ip(
    tape: &mut Tape,
    net: &PerceptualNet,
    x_syn: Var,
    pixel_target: Var,
    perceptual_target: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let pix = l_pixel(tape, x_syn, pixel_target)?;
    let per = net.loss(tape, perceptual_target, x_syn)?;
    let per_scaled = tape.scale(per, weights.alpha);
    tape.add(pix, per_scaled)
}

/// Margin loss over capsule lengths `[B, C]`: hinge-squared toward the
/// upper margin for the true class, hinge-squared below the lower margin
/// (down-weighted) for the rest. Mean over the batch.
pub fn l_margin(
    tape: &mut Tape,
    lengths: Var,
    true_classes: &[usize],
    weights: &LossWeights,
) -> Result<Var> {
    let shape = tape.shape(lengths).to_vec();
    if shape.len() != 2 || shape[0] != true_classes.len() {
        return Err(Error::BadRank {
            op: "l_margin",
            expected: "[batch, classes] lengths with one true class per row",
            got: shape,
        });
    }
    let (b, c) = (shape[0], shape[1]);
    let mut t_mask = vec![0.0; b * c];
    for (i, &cls) in true_classes.iter().enumerate() {
        if cls >= c {
            return Err(Error::InvalidClass { got: cls, n_classes: c });
        }
        t_mask[i * c + cls] = 1.0;
    }
    let inv_mask: Vec<f64> = t_mask.iter().map(|&m| 1.0 - m).collect();
    let t_mask = tape.constant(vec![b, c], t_mask);
    let inv_mask = tape.constant(vec![b, c], inv_mask);

    let neg_len = tape.neg(lengths);
    let upper_gap = tape.add_scalar(neg_len, weights.m_plus); // m+ - len
    let upper_hinge = tape.relu(upper_gap);
    let upper_sq = tape.square(upper_hinge);
    let pos_term = tape.mul(upper_sq, t_mask)?;

    let lower_gap = tape.add_scalar(lengths, -weights.m_minus); // len - m-
    let lower_hinge = tape.relu(lower_gap);
    let lower_sq = tape.square(lower_hinge);
    let neg_term_raw = tape.mul(lower_sq, inv_mask)?;
    let neg_term = tape.scale(neg_term_raw, weights.lambda_k);

    let both = tape.add(pos_term, neg_term)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Classification loss: margin plus beta-weighted reconstruction MSE
/// against the input scaled to [0,1].
pub fn l_cls(
    tape: &mut Tape,
    lengths: Var,
    true_classes: &[usize],
    recon: Var,
    recon_target: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let margin = l_margin(tape, lengths, true_classes, weights)?;
    let rec = l_mse(tape, recon, recon_target)?;
    let rec_scaled = tape.scale(rec, weights.beta);
    tape.add(margin, rec_scaled)
}

/// Adversarial pair from probability-of-real outputs on real and synthetic
/// batches: the discriminator term `-E[log D(x)] - E[log(1 - D(G))]` and
/// the non-saturating generator term `-E[log D(G)]`.
pub fn l_gan(tape: &mut Tape, adv_real: Var, adv_fake: Var) -> Result<(Var, Var)> {
    let d_term = {
        let real = gan_log_prob(tape, adv_real, false)?;
        let fake = gan_log_prob(tape, adv_fake, true)?;
        tape.add(real, fake)?
    };
    let g_term = gan_log_prob(tape, adv_fake, false)?;
    Ok((d_term, g_term))
}

/// `-mean(log p)` or `-mean(log(1-p))`, with probabilities clamped away
/// from 0 and 1 before the log.
pub fn gan_log_prob(tape: &mut Tape, p: Var, one_minus: bool) -> Result<Var> {
    let clamped = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let arg = if one_minus {
        let n = tape.neg(clamped);
        tape.add_scalar(n, 1.0)
    } else {
        clamped
    };
    let ln = tape.ln_(arg);
    let m = tape.mean(ln);
    Ok(tape.neg(m))
}

/// Naive reference for the margin loss, written with explicit loops;
/// oracle for the tape implementation.
pub fn margin_loss_naive(lengths: &[f64], n_classes: usize, true_classes: &[usize], w: &LossWeights) -> f64 {
    let b = true_classes.len();
    let mut total = 0.0;
    for (i, &cls) in true_classes.iter().enumerate() {
        for k in 0..n_classes {
            let v = lengths[i * n_classes + k];
            if k == cls {
                let gap = (w.m_plus - v).max(0.0);
                total += gap * gap;
            } else {
                let gap = (v - w.m_minus).max(0.0);
                total += w.lambda_k * gap * gap;
            }
        }
    }
    total / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::rng::{normal_vec, stream};

    fn w() -> LossWeights {
        LossWeights::default()
    }

    #[test]
    fn pixel_loss_hand_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf_data(vec![2, 2], vec![0.3, -0.1, 0.7, 0.2], true);
        let zero = l_pixel(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(zero)[0], 0.0);

        let x = tape.leaf_data(vec![4], vec![0.25; 4], true);
        let y = tape.leaf_data(vec![4], vec![0.75; 4], false);
        let half = l_pixel(&mut tape, x, y).unwrap();
        assert!((tape.value(half)[0] - 0.5).abs() < 1e-15);

        // Gradient is ±1/N per pixel off the tie set.
        tape.backward(half).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.iter().all(|&v| (v + 0.25).abs() < 1e-15));
    }

    #[test]
    fn pixel_loss_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf_data(vec![2], vec![0.0; 2], false);
        let b = tape.leaf_data(vec![3], vec![0.0; 3], false);
        assert!(l_pixel(&mut tape, a, b).is_err());
    }

    #[test]
    fn perceptual_zero_and_symmetric() {
        let net = PerceptualNet::new(7);
        let mut tape = Tape::new();
        let img: Vec<f64> = normal_vec(&mut stream(1, "p"), 256, 0.5);
        let a = tape.leaf_data(vec![1, 1, 16, 16], img.clone(), false);
        let zero = net.loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(zero)[0], 0.0);

        let other: Vec<f64> = normal_vec(&mut stream(2, "p"), 256, 0.5);
        let b = tape.leaf_data(vec![1, 1, 16, 16], other, false);
        let ab = net.loss(&mut tape, a, b).unwrap();
        let ba = net.loss(&mut tape, b, a).unwrap();
        assert!((tape.value(ab)[0] - tape.value(ba)[0]).abs() < 1e-15);
        assert!(tape.value(ab)[0] > 0.0);
    }

    #[test]
    fn perceptual_net_frozen_and_seeded() {
        let n1 = PerceptualNet::new(42);
        let n2 = PerceptualNet::new(42);
        let n3 = PerceptualNet::new(43);
        assert_eq!(n1.layers[0].0.data, n2.layers[0].0.data);
        assert_ne!(n1.layers[0].0.data, n3.layers[0].0.data);
    }

    #[test]
    fn perceptual_gradcheck_wrt_syn() {
        let net = PerceptualNet::new(11);
        let target = Tensor::new(vec![1, 1, 16, 16], normal_vec(&mut stream(3, "t"), 256, 0.5)).unwrap();
        let syn = Tensor::new(vec![1, 1, 16, 16], normal_vec(&mut stream(4, "s"), 256, 0.5)).unwrap();
        let report = gradcheck(
            |tape, vars| {
                let t = tape.leaf_data(target.shape.clone(), target.data.clone(), false);
                net.loss(tape, t, vars[0])
            },
            &[("x_syn", syn)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_err());
    }

    #[test]
    fn margin_hand_cases() {
        let mut tape = Tape::new();
        // All margins satisfied.
        let l1 = tape.leaf_data(vec![1, 3], vec![0.9, 0.1, 0.1], false);
        let m1 = l_margin(&mut tape, l1, &[0], &w()).unwrap();
        assert_eq!(tape.value(m1)[0], 0.0);

        // Dead true class: (0.9 - 0)^2 = 0.81.
        let l2 = tape.leaf_data(vec![1, 3], vec![0.0, 0.0, 0.0], false);
        let m2 = l_margin(&mut tape, l2, &[0], &w()).unwrap();
        assert!((tape.value(m2)[0] - 0.81).abs() < 1e-12);

        // One wrong class at 0.6: 0.5 * (0.5)^2 = 0.125.
        let l3 = tape.leaf_data(vec![1, 3], vec![0.9, 0.6, 0.05], false);
        let m3 = l_margin(&mut tape, l3, &[0], &w()).unwrap();
        assert!((tape.value(m3)[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn margin_matches_naive_oracle() {
        let mut r = stream(5, "margin");
        for trial in 0..20 {
            let b = 1 + trial % 3;
            let lengths: Vec<f64> = (0..b * 3).map(|_| r.gen_range(0.0..1.0)).collect();
            let classes: Vec<usize> = (0..b).map(|_| r.gen_range(0..3)).collect();
            let mut tape = Tape::new();
            let lv = tape.leaf_data(vec![b, 3], lengths.clone(), false);
            let m = l_margin(&mut tape, lv, &classes, &w()).unwrap();
            let naive = margin_loss_naive(&lengths, 3, &classes, &w());
            assert!((tape.value(m)[0] - naive).abs() < 1e-12);
        }
    }

    use rand::Rng;

    #[test]
    fn margin_nonnegative_and_zero_iff_satisfied() {
        let mut r = stream(6, "margin-prop");
        for _ in 0..50 {
            let lengths: Vec<f64> = (0..3).map(|_| r.gen_range(0.0..1.0)).collect();
            let cls = r.gen_range(0..3);
            let mut tape = Tape::new();
            let lv = tape.leaf_data(vec![1, 3], lengths.clone(), false);
            let m = l_margin(&mut tape, lv, &[cls], &w()).unwrap();
            let v = tape.value(m)[0];
            assert!(v >= 0.0);
            let satisfied = lengths[cls] >= 0.9
                && lengths
                    .iter()
                    .enumerate()
                    .all(|(k, &l)| k == cls || l <= 0.1);
            assert_eq!(v == 0.0, satisfied, "lengths {lengths:?} cls {cls}");
        }
    }

    #[test]
    fn cls_loss_composition() {
        let mut tape = Tape::new();
        // Perfect recon, zero margin -> 0.
        let lengths = tape.leaf_data(vec![1, 3], vec![0.95, 0.02, 0.01], false);
        let recon = tape.leaf_data(vec![1, 4], vec![0.2, 0.4, 0.6, 0.8], false);
        let total = l_cls(&mut tape, lengths, &[0], recon, recon, &w()).unwrap();
        assert_eq!(tape.value(total)[0], 0.0);

        // All-zero recon against all-one target: L_rec = 1.
        let zeros = tape.leaf_data(vec![1, 4], vec![0.0; 4], false);
        let ones = tape.leaf_data(vec![1, 4], vec![1.0; 4], false);
        let rec = l_mse(&mut tape, zeros, ones).unwrap();
        assert_eq!(tape.value(rec)[0], 1.0);

        // Doubling beta doubles the recon contribution exactly.
        let mut w2 = w();
        w2.beta *= 2.0;
        let l_b = l_cls(&mut tape, lengths, &[0], zeros, ones, &w()).unwrap();
        let l_2b = l_cls(&mut tape, lengths, &[0], zeros, ones, &w2).unwrap();
        let margin_only = l_margin(&mut tape, lengths, &[0], &w()).unwrap();
        let rec_b = tape.value(l_b)[0] - tape.value(margin_only)[0];
        let rec_2b = tape.value(l_2b)[0] - tape.value(margin_only)[0];
        assert!((rec_2b - 2.0 * rec_b).abs() < 1e-15);
    }

    #[test]
    fn gan_symmetric_point() {
        let mut tape = Tape::new();
        let real = tape.leaf_data(vec![2], vec![0.5, 0.5], false);
        let fake = tape.leaf_data(vec![2], vec![0.5, 0.5], false);
        let (d_term, g_term) = l_gan(&mut tape, real, fake).unwrap();
        assert!((tape.value(d_term)[0] - 2.0 * 2.0_f64.ln()).abs() < 1e-12);
        assert!((tape.value(g_term)[0] - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gan_perfect_discriminator_vanishes() {
        let mut tape = Tape::new();
        let real = tape.leaf_data(vec![1], vec![1.0 - 1e-9], false);
        let fake = tape.leaf_data(vec![1], vec![1e-9], false);
        let (d_term, _) = l_gan(&mut tape, real, fake).unwrap();
        assert!(tape.value(d_term)[0] < 1e-6);
    }

    #[test]
    fn gan_clamps_extreme_probabilities() {
        let mut tape = Tape::new();
        let real = tape.leaf_data(vec![1], vec![0.0], false);
        let fake = tape.leaf_data(vec![1], vec![1.0], false);
        let (d_term, g_term) = l_gan(&mut tape, real, fake).unwrap();
        assert!(tape.value(d_term)[0].is_finite());
        assert!(tape.value(g_term)[0].is_finite());
    }

    #[test]
    fn margin_gradcheck_off_kinks() {
        // Lengths kept away from both margins by construction.
        let lengths = Tensor::new(vec![2, 3], vec![0.7, 0.3, 0.45, 0.25, 0.6, 0.55]).unwrap();
        let report = gradcheck(
            |tape, vars| l_margin(tape, vars[0], &[0, 2], &w()),
            &[("lengths", lengths)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_err());
    }

    #[test]
    fn gan_gradcheck_interior() {
        let probs = Tensor::new(vec![3], vec![0.3, 0.6, 0.8]).unwrap();
        let fakes = Tensor::new(vec![3], vec![0.2, 0.5, 0.7]).unwrap();
        let report = gradcheck(
            |tape, vars| {
                let (d_term, g_term) = l_gan(tape, vars[0], vars[1])?;
                tape.add(d_term, g_term)
            },
            &[("real", probs), ("fake", fakes)],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_err());
    }
}
