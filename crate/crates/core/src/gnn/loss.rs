//! Negative evidence lower bound of the VGAE: inner-product decoder
//! reconstruction (binary cross-entropy) plus the Gaussian KL term.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Loss value and its gradients with respect to `z`, `mu`, `logvar`.
/// The `mu`/`logvar` gradients cover only the KL term; the reconstruction
/// reaches them through `dz`.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub parts: LossParts,
    pub dz: Matrix,
    pub dmu: Matrix,
    pub dlogvar: Matrix,
}

/// `ln((1 - PROB_EPS) / PROB_EPS)`, the logit of the upper clamp.
pub const LOGIT_LIMIT: f64 = 16.118_095_550_958_316;

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Edge probability under the inner-product decoder.
pub fn edge_probability(z: &Matrix, u: usize, v: usize) -> f64 {
    sigmoid(dot(z.row(u), z.row(v)))
}

pub fn decode_loss(
    z: &Matrix,
    mu: &Matrix,
    logvar: &Matrix,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
) -> LossParts {
    decode_loss_with_grads(z, mu, logvar, pos, neg).parts
}

pub fn decode_loss_with_grads(
    z: &Matrix,
    mu: &Matrix,
    logvar: &Matrix,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
) -> LossGrads {
    let n = z.rows();
    let mut dz = Matrix::zeros(n, z.cols());
    let total = (pos.len() + neg.len()).max(1) as f64;
    let mut recon = 0.0;
    let labelled = pos.iter().map(|&e| (e, 1.0)).chain(neg.iter().map(|&e| (e, 0.0)));
    for ((u, v), y) in labelled {
        // clamping p to [eps, 1-eps] is clamping the logit to [-L, L];
        // softplus keeps -ln(1-p) accurate when p is close to 1
        let x = dot(z.row(u), z.row(v));
        let xc = x.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
        recon += softplus(xc) - y * xc;
        if xc != x {
            continue;
        }
        let p = sigmoid(x);
        let g = (p - y) / total;
        for d in 0..z.cols() {
            let zu = z.get(u, d);
            let zv = z.get(v, d);
            dz.row_mut(u)[d] += g * zv;
            dz.row_mut(v)[d] += g * zu;
        }
    }
    recon /= total;

    let inv_n = 1.0 / n.max(1) as f64;
    let mut kl = 0.0;
    let mut dmu = Matrix::zeros(n, mu.cols());
    let mut dlogvar = Matrix::zeros(n, mu.cols());
    for i in 0..mu.len() {
        let m = mu.as_slice()[i];
        let lv = logvar.as_slice()[i];
        // -(1 + lv - m² - e^lv) / 2, arranged so each piece is >= 0
        let var_minus_one = lv.exp_m1();
        kl += 0.5 * (m * m + (var_minus_one - lv));
        dmu.as_mut_slice()[i] = m * inv_n;
        dlogvar.as_mut_slice()[i] = 0.5 * var_minus_one * inv_n;
    }
    kl *= inv_n;

    LossGrads {
        parts: LossParts {
            loss: recon + kl,
            recon,
            kl,
        },
        dz,
        dmu,
        dlogvar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_normal_posterior_has_zero_kl() {
        let z = Matrix::zeros(3, 4);
        let parts = decode_loss(&z, &z, &z, &[], &[]);
        assert_eq!(parts.kl, 0.0);
    }

    #[test]
    fn orthogonal_rows_give_ln2() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zero = Matrix::zeros(2, 2);
        let parts = decode_loss(&z, &zero, &zero, &[(0, 1)], &[]);
        assert!((parts.recon - std::f64::consts::LN_2).abs() < 1e-15);
        let both = decode_loss(&z, &zero, &zero, &[(0, 1)], &[(1, 0)]);
        assert!((both.recon - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logit_limit_matches_probability_clamp() {
        let exact = ((1.0 - PROB_EPS) / PROB_EPS).ln();
        assert!((LOGIT_LIMIT - exact).abs() < 1e-12);
        assert!((sigmoid(LOGIT_LIMIT) - (1.0 - PROB_EPS)).abs() < 1e-15);
    }

    #[test]
    fn saturated_probabilities_are_clamped() {
        let z = Matrix::from_rows(&[vec![100.0], vec![100.0]]).unwrap();
        let zero = Matrix::zeros(2, 1);
        let parts = decode_loss(&z, &zero, &zero, &[], &[(0, 1)]);
        assert!(parts.recon.is_finite());
        assert!((parts.recon + (PROB_EPS).ln()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn loss_terms_are_non_negative(
            vals in prop::collection::vec(-3.0f64..3.0, 3 * 3 * 3),
        ) {
            let z = Matrix::from_vec(3, 3, vals[..9].to_vec());
            let mu = Matrix::from_vec(3, 3, vals[9..18].to_vec());
            let lv = Matrix::from_vec(3, 3, vals[18..].to_vec());
            let parts = decode_loss(&z, &mu, &lv, &[(0, 1), (1, 2)], &[(0, 2), (2, 0)]);
            prop_assert!(parts.kl >= 0.0);
            prop_assert!(parts.recon >= 0.0);
        }
    }
}
