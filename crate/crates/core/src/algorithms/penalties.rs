//! Penalty terms of the in-scope algorithms, built on the autograd tape.
//! The plain functions evaluate the same graphs on constants.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the IRMv1 squared gradient is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrmMode {
    /// Product of the gradients on the even and odd rows.
    SplitHalf,
    /// Square of the full-batch gradient.
    Plain,
}

fn rows(tape: &Tape, v: Var) -> usize {
    tape.value(v).shape()[0]
}

/// Mean squared difference of feature means plus mean squared difference of
/// covariance matrices (divisor `n - 1`).
pub fn coral_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if rows(tape, a) < 2 || rows(tape, b) < 2 {
        return Err(Error::invalid("coral", "needs at least 2 rows per domain"));
    }
    let (mean_a, cov_a) = mean_and_cov(tape, a)?;
    let (mean_b, cov_b) = mean_and_cov(tape, b)?;
    let dm = tape.sub(mean_a, mean_b)?;
    let dm2 = tape.square(dm);
    let mean_term = tape.mean(dm2);
    let dc = tape.sub(cov_a, cov_b)?;
    let dc2 = tape.square(dc);
    let cov_term = tape.mean(dc2);
    tape.add(mean_term, cov_term)
}

fn mean_and_cov(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let n = rows(tape, x);
    let mean = tape.mean_rows(x)?;
    let neg = tape.scale(mean, -1.0);
    let centered = tape.add_row_vec(x, neg)?;
    let ct = tape.transpose(centered)?;
    let gram = tape.matmul(ct, centered)?;
    Ok((mean, tape.scale(gram, 1.0 / (n - 1) as f64)))
}

fn kernel_mean(tape: &mut Tape, x: Var, y: Var, gammas: &[f64]) -> Result<Var> {
    let d = tape.squared_distances(x, y)?;
    let mut total: Option<Var> = None;
    for &g in gammas {
        let scaled = tape.scale(d, -g);
        let k = tape.exp(scaled);
        total = Some(match total {
            None => k,
            Some(t) => tape.add(t, k)?,
        });
    }
    Ok(tape.mean(total.expect("non-empty gammas")))
}

/// Biased squared MMD with the kernel `sum_g exp(-g |x - y|^2)`.
pub fn mmd_on(tape: &mut Tape, a: Var, b: Var, gammas: &[f64]) -> Result<Var> {
    if rows(tape, a) == 0 || rows(tape, b) == 0 {
        return Err(Error::invalid("mmd", "empty feature set"));
    }
    if gammas.is_empty() {
        return Err(Error::invalid("mmd_gammas", "must not be empty"));
    }
    let kxx = kernel_mean(tape, a, a, gammas)?;
    let kyy = kernel_mean(tape, b, b, gammas)?;
    let kxy = kernel_mean(tape, a, b, gammas)?;
    let same = tape.add(kxx, kyy)?;
    let cross = tape.scale(kxy, 2.0);
    tape.sub(same, cross)
}

/// IRMv1: squared derivative of the risk of `w * logits` at `w = 1`.
pub fn irm_on(tape: &mut Tape, logits: Var, targets: &Tensor, mode: IrmMode) -> Result<Var> {
    let b = rows(tape, logits);
    match mode {
        IrmMode::Plain => {
            let g = tape.irm_gradient(logits, targets)?;
            Ok(tape.square(g))
        }
        IrmMode::SplitHalf => {
            if b < 2 {
                return Err(Error::invalid(
                    "irm_mode",
                    "split_half needs at least 2 examples per batch",
                ));
            }
            let even: Vec<usize> = (0..b).step_by(2).collect();
            let odd: Vec<usize> = (1..b).step_by(2).collect();
            let le = tape.select_rows(logits, &even)?;
            let lo = tape.select_rows(logits, &odd)?;
            let ge = tape.irm_gradient(le, &targets.select(&even))?;
            let go = tape.irm_gradient(lo, &targets.select(&odd))?;
            tape.mul(ge, go)
        }
    }
}

/// Population variance of the per-domain risks.
pub fn vrex_on(tape: &mut Tape, risks: &[Var]) -> Result<Var> {
    if risks.len() < 2 {
        return Err(Error::invalid("vrex", "requires ≥2 domains"));
    }
    let v = tape.stack(risks)?;
    Ok(tape.variance(v))
}

/// Mean of squared logits.
pub fn sd_on(tape: &mut Tape, logits: Var) -> Var {
    let sq = tape.square(logits);
    tape.mean(sq)
}

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = f(&mut tape, va, vb)?;
    Ok(tape.scalar(out))
}

pub fn coral_penalty(a: &Tensor, b: &Tensor) -> Result<f64> {
    eval2(a, b, coral_on)
}

pub fn mmd_penalty(a: &Tensor, b: &Tensor, gammas: &[f64]) -> Result<f64> {
    eval2(a, b, |t, x, y| mmd_on(t, x, y, gammas))
}

pub fn irm_penalty(logits: &Tensor, targets: &Tensor, mode: IrmMode) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let out = irm_on(&mut tape, z, targets, mode)?;
    Ok(tape.scalar(out))
}

pub fn vrex_penalty(risks: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = risks.iter().map(|&r| tape.constant(Tensor::scalar(r))).collect();
    let out = vrex_on(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

pub fn sd_penalty(logits: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let out = sd_on(&mut tape, z);
    tape.scalar(out)
}

pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    if !logits.is_finite() {
        return Err(Error::Numerical {
            op: "soft_cross_entropy".into(),
            detail: "non-finite logits".into(),
        });
    }
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let out = tape.soft_cross_entropy(z, targets)?;
    Ok(tape.scalar(out))
}

/// `q'_k ∝ q_k exp(eta * loss_k)`.
pub fn groupdro_reweight(q: &[f64], losses: &[f64], eta: f64) -> Vec<f64> {
    let mut out: Vec<f64> = q
        .iter()
        .zip(losses)
        .map(|(qk, l)| qk * (eta * l).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    // Independent loop implementations used as oracles.

    fn brute_coral(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let stats = |x: &[Vec<f64>]| {
            let (n, d) = (x.len(), x[0].len());
            let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
            let mut cov = vec![vec![0.0; d]; d];
            for r in x {
                for i in 0..d {
                    for j in 0..d {
                        cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1) as f64;
                    }
                }
            }
            (mean, cov)
        };
        let ((ma, ca), (mb, cb)) = (stats(a), stats(b));
        let d = ma.len();
        let mean_term: f64 = (0..d).map(|i| (ma[i] - mb[i]).powi(2)).sum::<f64>() / d as f64;
        let mut cov_term = 0.0;
        for i in 0..d {
            for j in 0..d {
                cov_term += (ca[i][j] - cb[i][j]).powi(2);
            }
        }
        mean_term + cov_term / (d * d) as f64
    }

    fn brute_mmd(a: &[Vec<f64>], b: &[Vec<f64>], gammas: &[f64]) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
            gammas.iter().map(|g| (-g * d2).exp()).sum::<f64>()
        };
        let avg = |x: &[Vec<f64>], y: &[Vec<f64>]| {
            let mut s = 0.0;
            for p in x {
                for q in y {
                    s += k(p, q);
                }
            }
            s / (x.len() * y.len()) as f64
        };
        avg(a, a) + avg(b, b) - 2.0 * avg(a, b)
    }

    fn brute_irm_grad(z: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
        // d/dw of mean_i -sum_c t_ic log softmax(w z_i)_c at w = 1
        let mut g = 0.0;
        for (zi, ti) in z.iter().zip(t) {
            let m = zi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = zi.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let zbar: f64 = zi.iter().zip(&e).map(|(v, ev)| v * ev / s).sum();
            for (c, &tc) in ti.iter().enumerate() {
                g += -tc * (zi[c] - zbar);
            }
        }
        g / z.len() as f64
    }

    fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random_rows(r: &mut rng::Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12) || (a - b).abs() < 1e-12
    }

    #[test]
    fn coral_worked_value() {
        let a = to_tensor(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = to_tensor(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert!((coral_penalty(&a, &b).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(coral_penalty(&a, &b).unwrap(), coral_penalty(&b, &a).unwrap());
        assert_eq!(coral_penalty(&a, &a).unwrap(), 0.0);
        assert!(coral_penalty(&to_tensor(&[vec![1.0, 0.0]]), &a).is_err());
    }

    #[test]
    fn mmd_worked_values() {
        let (x, y) = (to_tensor(&[vec![0.0]]), to_tensor(&[vec![1.0]]));
        assert!((mmd_penalty(&x, &y, &[1.0]).unwrap() - 1.26424).abs() < 1e-5);
        let two = 2.0 - 2.0 * (-1.0f64).exp() + 2.0 - 2.0 * (-2.0f64).exp();
        assert!((mmd_penalty(&x, &y, &[1.0, 2.0]).unwrap() - two).abs() < 1e-12);
        assert!((two - 2.99357).abs() < 1e-5);
        let a = to_tensor(&[vec![0.3, 1.0], vec![-1.0, 2.0]]);
        assert!(mmd_penalty(&a, &a, &[1.0]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn irm_worked_values() {
        let z = to_tensor(&[vec![1.0, -1.0]]);
        let t = to_tensor(&[vec![1.0, 0.0]]);
        let p = irm_penalty(&z, &t, IrmMode::Plain).unwrap();
        assert!((p - 0.05684).abs() < 1e-5, "{p}");
        let zeros = Tensor::zeros(&[4, 3]);
        let t4 = Tensor::from_rows(&vec![vec![1.0, 0.0, 0.0]; 4]).unwrap();
        assert_eq!(irm_penalty(&zeros, &t4, IrmMode::SplitHalf).unwrap(), 0.0);
        assert!(irm_penalty(&z, &t, IrmMode::SplitHalf).is_err());
    }

    #[test]
    fn irm_matches_explicit_dummy_multiplier() {
        let z = to_tensor(&[vec![0.4, -1.2, 2.0], vec![1.0, 0.5, -0.3]]);
        let t = to_tensor(&[vec![0.0, 0.0, 1.0], vec![0.2, 0.8, 0.0]]);
        let risk = |w: f64| soft_cross_entropy(&z.scale(w), &t).unwrap();
        let h = 1e-6;
        let fd = (risk(1.0 + h) - risk(1.0 - h)) / (2.0 * h);
        let p = irm_penalty(&z, &t, IrmMode::Plain).unwrap();
        assert!((p - fd * fd).abs() < 1e-8);
    }

    #[test]
    fn vrex_and_sd_values() {
        assert_eq!(vrex_penalty(&[0.3, 0.3, 0.3]).unwrap(), 0.0);
        assert!((vrex_penalty(&[0.2, 0.4]).unwrap() - 0.01).abs() < 1e-15);
        assert!((vrex_penalty(&[0.4, 0.2]).unwrap() - 0.01).abs() < 1e-15);
        assert!(vrex_penalty(&[0.2]).is_err());
        assert_eq!(sd_penalty(&Tensor::zeros(&[2, 3])), 0.0);
        assert_eq!(sd_penalty(&to_tensor(&[vec![2.0, 0.0], vec![0.0, 2.0]])), 2.0);
    }

    #[test]
    fn soft_cross_entropy_values() {
        let uniform = Tensor::zeros(&[1, 2]);
        let hard = to_tensor(&[vec![1.0, 0.0]]);
        assert!((soft_cross_entropy(&uniform, &hard).unwrap() - 2f64.ln()).abs() < 1e-12);
        let z = to_tensor(&[vec![1.0, -1.0]]);
        let v = soft_cross_entropy(&z, &to_tensor(&[vec![0.5, 0.5]])).unwrap();
        assert!((v - 1.12693).abs() < 1e-5, "{v}");
        let nan = to_tensor(&[vec![f64::NAN, 0.0]]);
        assert!(soft_cross_entropy(&nan, &hard).is_err());
    }

    #[test]
    fn groupdro_worked_values() {
        let q = groupdro_reweight(&[0.5, 0.5], &[1.0, 0.0], 0.01);
        assert!((q[0] - 0.502500).abs() < 1e-6 && (q[1] - 0.497500).abs() < 1e-6);
        assert_eq!(groupdro_reweight(&[0.2, 0.8], &[0.7, 0.7], 0.5), vec![0.2, 0.8]);
        let tiny = groupdro_reweight(&[0.3, 0.7], &[5.0, 1.0], 1e-12);
        assert!((tiny[0] - 0.3).abs() < 1e-10);
    }

    #[test]
    fn penalties_match_brute_force_on_random_fixtures() {
        let mut r = rng::stream(2024, 0);
        let gammas = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0];
        for _ in 0..150 {
            let d = r.random_range(1..=4);
            let (n, m) = (r.random_range(2..=8), r.random_range(2..=8));
            let (a, b) = (random_rows(&mut r, n, d), random_rows(&mut r, m, d));
            let (ta, tb) = (to_tensor(&a), to_tensor(&b));
            assert!(rel_close(coral_penalty(&ta, &tb).unwrap(), brute_coral(&a, &b), 1e-6));
            assert!(rel_close(mmd_penalty(&ta, &tb, &gammas).unwrap(), brute_mmd(&a, &b, &gammas), 1e-6));
            let targets: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..d).map(|c| if c == i % d { 1.0 } else { 0.0 }).collect())
                .collect();
            let g = brute_irm_grad(&a, &targets);
            assert!(rel_close(irm_penalty(&ta, &to_tensor(&targets), IrmMode::Plain).unwrap(), g * g, 1e-6));
            let risks: Vec<f64> = (0..n).map(|_| r.random_range(0.0..3.0)).collect();
            let mu = risks.iter().sum::<f64>() / n as f64;
            let var = risks.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64;
            assert!(rel_close(vrex_penalty(&risks).unwrap(), var, 1e-6));
            let sd = a.iter().flatten().map(|v| v * v).sum::<f64>() / (n * d) as f64;
            assert!(rel_close(sd_penalty(&ta), sd, 1e-6));
        }
    }

    proptest! {
        #[test]
        fn alignment_penalties_symmetric_and_nonnegative(seed in 0u64..10_000) {
            let mut r = rng::stream(seed, 1);
            let d = r.random_range(1..=4);
            let n = r.random_range(2..=8);
            let (a, b) = (random_rows(&mut r, n, d), random_rows(&mut r, 5, d));
            let (ta, tb) = (to_tensor(&a), to_tensor(&b));
            let c = coral_penalty(&ta, &tb).unwrap();
            prop_assert!(c >= 0.0 && rel_close(c, coral_penalty(&tb, &ta).unwrap(), 1e-12));
            let m = mmd_penalty(&ta, &tb, &[0.5, 2.0]).unwrap();
            prop_assert!(m >= -1e-9 && rel_close(m, mmd_penalty(&tb, &ta, &[0.5, 2.0]).unwrap(), 1e-12));
        }

        #[test]
        fn groupdro_stays_on_simplex(
            losses in prop::collection::vec(0.0f64..10.0, 2..6),
            eta in 0.0001f64..1.0,
            steps in 1usize..300,
        ) {
            let k = losses.len();
            let mut q = vec![1.0 / k as f64; k];
            for _ in 0..steps {
                q = groupdro_reweight(&q, &losses, eta);
                prop_assert!(q.iter().all(|&v| v >= 0.0));
                prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn vrex_permutation_invariant(mut risks in prop::collection::vec(0.0f64..5.0, 2..7)) {
            let v = vrex_penalty(&risks).unwrap();
            risks.reverse();
            prop_assert!(rel_close(v, vrex_penalty(&risks).unwrap(), 1e-12));
        }
    }
}
