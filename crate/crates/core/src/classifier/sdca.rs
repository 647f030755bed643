//! Stochastic dual coordinate ascent for L2-regularized multinomial logistic
//! regression.
//!
//! Each example owns a dual point `beta_i` on the probability simplex and the
//! primal weights are kept equal to `(1 / (l2 * n)) * sum_i x_i (e_{y_i} - beta_i)^T`.
//! A coordinate step maximizes the dual exactly over `beta_i`:
//!
//! ```text
//! max_{b in simplex}  H(b) + z . b - (q / 2) |b - beta_i|^2,   q = |x_i|^2 / (l2 * n)
//! ```
//!
//! where `z` are the current class scores of `x_i` and `H` is Shannon entropy.
//! The optimum satisfies `ln b_c + q b_c = z_c + q beta_ic - nu`, so each
//! coordinate is a Lambert-W expression of the multiplier `nu`, which is found
//! by a safeguarded Newton search on `sum_c b_c = 1`.
//!
//! The bias is handled as the weight of a constant feature with value 1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::FeatureVector;
use crate::num::Scalar;

pub(crate) struct Problem<'a, T> {
    pub xs: &'a [FeatureVector<T>],
    pub ys: &'a [usize],
    pub classes: usize,
    pub dims: usize,
}

pub(crate) struct Solution<T> {
    /// Feature-major: `weights[f * classes + c]`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Principal branch of Lambert W evaluated at `e^l`, for any real `l`.
pub(crate) fn lambert_w0_exp(l: f64) -> f64 {
    if l < -30.0 {
        let x = l.exp();
        return x * (1.0 - x);
    }
    // w + ln w = l
    let mut w = if l > 1.0 {
        l - l.ln()
    } else {
        let x = l.exp();
        x / (1.0 + x)
    };
    for _ in 0..64 {
        let next = w * (1.0 + l - w.ln()) / (1.0 + w);
        let done = (next - w).abs() <= 1e-15 * next.abs().max(1e-300);
        w = next;
        if done {
            break;
        }
    }
    w
}

/// Solves `ln b + q b = t` for `b > 0`.
fn entropic_root(t: f64, q: f64) -> f64 {
    if q < 1e-300 {
        return t.exp();
    }
    lambert_w0_exp(q.ln() + t) / q
}

/// Exact maximizer of the per-example dual subproblem.
fn dual_step(scores: &[f64], beta: &[f64], q: f64, out: &mut [f64]) {
    let t: Vec<f64> = scores.iter().zip(beta).map(|(z, b)| z + q * b).collect();
    let t_max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let classes = t.len() as f64;
    // total(lo) >= 1 >= total(hi)
    let mut lo = t_max - q - 1.0;
    let mut hi = t_max + classes.ln() + 1.0;
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..200 {
        let mut total = 0.0;
        let mut slope = 0.0;
        for (o, &tc) in out.iter_mut().zip(&t) {
            let b = entropic_root(tc - nu, q);
            *o = b;
            total += b;
            slope += b / (1.0 + q * b);
        }
        let f = total - 1.0;
        if f.abs() <= 1e-14 {
            break;
        }
        if f > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        let newton = nu + f / slope;
        nu = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * (1.0 + nu.abs()) {
            break;
        }
    }
    let total: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn solve<T: Scalar>(problem: &Problem<'_, T>, l2: f64, epochs: usize, seed: u64) -> Solution<T> {
    let n = problem.xs.len();
    let classes = problem.classes;
    let mut weights = vec![T::zero(); problem.dims * classes];
    let mut bias = vec![T::zero(); classes];
    if n == 0 {
        return Solution { weights, bias };
    }
    let scale = 1.0 / (l2 * n as f64);
    let mut beta: Vec<f64> = vec![0.0; n * classes];
    for (i, &y) in problem.ys.iter().enumerate() {
        beta[i * classes + y] = 1.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut scores = vec![0.0f64; classes];
    let mut next = vec![0.0f64; classes];
    let mut delta = vec![T::zero(); classes];

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &problem.xs[i];
            for (s, b) in scores.iter_mut().zip(&bias) {
                *s = b.as_f64();
            }
            for &(f, v) in x.entries() {
                let row = &weights[f as usize * classes..][..classes];
                let v = v.as_f64();
                for (s, w) in scores.iter_mut().zip(row) {
                    *s += w.as_f64() * v;
                }
            }
            let q = (x.squared_norm().as_f64() + 1.0) * scale;
            let b_i = &mut beta[i * classes..][..classes];
            dual_step(&scores, b_i, q, &mut next);

            let mut moved = false;
            for c in 0..classes {
                let d = next[c] - b_i[c];
                moved |= d != 0.0;
                delta[c] = T::of(-scale * d);
                b_i[c] = next[c];
            }
            if !moved {
                continue;
            }
            for (b, &d) in bias.iter_mut().zip(&delta) {
                *b = *b + d;
            }
            for &(f, v) in x.entries() {
                let row = &mut weights[f as usize * classes..][..classes];
                for (w, &d) in row.iter_mut().zip(&delta) {
                    *w = *w + d * v;
                }
            }
        }
    }
    Solution { weights, bias }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambert_w_satisfies_its_equation() {
        for l in [-40.0, -5.0, -0.3, 0.0, 0.7, 3.0, 50.0, 700.0] {
            let w = lambert_w0_exp(l);
            assert!(w > 0.0);
            if l > -30.0 {
                assert!((w + w.ln() - l).abs() < 1e-10, "l={l} w={w}");
            }
        }
        // W(e) = 1
        assert!((lambert_w0_exp(1.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn entropic_root_inverts() {
        for (t, q) in [(0.0, 1.0), (-3.0, 1000.0), (5.0, 0.01), (2.0, 1e-6)] {
            let b = entropic_root(t, q);
            assert!((b.ln() + q * b - t).abs() < 1e-9, "t={t} q={q} b={b}");
        }
    }

    #[test]
    fn dual_step_stays_on_simplex() {
        let mut out = vec![0.0; 3];
        for q in [1e-3, 1.0, 1e4] {
            dual_step(&[2.0, -1.0, 0.5], &[1.0, 0.0, 0.0], q, &mut out);
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.iter().all(|&b| b >= 0.0));
        }
    }

    #[test]
    fn dual_step_with_tiny_q_is_softmax() {
        let z = [1.0, 2.0, -0.5];
        let mut out = vec![0.0; 3];
        dual_step(&z, &[0.0, 1.0, 0.0], 1e-12, &mut out);
        let m: f64 = z.iter().map(|v| v.exp()).sum();
        for (o, v) in out.iter().zip(z) {
            assert!((o - v.exp() / m).abs() < 1e-9);
        }
    }
}
