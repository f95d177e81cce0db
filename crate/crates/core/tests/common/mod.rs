#![allow(dead_code)]

use amd_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero: magnitude in `[gap, hi)`, random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Builds `f` on `inputs`, contracts its output with fixed random weights
/// and compares the reverse-mode gradient of every input coordinate with a
/// central difference. Returns the largest relative error.
pub fn check_gradient<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let forward = |xs: &[Tensor<f64>]| -> Tensor<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).clone()
    };
    let out_len = forward(inputs).len();
    let mut r = rng(seed);
    let w: Vec<f64> = (0..out_len).map(|_| r.gen_range(-1.0..1.0)).collect();
    let objective = |xs: &[Tensor<f64>]| -> f64 { forward(xs).data().iter().zip(&w).map(|(a, b)| a * b).sum() };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward_seeded(&[(out, &w)]).unwrap();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Precision-at-hit averaging, computed from scratch for every hit.
pub fn brute_force_ap(relevant: &[bool]) -> Option<f64> {
    let hits: Vec<usize> = (0..relevant.len()).filter(|&i| relevant[i]).collect();
    if hits.is_empty() {
        return None;
    }
    let precisions: Vec<f64> = hits
        .iter()
        .map(|&k| relevant[..=k].iter().filter(|&&r| r).count() as f64 / (k + 1) as f64)
        .collect();
    Some(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

/// Exclusive-share threshold and common bound, derived independently of the
/// library: equal bounds give `bound² = t(1 − t) / (M_E (M − M_E))`.
pub fn prior_oracle(m: usize, m_e: usize, upsilon: f64) -> (f64, f64) {
    let t = (m_e as f64 / m as f64).powf(upsilon);
    let bound = (t * (1.0 - t) / (m_e as f64 * (m - m_e) as f64)).sqrt();
    (t, bound)
}

/// Whether the group constraint holds for shares `s`.
pub fn group_constraint_holds(s: &[f64], a: &[u8], upsilon: f64) -> bool {
    let m_e = a.iter().filter(|&&v| v == 1).count();
    let t = (m_e as f64 / a.len() as f64).powf(upsilon);
    let excl: f64 = s.iter().zip(a).filter(|(_, &v)| v == 1).map(|(x, _)| x).sum();
    let comm: f64 = s.iter().zip(a).filter(|(_, &v)| v == 0).map(|(x, _)| x).sum();
    excl >= t && comm <= 1.0 - t
}

/// Whether every exclusive share is at least, and every common share at
/// most, the common bound.
pub fn individual_constraint_holds(s: &[f64], a: &[u8], upsilon: f64) -> bool {
    let m_e = a.iter().filter(|&&v| v == 1).count();
    let (_, bound) = prior_oracle(a.len(), m_e, upsilon);
    s.iter().zip(a).all(|(&x, &v)| if v == 1 { x >= bound } else { x <= bound })
}
