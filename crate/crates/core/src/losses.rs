//! Metric distillation loss and the two attribute-prior losses.
//!
//! All losses act on the attribute-guided distances `d^k` of one image pair.
//! Shares `d^k / d̂` keep the reconstructed distance `d̂ = Σ d^k` inside the
//! differentiation graph, so gradients flow through the denominator.

use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{count, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub upsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 10.0,
            beta: 50.0,
            upsilon: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(AmdError::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.upsilon > 0.0 && self.upsilon < 1.0) {
            return Err(AmdError::Config(format!("upsilon {} outside (0,1)", self.upsilon)));
        }
        Ok(())
    }
}

/// Per-pair (or averaged) loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_p1: Option<f64>,
    pub l_p2: Option<f64>,
    pub total: f64,
    pub lambda: Option<f64>,
    pub exclusive_share: Option<f64>,
    pub common_share: Option<f64>,
}

/// Attribute-wise XOR of two binary vectors and its popcount.
pub fn pairwise_xor(a_i: &[u8], a_j: &[u8]) -> Result<(Vec<u8>, usize)> {
    if a_i.len() != a_j.len() {
        return Err(AmdError::Input(format!(
            "attribute vectors differ in length: {} vs {}",
            a_i.len(),
            a_j.len()
        )));
    }
    if a_i.iter().chain(a_j).any(|&v| v > 1) {
        return Err(AmdError::Input("attribute vectors must be binary".into()));
    }
    let x: Vec<u8> = a_i.iter().zip(a_j).map(|(&p, &q)| p ^ q).collect();
    let m_e = x.iter().filter(|&&v| v == 1).count();
    Ok((x, m_e))
}

/// `(M_E / M)^υ`: the minimum total share of exclusive attributes.
pub fn exclusive_threshold<T: Real>(m: usize, m_e: usize, upsilon: T) -> T {
    (count::<T>(m_e) / count::<T>(m)).powf(upsilon)
}

/// The value of λ that makes the per-attribute bounds coincide, and that
/// common bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaBound<T: Real = f64> {
    pub lambda: T,
    pub bound: T,
}

/// Solves `e^{-λ} t / M_E = e^{λ} (1 - t) / (M - M_E)` with `t = (M_E/M)^υ`:
///
/// ```text
/// e^{2λ} = (M - M_E) t / (M_E (1 - t))
/// λ      = ½ ln[(M - M_E) t / (M_E (1 - t))]
/// ```
///
/// Undefined for `M_E ∈ {0, M}`, where one side has no attributes.
pub fn lambda_bound<T: Real>(m: usize, m_e: usize, upsilon: T) -> Result<LambdaBound<T>> {
    if m_e == 0 || m_e >= m {
        return Err(AmdError::Input(format!(
            "bound undefined for M_E = {} of M = {}",
            m_e, m
        )));
    }
    let t = exclusive_threshold(m, m_e, upsilon);
    let (me, mc) = (count::<T>(m_e), count::<T>(m - m_e));
    let lambda = T::of(0.5) * ((mc * t) / (me * (T::one() - t))).ln();
    let bound = (-lambda).exp() * t / me;
    Ok(LambdaBound { lambda, bound })
}

/// `|d − Σ d^k|`.
pub fn metric_distillation_loss<T: Real>(d: T, components: &[T]) -> T {
    (d - components.iter().copied().sum::<T>()).abs()
}

fn with_constants<T: Real, R>(components: &[T], f: impl FnOnce(&mut Graph<T>, &[Var]) -> R) -> R {
    let mut g = Graph::new();
    let vars: Vec<Var> = components
        .iter()
        .map(|&c| g.constant(&Tensor::scalar(c)))
        .collect();
    f(&mut g, &vars)
}

/// Group prior hinge. `None` when `d̂ = 0`.
pub fn group_prior_loss<T: Real>(components: &[T], a_ij: &[u8], upsilon: T) -> Result<Option<T>> {
    with_constants(components, |g, vars| {
        let d_hat = g.sum_list(vars)?;
        Ok(group_prior_graph(g, vars, d_hat, a_ij, upsilon)?.map(|t| g.item(t.loss)))
    })
}

/// Per-attribute prior hinge. `None` when `d̂ = 0` or `M_E ∈ {0, M}`.
pub fn individual_prior_loss<T: Real>(components: &[T], a_ij: &[u8], upsilon: T) -> Result<Option<T>> {
    with_constants(components, |g, vars| {
        let d_hat = g.sum_list(vars)?;
        Ok(individual_prior_graph(g, vars, d_hat, a_ij, upsilon)?.map(|(v, _)| g.item(v)))
    })
}

/// Weighted total with skip rules applied.
pub fn total_loss<T: Real>(d: T, components: &[T], a_ij: &[u8], config: &LossConfig) -> Result<LossBreakdown> {
    with_constants(components, |g, vars| Ok(total_loss_graph(g, d, vars, a_ij, config)?.1))
}

pub(crate) struct GroupTerms {
    pub loss: Var,
    pub exclusive_share: Var,
    pub common_share: Var,
}

fn check_components<T: Real>(g: &Graph<T>, components: &[Var], a_ij: &[u8]) -> Result<()> {
    if components.len() != a_ij.len() || components.is_empty() {
        return Err(AmdError::Input(format!(
            "{} components for {} attributes",
            components.len(),
            a_ij.len()
        )));
    }
    if components.iter().any(|&c| g.value(c).len() != 1) {
        return Err(AmdError::Input("components must be scalars".into()));
    }
    Ok(())
}

fn is_positive<T: Real>(g: &Graph<T>, d_hat: Var) -> bool {
    g.item(d_hat) > T::zero()
}

fn shares<T: Real>(g: &mut Graph<T>, components: &[Var], d_hat: Var) -> Result<Vec<Var>> {
    components.iter().map(|&c| g.div(c, d_hat)).collect()
}

pub(crate) fn group_prior_graph<T: Real>(
    g: &mut Graph<T>,
    components: &[Var],
    d_hat: Var,
    a_ij: &[u8],
    upsilon: T,
) -> Result<Option<GroupTerms>> {
    check_components(g, components, a_ij)?;
    if !is_positive(g, d_hat) {
        return Ok(None);
    }
    let m = a_ij.len();
    let m_e = a_ij.iter().filter(|&&v| v == 1).count();
    let s = shares(g, components, d_hat)?;
    let excl: Vec<Var> = s.iter().zip(a_ij).filter(|(_, &a)| a == 1).map(|(&v, _)| v).collect();
    let comm: Vec<Var> = s.iter().zip(a_ij).filter(|(_, &a)| a == 0).map(|(&v, _)| v).collect();
    let excl_sum = g.sum_list(&excl)?;
    let comm_sum = g.sum_list(&comm)?;
    if m_e == 0 {
        // Threshold is 0 and common shares sum to one: both hinges vanish.
        let loss = g.scalar(T::zero());
        return Ok(Some(GroupTerms {
            loss,
            exclusive_share: excl_sum,
            common_share: comm_sum,
        }));
    }
    let t = exclusive_threshold(m, m_e, upsilon);
    // max(0, t − Σ_e s) + max(0, Σ_c s − (1 − t))
    let neg = g.scale(excl_sum, -T::one());
    let lower = g.add_const(neg, t);
    let lower = g.relu(lower);
    let upper = g.add_const(comm_sum, -(T::one() - t));
    let upper = g.relu(upper);
    let loss = g.add(lower, upper)?;
    Ok(Some(GroupTerms {
        loss,
        exclusive_share: excl_sum,
        common_share: comm_sum,
    }))
}

pub(crate) fn individual_prior_graph<T: Real>(
    g: &mut Graph<T>,
    components: &[Var],
    d_hat: Var,
    a_ij: &[u8],
    upsilon: T,
) -> Result<Option<(Var, T)>> {
    check_components(g, components, a_ij)?;
    let m = a_ij.len();
    let m_e = a_ij.iter().filter(|&&v| v == 1).count();
    if !is_positive(g, d_hat) || m_e == 0 || m_e == m {
        return Ok(None);
    }
    let LambdaBound { lambda, bound } = lambda_bound(m, m_e, upsilon)?;
    let s = shares(g, components, d_hat)?;
    let mut terms = Vec::with_capacity(m);
    for (&share, &a) in s.iter().zip(a_ij) {
        let gap = if a == 1 {
            // exclusive: max(0, bound − s)
            let neg = g.scale(share, -T::one());
            g.add_const(neg, bound)
        } else {
            // common: max(0, s − bound)
            g.add_const(share, -bound)
        };
        terms.push(g.relu(gap));
    }
    Ok(Some((g.sum_list(&terms)?, lambda)))
}

/// Records `L = L_d + α L_p1 + β L_p2` for one pair on `g`.
///
/// `d` is the target distance (a constant); `components` are the
/// attribute-guided distances.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    d: T,
    components: &[Var],
    a_ij: &[u8],
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    check_components(g, components, a_ij)?;
    if a_ij.iter().any(|&v| v > 1) {
        return Err(AmdError::Input("pairwise attribute vector must be binary".into()));
    }
    let upsilon = T::of(config.upsilon);
    let d_hat = g.sum_list(components)?;
    let diff = g.add_const(d_hat, -d);
    let l_d = g.abs(diff);
    let mut total = l_d;
    let mut out = LossBreakdown {
        l_d: g.item(l_d).as_f64(),
        ..Default::default()
    };
    if let Some(terms) = group_prior_graph(g, components, d_hat, a_ij, upsilon)? {
        out.l_p1 = Some(g.item(terms.loss).as_f64());
        out.exclusive_share = Some(g.item(terms.exclusive_share).as_f64());
        out.common_share = Some(g.item(terms.common_share).as_f64());
        if config.alpha != 0.0 {
            let w = g.scale(terms.loss, T::of(config.alpha));
            total = g.add(total, w)?;
        }
    }
    if let Some((l_p2, lambda)) = individual_prior_graph(g, components, d_hat, a_ij, upsilon)? {
        out.l_p2 = Some(g.item(l_p2).as_f64());
        out.lambda = Some(lambda.as_f64());
        if config.beta != 0.0 {
            let w = g.scale(l_p2, T::of(config.beta));
            total = g.add(total, w)?;
        }
    }
    out.total = g.item(total).as_f64();
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_examples() {
        let (x, m_e) = pairwise_xor(&[1, 0, 1, 1], &[1, 1, 0, 1]).unwrap();
        assert_eq!(x, vec![0, 1, 1, 0]);
        assert_eq!(m_e, 2);
        let (x, m_e) = pairwise_xor(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!(x, vec![0, 0, 0]);
        assert_eq!(m_e, 0);
        assert!(matches!(pairwise_xor(&[2, 0], &[1, 0]), Err(AmdError::Input(_))));
        assert!(pairwise_xor(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn distillation_examples() {
        assert!((metric_distillation_loss(1.2f64, &[0.5, 0.8]) - 0.1).abs() < 1e-12);
        assert_eq!(metric_distillation_loss(1.0, &[0.25, 0.75]), 0.0);
        assert_eq!(metric_distillation_loss(0.7, &[0.0, 0.0, 0.0]), 0.7);
    }

    #[test]
    fn group_prior_examples() {
        let l = group_prior_loss(&[0.3, 0.2, 0.2, 0.3], &[1, 0, 0, 0], 0.5f64).unwrap().unwrap();
        assert!((l - 0.4).abs() < 1e-12);
        let l = group_prior_loss(&[0.6, 0.2, 0.1, 0.1], &[1, 0, 0, 0], 0.5).unwrap().unwrap();
        assert_eq!(l, 0.0);
        let l = group_prior_loss(&[0.3, 0.2, 0.2, 0.3], &[0, 0, 0, 0], 0.5).unwrap().unwrap();
        assert_eq!(l, 0.0);
        assert!(group_prior_loss(&[0.0; 4], &[1, 0, 0, 0], 0.5).unwrap().is_none());
    }

    #[test]
    fn lambda_examples() {
        let lb = lambda_bound(26, 6, 0.5f64).unwrap();
        assert!((lb.lambda - 0.5627).abs() < 1e-4);
        assert!((lb.bound - 0.04561).abs() < 1e-5);
        let t = (6.0f64 / 26.0).sqrt();
        let upper = lb.lambda.exp() * (1.0 - t) / 20.0;
        assert!((lb.bound - upper).abs() < 1e-12);

        let lb = lambda_bound(4, 2, 0.5f64).unwrap();
        assert!((lb.lambda - 0.4407).abs() < 1e-4);
        assert!((lb.bound - 0.22754).abs() < 1e-5);

        assert!(lambda_bound::<f64>(4, 0, 0.5).is_err());
        assert!(lambda_bound::<f64>(4, 4, 0.5).is_err());
    }

    #[test]
    fn lambda_vanishes_when_log_argument_is_one() {
        // (M−M_E)·t = M_E·(1−t) holds exactly when t = M_E/M, i.e. υ = 1.
        for (m, m_e) in [(9, 3), (4, 2), (26, 6)] {
            let lb = lambda_bound(m, m_e, 1.0f64).unwrap();
            assert!(lb.lambda.abs() < 1e-15, "{} {}", m, m_e);
        }
    }

    #[test]
    fn individual_prior_examples() {
        let a = [1, 1, 0, 0];
        let l = individual_prior_loss(&[0.30, 0.15, 0.35, 0.20], &a, 0.5f64).unwrap().unwrap();
        assert!((l - 0.2).abs() < 1e-5, "{}", l);
        let l = individual_prior_loss(&[0.35, 0.35, 0.15, 0.15], &a, 0.5).unwrap().unwrap();
        assert_eq!(l, 0.0);
        let b = lambda_bound(4, 2, 0.5f64).unwrap().bound;
        // shares sum to one, so the first exclusive and first common share sit on the bound
        let l = individual_prior_loss(&[b, 1.0 - 2.0 * b, b, 0.0], &a, 0.5).unwrap().unwrap();
        assert_eq!(l, 0.0);
        assert!(individual_prior_loss(&[0.1; 4], &[0, 0, 0, 0], 0.5).unwrap().is_none());
        assert!(individual_prior_loss(&[0.1; 4], &[1, 1, 1, 1], 0.5).unwrap().is_none());
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig::default();
        // weighted sum identity
        let l_d: f64 = 0.1;
        assert!((l_d + cfg.alpha * 0.05 + cfg.beta * 0.02 - 1.6).abs() < 1e-12);

        // perfect decomposition meeting all constraints
        let a = [1, 1, 0, 0];
        let b = lambda_bound(4, 2, 0.5f64).unwrap().bound;
        let comps = [0.36, 0.36, b, 1.0 - 0.72 - b];
        let d: f64 = comps.iter().sum();
        let br = total_loss(d, &comps, &a, &cfg).unwrap();
        assert_eq!(br.total, 0.0);

        // ablation identity
        let comps = [0.1, 0.3, 0.4, 0.2];
        let abl = LossConfig { alpha: 0.0, beta: 0.0, ..cfg };
        let br = total_loss(1.3, &comps, &a, &abl).unwrap();
        assert!((br.total - br.l_d).abs() < 1e-15);
        assert!(br.l_p1.unwrap() > 0.0 && br.l_p2.unwrap() > 0.0);
        let full = total_loss(1.3, &comps, &a, &cfg).unwrap();
        let want = full.l_d + 10.0 * full.l_p1.unwrap() + 50.0 * full.l_p2.unwrap();
        assert!((full.total - want).abs() < 1e-12);
    }

    #[test]
    fn skip_rules() {
        let cfg = LossConfig::default();
        let br = total_loss(0.5, &[0.1, 0.2, 0.1], &[0, 0, 0], &cfg).unwrap();
        assert_eq!(br.l_p1, Some(0.0));
        assert!(br.l_p2.is_none() && br.lambda.is_none());
        assert!((br.total - br.l_d).abs() < 1e-15);
        let br = total_loss(0.5, &[0.1, 0.2, 0.1], &[1, 1, 1], &cfg).unwrap();
        assert!(br.l_p1.is_some() && br.l_p2.is_none());
        let br = total_loss(0.5, &[0.0, 0.0, 0.0], &[1, 0, 1], &cfg).unwrap();
        assert!(br.l_p1.is_none() && br.l_p2.is_none());
        assert_eq!(br.total, 0.5);
    }
}
