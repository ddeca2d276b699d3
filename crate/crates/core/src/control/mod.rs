//! Adaptive control of the aggregation period: the gap function `h`, the
//! convergence bound, the resource-normalised objective `G(τ)`, the τ* search,
//! the `τ₀` upper bound, and the online estimators of ρ, β and δ.

mod protocol;

pub use protocol::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{weighted_mean, ParamVector};

/// Controller settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub eta: f64,
    pub phi: f64,
    pub gamma: f64,
    pub tau_max: u32,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            phi: 0.025,
            gamma: 10.0,
            tau_max: 100,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::field("control.eta", "must be positive"));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::field("control.phi", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::field("control.gamma", "must be positive"));
        }
        if self.tau_max == 0 {
            return Err(Error::field("control.tau_max", "must be at least 1"));
        }
        Ok(())
    }
}

/// Estimated loss-function parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimatedParams {
    pub rho: f64,
    pub beta: f64,
    pub delta: f64,
    /// False until the first estimates arrive (second aggregation).
    pub valid: bool,
}

impl EstimatedParams {
    pub fn new(rho: f64, beta: f64, delta: f64) -> Self {
        Self {
            rho,
            beta,
            delta,
            valid: true,
        }
    }
}

/// Per-type resource inputs to `G`: local cost `c`, aggregation cost `b`,
/// and `R' = R − b − c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceTerm {
    pub c: f64,
    pub b: f64,
    pub r_prime: f64,
}

impl ResourceTerm {
    pub fn from_budget(c: f64, b: f64, budget: f64) -> Self {
        Self {
            c,
            b,
            r_prime: budget - b - c,
        }
    }
}

/// `h(x) = (δ/β)((ηβ+1)^x − 1) − ηδx`, with `h ≡ 0` when β = δ = 0.
pub fn h(x: u64, eta: f64, beta: f64, delta: f64) -> Result<f64> {
    if !(eta > 0.0) || beta < 0.0 || delta < 0.0 || beta.is_nan() || delta.is_nan() {
        return Err(Error::UndefinedParameters(format!(
            "h requires eta > 0, beta >= 0, delta >= 0 (eta={eta}, beta={beta}, delta={delta})"
        )));
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    if beta == 0.0 {
        return Err(Error::UndefinedParameters(
            "h is undefined for beta = 0 with delta > 0".into(),
        ));
    }
    if x <= 1 {
        return Ok(0.0);
    }
    Ok(delta / beta * excess_growth(x, eta * beta))
}

/// `(1+a)^x − 1 − a·x`, accurate for small `a·x`.
fn excess_growth(x: u64, a: f64) -> f64 {
    let xf = x as f64;
    if a * xf >= 0.5 {
        return (xf * a.ln_1p()).exp_m1() - a * xf;
    }
    // binomial series from the quadratic term on
    let mut term = xf * (xf - 1.0) / 2.0 * a * a;
    let mut sum = term;
    let mut k = 2u64;
    while k < x {
        k += 1;
        term *= (xf - (k as f64 - 1.0)) / k as f64 * a;
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    sum
}

fn h_for(x: u64, eta: f64, p: &EstimatedParams) -> Result<f64> {
    h(x, eta, p.beta, p.delta)
}

fn check_step(eta: f64, phi: f64) -> Result<()> {
    if !(eta > 0.0) {
        return Err(Error::field("control.eta", "must be positive"));
    }
    if !(phi > 0.0) {
        return Err(Error::field("control.phi", "must be positive"));
    }
    Ok(())
}

/// Upper bound on `F(w^f) − F(w*)` after `T` iterations with period τ.
pub fn convergence_bound(t_total: u64, tau: u64, eta: f64, phi: f64, p: &EstimatedParams) -> Result<f64> {
    check_step(eta, phi)?;
    if t_total == 0 || tau == 0 {
        return Err(Error::config("convergence bound needs T >= 1 and tau >= 1"));
    }
    let rh = p.rho * h_for(tau, eta, p)?;
    let a = 1.0 / (2.0 * eta * phi * t_total as f64);
    Ok(a + (a * a + rh / (eta * phi * tau as f64)).sqrt() + rh)
}

/// Resource-normalised objective `G(τ)`.
pub fn g_objective(tau: u32, eta: f64, phi: f64, p: &EstimatedParams, res: &[ResourceTerm]) -> Result<f64> {
    check_step(eta, phi)?;
    if tau == 0 {
        return Err(Error::config("G is defined for tau >= 1"));
    }
    let t = f64::from(tau);
    let mut x = f64::NEG_INFINITY;
    for (m, r) in res.iter().enumerate() {
        if !(r.r_prime > 0.0) {
            return Err(Error::BudgetTooSmall {
                resource: m,
                remaining: r.r_prime,
            });
        }
        x = x.max((r.c * t + r.b) / (r.r_prime * t));
    }
    if res.is_empty() {
        return Err(Error::config("G needs at least one resource type"));
    }
    let rh = p.rho * h_for(u64::from(tau), eta, p)?;
    let a = x / (2.0 * eta * phi);
    Ok(a + (a * a + rh / (eta * phi * t)).sqrt() + rh)
}

/// Minimiser of `G` over `1..=max_tau`; ties go to the smaller τ.
pub fn argmin_g(max_tau: u32, eta: f64, phi: f64, p: &EstimatedParams, res: &[ResourceTerm]) -> Result<u32> {
    let mut best = (1, g_objective(1, eta, phi, p, res)?);
    for tau in 2..=max_tau.max(1) {
        let g = g_objective(tau, eta, phi, p, res)?;
        if g < best.1 {
            best = (tau, g);
        }
    }
    Ok(best.0)
}

/// New τ* from a linear search over `[1, min(γτ*, τ_max)]`.
pub fn search_tau_star(current: u32, cfg: &ControlConfig, p: &EstimatedParams, res: &[ResourceTerm]) -> Result<u32> {
    if current == 0 {
        return Err(Error::config("current tau* must be at least 1"));
    }
    let range = (cfg.gamma * f64::from(current))
        .floor()
        .min(f64::from(cfg.tau_max))
        .max(1.0) as u32;
    argmin_g(range, cfg.eta, cfg.phi, p, res)
}

/// Finite upper bound `τ₀` on the minimiser of `G` over all τ ≥ 1.
pub fn tau0(eta: f64, phi: f64, p: &EstimatedParams, res: &[ResourceTerm]) -> Result<f64> {
    check_step(eta, phi)?;
    let (rho, beta, delta) = (p.rho, p.beta, p.delta);
    if !(rho > 0.0 && beta > 0.0 && delta > 0.0) {
        return Err(Error::UndefinedParameters("tau0 requires rho, beta, delta > 0".into()));
    }
    if eta * beta > 1.0 {
        return Err(Error::UndefinedParameters("tau0 requires eta <= 1/beta".into()));
    }
    if res.is_empty() {
        return Err(Error::config("tau0 needs at least one resource type"));
    }
    for (m, r) in res.iter().enumerate() {
        if !(r.r_prime > 0.0) {
            return Err(Error::BudgetTooSmall {
                resource: m,
                remaining: r.r_prime,
            });
        }
    }
    // ratios compared by cross-multiplication (R' > 0)
    let mut nu = 0;
    for m in 1..res.len() {
        let (a, b) = (&res[m], &res[nu]);
        let c_cmp = a.c * b.r_prime - b.c * a.r_prime;
        if c_cmp > 0.0 || (c_cmp == 0.0 && a.b * b.r_prime > b.b * a.r_prime) {
            nu = m;
        }
    }
    let v = res[nu];
    let mut first = f64::NEG_INFINITY;
    for r in res {
        let num = r.b * v.r_prime - v.b * r.r_prime;
        let den = v.c * r.r_prime - r.c * v.r_prime;
        let q = if den != 0.0 {
            num / den
        } else if num == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        };
        first = first.max(q);
    }
    let eb = eta * beta;
    let c1 = 2.0 * eta * phi * v.r_prime;
    let c2 = 4.0 * eta * eta * phi * phi * v.r_prime * v.r_prime;
    let second = phi * (2.0 + eb) / (2.0 * rho * delta) * (2.0 * v.c * v.b / c2 + 2.0 * v.b * v.b / c2);
    let third = (v.b / c1 + rho * eta * delta) / (rho * delta * eta * eb.ln_1p()) - 1.0 / eb;
    let fourth = 1.0 / eb + 0.5;
    Ok(first.max(second).max(third).max(fourth))
}

/// Node-side estimates `(ρ̂_i, β̂_i)` from losses and gradients at the local
/// parameter `w_i` and the global parameter `w`; zero when they coincide.
pub fn estimate_node_params(
    w_i: &[f64],
    w: &[f64],
    f_wi: f64,
    f_w: f64,
    g_wi: &[f64],
    g_w: &[f64],
) -> Result<(f64, f64)> {
    if w_i.len() != w.len() || g_wi.len() != g_w.len() {
        return Err(Error::Dimension {
            expected: w.len(),
            got: w_i.len(),
        });
    }
    let dist = crate::param::norm(&diff(w_i, w));
    if dist == 0.0 {
        return Ok((0.0, 0.0));
    }
    let rho = (f_wi - f_w).abs() / dist;
    let beta = crate::param::norm(&diff(g_wi, g_w)) / dist;
    Ok((rho, beta))
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Aggregator-side estimates: D-weighted ρ̂ and β̂, and δ̂ from the spread of
/// local gradients around the global gradient.
pub fn estimate_global_params(
    rho_i: &[f64],
    beta_i: &[f64],
    grads: &[ParamVector],
    sizes: &[usize],
) -> Result<EstimatedParams> {
    let n = sizes.len();
    if rho_i.len() != n || beta_i.len() != n || grads.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: grads.len(),
        });
    }
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let total: f64 = weights.iter().sum();
    let wmean = |v: &[f64]| v.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>() / total;
    let views: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    let global = weighted_mean(&views, &weights)?;
    let delta_i: Vec<f64> = grads.iter().map(|g| g.distance(&global)).collect();
    Ok(EstimatedParams::new(wmean(rho_i), wmean(beta_i), wmean(&delta_i)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(rho: f64, beta: f64, delta: f64) -> EstimatedParams {
        EstimatedParams::new(rho, beta, delta)
    }

    fn one(c: f64, b: f64, r_prime: f64) -> Vec<ResourceTerm> {
        vec![ResourceTerm { c, b, r_prime }]
    }

    #[test]
    fn h_vanishes_at_zero_and_one() {
        for (eta, beta, delta) in [(0.01, 1.0, 1.0), (0.5, 3.0, 0.2), (1.0, 1.0, 10.0)] {
            assert_eq!(h(0, eta, beta, delta).unwrap(), 0.0);
            assert_eq!(h(1, eta, beta, delta).unwrap(), 0.0);
        }
    }

    #[test]
    fn h_direct_value() {
        // 2(1.1^2 - 1) - 0.1*2*2
        let v = h(2, 0.1, 1.0, 2.0).unwrap();
        assert!((v - 0.02).abs() < 1e-15, "{v}");
    }

    #[test]
    fn h_zero_delta_and_degenerate() {
        assert_eq!(h(50, 0.1, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(h(50, 0.1, 0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(h(5, 0.1, 0.0, 1.0), Err(Error::UndefinedParameters(_))));
    }

    #[test]
    fn h_matches_closed_form_for_moderate_arguments() {
        for &(x, eta, beta, delta) in &[(10u64, 0.01, 1.0, 1.0), (200, 0.02, 2.0, 0.5), (3, 0.3, 0.7, 1.2)] {
            let closed = delta / beta * ((eta * beta + 1.0f64).powi(x as i32) - 1.0) - eta * delta * x as f64;
            let v = h(x, eta, beta, delta).unwrap();
            assert!(
                (v - closed).abs() <= 1e-9 * closed.abs().max(1e-12),
                "{x}: {v} vs {closed}"
            );
        }
    }

    #[test]
    fn bound_examples() {
        let q = p(1.0, 1.0, 1.0);
        let v = convergence_bound(100, 1, 0.01, 0.025, &q).unwrap();
        assert!((v - 40.0).abs() < 1e-9);
        let b1 = convergence_bound(1_000, 5, 0.01, 0.025, &q).unwrap();
        let b2 = convergence_bound(10_000_000_000, 5, 0.01, 0.025, &q).unwrap();
        let rh = h(5, 0.01, 1.0, 1.0).unwrap();
        let gap = (rh / (0.01 * 0.025 * 5.0)).sqrt() + rh;
        assert!(b2 < b1);
        assert!(b2 > gap && b2 - gap < 1e-3);
        assert!(convergence_bound(10, 1, 0.01, 0.0, &q).is_err());
    }

    #[test]
    fn g_examples() {
        let z = p(0.0, 0.0, 0.0);
        let res = one(1.0, 1.0, 100.0);
        assert!((g_objective(1, 0.01, 0.025, &z, &res).unwrap() - 80.0).abs() < 1e-9);
        assert!((g_objective(2, 0.01, 0.025, &z, &res).unwrap() - 60.0).abs() < 1e-9);
        assert!(matches!(
            g_objective(1, 0.01, 0.025, &z, &one(1.0, 1.0, 0.0)),
            Err(Error::BudgetTooSmall { resource: 0, .. })
        ));
    }

    #[test]
    fn g_scales_inversely_with_phi_when_h_vanishes() {
        let z = p(1.0, 1.0, 0.0);
        let res = one(0.2, 3.0, 50.0);
        for tau in 1..20 {
            let a = g_objective(tau, 0.01, 0.025, &z, &res).unwrap();
            let b = g_objective(tau, 0.01, 0.05, &z, &res).unwrap();
            assert!((a / b - 2.0).abs() < 1e-12);
        }
        let cfg = ControlConfig::default();
        let cfg2 = ControlConfig { phi: 0.05, ..cfg };
        assert_eq!(
            search_tau_star(3, &cfg, &z, &res).unwrap(),
            search_tau_star(3, &cfg2, &z, &res).unwrap()
        );
    }

    #[test]
    fn search_examples() {
        let z = p(0.0, 0.0, 0.0);
        let res = one(1.0, 1.0, 100.0);
        let cfg = ControlConfig::default();
        assert_eq!(search_tau_star(4, &cfg, &z, &res).unwrap(), 40);
        assert!(search_tau_star(1, &cfg, &z, &res).unwrap() <= 10);
        assert_eq!(search_tau_star(50, &cfg, &z, &res).unwrap(), 100);
    }

    #[test]
    fn search_prefers_smaller_tau_on_ties() {
        // b = 0 with h ≡ 0 makes G constant in τ
        let z = p(0.0, 0.0, 0.0);
        let res = one(1.0, 0.0, 100.0);
        assert_eq!(search_tau_star(5, &ControlConfig::default(), &z, &res).unwrap(), 1);
    }

    #[test]
    fn tau0_examples() {
        let q = p(1.0, 1.0, 1.0);
        let t = tau0(0.01, 0.025, &q, &one(1.0, 1.0, 1000.0)).unwrap();
        assert!(t >= 100.5);
        let multi = vec![
            ResourceTerm {
                c: 1.0,
                b: 2.0,
                r_prime: 100.0,
            },
            ResourceTerm {
                c: 0.5,
                b: 3.0,
                r_prime: 100.0,
            },
        ];
        assert!(tau0(0.01, 0.025, &q, &multi).unwrap() >= 100.5);
        assert!(tau0(0.01, 0.025, &p(1.0, 0.0, 1.0), &one(1.0, 1.0, 10.0)).is_err());
    }

    #[test]
    fn node_estimates() {
        assert_eq!(
            estimate_node_params(&[1.0], &[1.0], 3.0, 1.0, &[1.0], &[0.0]).unwrap(),
            (0.0, 0.0)
        );
        let (rho, _) = estimate_node_params(&[0.5], &[0.0], 2.0, 1.0, &[0.0], &[0.0]).unwrap();
        assert_eq!(rho, 2.0);
        let (_, beta) = estimate_node_params(&[1.0, 0.0], &[0.0, 0.0], 0.0, 0.0, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(beta, 1.0);
    }

    #[test]
    fn global_estimates() {
        let g = vec![ParamVector::from(vec![1.0, 0.0]), vec![0.0, 1.0].into()];
        let e = estimate_global_params(&[1.0, 3.0], &[2.0, 2.0], &g, &[4, 4]).unwrap();
        assert!((e.delta - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!((e.rho, e.beta), (2.0, 2.0));

        let same = vec![ParamVector::from(vec![0.3, -1.0]); 3];
        let e = estimate_global_params(&[0.0; 3], &[0.0; 3], &same, &[1, 5, 2]).unwrap();
        assert_eq!(e.delta, 0.0);

        let e = estimate_global_params(&[0.7], &[0.1], &[vec![1.0].into()], &[9]).unwrap();
        assert_eq!((e.rho, e.delta), (0.7, 0.0));
    }
}
