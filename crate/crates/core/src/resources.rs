//! Resource model: per-step costs for local updates and global aggregations,
//! budgets, consumption counters, and cost estimation.

use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, SimRng, Stream};

/// How per-node costs combine into a system-wide per-step cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Semantics {
    /// Energy-like: every node's consumption adds up.
    Sum,
    /// Time-like: the slowest node determines the cost.
    Max,
}

impl std::str::FromStr for Semantics {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" | "energy" => Ok(Semantics::Sum),
            "max" | "time" => Ok(Semantics::Max),
            _ => Err(Error::config(format!("unknown resource semantics `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    pub const fn fixed(mean: f64) -> Self {
        Self { mean, std: 0.0 }
    }

    /// A draw from `N(mean, std)` truncated to `[0, ∞)` by rejection.
    pub fn draw(&self, rng: &mut SimRng) -> f64 {
        if self.std == 0.0 {
            return self.mean.max(0.0);
        }
        for _ in 0..64 {
            let z: f64 = StandardNormal.sample(rng);
            let v = self.mean + self.std * z;
            if v >= 0.0 {
                return v;
            }
        }
        0.0
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !self.mean.is_finite() || self.mean < 0.0 {
            return Err(Error::field(format!("{path}.mean"), "must be finite and non-negative"));
        }
        if !self.std.is_finite() || self.std < 0.0 {
            return Err(Error::field(format!("{path}.std"), "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-local-update cost for distributed DGD, by data case.
pub fn dgd_local(case: u8) -> Option<Gaussian> {
    match case {
        1 => Some(Gaussian::new(0.020613052, 0.008154439)),
        2 => Some(Gaussian::new(0.021810727, 0.008042984)),
        3 => Some(Gaussian::new(0.095353094, 0.016688657)),
        4 => Some(Gaussian::new(0.022075891, 0.008528005)),
        _ => None,
    }
}

/// Per-aggregation cost for distributed DGD, by data case.
pub fn dgd_global(case: u8) -> Option<Gaussian> {
    match case {
        1 => Some(Gaussian::new(0.137093837, 0.05548447)),
        2 => Some(Gaussian::new(0.12322071, 0.048079171)),
        3 => Some(Gaussian::new(0.157255906, 0.066722225)),
        4 => Some(Gaussian::new(0.108598094, 0.044627335)),
        _ => None,
    }
}

/// Distributed SGD, all cases.
pub const SGD_LOCAL: Gaussian = Gaussian::new(0.013015156, 0.006946299);
pub const SGD_GLOBAL: Gaussian = Gaussian::new(0.131604348, 0.053873234);
/// Centralized SGD (local updates only).
pub const SGD_CENTRAL_LOCAL: Gaussian = Gaussian::new(0.009974248, 0.011922926);

/// One budgeted resource type `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceType {
    pub name: String,
    pub semantics: Semantics,
    /// `c_m` distribution for one local update (of the slowest node).
    pub local: Gaussian,
    /// `b_m` distribution for one global aggregation.
    pub global: Gaussian,
    /// Per-step cost for the centralized baseline.
    pub central: Gaussian,
    /// `R_m`
    pub budget: f64,
}

impl ResourceType {
    pub fn time(local: Gaussian, global: Gaussian, budget: f64) -> Self {
        Self {
            name: "time".into(),
            semantics: Semantics::Max,
            local,
            global,
            central: local,
            budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeterMode {
    /// Costs drawn from the configured Gaussians.
    Simulated,
    /// Wall-clock seconds of the actual computation (single time resource).
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub types: Vec<ResourceType>,
    pub mode: MeterMode,
    /// Relative node speeds; a node's costs scale by `min_speed / speed`.
    /// Empty means all nodes run at the same speed.
    pub speeds: Vec<f64>,
}

impl ResourceSpec {
    pub fn simulated(types: Vec<ResourceType>) -> Self {
        Self {
            types,
            mode: MeterMode::Simulated,
            speeds: Vec::new(),
        }
    }

    /// A single time resource with the distributed-SGD cost parameters.
    pub fn sgd_time(budget: f64) -> Self {
        let mut t = ResourceType::time(SGD_LOCAL, SGD_GLOBAL, budget);
        t.central = SGD_CENTRAL_LOCAL;
        Self::simulated(vec![t])
    }

    /// A single time resource with the distributed-DGD cost parameters of `case`.
    pub fn dgd_time(case: u8, budget: f64) -> Result<Self> {
        let local = dgd_local(case).ok_or_else(|| Error::field("case", "must be 1..=4"))?;
        let global = dgd_global(case).expect("same range as dgd_local");
        Ok(Self::simulated(vec![ResourceType::time(local, global, budget)]))
    }

    /// Same spec with every standard deviation set to zero.
    pub fn noise_free(mut self) -> Self {
        for t in &mut self.types {
            t.local.std = 0.0;
            t.global.std = 0.0;
            t.central.std = 0.0;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn budgets(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.budget).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::field("resources", "need at least one resource type"));
        }
        for (m, t) in self.types.iter().enumerate() {
            let p = format!("resources.{m}");
            t.local.validate(&format!("{p}.local"))?;
            t.global.validate(&format!("{p}.global"))?;
            t.central.validate(&format!("{p}.central"))?;
            if !(t.budget > 0.0) || !t.budget.is_finite() {
                return Err(Error::field(format!("{p}.budget"), "must be positive and finite"));
            }
        }
        if self.speeds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::field("resources.speeds", "speed factors must be positive"));
        }
        if self.mode == MeterMode::Measured && self.types.len() != 1 {
            return Err(Error::field(
                "resources.mode",
                "measured mode supports a single time resource",
            ));
        }
        Ok(())
    }

    /// Rejects budgets that cannot cover one local update plus one
    /// aggregation (`R'_m = R_m − b_m − c_m ≤ 0`).
    pub fn check_feasible(&self) -> Result<()> {
        for (m, t) in self.types.iter().enumerate() {
            let remaining = t.budget - t.global.mean - t.local.mean;
            if !(remaining > 0.0) {
                return Err(Error::BudgetTooSmall { resource: m, remaining });
            }
        }
        Ok(())
    }

    /// Cost multiplier of node `i`.
    pub fn node_scale(&self, i: usize) -> f64 {
        if self.speeds.is_empty() {
            return 1.0;
        }
        let min = self.speeds.iter().cloned().fold(f64::INFINITY, f64::min);
        min / self.speeds[i % self.speeds.len()]
    }
}

/// Which step a cost draw is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Local,
    Global,
    Central,
}

/// A single simulated draw per resource type.
pub fn draw_consumption(spec: &ResourceSpec, kind: StepKind, rng: &mut SimRng) -> Vec<f64> {
    spec.types
        .iter()
        .map(|t| match kind {
            StepKind::Local => t.local.draw(rng),
            StepKind::Global => t.global.draw(rng),
            StepKind::Central => t.central.draw(rng),
        })
        .collect()
}

/// Combines per-node costs into `ĉ_m`.
pub fn aggregate_node_costs(costs: &[f64], semantics: Semantics) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::config("no node costs to aggregate"));
    }
    Ok(match semantics {
        Semantics::Sum => costs.iter().sum(),
        Semantics::Max => costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Source of per-step resource costs.
pub trait CostMeter: Send {
    /// Per-node, per-type costs of one local iteration. `elapsed[i]` is the
    /// wall-clock time node `i` spent on the iteration.
    fn local_iteration(&mut self, elapsed: &[Duration]) -> Vec<Vec<f64>>;
    /// Per-type cost of one global aggregation.
    fn aggregation(&mut self, elapsed: Duration) -> Vec<f64>;
    /// Per-type cost of one centralized step.
    fn central_step(&mut self, elapsed: Duration) -> Vec<f64>;
}

/// Gaussian costs. One system-level draw per iteration and type; node `i`
/// is charged the draw scaled by its speed.
pub struct SimulatedMeter {
    spec: ResourceSpec,
    rng: SimRng,
}

impl SimulatedMeter {
    pub fn new(spec: ResourceSpec, seed: u64) -> Self {
        Self {
            spec,
            rng: rng_for(seed, Stream::Resources, 0),
        }
    }
}

impl CostMeter for SimulatedMeter {
    fn local_iteration(&mut self, elapsed: &[Duration]) -> Vec<Vec<f64>> {
        let draw = draw_consumption(&self.spec, StepKind::Local, &mut self.rng);
        (0..elapsed.len())
            .map(|i| {
                let s = self.spec.node_scale(i);
                draw.iter().map(|c| c * s).collect()
            })
            .collect()
    }

    fn aggregation(&mut self, _elapsed: Duration) -> Vec<f64> {
        draw_consumption(&self.spec, StepKind::Global, &mut self.rng)
    }

    fn central_step(&mut self, _elapsed: Duration) -> Vec<f64> {
        draw_consumption(&self.spec, StepKind::Central, &mut self.rng)
    }
}

/// Wall-clock seconds.
#[derive(Debug, Default)]
pub struct WallClockMeter;

impl CostMeter for WallClockMeter {
    fn local_iteration(&mut self, elapsed: &[Duration]) -> Vec<Vec<f64>> {
        elapsed.iter().map(|d| vec![d.as_secs_f64()]).collect()
    }

    fn aggregation(&mut self, elapsed: Duration) -> Vec<f64> {
        vec![elapsed.as_secs_f64()]
    }

    fn central_step(&mut self, elapsed: Duration) -> Vec<f64> {
        vec![elapsed.as_secs_f64()]
    }
}

pub fn meter_for(spec: &ResourceSpec, seed: u64) -> Box<dyn CostMeter> {
    match spec.mode {
        MeterMode::Simulated => Box::new(SimulatedMeter::new(spec.clone(), seed)),
        MeterMode::Measured => Box::new(WallClockMeter),
    }
}

/// Exponentially weighted moving average of observed costs; the first
/// observation initialises it.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimator {
    alpha: f64,
    value: Option<Vec<f64>>,
}

pub const EWMA_ALPHA: f64 = 0.5;

impl CostEstimator {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, value: None }
    }

    pub fn observe(&mut self, obs: &[f64]) {
        match &mut self.value {
            None => self.value = Some(obs.to_vec()),
            Some(v) => {
                for (e, o) in v.iter_mut().zip(obs) {
                    *e = self.alpha * o + (1.0 - self.alpha) * *e;
                }
            }
        }
    }

    pub fn get(&self) -> Option<&[f64]> {
        self.value.as_deref()
    }
}

impl Default for CostEstimator {
    fn default() -> Self {
        Self::new(EWMA_ALPHA)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetDecision {
    Continue,
    /// Run one last round of `tau` local updates, then stop. `tau == 0`
    /// means no further training round fits and only the final loss
    /// evaluation remains.
    Stop {
        tau: u32,
    },
}

/// Look-ahead budget check performed after every aggregation. Triggers when
/// `s_m + ĉ_m(τ+1) + 2b̂_m ≥ R_m` for some `m`; the reduced period is the
/// largest `τ' ≤ τ` with `s_m + ĉ_m(τ'+1) + 2b̂_m ≤ R_m` for all `m`, or 0 if
/// none fits.
pub fn check_budget(consumed: &[f64], c_hat: &[f64], b_hat: &[f64], tau: u32, budgets: &[f64]) -> BudgetDecision {
    let need = |m: usize, t: u32| consumed[m] + c_hat[m] * (t as f64 + 1.0) + 2.0 * b_hat[m];
    let triggered = (0..budgets.len()).any(|m| need(m, tau) >= budgets[m]);
    if !triggered {
        return BudgetDecision::Continue;
    }
    let fits = |t: u32| (0..budgets.len()).all(|m| need(m, t) <= budgets[m]);
    // fits() is monotone decreasing in t; binary search the largest t in [0, tau].
    let (mut lo, mut hi) = (0u32, tau);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    BudgetDecision::Stop { tau: lo }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_draws_mean() {
        let mut rng = rng_for(1, Stream::Resources, 0);
        let g = Gaussian::fixed(0.25);
        for _ in 0..10 {
            assert_eq!(g.draw(&mut rng), 0.25);
        }
    }

    #[test]
    fn draws_are_non_negative_and_reproducible() {
        let spec = ResourceSpec::sgd_time(15.0);
        let mut a = rng_for(3, Stream::Resources, 0);
        let mut b = rng_for(3, Stream::Resources, 0);
        for _ in 0..1000 {
            let x = draw_consumption(&spec, StepKind::Central, &mut a);
            let y = draw_consumption(&spec, StepKind::Central, &mut b);
            assert_eq!(x, y);
            assert!(x[0] >= 0.0);
        }
    }

    #[test]
    fn simulated_means_match_parameters() {
        let spec = ResourceSpec::sgd_time(15.0);
        let mut rng = rng_for(5, Stream::Resources, 0);
        let n = 20000;
        let mean: f64 = (0..n)
            .map(|_| draw_consumption(&spec, StepKind::Global, &mut rng)[0])
            .sum::<f64>()
            / n as f64;
        // truncation at zero only removes ~0.7% of the mass for these parameters
        assert!((mean - SGD_GLOBAL.mean).abs() < 0.003, "{mean}");
    }

    #[test]
    fn table_values() {
        assert_eq!(SGD_LOCAL, Gaussian::new(0.013015156, 0.006946299));
        assert_eq!(SGD_GLOBAL, Gaussian::new(0.131604348, 0.053873234));
        assert_eq!(dgd_local(3).unwrap().mean, 0.095353094);
        assert_eq!(SGD_CENTRAL_LOCAL, Gaussian::new(0.009974248, 0.011922926));
        assert!(dgd_local(5).is_none());
    }

    #[test]
    fn node_cost_semantics() {
        assert_eq!(aggregate_node_costs(&[1.0, 2.0, 3.0], Semantics::Max).unwrap(), 3.0);
        assert_eq!(aggregate_node_costs(&[1.0, 2.0, 3.0], Semantics::Sum).unwrap(), 6.0);
        assert_eq!(aggregate_node_costs(&[2.5], Semantics::Sum).unwrap(), 2.5);
        assert_eq!(aggregate_node_costs(&[2.5], Semantics::Max).unwrap(), 2.5);
        assert!(aggregate_node_costs(&[], Semantics::Max).is_err());
    }

    #[test]
    fn budget_check_examples() {
        // 10 + 1*4 + 2*2 = 18 < 20
        assert_eq!(
            check_budget(&[10.0], &[1.0], &[2.0], 3, &[20.0]),
            BudgetDecision::Continue
        );
        // 18 >= 17: largest tau' with 10 + (tau'+1) + 4 <= 17 is 2
        assert_eq!(
            check_budget(&[10.0], &[1.0], &[2.0], 3, &[17.0]),
            BudgetDecision::Stop { tau: 2 }
        );
        // no training round fits
        assert_eq!(
            check_budget(&[16.0], &[1.0], &[2.0], 3, &[17.0]),
            BudgetDecision::Stop { tau: 0 }
        );
        // every resource must fit
        assert_eq!(
            check_budget(&[0.0, 0.0], &[1.0, 2.0], &[0.0, 0.0], 10, &[100.0, 9.0]),
            BudgetDecision::Stop { tau: 3 }
        );
    }

    #[test]
    fn ewma() {
        let mut e = CostEstimator::default();
        assert!(e.get().is_none());
        e.observe(&[2.0]);
        assert_eq!(e.get().unwrap(), &[2.0]);
        e.observe(&[4.0]);
        assert_eq!(e.get().unwrap(), &[3.0]);
    }

    #[test]
    fn speeds_scale_node_costs() {
        let mut spec = ResourceSpec::sgd_time(15.0).noise_free();
        spec.speeds = vec![5.0, 1.0];
        let mut meter = SimulatedMeter::new(spec, 0);
        let costs = meter.local_iteration(&[Duration::ZERO; 2]);
        assert!((costs[0][0] - SGD_LOCAL.mean / 5.0).abs() < 1e-15);
        assert_eq!(costs[1][0], SGD_LOCAL.mean);
    }

    #[test]
    fn feasibility() {
        let spec = ResourceSpec::sgd_time(0.1);
        assert!(matches!(spec.check_feasible(), Err(Error::BudgetTooSmall { .. })));
        assert!(ResourceSpec::sgd_time(15.0).check_feasible().is_ok());
    }
}
