//! Message-level aggregator and edge-node state machines, and a driver that
//! runs them in lock step against a cost meter.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    estimate_global_params, estimate_node_params, search_tau_star, ControlConfig, EstimatedParams, ResourceTerm,
};
use crate::data::NodePartition;
use crate::engine::{feature_dim, partition_sizes, Init, Mode, NodeState};
use crate::error::{Error, Result};
use crate::models::LossModel;
use crate::param::{weighted_mean, ParamVector};
use crate::resources::{
    aggregate_node_costs, check_budget, BudgetDecision, CostEstimator, CostMeter, ResourceSpec, Semantics,
};
use crate::rng::{derive_seed, Stream};

/// How the aggregation period is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauPolicy {
    Adaptive,
    Fixed(u32),
}

/// Annotations attached to trace rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flag {
    /// STOP was set after this round.
    Stop,
    /// The remaining budget admitted no further training round.
    NoRoundFits,
    /// `η·β̂ > 1`: the bound's step-size condition is violated.
    EtaBetaAboveOne,
    /// The mini-batch size was clamped to the local dataset size.
    BatchClamped,
    /// `w^f` was replaced in this round.
    WfUpdated,
    /// Closing loss-evaluation round.
    Final,
}

impl Flag {
    pub const ALL: [Flag; 6] = [
        Flag::Stop,
        Flag::NoRoundFits,
        Flag::EtaBetaAboveOne,
        Flag::BatchClamped,
        Flag::WfUpdated,
        Flag::Final,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Stop => "stop",
            Flag::NoRoundFits => "no_round_fits",
            Flag::EtaBetaAboveOne => "eta_beta_gt_1",
            Flag::BatchClamped => "batch_clamped",
            Flag::WfUpdated => "wf_updated",
            Flag::Final => "final",
        }
    }
}

impl std::str::FromStr for Flag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flag::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown trace flag `{s}`")))
    }
}

/// Aggregator to nodes at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Downlink {
    pub w: ParamVector,
    pub tau: u32,
    pub stop: bool,
    /// The previously sent `w(t₀)` has become `w^f`.
    pub w_f_selected: bool,
}

/// Estimates a node computed when it received `w(t₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub rho: f64,
    pub beta: f64,
    /// `F_i(w(t₀))`
    pub loss: f64,
    /// `∇F_i(w(t₀))`
    pub grad: ParamVector,
    /// `F_i(w^f)` on the same batch as `loss`, once `w^f` has been selected.
    pub loss_wf: Option<f64>,
}

/// Node to aggregator at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Uplink {
    pub node: usize,
    pub w: ParamVector,
    /// Per-type cost of one local iteration at this node.
    pub c_hat: Vec<f64>,
    pub report: Option<NodeReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalDownlink {
    pub w: ParamVector,
    pub w_f_selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalUplink {
    pub node: usize,
    pub loss: f64,
    pub loss_wf: Option<f64>,
    pub c_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgePhase {
    AwaitModel,
    Training { remaining: u32, first: bool },
    AwaitFinal,
    Done,
}

/// Edge-node side of the protocol.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    state: NodeState,
    t: u64,
    t0: u64,
    received: Option<ParamVector>,
    w_f: Option<ParamVector>,
    report: Option<NodeReport>,
    stop: bool,
    phase: EdgePhase,
}

fn protocol_err(who: &str, what: &str) -> Error {
    Error::Protocol(format!("{who}: {what}"))
}

impl EdgeNode {
    pub fn new(state: NodeState) -> Self {
        Self {
            state,
            t: 0,
            t0: 0,
            received: None,
            w_f: None,
            report: None,
            stop: false,
            phase: EdgePhase::AwaitModel,
        }
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    fn adopt_w_f(&mut self, selected: bool) -> Result<()> {
        if selected {
            let w = self
                .received
                .clone()
                .ok_or_else(|| protocol_err("edge", "w^f selected before any model was received"))?;
            self.w_f = Some(w);
        }
        Ok(())
    }

    /// Receives `w(t)` and τ*; estimates ρ̂_i, β̂_i when `t > 0`.
    pub fn receive(&mut self, msg: &Downlink, part: &NodePartition, model: &LossModel) -> Result<()> {
        if self.phase != EdgePhase::AwaitModel {
            return Err(protocol_err("edge", "model received out of order"));
        }
        if msg.tau == 0 {
            return Err(protocol_err("edge", "tau must be at least 1"));
        }
        self.adopt_w_f(msg.w_f_selected)?;
        self.t0 = self.t;
        self.report = None;
        if self.t > 0 {
            let s = &self.state;
            let f_wi = s.batch_loss(model, part, &s.w)?;
            let f_w = s.batch_loss(model, part, &msg.w)?;
            let g_wi = s.batch_gradient(model, part, &s.w)?;
            let g_w = s.batch_gradient(model, part, &msg.w)?;
            let (rho, beta) = estimate_node_params(&s.w, &msg.w, f_wi, f_w, &g_wi, &g_w)?;
            let loss_wf = match &self.w_f {
                Some(wf) => Some(s.batch_loss(model, part, wf)?),
                None => None,
            };
            self.report = Some(NodeReport {
                rho,
                beta,
                loss: f_w,
                grad: g_w,
                loss_wf,
            });
        }
        self.state.w_tilde = msg.w.clone();
        self.received = Some(msg.w.clone());
        self.stop = msg.stop;
        self.phase = EdgePhase::Training {
            remaining: msg.tau,
            first: true,
        };
        Ok(())
    }

    /// One local iteration.
    pub fn local_step(&mut self, part: &NodePartition, model: &LossModel, eta: f64) -> Result<()> {
        let EdgePhase::Training { remaining, first } = self.phase else {
            return Err(protocol_err("edge", "local step outside a training round"));
        };
        if remaining == 0 {
            return Err(protocol_err("edge", "more local steps than tau"));
        }
        self.t += 1;
        self.state.local_update(part, model, eta, self.t, first)?;
        self.phase = EdgePhase::Training {
            remaining: remaining - 1,
            first: false,
        };
        Ok(())
    }

    /// Sends `w_i(t)`, the cost estimate and, when `t₀ > 0`, the report.
    pub fn send(&mut self, c_hat: Vec<f64>) -> Result<Uplink> {
        if self.phase
            != (EdgePhase::Training {
                remaining: 0,
                first: false,
            })
        {
            return Err(protocol_err("edge", "uplink before the round's local steps finished"));
        }
        let report = if self.t0 > 0 { self.report.take() } else { None };
        self.phase = if self.stop {
            EdgePhase::AwaitFinal
        } else {
            EdgePhase::AwaitModel
        };
        Ok(Uplink {
            node: self.state.id,
            w: self.state.w.clone(),
            c_hat,
            report,
        })
    }

    /// Closing round: evaluates the local loss at the final `w(t)`.
    pub fn final_round(
        &mut self,
        msg: &FinalDownlink,
        part: &NodePartition,
        model: &LossModel,
        c_hat: Vec<f64>,
    ) -> Result<FinalUplink> {
        if !matches!(self.phase, EdgePhase::AwaitFinal | EdgePhase::AwaitModel) {
            return Err(protocol_err("edge", "final round out of order"));
        }
        self.adopt_w_f(msg.w_f_selected)?;
        let loss = self.state.batch_loss(model, part, &msg.w)?;
        let loss_wf = match &self.w_f {
            Some(wf) => Some(self.state.batch_loss(model, part, wf)?),
            None => None,
        };
        self.phase = EdgePhase::Done;
        Ok(FinalUplink {
            node: self.state.id,
            loss,
            loss_wf,
            c_hat,
        })
    }
}

/// One aggregation round as seen by the aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    /// Iteration index of this aggregation.
    pub t: u64,
    /// Local iterations in this round; 0 for the closing row.
    pub tau: u32,
    /// The parameter whose loss is reported: `w(t₀)`, or `w(t)` on the closing row.
    pub w_eval: Option<ParamVector>,
    pub loss: Option<f64>,
    pub params: Option<EstimatedParams>,
    pub c_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub consumed: Vec<f64>,
    pub round_cost: Vec<f64>,
    pub flags: Vec<Flag>,
}

/// Result of handling a round's uplinks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundStatus {
    Continue,
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AggPhase {
    Send,
    Collect,
    Final,
    FinalCollect,
    Done,
}

/// Aggregator side of the protocol.
#[derive(Debug, Clone)]
pub struct Aggregator {
    control: ControlConfig,
    policy: TauPolicy,
    sizes: Vec<usize>,
    budgets: Vec<f64>,
    semantics: Vec<Semantics>,
    sgd: bool,
    tau: u32,
    t: u64,
    t0: u64,
    stop: bool,
    w: ParamVector,
    w_t0: ParamVector,
    w_f: ParamVector,
    f_w_f: f64,
    w_f_known: bool,
    w_f_flag: bool,
    consumed: Vec<f64>,
    c_est: CostEstimator,
    b_est: CostEstimator,
    params: EstimatedParams,
    round: u64,
    phase: AggPhase,
    records: Vec<RoundRecord>,
    pending_flags: Vec<Flag>,
}

/// Final state of a protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub w_f: ParamVector,
    /// `F(w^f)` as known to the aggregator (mini-batch based in SGD).
    pub f_w_f: f64,
    /// Last aggregated parameter `w(T)`.
    pub w: ParamVector,
    /// Total local iterations `T`.
    pub t: u64,
    pub consumed: Vec<f64>,
    pub records: Vec<RoundRecord>,
}

impl Aggregator {
    pub fn new(
        control: ControlConfig,
        policy: TauPolicy,
        mode: Mode,
        w0: ParamVector,
        sizes: Vec<usize>,
        resources: &ResourceSpec,
    ) -> Result<Self> {
        control.validate()?;
        let tau = match policy {
            TauPolicy::Adaptive => 1,
            TauPolicy::Fixed(0) => return Err(Error::field("policy", "fixed tau must be at least 1")),
            TauPolicy::Fixed(n) => n,
        };
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::config("every node needs at least one sample"));
        }
        let m = resources.len();
        Ok(Self {
            control,
            policy,
            sizes,
            budgets: resources.budgets(),
            semantics: resources.types.iter().map(|r| r.semantics).collect(),
            sgd: matches!(mode, Mode::Sgd { .. }),
            tau,
            t: 0,
            t0: 0,
            stop: false,
            w_t0: w0.clone(),
            w_f: w0.clone(),
            w: w0,
            f_w_f: f64::INFINITY,
            w_f_known: false,
            w_f_flag: false,
            consumed: vec![0.0; m],
            c_est: CostEstimator::default(),
            b_est: CostEstimator::default(),
            params: EstimatedParams::default(),
            round: 0,
            phase: AggPhase::Send,
            records: Vec::new(),
            pending_flags: Vec::new(),
        })
    }

    pub fn tau(&self) -> u32 {
        self.tau
    }

    pub fn consumed(&self) -> &[f64] {
        &self.consumed
    }

    /// Adds a flag to the next trace row.
    pub fn flag(&mut self, f: Flag) {
        self.pending_flags.push(f);
    }

    pub fn downlink(&mut self) -> Result<Downlink> {
        if self.phase != AggPhase::Send {
            return Err(protocol_err("aggregator", "send out of order"));
        }
        let msg = Downlink {
            w: self.w.clone(),
            tau: self.tau,
            stop: self.stop,
            w_f_selected: std::mem::take(&mut self.w_f_flag),
        };
        self.w_t0 = self.w.clone();
        self.t0 = self.t;
        self.t += u64::from(self.tau);
        self.phase = AggPhase::Collect;
        Ok(msg)
    }

    fn weighted(&self, values: impl Iterator<Item = f64>) -> f64 {
        let total: usize = self.sizes.iter().sum();
        values.zip(&self.sizes).map(|(v, &d)| v * d as f64).sum::<f64>() / total as f64
    }

    fn node_costs(&self, c_hats: &[&[f64]]) -> Result<Vec<f64>> {
        (0..self.budgets.len())
            .map(|m| {
                let per_node: Vec<f64> = c_hats
                    .iter()
                    .map(|c| {
                        c.get(m)
                            .copied()
                            .ok_or_else(|| protocol_err("aggregator", "missing cost entry"))
                    })
                    .collect::<Result<_>>()?;
                aggregate_node_costs(&per_node, self.semantics[m])
            })
            .collect()
    }

    fn check_nodes(&self, ids: impl Iterator<Item = usize>, n: usize) -> Result<()> {
        if n != self.sizes.len() || ids.enumerate().any(|(i, id)| i != id) {
            return Err(protocol_err(
                "aggregator",
                "expected one message per node in node order",
            ));
        }
        Ok(())
    }

    fn refresh_w_f_loss(&mut self, losses: impl Iterator<Item = Option<f64>>) -> Result<()> {
        if self.sgd && self.w_f_known {
            let v: Vec<f64> = losses
                .map(|l| l.ok_or_else(|| protocol_err("aggregator", "missing F_i(w^f)")))
                .collect::<Result<_>>()?;
            self.f_w_f = self.weighted(v.into_iter());
        }
        Ok(())
    }

    fn resource_terms(&self) -> Vec<ResourceTerm> {
        let c = self.c_est.get().unwrap_or(&[]);
        let b = self.b_est.get().unwrap_or(&[]);
        (0..self.budgets.len())
            .map(|m| ResourceTerm::from_budget(c[m], b[m], self.budgets[m]))
            .collect()
    }

    /// Handles the uplinks of a round. `b_obs` is the measured per-type cost
    /// of this aggregation.
    pub fn receive(&mut self, uplinks: &[Uplink], b_obs: &[f64]) -> Result<RoundStatus> {
        if self.phase != AggPhase::Collect {
            return Err(protocol_err("aggregator", "uplinks received out of order"));
        }
        self.check_nodes(uplinks.iter().map(|u| u.node), uplinks.len())?;
        self.round += 1;
        let tau_used = self.tau;
        let views: Vec<&[f64]> = uplinks.iter().map(|u| u.w.as_slice()).collect();
        let weights: Vec<f64> = self.sizes.iter().map(|&s| s as f64).collect();
        self.w = weighted_mean(&views, &weights)?;

        let c_hats: Vec<&[f64]> = uplinks.iter().map(|u| u.c_hat.as_slice()).collect();
        let c_obs = self.node_costs(&c_hats)?;
        let round_cost: Vec<f64> = c_obs
            .iter()
            .zip(b_obs)
            .map(|(c, b)| c * f64::from(tau_used) + b)
            .collect();
        for (s, r) in self.consumed.iter_mut().zip(&round_cost) {
            *s += r;
        }

        let mut flags = std::mem::take(&mut self.pending_flags);
        let mut loss = None;
        let mut params = None;
        if self.t0 > 0 {
            let reports: Vec<&NodeReport> = uplinks
                .iter()
                .map(|u| {
                    u.report
                        .as_ref()
                        .ok_or_else(|| protocol_err("aggregator", "missing node report"))
                })
                .collect::<Result<_>>()?;
            let f_t0 = self.weighted(reports.iter().map(|r| r.loss));
            self.refresh_w_f_loss(reports.iter().map(|r| r.loss_wf))?;
            if f_t0 < self.f_w_f {
                self.w_f = self.w_t0.clone();
                self.f_w_f = f_t0;
                self.w_f_known = true;
                self.w_f_flag = true;
                flags.push(Flag::WfUpdated);
            }
            loss = Some(f_t0);
            if !self.stop && self.policy == TauPolicy::Adaptive {
                let rho: Vec<f64> = reports.iter().map(|r| r.rho).collect();
                let beta: Vec<f64> = reports.iter().map(|r| r.beta).collect();
                let grads: Vec<ParamVector> = reports.iter().map(|r| r.grad.clone()).collect();
                let est = estimate_global_params(&rho, &beta, &grads, &self.sizes)?;
                if self.control.eta * est.beta > 1.0 {
                    flags.push(Flag::EtaBetaAboveOne);
                }
                self.params = est;
                params = Some(est);
                // β̂ = 0 only when every node's w_i coincides with w; use the h ≡ 0 limit
                let mut ctrl = est;
                if ctrl.beta == 0.0 {
                    ctrl.delta = 0.0;
                }
                self.tau = search_tau_star(self.tau, &self.control, &ctrl, &self.resource_terms())?;
            }
        }

        let status = if self.stop {
            RoundStatus::Finish
        } else {
            self.c_est.observe(&c_obs);
            self.b_est.observe(b_obs);
            let c_hat = self.c_est.get().unwrap_or(&[]).to_vec();
            let b_hat = self.b_est.get().unwrap_or(&[]).to_vec();
            match check_budget(&self.consumed, &c_hat, &b_hat, self.tau, &self.budgets) {
                BudgetDecision::Continue => RoundStatus::Continue,
                BudgetDecision::Stop { tau: 0 } => {
                    flags.push(Flag::Stop);
                    flags.push(Flag::NoRoundFits);
                    RoundStatus::Finish
                }
                BudgetDecision::Stop { tau } => {
                    self.tau = tau;
                    self.stop = true;
                    flags.push(Flag::Stop);
                    RoundStatus::Continue
                }
            }
        };

        self.records.push(RoundRecord {
            round: self.round,
            t: self.t,
            tau: tau_used,
            w_eval: (self.t0 > 0).then(|| self.w_t0.clone()),
            loss,
            params,
            c_hat: self.c_est.get().unwrap_or(&[]).to_vec(),
            b_hat: self.b_est.get().unwrap_or(&[]).to_vec(),
            consumed: self.consumed.clone(),
            round_cost,
            flags,
        });
        self.phase = match status {
            RoundStatus::Continue => AggPhase::Send,
            RoundStatus::Finish => AggPhase::Final,
        };
        Ok(status)
    }

    pub fn final_downlink(&mut self) -> Result<FinalDownlink> {
        if self.phase != AggPhase::Final {
            return Err(protocol_err("aggregator", "final round before STOP"));
        }
        self.phase = AggPhase::FinalCollect;
        self.w_t0 = self.w.clone();
        Ok(FinalDownlink {
            w: self.w.clone(),
            w_f_selected: std::mem::take(&mut self.w_f_flag),
        })
    }

    pub fn final_receive(&mut self, finals: &[FinalUplink], b_obs: &[f64]) -> Result<()> {
        if self.phase != AggPhase::FinalCollect {
            return Err(protocol_err("aggregator", "final losses received out of order"));
        }
        self.check_nodes(finals.iter().map(|f| f.node), finals.len())?;
        let c_hats: Vec<&[f64]> = finals.iter().map(|f| f.c_hat.as_slice()).collect();
        let c_obs = self.node_costs(&c_hats)?;
        let round_cost: Vec<f64> = c_obs.iter().zip(b_obs).map(|(c, b)| c + b).collect();
        for (s, r) in self.consumed.iter_mut().zip(&round_cost) {
            *s += r;
        }
        let loss = self.weighted(finals.iter().map(|f| f.loss));
        self.refresh_w_f_loss(finals.iter().map(|f| f.loss_wf))?;
        let mut flags = std::mem::take(&mut self.pending_flags);
        flags.push(Flag::Final);
        if loss < self.f_w_f {
            self.w_f = self.w.clone();
            self.f_w_f = loss;
            self.w_f_known = true;
            flags.push(Flag::WfUpdated);
        }
        self.records.push(RoundRecord {
            round: self.round + 1,
            t: self.t,
            tau: 0,
            w_eval: Some(self.w.clone()),
            loss: Some(loss),
            params: None,
            c_hat: self.c_est.get().unwrap_or(&[]).to_vec(),
            b_hat: self.b_est.get().unwrap_or(&[]).to_vec(),
            consumed: self.consumed.clone(),
            round_cost,
            flags,
        });
        self.phase = AggPhase::Done;
        Ok(())
    }

    pub fn finish(self) -> Result<ProtocolOutcome> {
        if self.phase != AggPhase::Done {
            return Err(protocol_err("aggregator", "run finished before the final round"));
        }
        Ok(ProtocolOutcome {
            w_f: self.w_f,
            f_w_f: self.f_w_f,
            w: self.w,
            t: self.t,
            consumed: self.consumed,
            records: self.records,
        })
    }
}

/// Settings of a protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub control: ControlConfig,
    pub policy: TauPolicy,
    pub mode: Mode,
    pub init: Init,
    pub seed: u64,
    pub parallel: bool,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, Duration)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed()))
}

fn for_each_edge<T: Send>(
    edges: &mut [EdgeNode],
    parts: &[NodePartition],
    parallel: bool,
    f: impl Fn(&mut EdgeNode, &NodePartition) -> Result<T> + Sync + Send,
) -> Result<Vec<(T, Duration)>> {
    if parallel {
        edges
            .par_iter_mut()
            .zip(parts.par_iter())
            .map(|(e, p)| timed(|| f(e, p)))
            .collect()
    } else {
        edges.iter_mut().zip(parts).map(|(e, p)| timed(|| f(e, p))).collect()
    }
}

fn durations<T>(v: &[(T, Duration)]) -> Vec<Duration> {
    v.iter().map(|(_, d)| *d).collect()
}

/// Runs the aggregator and all edge nodes until the budget is exhausted.
pub fn run_protocol(
    cfg: &ProtocolConfig,
    parts: &[NodePartition],
    model: &LossModel,
    resources: &ResourceSpec,
    meter: &mut dyn CostMeter,
) -> Result<ProtocolOutcome> {
    resources.validate()?;
    resources.check_feasible()?;
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config("every node needs at least one sample"));
    }
    let dim = model.param_dim(feature_dim(parts)?);
    let w0 = cfg.init.build(dim, cfg.seed);
    let batch_seed = derive_seed(cfg.seed, Stream::MiniBatch, 0);
    let mut edges: Vec<EdgeNode> = parts
        .iter()
        .enumerate()
        .map(|(i, p)| EdgeNode::new(NodeState::new(i, w0.clone(), cfg.mode, p, batch_seed)))
        .collect();
    let mut agg = Aggregator::new(cfg.control, cfg.policy, cfg.mode, w0, partition_sizes(parts), resources)?;
    if edges
        .iter()
        .any(|e| e.state().sampler.as_ref().is_some_and(|s| s.clamped()))
    {
        agg.flag(Flag::BatchClamped);
    }
    let eta = cfg.control.eta;
    let m = resources.len();
    loop {
        let down = agg.downlink()?;
        let recv = for_each_edge(&mut edges, parts, cfg.parallel, |e, p| e.receive(&down, p, model))?;
        let b_obs = meter.aggregation(recv.iter().map(|(_, d)| *d).max().unwrap_or_default());
        let mut totals = vec![vec![0.0; m]; edges.len()];
        for _ in 0..down.tau {
            let step = for_each_edge(&mut edges, parts, cfg.parallel, |e, p| e.local_step(p, model, eta))?;
            let costs = meter.local_iteration(&durations(&step));
            for (acc, c) in totals.iter_mut().zip(costs) {
                for (a, x) in acc.iter_mut().zip(c) {
                    *a += x;
                }
            }
        }
        let scale = 1.0 / f64::from(down.tau);
        let uplinks: Vec<Uplink> = edges
            .iter_mut()
            .zip(totals)
            .map(|(e, tot)| e.send(tot.into_iter().map(|x| x * scale).collect()))
            .collect::<Result<_>>()?;
        if agg.receive(&uplinks, &b_obs)? == RoundStatus::Finish {
            break;
        }
    }
    let fin = agg.final_downlink()?;
    let evals = for_each_edge(&mut edges, parts, cfg.parallel, |e, p| {
        e.final_round(&fin, p, model, Vec::new())
    })?;
    let costs = meter.local_iteration(&durations(&evals));
    let b_obs = meter.aggregation(Duration::ZERO);
    let finals: Vec<FinalUplink> = evals
        .into_iter()
        .zip(costs)
        .map(|((mut f, _), c)| {
            f.c_hat = c;
            f
        })
        .collect();
    agg.final_receive(&finals, &b_obs)?;
    agg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition, Case};
    use crate::models::ModelKind;
    use crate::resources::{meter_for, Gaussian, ResourceType};

    fn setup(case: Case) -> (Vec<NodePartition>, LossModel) {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 200, 4, 11).unwrap();
        (partition(&ds, 4, case, 2).unwrap(), LossModel::svm(0.05).unwrap())
    }

    fn pcfg(policy: TauPolicy, mode: Mode) -> ProtocolConfig {
        ProtocolConfig {
            control: ControlConfig::default(),
            policy,
            mode,
            init: Init::Zero,
            seed: 5,
            parallel: false,
        }
    }

    fn run(case: Case, policy: TauPolicy, mode: Mode, res: &ResourceSpec) -> ProtocolOutcome {
        let (parts, model) = setup(case);
        let mut meter = meter_for(res, 9);
        run_protocol(&pcfg(policy, mode), &parts, &model, res, meter.as_mut()).unwrap()
    }

    fn flat(c: f64, b: f64, r: f64) -> ResourceSpec {
        ResourceSpec::simulated(vec![ResourceType::time(Gaussian::fixed(c), Gaussian::fixed(b), r)])
    }

    #[test]
    fn first_round_has_no_estimates_and_keeps_tau_one() {
        let out = run(Case::Random, TauPolicy::Adaptive, Mode::Dgd, &flat(0.01, 0.1, 3.0));
        let r0 = &out.records[0];
        assert_eq!(r0.tau, 1);
        assert!(r0.params.is_none() && r0.loss.is_none());
        assert_eq!(out.records[1].tau, 1);
        assert!(out.records[1].params.is_some());
    }

    #[test]
    fn stop_is_followed_by_one_round_and_the_final_evaluation() {
        let out = run(Case::ByLabel, TauPolicy::Adaptive, Mode::Dgd, &flat(0.01, 0.1, 3.0));
        let stop_at = out.records.iter().position(|r| r.flags.contains(&Flag::Stop)).unwrap();
        let last = out.records.last().unwrap();
        assert!(last.flags.contains(&Flag::Final));
        let expected = if out.records[stop_at].flags.contains(&Flag::NoRoundFits) {
            2
        } else {
            3
        };
        assert_eq!(out.records.len() - stop_at, expected);
        assert_eq!(out.records.iter().filter(|r| r.flags.contains(&Flag::Stop)).count(), 1);
    }

    #[test]
    fn noise_free_budget_is_respected() {
        for r in [1.0, 2.5, 7.0, 15.0] {
            for policy in [TauPolicy::Adaptive, TauPolicy::Fixed(1), TauPolicy::Fixed(7)] {
                let out = run(Case::Hybrid, policy, Mode::Sgd { batch_size: 8 }, &flat(0.013, 0.13, r));
                assert!(out.consumed[0] <= r + 1e-12, "{policy:?} R={r}: {}", out.consumed[0]);
                let sum: f64 = out.records.iter().map(|x| x.round_cost[0]).sum();
                assert!((sum - out.consumed[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn replicated_dgd_estimates_are_exactly_zero() {
        let out = run(
            Case::Replicated,
            TauPolicy::Adaptive,
            Mode::Dgd,
            &flat(0.09, 0.15, 15.0),
        );
        let est: Vec<_> = out.records.iter().filter_map(|r| r.params).collect();
        assert!(!est.is_empty());
        for p in est {
            assert_eq!((p.rho, p.beta, p.delta), (0.0, 0.0, 0.0));
        }
        // h ≡ 0: τ* grows by γ each round until τ_max
        let taus: Vec<u32> = out.records.iter().map(|r| r.tau).collect();
        assert_eq!(&taus[..4], &[1, 1, 10, 100]);
    }

    #[test]
    fn fixed_policy_skips_estimation() {
        let out = run(Case::Random, TauPolicy::Fixed(4), Mode::Dgd, &flat(0.01, 0.1, 2.0));
        assert!(out.records.iter().all(|r| r.params.is_none()));
        let stop = out.records.iter().position(|r| r.flags.contains(&Flag::Stop)).unwrap();
        assert!(out.records[..=stop].iter().all(|r| r.tau == 4));
    }

    #[test]
    fn w_f_is_the_best_evaluated_point_in_dgd() {
        let (parts, model) = setup(Case::ByLabel);
        let out = run(Case::ByLabel, TauPolicy::Adaptive, Mode::Dgd, &flat(0.01, 0.1, 3.0));
        let best = out.records.iter().filter_map(|r| r.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.f_w_f, best);
        assert!((model.global_loss(&out.w_f, &parts).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn parallel_run_is_identical() {
        let (parts, model) = setup(Case::Hybrid);
        let res = ResourceSpec::sgd_time(5.0);
        let mut cfg = pcfg(TauPolicy::Adaptive, Mode::Sgd { batch_size: 6 });
        let a = run_protocol(&cfg, &parts, &model, &res, meter_for(&res, 1).as_mut()).unwrap();
        cfg.parallel = true;
        let b = run_protocol(&cfg, &parts, &model, &res, meter_for(&res, 1).as_mut()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_order_messages_are_rejected() {
        let (parts, model) = setup(Case::Random);
        let res = flat(0.01, 0.1, 3.0);
        let mut agg = Aggregator::new(
            ControlConfig::default(),
            TauPolicy::Adaptive,
            Mode::Dgd,
            ParamVector::zeros(4),
            partition_sizes(&parts),
            &res,
        )
        .unwrap();
        assert!(matches!(agg.receive(&[], &[0.1]), Err(Error::Protocol(_))));
        assert!(agg.final_downlink().is_err());
        let down = agg.downlink().unwrap();
        assert!(agg.downlink().is_err());

        let mut edge = EdgeNode::new(NodeState::new(0, ParamVector::zeros(4), Mode::Dgd, &parts[0], 0));
        assert!(edge.send(vec![0.0]).is_err());
        assert!(edge.local_step(&parts[0], &model, 0.01).is_err());
        edge.receive(&down, &parts[0], &model).unwrap();
        assert!(edge.receive(&down, &parts[0], &model).is_err());
        edge.local_step(&parts[0], &model, 0.01).unwrap();
        assert!(edge.local_step(&parts[0], &model, 0.01).is_err());
        let up = edge.send(vec![0.01]).unwrap();
        assert!(up.report.is_none());
        // uplinks must cover every node
        assert!(matches!(agg.receive(&[up], &[0.1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn sgd_round_trip_uses_reports_with_w_f_losses() {
        let out = run(
            Case::Random,
            TauPolicy::Adaptive,
            Mode::Sgd { batch_size: 5 },
            &ResourceSpec::sgd_time(4.0),
        );
        assert!(out.records.iter().any(|r| r.flags.contains(&Flag::WfUpdated)));
        assert!(out.f_w_f.is_finite());
        let ts: Vec<u64> = out.records.iter().map(|r| r.t).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }
}
