//! Message-passing schedules.
//!
//! Every schedule is built on the same per-edge send primitives, so any mix
//! of them drives the graph toward the same fixed point. A [`Scheduler`] holds
//! the per-run state a policy needs (random stream, round-robin cursor,
//! residual priority queue).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GbpError, Result};
use crate::factor_graph::{FactorGraph, FactorId, NodeRef, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Synchronous,
    Random,
    Sweep,
    #[serde(alias = "round-robin")]
    RoundRobin,
    Residual,
    Attention,
}

impl std::str::FromStr for ScheduleKind {
    type Err = GbpError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synchronous" => ScheduleKind::Synchronous,
            "random" => ScheduleKind::Random,
            "sweep" => ScheduleKind::Sweep,
            "round-robin" | "round_robin" => ScheduleKind::RoundRobin,
            "residual" => ScheduleKind::Residual,
            "attention" => ScheduleKind::Attention,
            other => return Err(GbpError::InvalidPolicy(format!("unknown schedule `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Focus {
    pub id: String,
    pub radius: usize,
}

/// Serializable schedule policy: `{kind, seed?, order?, focus?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePolicy {
    pub kind: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<Focus>,
}

impl SchedulePolicy {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            kind,
            seed: None,
            order: None,
            focus: None,
        }
    }

    pub fn synchronous() -> Self {
        Self::new(ScheduleKind::Synchronous)
    }

    pub fn random(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..Self::new(ScheduleKind::Random)
        }
    }

    pub fn attention(focus: impl Into<String>, radius: usize) -> Self {
        Self {
            focus: Some(Focus {
                id: focus.into(),
                radius,
            }),
            ..Self::new(ScheduleKind::Attention)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SendKind {
    FactorToVariable,
    VariableToFactor,
    NodeBroadcast,
}

/// One message send (or a node broadcast) in a schedule's event stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendEvent {
    pub kind: SendKind,
    pub from: NodeRef,
    pub to: Option<NodeRef>,
}

/// Outcome of one schedule step or node send.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub messages_sent: usize,
    pub convergence_delta: f64,
}

type Log<'a> = Option<&'a mut Vec<SendEvent>>;

fn record(log: &mut Log<'_>, ev: SendEvent) {
    if let Some(l) = log.as_deref_mut() {
        l.push(ev);
    }
}

fn send_v2f(g: &mut FactorGraph, f: FactorId, slot: usize, log: &mut Log<'_>) -> Result<()> {
    g.send_to_factor(f, slot)?;
    let v = g.factor(f).expect("live").neighbors()[slot];
    record(
        log,
        SendEvent {
            kind: SendKind::VariableToFactor,
            from: NodeRef::Variable(v),
            to: Some(NodeRef::Factor(f)),
        },
    );
    Ok(())
}

fn send_f2v(g: &mut FactorGraph, f: FactorId, slot: usize, log: &mut Log<'_>) -> Result<()> {
    g.send_to_variable(f, slot)?;
    let v = g.factor(f).expect("live").neighbors()[slot];
    record(
        log,
        SendEvent {
            kind: SendKind::FactorToVariable,
            from: NodeRef::Factor(f),
            to: Some(NodeRef::Variable(v)),
        },
    );
    Ok(())
}

/// Node click: `v` absorbs its local unary evidence and inbox, messages every
/// adjacent factor, and each of those factors messages its other neighbors.
/// Returns the number of messages sent.
fn node_send_inner(g: &mut FactorGraph, v: VarId, log: &mut Log<'_>) -> Result<usize> {
    let adjacency = g
        .variable(v)
        .ok_or_else(|| GbpError::UnknownNode(format!("variable #{}", v.0)))?
        .adjacency()
        .to_vec();
    record(
        log,
        SendEvent {
            kind: SendKind::NodeBroadcast,
            from: NodeRef::Variable(v),
            to: None,
        },
    );
    let mut sent = 0;
    for (f, slot) in &adjacency {
        if g.factor(*f).expect("live").is_unary() {
            send_f2v(g, *f, *slot, log)?;
            sent += 1;
        }
    }
    g.update_belief(v)?;
    for (f, slot) in &adjacency {
        send_v2f(g, *f, *slot, log)?;
        sent += 1;
    }
    for (f, slot) in &adjacency {
        let arity = g.factor(*f).expect("live").neighbors().len();
        for k in (0..arity).filter(|k| k != slot) {
            send_f2v(g, *f, k, log)?;
            sent += 1;
        }
    }
    Ok(sent)
}

/// Fire a node click on `v` and report the resulting belief movement.
pub fn node_send(g: &mut FactorGraph, v: VarId) -> Result<StepReport> {
    g.snapshot_means();
    let messages_sent = node_send_inner(g, v, &mut None)?;
    Ok(StepReport {
        messages_sent,
        convergence_delta: g.convergence_delta(),
    })
}

/// Every live directed factor→variable edge as `(factor, slot)`, in factor order.
fn directed_edges(g: &FactorGraph) -> Vec<(FactorId, usize)> {
    g.factors()
        .flat_map(|(f, node)| (0..node.neighbors().len()).map(move |k| (f, k)))
        .collect()
}

/// Edges with their current residual, highest first; ties by (factor, variable) id.
pub fn residual_queue_top(g: &FactorGraph, k: usize) -> Vec<(FactorId, VarId, f64)> {
    let mut all: Vec<(FactorId, VarId, f64)> = directed_edges(g)
        .into_iter()
        .map(|(f, slot)| {
            let v = g.factor(f).expect("live").neighbors()[slot];
            (f, v, g.residual_at(f, slot))
        })
        .collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

/// Variables within `radius` hops of `focus` (hops through shared factors).
pub fn k_hop_ball(g: &FactorGraph, focus: VarId, radius: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; g.variable_slots()];
    let mut queue = VecDeque::from([(focus, 0usize)]);
    g.variable(focus)
        .ok_or_else(|| GbpError::UnknownNode(format!("variable #{}", focus.0)))?;
    mask[focus.0] = true;
    while let Some((v, d)) = queue.pop_front() {
        if d == radius {
            continue;
        }
        for u in g.variable_neighbors(v)? {
            if !mask[u.0] {
                mask[u.0] = true;
                queue.push_back((u, d + 1));
            }
        }
    }
    Ok(mask)
}

/// Default sweep order: per connected component, a depth-first postorder
/// from its first variable, so the forward pass runs leaves to root and the
/// reverse pass root to leaves.
pub fn default_sweep_order(g: &FactorGraph) -> Vec<VarId> {
    let mut seen = vec![false; g.variable_slots()];
    let mut order = Vec::with_capacity(g.num_variables());
    for root in g.variable_ids() {
        if seen[root.0] {
            continue;
        }
        seen[root.0] = true;
        // iterative postorder
        let mut stack: Vec<(VarId, Vec<VarId>, usize)> =
            vec![(root, g.variable_neighbors(root).unwrap_or_default(), 0)];
        while let Some((v, children, next)) = stack.last_mut() {
            if *next < children.len() {
                let c = children[*next];
                *next += 1;
                if !seen[c.0] {
                    seen[c.0] = true;
                    let nb = g.variable_neighbors(c).unwrap_or_default();
                    stack.push((c, nb, 0));
                }
            } else {
                order.push(*v);
                stack.pop();
            }
        }
    }
    order
}

#[derive(Debug, Clone, Copy)]
struct QueueEntry {
    residual: f64,
    factor: FactorId,
    var: VarId,
    slot: usize,
    version: u64,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for QueueEntry {}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry {
    // max-heap: larger residual first, then smaller (factor, variable) id
    fn cmp(&self, other: &Self) -> Ordering {
        self.residual
            .total_cmp(&other.residual)
            .then(other.factor.cmp(&self.factor))
            .then(other.var.cmp(&self.var))
            .then(self.version.cmp(&other.version))
    }
}

#[derive(Debug, Default)]
struct ResidualQueue {
    heap: BinaryHeap<QueueEntry>,
    versions: HashMap<(FactorId, usize), u64>,
    edges: usize,
}

impl ResidualQueue {
    fn push(&mut self, g: &FactorGraph, f: FactorId, slot: usize) {
        let version = self.versions.entry((f, slot)).or_insert(0);
        *version += 1;
        self.heap.push(QueueEntry {
            residual: g.residual_at(f, slot),
            factor: f,
            var: g.factor(f).expect("live").neighbors()[slot],
            slot,
            version: *version,
        });
    }

    fn pop(&mut self) -> Option<QueueEntry> {
        while let Some(e) = self.heap.pop() {
            if self.versions.get(&(e.factor, e.slot)) == Some(&e.version) {
                return Some(e);
            }
        }
        None
    }
}

fn policy_order(policy: &SchedulePolicy, g: &FactorGraph) -> Result<Vec<VarId>> {
    match &policy.order {
        Some(names) => names.iter().map(|n| g.var_id(n)).collect(),
        None => Ok(default_sweep_order(g)),
    }
}

/// Runtime state for a [`SchedulePolicy`].
#[derive(Debug)]
pub struct Scheduler {
    policy: SchedulePolicy,
    rng: ChaCha8Rng,
    cursor: usize,
    queue: Option<ResidualQueue>,
    log: Option<Vec<SendEvent>>,
}

impl Scheduler {
    pub fn new(policy: SchedulePolicy) -> Result<Self> {
        if policy.kind == ScheduleKind::Attention && policy.focus.is_none() {
            return Err(GbpError::InvalidPolicy("attention needs a focus".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(policy.seed.unwrap_or(0));
        Ok(Self {
            policy,
            rng,
            cursor: 0,
            queue: None,
            log: None,
        })
    }

    /// Record every send into an event log (see [`events`](Self::events)).
    pub fn with_event_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn events(&self) -> &[SendEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn policy(&self) -> &SchedulePolicy {
        &self.policy
    }

    /// Drop cached residuals after the graph structure changed.
    pub fn invalidate(&mut self) {
        self.queue = None;
    }

    /// Variables whose beliefs a step may change (`None` = all).
    pub fn scope(&self, g: &FactorGraph) -> Result<Option<Vec<bool>>> {
        match (&self.policy.kind, &self.policy.focus) {
            (ScheduleKind::Attention, Some(focus)) => {
                Ok(Some(k_hop_ball(g, g.var_id(&focus.id)?, focus.radius)?))
            }
            _ => Ok(None),
        }
    }

    /// Number of steps that make up one full round for convergence checks.
    pub fn steps_per_round(&self, g: &FactorGraph) -> usize {
        match self.policy.kind {
            ScheduleKind::RoundRobin => g.num_variables().max(1),
            ScheduleKind::Residual => g.num_edges().max(1),
            _ => 1,
        }
    }

    /// One policy-defined step, reporting the belief movement it caused.
    pub fn step(&mut self, g: &mut FactorGraph) -> Result<StepReport> {
        let scope = self.scope(g)?;
        g.snapshot_means();
        let messages_sent = self.step_inner(g)?;
        Ok(StepReport {
            messages_sent,
            convergence_delta: g.convergence_delta_over(scope.as_deref()),
        })
    }

    /// One full round (see [`steps_per_round`](Self::steps_per_round)).
    pub fn round(&mut self, g: &mut FactorGraph) -> Result<StepReport> {
        let scope = self.scope(g)?;
        g.snapshot_means();
        let mut messages_sent = 0;
        for _ in 0..self.steps_per_round(g) {
            messages_sent += self.step_inner(g)?;
        }
        Ok(StepReport {
            messages_sent,
            convergence_delta: g.convergence_delta_over(scope.as_deref()),
        })
    }

    fn step_inner(&mut self, g: &mut FactorGraph) -> Result<usize> {
        if g.num_variables() == 0 {
            return Err(GbpError::EmptyGraph);
        }
        let mut log = self.log.as_mut();
        match self.policy.kind {
            ScheduleKind::Synchronous => Ok(g.synchronous_round(None)?.messages_sent),
            ScheduleKind::Attention => {
                let focus = self.policy.focus.as_ref().expect("validated");
                let mask = k_hop_ball(g, g.var_id(&focus.id)?, focus.radius)?;
                Ok(g.synchronous_round(Some(&mask))?.messages_sent)
            }
            ScheduleKind::Random => {
                let edges = directed_edges(g);
                let mut sent = 0;
                for _ in 0..edges.len() {
                    let (f, slot) = edges[self.rng.random_range(0..edges.len())];
                    let arity = g.factor(f).expect("live").neighbors().len();
                    for k in (0..arity).filter(|k| *k != slot) {
                        send_v2f(g, f, k, &mut log)?;
                        sent += 1;
                    }
                    send_f2v(g, f, slot, &mut log)?;
                    sent += 1;
                }
                Ok(sent)
            }
            ScheduleKind::Sweep => {
                let order = policy_order(&self.policy, g)?;
                let mut sent = 0;
                for v in order.iter().chain(order.iter().rev()) {
                    sent += node_send_inner(g, *v, &mut log)?;
                }
                Ok(sent)
            }
            ScheduleKind::RoundRobin => {
                let order = policy_order(&self.policy, g)?;
                let v = order[self.cursor % order.len()];
                self.cursor = (self.cursor + 1) % order.len();
                node_send_inner(g, v, &mut log)
            }
            ScheduleKind::Residual => {
                let mut sent = 0;
                let stale = self
                    .queue
                    .as_ref()
                    .is_none_or(|q| q.edges != g.num_edges());
                if stale {
                    let edges = directed_edges(g);
                    for (f, slot) in &edges {
                        send_v2f(g, *f, *slot, &mut log)?;
                        sent += 1;
                    }
                    let mut q = ResidualQueue {
                        edges: edges.len(),
                        ..ResidualQueue::default()
                    };
                    for (f, slot) in edges {
                        q.push(g, f, slot);
                    }
                    self.queue = Some(q);
                }
                let q = self.queue.as_mut().expect("initialized");
                let Some(top) = q.pop() else { return Ok(sent) };
                send_f2v(g, top.factor, top.slot, &mut log)?;
                sent += 1;
                let arity = g.factor(top.factor).expect("live").neighbors().len();
                for k in 0..arity {
                    q.push(g, top.factor, k);
                }
                let adjacency = g.variable(top.var).expect("live").adjacency().to_vec();
                for (f, slot) in adjacency {
                    if f == top.factor {
                        continue;
                    }
                    send_v2f(g, f, slot, &mut log)?;
                    sent += 1;
                    let arity = g.factor(f).expect("live").neighbors().len();
                    for k in (0..arity).filter(|k| *k != slot) {
                        q.push(g, f, k);
                    }
                }
                Ok(sent)
            }
        }
    }
}

/// Convenience: one step of `policy` on `g` with a throwaway scheduler.
pub fn step(g: &mut FactorGraph, policy: &SchedulePolicy) -> Result<StepReport> {
    Scheduler::new(policy.clone())?.step(g)
}

/// Per-round trace row of a [`solve`] run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub iter: usize,
    pub messages_sent: usize,
    pub delta: f64,
    pub total_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSummary {
    pub rounds: usize,
    pub converged: bool,
    pub final_delta: f64,
    pub trace: Vec<RoundRecord>,
}

/// Run full rounds until the round delta drops below `tol` or `max_rounds` is hit.
pub fn solve(
    g: &mut FactorGraph,
    scheduler: &mut Scheduler,
    max_rounds: usize,
    tol: f64,
) -> Result<SolveSummary> {
    solve_with(g, scheduler, max_rounds, tol, false)
}

/// As [`solve`], additionally recording the total energy of every round.
pub fn solve_traced(
    g: &mut FactorGraph,
    scheduler: &mut Scheduler,
    max_rounds: usize,
    tol: f64,
) -> Result<SolveSummary> {
    solve_with(g, scheduler, max_rounds, tol, true)
}

fn solve_with(
    g: &mut FactorGraph,
    scheduler: &mut Scheduler,
    max_rounds: usize,
    tol: f64,
    energy: bool,
) -> Result<SolveSummary> {
    let mut trace = Vec::new();
    let mut delta = f64::INFINITY;
    for iter in 1..=max_rounds {
        let r = scheduler.round(g)?;
        delta = r.convergence_delta;
        trace.push(RoundRecord {
            iter,
            messages_sent: r.messages_sent,
            delta,
            total_energy: if energy { g.energy_at_estimates()? } else { f64::NAN },
        });
        if delta < tol {
            return Ok(SolveSummary {
                rounds: iter,
                converged: true,
                final_delta: delta,
                trace,
            });
        }
    }
    Ok(SolveSummary {
        rounds: max_rounds,
        converged: false,
        final_delta: delta,
        trace,
    })
}
