//! Factor graph storage and the three Gaussian BP operations: belief update,
//! variable-to-factor messages and factor-to-variable messages.
//!
//! Messages live on the factor, one slot per neighbor and per direction, and
//! the last write wins. An edge that has never carried a message holds the
//! zero-information Gaussian. Variable beliefs are recomputed eagerly every
//! time a message into the variable is written.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{GbpError, Result};
use crate::exec;
use crate::factors::{FactorParams, MeasurementModel, DEFAULT_RELIN_THRESHOLD};
use crate::gaussian::{GaussianCanonical, GaussianMoments, DEFAULT_PIVOT_TOL};

/// Damping used for graphs with loops.
pub const DEFAULT_LOOPY_DAMPING: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FactorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Variable(VarId),
    Factor(FactorId),
}

/// Per-graph numerical settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    /// Factor-to-variable message damping `β ∈ (0, 1]`; 1 disables damping.
    pub damping: f64,
    pub pivot_tol: f64,
    /// Relinearize a factor once its neighbors' estimates move this far (∞-norm).
    pub relin_threshold: f64,
    /// Run synchronous rounds on the rayon pool (no effect without the `parallel` feature).
    pub parallel: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            damping: 1.0,
            pivot_tol: DEFAULT_PIVOT_TOL,
            relin_threshold: DEFAULT_RELIN_THRESHOLD,
            parallel: false,
        }
    }
}

/// A point estimate for every variable slot; `None` for removed or unknown slots.
pub type Assignment = Vec<Option<DVector<f64>>>;

#[derive(Debug, Clone)]
pub struct VariableNode {
    name: String,
    dim: usize,
    prior: Option<GaussianCanonical>,
    init: Option<DVector<f64>>,
    belief: GaussianCanonical,
    mean: Option<DVector<f64>>,
    prev_mean: Option<DVector<f64>>,
    adjacency: Vec<(FactorId, usize)>,
}

impl VariableNode {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn prior(&self) -> Option<&GaussianCanonical> {
        self.prior.as_ref()
    }
    pub fn init(&self) -> Option<&DVector<f64>> {
        self.init.as_ref()
    }
    pub fn belief(&self) -> &GaussianCanonical {
        &self.belief
    }
    /// Belief mean, `None` while the belief precision is singular.
    pub fn mean(&self) -> Option<&DVector<f64>> {
        self.mean.as_ref()
    }
    /// Best available point estimate: belief mean, else the initial estimate.
    pub fn estimate(&self) -> Option<&DVector<f64>> {
        self.mean.as_ref().or(self.init.as_ref())
    }
    /// Adjacent factors with this variable's slot index in each.
    pub fn adjacency(&self) -> &[(FactorId, usize)] {
        &self.adjacency
    }
}

#[derive(Debug, Clone)]
pub struct FactorNode {
    name: String,
    neighbors: Vec<VarId>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    model: MeasurementModel,
    params: Option<FactorParams>,
    linearization_point: Option<DVector<f64>>,
    gaussian: GaussianCanonical,
    to_var: Vec<GaussianCanonical>,
    from_var: Vec<GaussianCanonical>,
    relinearizations: usize,
}

impl FactorNode {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn neighbors(&self) -> &[VarId] {
        &self.neighbors
    }
    pub fn model(&self) -> &MeasurementModel {
        &self.model
    }
    pub fn params(&self) -> Option<&FactorParams> {
        self.params.as_ref()
    }
    /// Current Gaussian form over the concatenated neighbor state.
    pub fn gaussian(&self) -> &GaussianCanonical {
        &self.gaussian
    }
    pub fn linearization_point(&self) -> Option<&DVector<f64>> {
        self.linearization_point.as_ref()
    }
    pub fn relinearizations(&self) -> usize {
        self.relinearizations
    }
    /// Stored factor-to-variable message for a neighbor slot.
    pub fn message_to(&self, slot: usize) -> &GaussianCanonical {
        &self.to_var[slot]
    }
    /// Stored variable-to-factor message for a neighbor slot.
    pub fn message_from(&self, slot: usize) -> &GaussianCanonical {
        &self.from_var[slot]
    }
    pub fn slot_of(&self, v: VarId) -> Option<usize> {
        self.neighbors.iter().position(|n| *n == v)
    }
    pub fn is_unary(&self) -> bool {
        self.neighbors.len() == 1
    }

    fn relinearize_at(&mut self, x: Option<&DVector<f64>>) -> Result<()> {
        let lin = match x {
            Some(x) => self.model.linearize(x)?,
            None => {
                // No estimate yet: affine factors are exact anywhere, robust
                // scaling waits until an estimate exists.
                let total = self.dims.iter().sum();
                let mut plain = self.model.clone();
                plain.clear_robust();
                plain.linearize(&DVector::zeros(total))?
            }
        };
        self.gaussian = lin.gaussian;
        self.linearization_point = x.cloned();
        self.relinearizations += 1;
        Ok(())
    }

    fn current_estimate(&self, vars: &[Option<VariableNode>]) -> Option<DVector<f64>> {
        let total = self.dims.iter().sum();
        let mut x = DVector::zeros(total);
        for (k, v) in self.neighbors.iter().enumerate() {
            let est = vars[v.0].as_ref()?.estimate()?;
            x.rows_mut(self.offsets[k], self.dims[k]).copy_from(est);
        }
        Some(x)
    }

    /// Just-in-time relinearization. Returns whether the factor changed.
    fn maybe_relinearize(&mut self, vars: &[Option<VariableNode>], threshold: f64) -> Result<bool> {
        if !self.model.requires_relinearization() {
            return Ok(false);
        }
        let Some(x) = self.current_estimate(vars) else {
            return Ok(false);
        };
        let stale = match &self.linearization_point {
            None => true,
            Some(x0) => (&x - x0).amax() > threshold,
        };
        if stale {
            self.relinearize_at(Some(&x))?;
        }
        Ok(stale)
    }

    /// Undamped factor-to-variable message for `slot` from the current state.
    fn candidate(&self, slot: usize, tol: f64) -> GaussianCanonical {
        if self.neighbors.len() == 1 {
            return self.gaussian.clone();
        }
        if self.dims.len() == 2 && self.dims[0] == 1 && self.dims[1] == 1 {
            return self.scalar_pair_candidate(slot);
        }
        let mut g = self.gaussian.clone();
        for (k, msg) in self.from_var.iter().enumerate() {
            if k == slot {
                continue;
            }
            let (o, d) = (self.offsets[k], self.dims[k]);
            let mut eta = g.info.rows_mut(o, d);
            eta += &msg.info;
            let mut lam = g.precision.view_mut((o, o), (d, d));
            lam += &msg.precision;
        }
        let keep: Vec<usize> = (self.offsets[slot]..self.offsets[slot] + self.dims[slot]).collect();
        g.marginalize_with_tol(&keep, tol)
            .or_else(|_| self.gaussian.marginalize_with_tol(&keep, tol))
            .unwrap_or_else(|_| GaussianCanonical::zero(self.dims[slot]))
    }

    /// Closed form of [`candidate`](Self::candidate) for two scalar neighbors.
    fn scalar_pair_candidate(&self, slot: usize) -> GaussianCanonical {
        let o = 1 - slot;
        let (eta, lam) = (&self.gaussian.info, &self.gaussian.precision);
        let msg = &self.from_var[o];
        let scalar = |info: f64, prec: f64| GaussianCanonical {
            info: DVector::from_element(1, info),
            precision: DMatrix::from_element(1, 1, prec),
        };
        for (eta_o, lam_oo) in [
            (eta[o] + msg.info[0], lam[(o, o)] + msg.precision[(0, 0)]),
            (eta[o], lam[(o, o)]),
        ] {
            if lam_oo > 0.0 && lam_oo.is_finite() {
                let lam_so = lam[(slot, o)];
                return scalar(eta[slot] - lam_so * eta_o / lam_oo, lam[(slot, slot)] - lam_so * lam_so / lam_oo);
            }
        }
        GaussianCanonical::zero(1)
    }

    fn send(&mut self, slot: usize, beta: f64, tol: f64) -> Result<()> {
        let new = self.candidate(slot, tol);
        self.to_var[slot] = damp(&new, &self.to_var[slot], beta)?;
        Ok(())
    }
}

/// Canonical-form damping: `β·new + (1−β)·old` on both `η` and `Λ`.
pub fn damp(new: &GaussianCanonical, old: &GaussianCanonical, beta: f64) -> Result<GaussianCanonical> {
    new.blend(old, beta)
}

fn belief_of(var: &VariableNode, factors: &[Option<FactorNode>]) -> GaussianCanonical {
    let mut b = var
        .prior
        .clone()
        .unwrap_or_else(|| GaussianCanonical::zero(var.dim));
    for (f, slot) in &var.adjacency {
        if let Some(fac) = &factors[f.0] {
            b.accumulate(&fac.to_var[*slot]);
        }
    }
    b
}

fn outgoing_of(
    var: &VariableNode,
    factors: &[Option<FactorNode>],
    exclude: FactorId,
) -> GaussianCanonical {
    let mut m = var
        .prior
        .clone()
        .unwrap_or_else(|| GaussianCanonical::zero(var.dim));
    for (f, slot) in &var.adjacency {
        if *f == exclude {
            continue;
        }
        if let Some(fac) = &factors[f.0] {
            m.accumulate(&fac.to_var[*slot]);
        }
    }
    m
}

fn refresh(var: &mut VariableNode, factors: &[Option<FactorNode>], tol: f64) {
    var.belief = belief_of(var, factors);
    var.mean = var.belief.mean_with_tol(tol).ok();
}

/// Summary of a batch of message sends.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundStats {
    pub messages_sent: usize,
    pub relinearized: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    variables: Vec<Option<VariableNode>>,
    factors: Vec<Option<FactorNode>>,
    names: HashMap<String, NodeRef>,
    pub config: GraphConfig,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_config(config: GraphConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    // ----- construction and editing -----

    pub fn add_variable(
        &mut self,
        name: impl Into<String>,
        dim: usize,
        prior: Option<GaussianCanonical>,
        init: Option<DVector<f64>>,
    ) -> Result<VarId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(GbpError::DuplicateId(name));
        }
        if dim == 0 {
            return Err(GbpError::InvalidSpec(format!("variable `{name}` has dimension 0")));
        }
        if let Some(p) = &prior {
            self.check_prior(dim, p)?;
        }
        if let Some(x) = &init {
            if x.len() != dim {
                return Err(GbpError::DimensionMismatch { expected: dim, found: x.len() });
            }
        }
        let id = VarId(self.variables.len());
        let mut node = VariableNode {
            name: name.clone(),
            dim,
            prior,
            init,
            belief: GaussianCanonical::zero(dim),
            mean: None,
            prev_mean: None,
            adjacency: Vec::new(),
        };
        refresh(&mut node, &self.factors, self.config.pivot_tol);
        self.variables.push(Some(node));
        self.names.insert(name, NodeRef::Variable(id));
        Ok(id)
    }

    fn check_prior(&self, dim: usize, p: &GaussianCanonical) -> Result<()> {
        if p.dim() != dim {
            return Err(GbpError::DimensionMismatch { expected: dim, found: p.dim() });
        }
        p.to_moments_with_tol(self.config.pivot_tol)?;
        Ok(())
    }

    pub fn add_factor(
        &mut self,
        name: impl Into<String>,
        neighbors: &[VarId],
        model: MeasurementModel,
        params: Option<FactorParams>,
    ) -> Result<FactorId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(GbpError::DuplicateId(name));
        }
        if neighbors.is_empty() {
            return Err(GbpError::InvalidSpec(format!("factor `{name}` has no neighbors")));
        }
        let mut dims = Vec::with_capacity(neighbors.len());
        for (i, v) in neighbors.iter().enumerate() {
            if neighbors[..i].contains(v) {
                return Err(GbpError::InvalidSpec(format!("factor `{name}` repeats a neighbor")));
            }
            dims.push(self.var(*v)?.dim);
        }
        let total: usize = dims.iter().sum();
        if model.input_dim() != total {
            return Err(GbpError::DimensionMismatch { expected: total, found: model.input_dim() });
        }
        let offsets = dims
            .iter()
            .scan(0, |acc, d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        let mut node = FactorNode {
            name: name.clone(),
            neighbors: neighbors.to_vec(),
            to_var: dims.iter().map(|d| GaussianCanonical::zero(*d)).collect(),
            from_var: dims.iter().map(|d| GaussianCanonical::zero(*d)).collect(),
            dims,
            offsets,
            model,
            params,
            linearization_point: None,
            gaussian: GaussianCanonical::zero(total),
            relinearizations: 0,
        };
        let x = node.current_estimate(&self.variables);
        match x {
            Some(x) if node.model.requires_relinearization() => node.relinearize_at(Some(&x))?,
            _ if node.model.is_affine() => node.relinearize_at(None)?,
            _ => {
                return Err(GbpError::InvalidSpec(format!(
                    "nonlinear factor `{name}` needs initial estimates for all neighbors"
                )))
            }
        }
        let id = FactorId(self.factors.len());
        for (slot, v) in neighbors.iter().enumerate() {
            self.var_mut(*v)?.adjacency.push((id, slot));
        }
        self.factors.push(Some(node));
        self.names.insert(name, NodeRef::Factor(id));
        Ok(id)
    }

    /// Add a factor described by its serializable parameters.
    pub fn add_factor_params(
        &mut self,
        name: impl Into<String>,
        neighbors: &[VarId],
        params: FactorParams,
    ) -> Result<FactorId> {
        let dims = neighbors
            .iter()
            .map(|v| self.var(*v).map(|n| n.dim))
            .collect::<Result<Vec<_>>>()?;
        let model = params.to_model(&dims)?;
        self.add_factor(name, neighbors, model, Some(params))
    }

    pub fn set_prior(&mut self, v: VarId, prior: Option<GaussianCanonical>) -> Result<()> {
        let dim = self.var(v)?.dim;
        if let Some(p) = &prior {
            self.check_prior(dim, p)?;
        }
        self.var_mut(v)?.prior = prior;
        self.refresh_belief(v);
        Ok(())
    }

    pub fn set_init(&mut self, v: VarId, init: Option<DVector<f64>>) -> Result<()> {
        let dim = self.var(v)?.dim;
        if let Some(x) = &init {
            if x.len() != dim {
                return Err(GbpError::DimensionMismatch { expected: dim, found: x.len() });
            }
        }
        self.var_mut(v)?.init = init;
        Ok(())
    }

    pub fn set_damping(&mut self, beta: f64) -> Result<()> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(GbpError::InvalidBeta(beta));
        }
        self.config.damping = beta;
        Ok(())
    }

    /// Remove a factor; its neighbors' beliefs are recomputed.
    pub fn remove_factor(&mut self, f: FactorId) -> Result<()> {
        let node = self
            .factors
            .get_mut(f.0)
            .and_then(Option::take)
            .ok_or_else(|| GbpError::UnknownNode(format!("factor #{}", f.0)))?;
        self.names.remove(&node.name);
        for v in &node.neighbors {
            if let Some(var) = self.variables[v.0].as_mut() {
                var.adjacency.retain(|(g, _)| *g != f);
            }
            self.refresh_belief(*v);
        }
        Ok(())
    }

    /// Remove a variable together with every factor touching it.
    pub fn remove_variable(&mut self, v: VarId) -> Result<()> {
        let adjacent: Vec<FactorId> = self.var(v)?.adjacency.iter().map(|(f, _)| *f).collect();
        for f in adjacent {
            self.remove_factor(f)?;
        }
        let node = self.variables[v.0].take().expect("checked above");
        self.names.remove(&node.name);
        Ok(())
    }

    pub fn remove_node(&mut self, node: NodeRef) -> Result<()> {
        match node {
            NodeRef::Variable(v) => self.remove_variable(v),
            NodeRef::Factor(f) => self.remove_factor(f),
        }
    }

    /// Overwrite a stored factor-to-variable message (used to warm-start).
    pub fn seed_message(&mut self, f: FactorId, slot: usize, msg: GaussianCanonical) -> Result<()> {
        let fac = self.factor_mut(f)?;
        if slot >= fac.neighbors.len() || msg.dim() != fac.dims[slot] {
            return Err(GbpError::DimensionMismatch {
                expected: fac.dims.get(slot).copied().unwrap_or(0),
                found: msg.dim(),
            });
        }
        fac.to_var[slot] = msg;
        let v = fac.neighbors[slot];
        self.refresh_belief(v);
        Ok(())
    }

    // ----- lookup -----

    pub fn lookup(&self, name: &str) -> Option<NodeRef> {
        self.names.get(name).copied()
    }

    pub fn var_id(&self, name: &str) -> Result<VarId> {
        match self.lookup(name) {
            Some(NodeRef::Variable(v)) => Ok(v),
            _ => Err(GbpError::UnknownNode(name.to_string())),
        }
    }

    pub fn factor_id(&self, name: &str) -> Result<FactorId> {
        match self.lookup(name) {
            Some(NodeRef::Factor(f)) => Ok(f),
            _ => Err(GbpError::UnknownNode(name.to_string())),
        }
    }

    pub fn variable(&self, v: VarId) -> Option<&VariableNode> {
        self.variables.get(v.0).and_then(Option::as_ref)
    }

    pub fn factor(&self, f: FactorId) -> Option<&FactorNode> {
        self.factors.get(f.0).and_then(Option::as_ref)
    }

    fn var(&self, v: VarId) -> Result<&VariableNode> {
        self.variable(v)
            .ok_or_else(|| GbpError::UnknownNode(format!("variable #{}", v.0)))
    }

    fn var_mut(&mut self, v: VarId) -> Result<&mut VariableNode> {
        self.variables
            .get_mut(v.0)
            .and_then(Option::as_mut)
            .ok_or_else(|| GbpError::UnknownNode(format!("variable #{}", v.0)))
    }

    fn fac(&self, f: FactorId) -> Result<&FactorNode> {
        self.factor(f)
            .ok_or_else(|| GbpError::UnknownNode(format!("factor #{}", f.0)))
    }

    fn factor_mut(&mut self, f: FactorId) -> Result<&mut FactorNode> {
        self.factors
            .get_mut(f.0)
            .and_then(Option::as_mut)
            .ok_or_else(|| GbpError::UnknownNode(format!("factor #{}", f.0)))
    }

    /// Live variables in insertion order.
    pub fn variable_ids(&self) -> impl Iterator<Item = VarId> + '_ {
        self.variables
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().map(|_| VarId(i)))
    }

    /// Live factors in insertion order.
    pub fn factor_ids(&self) -> impl Iterator<Item = FactorId> + '_ {
        self.factors
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().map(|_| FactorId(i)))
    }

    pub fn variables(&self) -> impl Iterator<Item = (VarId, &VariableNode)> {
        self.variables
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().map(|v| (VarId(i), v)))
    }

    pub fn factors(&self) -> impl Iterator<Item = (FactorId, &FactorNode)> {
        self.factors
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().map(|f| (FactorId(i), f)))
    }

    pub fn num_variables(&self) -> usize {
        self.variables.iter().flatten().count()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.iter().flatten().count()
    }

    /// Number of (factor, variable) adjacencies; each carries two directed messages.
    pub fn num_edges(&self) -> usize {
        self.factors.iter().flatten().map(|f| f.neighbors.len()).sum()
    }

    /// Capacity of the variable slot table (live and removed).
    pub fn variable_slots(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_variables() == 0
    }

    /// Variables sharing a factor with `v`, in adjacency order, without duplicates.
    pub fn variable_neighbors(&self, v: VarId) -> Result<Vec<VarId>> {
        let mut out = Vec::new();
        for (f, _) in &self.var(v)?.adjacency {
            for u in &self.fac(*f)?.neighbors {
                if *u != v && !out.contains(u) {
                    out.push(*u);
                }
            }
        }
        Ok(out)
    }

    /// True when the bipartite factor graph has no cycles.
    pub fn is_forest(&self) -> bool {
        let nv = self.variables.len();
        let mut parent: Vec<usize> = (0..nv + self.factors.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (f, node) in self.factors() {
            for v in &node.neighbors {
                let (a, b) = (find(&mut parent, v.0), find(&mut parent, nv + f.0));
                if a == b {
                    return false;
                }
                parent[a] = b;
            }
        }
        true
    }

    /// 1.0 on forests, [`DEFAULT_LOOPY_DAMPING`] otherwise.
    pub fn default_damping(&self) -> f64 {
        if self.is_forest() {
            1.0
        } else {
            DEFAULT_LOOPY_DAMPING
        }
    }

    fn slot(&self, f: FactorId, v: VarId) -> Result<usize> {
        let fac = self.fac(f)?;
        self.var(v)?;
        fac.slot_of(v).ok_or_else(|| GbpError::NotAdjacent {
            factor: fac.name.clone(),
            variable: self.var(v).map(|n| n.name.clone()).unwrap_or_default(),
        })
    }

    // ----- the three BP operations -----

    fn refresh_belief(&mut self, v: VarId) {
        let tol = self.config.pivot_tol;
        let factors = &self.factors;
        if let Some(var) = self.variables.get_mut(v.0).and_then(Option::as_mut) {
            refresh(var, factors, tol);
        }
    }

    /// Belief = prior ⊗ all stored factor-to-variable messages into `v`.
    pub fn update_belief(&mut self, v: VarId) -> Result<GaussianCanonical> {
        self.var(v)?;
        self.refresh_belief(v);
        Ok(self.var(v)?.belief.clone())
    }

    /// Compute and store the variable-to-factor message `v → f`.
    pub fn variable_to_factor(&mut self, v: VarId, f: FactorId) -> Result<GaussianCanonical> {
        let slot = self.slot(f, v)?;
        self.send_to_factor(f, slot)
    }

    pub(crate) fn send_to_factor(&mut self, f: FactorId, slot: usize) -> Result<GaussianCanonical> {
        let v = self.fac(f)?.neighbors[slot];
        let msg = outgoing_of(self.var(v)?, &self.factors, f);
        self.factor_mut(f)?.from_var[slot] = msg.clone();
        Ok(msg)
    }

    /// Compute, damp and store the factor-to-variable message `f → v`,
    /// relinearizing the factor first if its neighbors have drifted.
    pub fn factor_to_variable(&mut self, f: FactorId, v: VarId) -> Result<GaussianCanonical> {
        let slot = self.slot(f, v)?;
        self.send_to_variable(f, slot)
    }

    pub(crate) fn send_to_variable(&mut self, f: FactorId, slot: usize) -> Result<GaussianCanonical> {
        let (beta, tol, thr) = (self.config.damping, self.config.pivot_tol, self.config.relin_threshold);
        let vars = &self.variables;
        let fac = self.factors[f.0]
            .as_mut()
            .ok_or_else(|| GbpError::UnknownNode(format!("factor #{}", f.0)))?;
        fac.maybe_relinearize(vars, thr)?;
        fac.send(slot, beta, tol)?;
        let (v, msg) = (fac.neighbors[slot], fac.to_var[slot].clone());
        self.refresh_belief(v);
        Ok(msg)
    }

    /// The undamped message `f → v` that would be sent now, without storing it.
    pub fn candidate_message(&self, f: FactorId, v: VarId) -> Result<GaussianCanonical> {
        let slot = self.slot(f, v)?;
        Ok(self.fac(f)?.candidate(slot, self.config.pivot_tol))
    }

    /// `‖η_cand − η_stored‖₂ + ‖Λ_cand − Λ_stored‖_F` for the edge `f → v`.
    pub fn residual_of(&self, f: FactorId, v: VarId) -> Result<f64> {
        let slot = self.slot(f, v)?;
        Ok(self.residual_at(f, slot))
    }

    pub(crate) fn residual_at(&self, f: FactorId, slot: usize) -> f64 {
        let fac = self.factors[f.0].as_ref().expect("live factor");
        fac.candidate(slot, self.config.pivot_tol).distance(&fac.to_var[slot])
    }

    /// Stored message `f → v`.
    pub fn message(&self, f: FactorId, v: VarId) -> Result<&GaussianCanonical> {
        let slot = self.slot(f, v)?;
        Ok(&self.fac(f)?.to_var[slot])
    }

    /// One two-phase round: every variable-to-factor message, then every
    /// factor-to-variable message, each computed from the state before its
    /// phase, then all beliefs. With `mask`, only variables flagged `true`
    /// send and receive.
    pub fn synchronous_round(&mut self, mask: Option<&[bool]>) -> Result<RoundStats> {
        let par = self.config.parallel;
        let (beta, tol, thr) = (self.config.damping, self.config.pivot_tol, self.config.relin_threshold);
        let active = |v: VarId| mask.is_none_or(|m| m.get(v.0).copied().unwrap_or(false));

        // variable → factor
        let outgoing: Vec<Vec<Option<GaussianCanonical>>> = {
            let vars = &self.variables;
            let factors = &self.factors;
            exec::map(par, factors, |i, f| match f {
                None => Vec::new(),
                Some(f) => f
                    .neighbors
                    .iter()
                    .map(|v| {
                        active(*v).then(|| {
                            outgoing_of(vars[v.0].as_ref().expect("live"), factors, FactorId(i))
                        })
                    })
                    .collect(),
            })
        };
        let mut sent = 0;
        for (f, msgs) in self.factors.iter_mut().zip(outgoing) {
            if let Some(f) = f {
                for (slot, m) in msgs.into_iter().enumerate() {
                    if let Some(m) = m {
                        f.from_var[slot] = m;
                        sent += 1;
                    }
                }
            }
        }

        // factor → variable
        let results: Vec<Result<(usize, bool)>> = {
            let vars = &self.variables;
            exec::map_mut(par, &mut self.factors, |_, f| {
                let Some(f) = f else { return Ok((0, false)) };
                let targets: Vec<usize> = (0..f.neighbors.len())
                    .filter(|k| active(f.neighbors[*k]))
                    .collect();
                if targets.is_empty() {
                    return Ok((0, false));
                }
                let relin = f.maybe_relinearize(vars, thr)?;
                let fresh: Vec<GaussianCanonical> =
                    targets.iter().map(|k| f.candidate(*k, tol)).collect();
                for (k, m) in targets.iter().zip(fresh) {
                    f.to_var[*k] = damp(&m, &f.to_var[*k], beta)?;
                }
                Ok((targets.len(), relin))
            })
        };
        let mut relinearized = 0;
        for r in results {
            let (n, relin) = r?;
            sent += n;
            relinearized += relin as usize;
        }

        // beliefs
        let factors = &self.factors;
        exec::map_mut(par, &mut self.variables, |i, v| {
            if let Some(v) = v {
                if active(VarId(i)) {
                    refresh(v, factors, tol);
                }
            }
        });
        Ok(RoundStats { messages_sent: sent, relinearized })
    }

    // ----- convergence and energy -----

    /// Remember current belief means for the next [`convergence_delta`](Self::convergence_delta).
    pub fn snapshot_means(&mut self) {
        for v in self.variables.iter_mut().flatten() {
            v.prev_mean = v.mean.clone();
        }
    }

    /// `max_v ‖μ_now − μ_prev‖_∞`; a variable without a defined mean now or
    /// at the snapshot contributes `+∞`.
    pub fn convergence_delta(&self) -> f64 {
        self.convergence_delta_over(None)
    }

    pub fn convergence_delta_over(&self, mask: Option<&[bool]>) -> f64 {
        let mut delta: f64 = 0.0;
        for (i, v) in self.variables.iter().enumerate() {
            let Some(v) = v else { continue };
            if mask.is_some_and(|m| !m.get(i).copied().unwrap_or(false)) {
                continue;
            }
            match (&v.mean, &v.prev_mean) {
                (Some(a), Some(b)) => delta = delta.max((a - b).amax()),
                _ => return f64::INFINITY,
            }
        }
        delta
    }

    /// Belief in moments form, or `None` while singular.
    pub fn belief_moments(&self, v: VarId) -> Option<GaussianMoments> {
        self.variable(v)?
            .belief
            .to_moments_with_tol(self.config.pivot_tol)
            .ok()
    }

    /// Belief means for all slots (`None` where undefined).
    pub fn belief_means(&self) -> Assignment {
        self.variables
            .iter()
            .map(|v| v.as_ref().and_then(|v| v.mean.clone()))
            .collect()
    }

    /// Best point estimate for every variable: belief mean, initial estimate, or zero.
    pub fn current_estimates(&self) -> Assignment {
        self.variables
            .iter()
            .map(|v| {
                v.as_ref()
                    .map(|v| v.estimate().cloned().unwrap_or_else(|| DVector::zeros(v.dim)))
            })
            .collect()
    }

    /// Sum of factor energies (Huber where configured) plus prior energies.
    pub fn total_energy(&self, x: &Assignment) -> Result<f64> {
        let get = |v: VarId| -> Result<&DVector<f64>> {
            let var = self.var(v)?;
            match x.get(v.0).and_then(Option::as_ref) {
                Some(val) if val.len() == var.dim => Ok(val),
                Some(val) => Err(GbpError::DimensionMismatch { expected: var.dim, found: val.len() }),
                None => Err(GbpError::MissingAssignment(var.name.clone())),
            }
        };
        let mut total = 0.0;
        for (id, var) in self.variables() {
            let xv = get(id)?;
            if let Some(p) = &var.prior {
                let mu = p.mean_with_tol(self.config.pivot_tol)?;
                let r = xv - mu;
                total += 0.5 * r.dot(&(&p.precision * &r));
            }
        }
        for (_, f) in self.factors() {
            let total_dim = f.dims.iter().sum();
            let mut xf = DVector::zeros(total_dim);
            for (k, v) in f.neighbors.iter().enumerate() {
                xf.rows_mut(f.offsets[k], f.dims[k]).copy_from(get(*v)?);
            }
            total += f.model.energy(&xf)?;
        }
        Ok(total)
    }

    /// Energy at [`current_estimates`](Self::current_estimates).
    pub fn energy_at_estimates(&self) -> Result<f64> {
        self.total_energy(&self.current_estimates())
    }

    /// Relinearize every factor that depends on its linearization point at `x`.
    pub fn relinearize_all(&mut self, x: &Assignment) -> Result<()> {
        for f in self.factors.iter_mut().flatten() {
            if !f.model.requires_relinearization() {
                continue;
            }
            let total = f.dims.iter().sum();
            let mut xf = DVector::zeros(total);
            for (k, v) in f.neighbors.iter().enumerate() {
                let val = x
                    .get(v.0)
                    .and_then(Option::as_ref)
                    .ok_or_else(|| GbpError::MissingAssignment(format!("variable #{}", v.0)))?;
                xf.rows_mut(f.offsets[k], f.dims[k]).copy_from(val);
            }
            f.relinearize_at(Some(&xf))?;
        }
        Ok(())
    }

    /// Re-check every factor against the just-in-time threshold.
    pub fn relinearize_stale(&mut self) -> Result<usize> {
        let thr = self.config.relin_threshold;
        let vars = &self.variables;
        let mut n = 0;
        for f in self.factors.iter_mut().flatten() {
            n += f.maybe_relinearize(vars, thr)? as usize;
        }
        Ok(n)
    }

    /// Dense joint precision block layout helper: `(offset, dim)` per live variable.
    pub(crate) fn layout(&self) -> (Vec<(VarId, usize, usize)>, usize) {
        let mut offset = 0;
        let mut out = Vec::new();
        for (id, v) in self.variables() {
            out.push((id, offset, v.dim));
            offset += v.dim;
        }
        (out, offset)
    }

    pub(crate) fn factor_blocks(&self, f: &FactorNode) -> Vec<(VarId, usize, usize)> {
        f.neighbors
            .iter()
            .enumerate()
            .map(|(k, v)| (*v, f.offsets[k], f.dims[k]))
            .collect()
    }
}

/// Row-major nested list of a matrix.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    crate::factors::matrix_to_rows(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::FactorParams;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn scalar_prior(eta: f64, lam: f64) -> GaussianCanonical {
        GaussianCanonical::new(dvector![eta], dmatrix![lam]).unwrap()
    }

    /// A unary `custom_linear` factor whose Gaussian is exactly (η, Λ) for scalar x.
    fn unary_message_factor(g: &mut FactorGraph, name: &str, v: VarId, eta: f64, lam: f64) -> FactorId {
        g.add_factor_params(
            name,
            &[v],
            FactorParams::CustomLinear {
                j: vec![vec![1.0]],
                d: vec![eta / lam],
                sigma_n: vec![vec![1.0 / lam]],
                huber_t: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn belief_examples() {
        let mut g = FactorGraph::new();
        let a = g.add_variable("a", 1, None, None).unwrap();
        assert!(g.update_belief(a).unwrap().is_zero());

        let b = g.add_variable("b", 1, Some(scalar_prior(3.0, 1.0)), None).unwrap();
        assert_eq!(g.update_belief(b).unwrap(), scalar_prior(3.0, 1.0));

        let c = g.add_variable("c", 1, Some(scalar_prior(0.0, 1.0)), None).unwrap();
        let f = unary_message_factor(&mut g, "m", c, 2.0, 1.0);
        g.factor_to_variable(f, c).unwrap();
        let belief = g.update_belief(c).unwrap();
        assert_relative_eq!(belief.info, dvector![2.0], epsilon = 1e-12);
        assert_relative_eq!(belief.precision, dmatrix![2.0], epsilon = 1e-12);
        assert_relative_eq!(g.variable(c).unwrap().mean().unwrap()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unknown_node_and_adjacency_errors() {
        let mut g = FactorGraph::new();
        let a = g.add_variable("a", 1, None, None).unwrap();
        let b = g.add_variable("b", 1, None, None).unwrap();
        let f = unary_message_factor(&mut g, "f", a, 1.0, 1.0);
        assert!(matches!(g.update_belief(VarId(99)), Err(GbpError::UnknownNode(_))));
        assert!(matches!(g.variable_to_factor(b, f), Err(GbpError::NotAdjacent { .. })));
        assert!(matches!(g.factor_to_variable(f, b), Err(GbpError::NotAdjacent { .. })));
        assert!(matches!(g.add_variable("a", 1, None, None), Err(GbpError::DuplicateId(_))));
    }

    #[test]
    fn variable_to_factor_examples() {
        let mut g = FactorGraph::new();
        let lone = g.add_variable("lone", 1, None, None).unwrap();
        let other = g.add_variable("other", 1, None, None).unwrap();
        let f = g
            .add_factor_params("s", &[lone, other], FactorParams::Smooth1d { sigma: 1.0, huber_t: None })
            .unwrap();
        assert!(g.variable_to_factor(lone, f).unwrap().is_zero());

        let p = g.add_variable("p", 1, Some(scalar_prior(0.5, 2.0)), None).unwrap();
        let f2 = g
            .add_factor_params("s2", &[p, other], FactorParams::Smooth1d { sigma: 1.0, huber_t: None })
            .unwrap();
        assert_eq!(g.variable_to_factor(p, f2).unwrap(), scalar_prior(0.5, 2.0));

        // prior (0,1) + f1 (1,1) + f2 (4,2); message to f2 excludes f2: (1, 2).
        let v = g.add_variable("v", 1, Some(scalar_prior(0.0, 1.0)), None).unwrap();
        let f1 = unary_message_factor(&mut g, "f1", v, 1.0, 1.0);
        let f2 = unary_message_factor(&mut g, "f2", v, 4.0, 2.0);
        g.factor_to_variable(f1, v).unwrap();
        g.factor_to_variable(f2, v).unwrap();
        let m = g.variable_to_factor(v, f2).unwrap();
        assert_relative_eq!(m.info, dvector![1.0], epsilon = 1e-12);
        assert_relative_eq!(m.precision, dmatrix![2.0], epsilon = 1e-12);
    }

    #[test]
    fn factor_to_variable_examples() {
        let mut g = FactorGraph::new();
        let x1 = g.add_variable("x1", 1, None, None).unwrap();
        let u = unary_message_factor(&mut g, "u", x1, 3.0, 2.0);
        let m = g.factor_to_variable(u, x1).unwrap();
        assert_eq!(&m, g.factor(u).unwrap().gaussian());

        // x₂ − x₁ ~ N(1, 1) with incoming x₁ ~ (η=0, Λ=1):
        // joint Λ = [[2,−1],[−1,1]], η = [−1, 1]; Schur: Λ' = 1 − 1/2 = 1/2,
        // η' = 1 − (−1)(−1)/2 = 1/2, so μ = 1.
        let mut g = FactorGraph::new();
        let x1 = g.add_variable("x1", 1, Some(scalar_prior(0.0, 1.0)), None).unwrap();
        let x2 = g.add_variable("x2", 1, None, None).unwrap();
        let f = g
            .add_factor_params(
                "rel",
                &[x1, x2],
                FactorParams::CustomLinear {
                    j: vec![vec![-1.0, 1.0]],
                    d: vec![1.0],
                    sigma_n: vec![vec![1.0]],
                    huber_t: None,
                },
            )
            .unwrap();
        g.variable_to_factor(x1, f).unwrap();
        let m = g.factor_to_variable(f, x2).unwrap();
        assert_relative_eq!(m.precision, dmatrix![0.5], epsilon = 1e-12);
        assert_relative_eq!(m.to_moments().unwrap().mean, dvector![1.0], epsilon = 1e-12);
        let again = g.factor_to_variable(f, x2).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn underconstrained_sends_zero_information() {
        let mut g = FactorGraph::new();
        let a = g.add_variable("a", 1, None, None).unwrap();
        let b = g.add_variable("b", 1, None, None).unwrap();
        let f = g
            .add_factor_params("s", &[a, b], FactorParams::Smooth1d { sigma: 1.0, huber_t: None })
            .unwrap();
        assert!(g.factor_to_variable(f, b).unwrap().is_zero());
    }

    #[test]
    fn damping_applies_to_factor_messages() {
        let mut g = FactorGraph::new();
        let v = g.add_variable("v", 1, None, None).unwrap();
        let f = unary_message_factor(&mut g, "f", v, 2.0, 2.0);
        g.set_damping(0.5).unwrap();
        let m = g.factor_to_variable(f, v).unwrap();
        assert_relative_eq!(m.info, dvector![1.0], epsilon = 1e-12);
        assert_relative_eq!(m.precision, dmatrix![1.0], epsilon = 1e-12);
        assert!(matches!(g.set_damping(0.0), Err(GbpError::InvalidBeta(_))));
    }

    #[test]
    fn energy_examples() {
        let mut g = FactorGraph::new();
        let v = g.add_variable("v", 1, Some(scalar_prior(0.0, 1.0)), None).unwrap();
        assert_relative_eq!(g.total_energy(&vec![Some(dvector![2.0])]).unwrap(), 2.0);
        assert_eq!(g.total_energy(&vec![Some(dvector![0.0])]).unwrap(), 0.0);
        assert!(matches!(g.total_energy(&vec![None]), Err(GbpError::MissingAssignment(_))));
        let _ = v;
    }

    #[test]
    fn residual_examples() {
        let mut g = FactorGraph::new();
        let v = g.add_variable("v", 1, None, None).unwrap();
        let f = unary_message_factor(&mut g, "f", v, 3.0, 4.0);
        // stored zero, candidate (3, 4): 3 + 4
        assert_relative_eq!(g.residual_of(f, v).unwrap(), 7.0, epsilon = 1e-12);
        g.factor_to_variable(f, v).unwrap();
        assert_eq!(g.residual_of(f, v).unwrap(), 0.0);
    }

    #[test]
    fn convergence_delta_examples() {
        let mut g = FactorGraph::new();
        let a = g.add_variable("a", 1, Some(scalar_prior(0.0, 1.0)), None).unwrap();
        g.add_variable("b", 1, Some(scalar_prior(1.0, 1.0)), None).unwrap();
        g.snapshot_means();
        assert_eq!(g.convergence_delta(), 0.0);
        g.set_prior(a, Some(scalar_prior(0.25, 1.0))).unwrap();
        assert_relative_eq!(g.convergence_delta(), 0.25);
        g.add_variable("c", 1, None, None).unwrap();
        assert_eq!(g.convergence_delta(), f64::INFINITY);
    }

    #[test]
    fn removal_updates_neighbors() {
        let mut g = FactorGraph::new();
        let v = g.add_variable("v", 1, None, None).unwrap();
        let f = unary_message_factor(&mut g, "f", v, 1.0, 1.0);
        g.factor_to_variable(f, v).unwrap();
        assert!(g.variable(v).unwrap().mean().is_some());
        g.remove_factor(f).unwrap();
        assert!(g.variable(v).unwrap().belief().is_zero());
        assert!(g.lookup("f").is_none());
        g.remove_variable(v).unwrap();
        assert_eq!(g.num_variables(), 0);
    }

    #[test]
    fn forest_detection() {
        let mut g = FactorGraph::new();
        let a = g.add_variable("a", 1, None, None).unwrap();
        let b = g.add_variable("b", 1, None, None).unwrap();
        let s = FactorParams::Smooth1d { sigma: 1.0, huber_t: None };
        g.add_factor_params("ab", &[a, b], s.clone()).unwrap();
        assert!(g.is_forest());
        g.add_factor_params("ab2", &[a, b], s).unwrap();
        assert!(!g.is_forest());
        assert_eq!(g.default_damping(), DEFAULT_LOOPY_DAMPING);
    }
}
