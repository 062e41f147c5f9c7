//! Stateful command/event protocol for interactive sessions.
//!
//! Every frame is one JSON document carrying `"v": 1`.
//!
//! Command: `{v, request_id, op, session?, args?}`.
//! Event: `{v, request_id, status, session, state_delta, messages_sent, delta,
//! total_energy, state?, removed?, error?}`.
//!
//! `state_delta` lists only variables whose belief changed (bitwise) since the
//! previous event of the same session; a `node_send` also reports the clicked
//! node, whose belief it recomputes. Beliefs without a defined mean are
//! reported as `{mean: null, cov: null}`.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::GbpError;
use crate::factor_graph::{FactorGraph, NodeRef, VarId};
use crate::factors::matrix_from_rows;
use crate::gaussian::GaussianCanonical;
use crate::json::{moments_value, FactorJson, PriorJson, VariableJson};
use crate::problems;
use crate::schedules::{node_send, SchedulePolicy, Scheduler};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub v: u64,
    #[serde(default)]
    pub request_id: Value,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub v: u64,
    pub request_id: Value,
    pub status: String,
    pub session: Option<String>,
    pub state_delta: Map<String, Value>,
    pub messages_sent: usize,
    /// `null` when no finite belief movement is defined.
    pub delta: Option<f64>,
    pub total_energy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
}

impl Event {
    fn ok(request_id: Value, session: Option<String>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            request_id,
            status: "ok".into(),
            session,
            state_delta: Map::new(),
            messages_sent: 0,
            delta: None,
            total_energy: None,
            state: None,
            removed: Vec::new(),
            error: None,
        }
    }

    fn error(request_id: Value, session: Option<String>, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: "error".into(),
            error: Some(ErrorInfo {
                code: code.into(),
                message: message.into(),
            }),
            ..Self::ok(request_id, session)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Protocol-level failure: an error code plus message.
#[derive(Debug)]
struct Failure {
    code: &'static str,
    message: String,
}

impl Failure {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<GbpError> for Failure {
    fn from(e: GbpError) -> Self {
        let code = match &e {
            GbpError::UnknownNode(_) => "UnknownNode",
            GbpError::DuplicateId(_) => "DuplicateId",
            GbpError::InvalidPolicy(_) => "InvalidPolicy",
            GbpError::InvalidBeta(_) => "InvalidBeta",
            GbpError::EmptyGraph => "EmptyGraph",
            GbpError::Json(_) | GbpError::InvalidSpec(_) | GbpError::DimensionMismatch { .. } => "InvalidArgs",
            _ => "EngineError",
        };
        Self::new(code, e.to_string())
    }
}

fn args<T: for<'de> Deserialize<'de>>(v: &Value) -> Result<T, Failure> {
    let v = if v.is_null() { Value::Object(Map::new()) } else { v.clone() };
    serde_json::from_value(v).map_err(|e| Failure::new("InvalidArgs", e.to_string()))
}

#[derive(Deserialize)]
struct IdArgs {
    id: String,
}

#[derive(Deserialize)]
struct PresetArgs {
    name: String,
}

#[derive(Deserialize)]
struct PriorArgs {
    id: String,
    prior: Option<PriorJson>,
}

#[derive(Deserialize)]
struct DampingArgs {
    beta: f64,
}

#[derive(Deserialize, Default)]
struct StepArgs {
    #[serde(default)]
    count: Option<usize>,
}

/// One interactive session: a graph, a schedule and the last reported beliefs.
#[derive(Debug)]
pub struct Session {
    graph: FactorGraph,
    scheduler: Scheduler,
    preset: Option<String>,
    reported: HashMap<String, GaussianCanonical>,
}

impl Session {
    fn new() -> Self {
        Self {
            graph: FactorGraph::new(),
            scheduler: Scheduler::new(SchedulePolicy::synchronous()).expect("valid"),
            preset: None,
            reported: HashMap::new(),
        }
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn policy(&self) -> &SchedulePolicy {
        self.scheduler.policy()
    }

    fn load(&mut self, name: &str) -> Result<(), Failure> {
        self.graph = problems::preset(name)?;
        self.scheduler = Scheduler::new(self.scheduler.policy().clone())?;
        self.preset = Some(name.to_string());
        Ok(())
    }

    fn var(&self, id: &str) -> Result<VarId, Failure> {
        match self.graph.lookup(id) {
            Some(NodeRef::Variable(v)) => Ok(v),
            _ => Err(Failure::new("UnknownNode", format!("no variable `{id}`"))),
        }
    }

    fn apply(&mut self, op: &str, a: &Value, ev: &mut Event) -> Result<Option<VarId>, Failure> {
        let mut clicked = None;
        match op {
            "load_preset" => {
                let p: PresetArgs = args(a)?;
                self.load(&p.name)?;
            }
            "reset" => match self.preset.clone() {
                Some(name) => self.load(&name)?,
                None => {
                    self.graph = FactorGraph::new();
                    self.scheduler.invalidate();
                }
            },
            "add_variable" => {
                let v: VariableJson = args(a)?;
                let prior = v
                    .prior
                    .map(|p| GaussianCanonical::new(DVector::from_vec(p.eta), matrix_from_rows(&p.lambda)?))
                    .transpose()?;
                self.graph.add_variable(v.id, v.dim, prior, v.init.map(DVector::from_vec))?;
                self.scheduler.invalidate();
            }
            "add_factor" => {
                let f: FactorJson = args(a)?;
                let neighbors = f.neighbors.iter().map(|n| self.var(n)).collect::<Result<Vec<_>, _>>()?;
                self.graph.add_factor_params(f.id, &neighbors, f.params)?;
                self.scheduler.invalidate();
            }
            "remove_node" => {
                let IdArgs { id } = args(a)?;
                let node = self
                    .graph
                    .lookup(&id)
                    .ok_or_else(|| Failure::new("UnknownNode", format!("no node `{id}`")))?;
                self.graph.remove_node(node)?;
                self.scheduler.invalidate();
            }
            "set_prior" => {
                let p: PriorArgs = args(a)?;
                let v = self.var(&p.id)?;
                let prior = p
                    .prior
                    .map(|p| GaussianCanonical::new(DVector::from_vec(p.eta), matrix_from_rows(&p.lambda)?))
                    .transpose()?;
                self.graph.set_prior(v, prior)?;
            }
            "node_send" => {
                let IdArgs { id } = args(a)?;
                let v = self.var(&id)?;
                let r = node_send(&mut self.graph, v)?;
                ev.messages_sent = r.messages_sent;
                ev.delta = Some(r.convergence_delta).filter(|d| d.is_finite());
                clicked = Some(v);
            }
            "step" => {
                let s: StepArgs = args(a)?;
                let mut delta = f64::NAN;
                for _ in 0..s.count.unwrap_or(1).max(1) {
                    let r = self.scheduler.step(&mut self.graph)?;
                    ev.messages_sent += r.messages_sent;
                    delta = r.convergence_delta;
                }
                ev.delta = Some(delta).filter(|d| d.is_finite());
            }
            "set_policy" => {
                let p: SchedulePolicy = args(a)?;
                if let Some(f) = &p.focus {
                    self.var(&f.id)?;
                }
                self.scheduler = Scheduler::new(p)?;
            }
            "set_damping" => {
                let d: DampingArgs = args(a)?;
                self.graph.set_damping(d.beta)?;
            }
            "get_state" => {
                ev.state = Some(self.beliefs());
            }
            other => return Err(Failure::new("InvalidOp", format!("unknown op `{other}`"))),
        }
        Ok(clicked)
    }

    fn beliefs(&self) -> Map<String, Value> {
        self.graph
            .variables()
            .map(|(id, v)| (v.name().to_string(), moments_value(self.graph.belief_moments(id).as_ref())))
            .collect()
    }

    /// Diff current beliefs against the last report, then remember them.
    fn report(&mut self, ev: &mut Event, clicked: Option<VarId>) {
        let mut current = HashMap::with_capacity(self.graph.num_variables());
        for (id, v) in self.graph.variables() {
            let name = v.name();
            let changed = self.reported.get(name) != Some(v.belief()) || clicked == Some(id);
            if changed {
                ev.state_delta
                    .insert(name.to_string(), moments_value(self.graph.belief_moments(id).as_ref()));
            }
            current.insert(name.to_string(), v.belief().clone());
        }
        let mut removed: Vec<String> = self
            .reported
            .keys()
            .filter(|k| !current.contains_key(*k))
            .cloned()
            .collect();
        removed.sort();
        ev.removed = removed;
        self.reported = current;
        ev.total_energy = self.graph.energy_at_estimates().ok().filter(|e| e.is_finite());
    }
}

/// All live sessions. Commands for one session are serialized by its lock;
/// distinct sessions proceed independently.
#[derive(Debug, Default)]
pub struct SessionService {
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl SessionService {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn handle(&self, cmd: &Command) -> Event {
        let rid = cmd.request_id.clone();
        if cmd.v != PROTOCOL_VERSION {
            return Event::error(rid, cmd.session.clone(), "UnsupportedVersion", format!("protocol v{} not supported", cmd.v));
        }
        if cmd.op == "create_session" {
            let id = format!("s{}", self.next_id.fetch_add(1, Ordering::SeqCst) + 1);
            self.sessions
                .lock()
                .expect("session table")
                .insert(id.clone(), Arc::new(Mutex::new(Session::new())));
            return Event::ok(rid, Some(id));
        }
        let Some(sid) = cmd.session.clone() else {
            return Event::error(rid, None, "UnknownSession", "missing session id");
        };
        let Some(session) = self.sessions.lock().expect("session table").get(&sid).cloned() else {
            return Event::error(rid, Some(sid.clone()), "UnknownSession", format!("no session `{sid}`"));
        };
        let mut session = session.lock().expect("session");
        let mut ev = Event::ok(rid.clone(), Some(sid.clone()));
        match session.apply(&cmd.op, &cmd.args, &mut ev) {
            Ok(clicked) => {
                session.report(&mut ev, clicked);
                ev
            }
            Err(f) => Event::error(rid, Some(sid), f.code, f.message),
        }
    }

    /// Handle one newline-free JSON frame and return the event frame.
    pub fn handle_frame(&self, frame: &str) -> String {
        let ev = match serde_json::from_str::<Command>(frame) {
            Ok(cmd) => self.handle(&cmd),
            Err(e) => {
                let rid = serde_json::from_str::<Value>(frame)
                    .ok()
                    .and_then(|v| v.get("request_id").cloned())
                    .unwrap_or(Value::Null);
                Event::error(rid, None, "BadFrame", e.to_string())
            }
        };
        serde_json::to_string(&ev).expect("events serialize")
    }

    /// Run `f` against a session's state (for inspection in tests and tools).
    pub fn with_session<R>(&self, id: &str, f: impl FnOnce(&Session) -> R) -> Option<R> {
        let s = self.sessions.lock().expect("session table").get(id).cloned()?;
        let guard = s.lock().expect("session");
        Some(f(&guard))
    }
}
