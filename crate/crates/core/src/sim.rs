//! Mass-spring truss dynamics.
//!
//! Every vertex is a point mass and every beam a damped spring whose natural
//! length slides toward its contracted or expanded value depending on the
//! state of the beam's channel. Fixed vertex groups are held by stiff springs.
//! The ground is the plane z = 0 with a penalty normal force and a clamped
//! Coulomb friction force. Integration is semi-implicit (symplectic) Euler.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::truss::{ChannelAssignment, TrussGraph, Vec3};

/// Largest node speed before a step is declared a blowup (m/s).
pub const MAX_SPEED: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid physics config: {0}")]
    InvalidConfig(String),
    #[error("numerical blowup at t = {time} s")]
    NumericalBlowup { time: f64 },
    #[error("truss did not settle: kinetic energy per node {residual} J after {steps} steps")]
    NoSettle { residual: f64, steps: usize },
    #[error("assignment has {got} labels for {expected} edges")]
    AssignmentLength { expected: usize, got: usize },
    #[error("failed to read physics config: {0}")]
    Io(String),
    #[error("failed to parse physics config: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    /// Integration step (s).
    pub dt: f64,
    pub node_mass: f64,
    /// Beam spring constant (N/m).
    pub stiffness: f64,
    /// Axial beam damping, also used as ground normal damping (N·s/m).
    pub damping: f64,
    /// Gravitational acceleration magnitude, acting along −z (m/s²).
    pub gravity: f64,
    /// Contracted length as a fraction of the rest-pose length.
    pub contract_ratio: f64,
    /// Expanded length as a fraction of the rest-pose length.
    pub expand_ratio: f64,
    /// Per-edge absolute contracted lengths (m); overrides `contract_ratio`.
    pub contract_lengths: Option<Vec<f64>>,
    /// Per-edge absolute expanded lengths (m); overrides `expand_ratio`.
    pub expand_lengths: Option<Vec<f64>>,
    /// Rate at which a natural length moves toward its target (m/s).
    pub actuation_rate: f64,
    pub ground_stiffness: f64,
    pub friction_coeff: f64,
    /// Physics steps per action step.
    pub steps_per_action: usize,
    pub fixed_group_stiffness: f64,
    /// Settling stops once kinetic energy per node falls below this (J).
    pub settle_energy: f64,
    /// ... and the largest net force on any node falls below this (N).
    pub settle_force: f64,
    pub settle_max_steps: usize,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            node_mass: 0.1,
            stiffness: 2000.0,
            damping: 5.0,
            gravity: 9.81,
            contract_ratio: 0.8,
            expand_ratio: 1.2,
            contract_lengths: None,
            expand_lengths: None,
            actuation_rate: 0.5,
            ground_stiffness: 1e4,
            friction_coeff: 0.8,
            steps_per_action: 100,
            fixed_group_stiffness: 2e4,
            settle_energy: 1e-6,
            settle_force: 1e-2,
            settle_max_steps: 20_000,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.node_mass > 0.0) {
            return bad("node_mass must be positive");
        }
        if !(self.stiffness > 0.0) {
            return bad("stiffness must be positive");
        }
        if self.damping < 0.0
            || self.gravity < 0.0
            || self.ground_stiffness < 0.0
            || self.friction_coeff < 0.0
            || self.fixed_group_stiffness < 0.0
            || self.actuation_rate < 0.0
        {
            return bad("damping, gravity, ground, friction, fixed-group and actuation constants must be non-negative");
        }
        if !(self.contract_ratio > 0.0 && self.contract_ratio < self.expand_ratio) {
            return bad("need 0 < contract_ratio < expand_ratio");
        }
        if let (Some(c), Some(e)) = (&self.contract_lengths, &self.expand_lengths) {
            if c.iter().zip(e).any(|(c, e)| !(c < e)) {
                return bad("contract_lengths must be shorter than expand_lengths");
            }
        }
        if self.steps_per_action == 0 {
            return bad("steps_per_action must be positive");
        }
        Ok(())
    }

    /// Parses a TOML `key = value` file; missing keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub rest_lengths: Vec<f64>,
    pub channel_states: Vec<bool>,
    pub time: f64,
}

impl SimState {
    /// The undeformed pose at rest with all channels off.
    pub fn rest_pose(graph: &TrussGraph) -> Self {
        Self {
            positions: graph.vertices().to_vec(),
            velocities: vec![Vec3::zeros(); graph.n_vertices()],
            rest_lengths: (0..graph.n_edges()).map(|e| graph.rest_length(e)).collect(),
            channel_states: vec![false; graph.n_channels()],
            time: 0.0,
        }
    }

    pub fn kinetic_energy(&self, node_mass: f64) -> f64 {
        self.velocities
            .iter()
            .map(|v| 0.5 * node_mass * v.norm_squared())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(&self.velocities)
            .all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// Energy split by source (J). Gravity potential is measured from z = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub kinetic: f64,
    pub spring: f64,
    pub gravity: f64,
    pub ground: f64,
}

impl Energy {
    pub fn mechanical(&self) -> f64 {
        self.kinetic + self.spring
    }

    pub fn total(&self) -> f64 {
        self.kinetic + self.spring + self.gravity + self.ground
    }
}

/// Snapshots once per action step, starting with the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<SimState>,
    /// Action step during which the simulation blew up, if it did.
    pub blowup_step: Option<usize>,
}

impl Trajectory {
    pub fn is_flagged(&self) -> bool {
        self.blowup_step.is_some()
    }

    pub fn first(&self) -> &SimState {
        &self.states[0]
    }

    pub fn last(&self) -> &SimState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Supplies channel states once per action step.
pub trait Controller {
    fn action(&mut self, step: usize, state: &SimState) -> Vec<bool>;
}

impl<F: FnMut(usize, &SimState) -> Vec<bool>> Controller for F {
    fn action(&mut self, step: usize, state: &SimState) -> Vec<bool> {
        self(step, state)
    }
}

#[derive(Debug, Clone, Copy)]
struct Spring {
    a: usize,
    b: usize,
    length: f64,
}

/// A physics context bound to one truss graph.
#[derive(Debug, Clone)]
pub struct Simulator<'g> {
    graph: &'g TrussGraph,
    config: PhysicsConfig,
    contract: Vec<f64>,
    expand: Vec<f64>,
    fixed: Vec<Spring>,
}

impl<'g> Simulator<'g> {
    pub fn new(graph: &'g TrussGraph, config: PhysicsConfig) -> Result<Self, SimError> {
        config.validate()?;
        let n_e = graph.n_edges();
        let per_edge = |lengths: &Option<Vec<f64>>, ratio: f64, name: &str| match lengths {
            Some(v) if v.len() != n_e => Err(SimError::InvalidConfig(format!(
                "{name} has {} entries for {n_e} edges",
                v.len()
            ))),
            Some(v) => Ok(v.clone()),
            None => Ok((0..n_e).map(|e| ratio * graph.rest_length(e)).collect()),
        };
        let contract = per_edge(&config.contract_lengths, config.contract_ratio, "contract_lengths")?;
        let expand = per_edge(&config.expand_lengths, config.expand_ratio, "expand_lengths")?;
        if contract.iter().zip(&expand).any(|(c, e)| !(c < e)) {
            return Err(SimError::InvalidConfig(
                "every contracted length must be shorter than its expanded length".into(),
            ));
        }
        let mut fixed = Vec::new();
        for group in graph.fixed_groups() {
            for (i, &a) in group.iter().enumerate() {
                for &b in &group[i + 1..] {
                    let length = (graph.vertices()[b] - graph.vertices()[a]).norm();
                    fixed.push(Spring { a, b, length });
                }
            }
        }
        Ok(Self {
            graph,
            config,
            contract,
            expand,
            fixed,
        })
    }

    pub fn graph(&self) -> &'g TrussGraph {
        self.graph
    }

    pub fn config(&self) -> &PhysicsConfig {
        &self.config
    }

    pub fn contract_lengths(&self) -> &[f64] {
        &self.contract
    }

    pub fn expand_lengths(&self) -> &[f64] {
        &self.expand
    }

    /// Rest pose with natural lengths clamped into the actuation range.
    pub fn initial_state(&self) -> SimState {
        let mut s = SimState::rest_pose(self.graph);
        for (e, l) in s.rest_lengths.iter_mut().enumerate() {
            *l = l.clamp(self.contract[e], self.expand[e]);
        }
        s
    }

    fn check_assignment(&self, assignment: &ChannelAssignment) -> Result<(), SimError> {
        if assignment.len() != self.graph.n_edges() {
            return Err(SimError::AssignmentLength {
                expected: self.graph.n_edges(),
                got: assignment.len(),
            });
        }
        Ok(())
    }

    /// Net force on every node, friction included.
    fn forces(&self, state: &SimState) -> Vec<Vec3> {
        let cfg = &self.config;
        let x = &state.positions;
        let v = &state.velocities;
        let mut force = vec![Vec3::new(0.0, 0.0, -cfg.node_mass * cfg.gravity); x.len()];

        let mut spring = |a: usize, b: usize, rest: f64, k: f64, c: f64| {
            let d = x[b] - x[a];
            let len = d.norm();
            if len <= f64::EPSILON {
                return;
            }
            let u = d / len;
            let axial_speed = (v[b] - v[a]).dot(&u);
            let f = k * (len - rest) + c * axial_speed;
            force[a] += u * f;
            force[b] -= u * f;
        };
        for (e, &[a, b]) in self.graph.edges().iter().enumerate() {
            spring(a, b, state.rest_lengths[e], cfg.stiffness, cfg.damping);
        }
        for s in &self.fixed {
            spring(s.a, s.b, s.length, cfg.fixed_group_stiffness, cfg.damping);
        }

        for (i, p) in x.iter().enumerate() {
            if p.z >= 0.0 {
                continue;
            }
            let normal = (cfg.ground_stiffness * -p.z - cfg.damping * v[i].z).max(0.0);
            force[i].z += normal;
            // Tangential force that would stop the node this step, clamped to
            // the Coulomb cone.
            let mut stop = Vec3::new(
                -(cfg.node_mass * v[i].x / cfg.dt + force[i].x),
                -(cfg.node_mass * v[i].y / cfg.dt + force[i].y),
                0.0,
            );
            let limit = cfg.friction_coeff * normal;
            let mag = stop.norm();
            if mag > limit {
                stop *= limit / mag;
            }
            force[i] += stop;
        }
        force
    }

    /// One semi-implicit Euler step of `dt`.
    pub fn step(&self, assignment: &ChannelAssignment, state: &SimState) -> Result<SimState, SimError> {
        self.check_assignment(assignment)?;
        let cfg = &self.config;
        let mut next = state.clone();
        let max_change = cfg.actuation_rate * cfg.dt;
        for (e, rest) in next.rest_lengths.iter_mut().enumerate() {
            let target = if state.channel_states[assignment.channel(e)] {
                self.expand[e]
            } else {
                self.contract[e]
            };
            *rest += (target - *rest).clamp(-max_change, max_change);
            *rest = rest.clamp(self.contract[e], self.expand[e]);
        }

        let force = self.forces(&next);
        let inv_mass = 1.0 / cfg.node_mass;
        for ((x, v), f) in next
            .positions
            .iter_mut()
            .zip(next.velocities.iter_mut())
            .zip(&force)
        {
            *v += f * (inv_mass * cfg.dt);
            *x += *v * cfg.dt;
        }
        next.time = state.time + cfg.dt;

        let too_fast = next.velocities.iter().any(|v| v.norm() > MAX_SPEED);
        if too_fast || !next.is_finite() {
            return Err(SimError::NumericalBlowup { time: next.time });
        }
        Ok(next)
    }

    /// Runs `n_actions` action steps, querying the controller before each one.
    /// A blowup ends the rollout early and flags the trajectory.
    pub fn rollout<C: Controller + ?Sized>(
        &self,
        assignment: &ChannelAssignment,
        initial: &SimState,
        controller: &mut C,
        n_actions: usize,
    ) -> Result<Trajectory, SimError> {
        self.check_assignment(assignment)?;
        let mut states = Vec::with_capacity(n_actions + 1);
        states.push(initial.clone());
        let mut state = initial.clone();
        for step in 0..n_actions {
            state.channel_states = controller.action(step, &state);
            for _ in 0..self.config.steps_per_action {
                match self.step(assignment, &state) {
                    Ok(next) => state = next,
                    Err(SimError::NumericalBlowup { .. }) => {
                        return Ok(Trajectory {
                            states,
                            blowup_step: Some(step),
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            states.push(state.clone());
        }
        Ok(Trajectory {
            states,
            blowup_step: None,
        })
    }

    /// Whether `state` is at rest: slow, with settled natural lengths and
    /// (nearly) balanced forces.
    pub fn is_quiescent(&self, assignment: &ChannelAssignment, state: &SimState) -> bool {
        let cfg = &self.config;
        let n = state.positions.len().max(1) as f64;
        if state.kinetic_energy(cfg.node_mass) / n >= cfg.settle_energy {
            return false;
        }
        let lengths_done = state.rest_lengths.iter().enumerate().all(|(e, &l)| {
            let target = if state.channel_states[assignment.channel(e)] {
                self.expand[e]
            } else {
                self.contract[e]
            };
            l == target
        });
        lengths_done
            && self
                .forces(state)
                .iter()
                .all(|f| f.norm() < cfg.settle_force)
    }

    /// Drops the rest pose with every channel off and integrates until the
    /// truss is quiescent.
    pub fn settle(&self, assignment: &ChannelAssignment) -> Result<SimState, SimError> {
        self.check_assignment(assignment)?;
        let mut state = self.initial_state();
        for steps in 0..self.config.settle_max_steps {
            if self.is_quiescent(assignment, &state) {
                return Ok(state);
            }
            state = self.step(assignment, &state).map_err(|e| match e {
                SimError::NumericalBlowup { .. } => SimError::NoSettle {
                    residual: f64::INFINITY,
                    steps,
                },
                e => e,
            })?;
        }
        if self.is_quiescent(assignment, &state) {
            return Ok(state);
        }
        Err(SimError::NoSettle {
            residual: state.kinetic_energy(self.config.node_mass) / state.positions.len().max(1) as f64,
            steps: self.config.settle_max_steps,
        })
    }

    pub fn energy(&self, state: &SimState) -> Energy {
        let cfg = &self.config;
        let x = &state.positions;
        let mut spring = 0.0;
        for (e, &[a, b]) in self.graph.edges().iter().enumerate() {
            let stretch = (x[b] - x[a]).norm() - state.rest_lengths[e];
            spring += 0.5 * cfg.stiffness * stretch * stretch;
        }
        for s in &self.fixed {
            let stretch = (x[s.b] - x[s.a]).norm() - s.length;
            spring += 0.5 * cfg.fixed_group_stiffness * stretch * stretch;
        }
        let gravity = x.iter().map(|p| cfg.node_mass * cfg.gravity * p.z).sum();
        let ground = x
            .iter()
            .map(|p| 0.5 * cfg.ground_stiffness * p.z.min(0.0).powi(2))
            .sum();
        Energy {
            kinetic: state.kinetic_energy(cfg.node_mass),
            spring,
            gravity,
            ground,
        }
    }
}

/// One trajectory snapshot as written to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub t: f64,
    pub positions: Vec<[f64; 3]>,
    pub channel_states: Vec<bool>,
}

impl From<&SimState> for TrajectoryLine {
    fn from(s: &SimState) -> Self {
        Self {
            t: s.time,
            positions: s.positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
            channel_states: s.channel_states.clone(),
        }
    }
}

/// Serialises a trajectory, one JSON object per line.
pub fn trajectory_jsonl(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for s in &trajectory.states {
        out.push_str(&serde_json::to_string(&TrajectoryLine::from(s)).expect("finite snapshot"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_node(z: f64) -> TrussGraph {
        TrussGraph::new(vec![Vec3::new(0.0, 0.0, z)], vec![], 1, vec![], 0).unwrap()
    }

    #[test]
    fn ballistic_node_follows_recurrence() {
        let g = single_node(10.0);
        let cfg = PhysicsConfig::default();
        let sim = Simulator::new(&g, cfg.clone()).unwrap();
        let a = ChannelAssignment::new(vec![]);
        let mut s = sim.initial_state();
        let (mut z, mut vz) = (10.0f64, 0.0f64);
        for k in 1..=200 {
            s = sim.step(&a, &s).unwrap();
            vz += -cfg.node_mass * cfg.gravity * (1.0 / cfg.node_mass * cfg.dt);
            z += vz * cfg.dt;
            assert_eq!(s.velocities[0].z, vz);
            assert_eq!(s.positions[0].z, z);
            assert!((vz + cfg.gravity * k as f64 * cfg.dt).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dt_rejected() {
        let cfg = PhysicsConfig {
            dt: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let g = single_node(0.0);
        assert!(Simulator::new(&g, cfg).is_err());
        let bad = PhysicsConfig {
            contract_ratio: 1.3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_rollout_holds_initial_state() {
        let g = single_node(1.0);
        let sim = Simulator::new(&g, PhysicsConfig::default()).unwrap();
        let a = ChannelAssignment::new(vec![]);
        let s0 = sim.initial_state();
        let mut ctl = |_: usize, _: &SimState| vec![false];
        let t = sim.rollout(&a, &s0, &mut ctl, 0).unwrap();
        assert_eq!(t.states, vec![s0]);
        assert!(!t.is_flagged());
    }

    #[test]
    fn node_at_contact_equilibrium_settles_immediately() {
        let cfg = PhysicsConfig::default();
        let z = -cfg.node_mass * cfg.gravity / cfg.ground_stiffness;
        let g = single_node(z);
        let sim = Simulator::new(&g, cfg).unwrap();
        let s = sim.settle(&ChannelAssignment::new(vec![])).unwrap();
        assert_eq!(s.time, 0.0);
        assert_eq!(s.kinetic_energy(0.1), 0.0);
    }

    #[test]
    fn toml_config_overrides_defaults() {
        let cfg = PhysicsConfig::from_toml_str("dt = 0.002\nfriction_coeff = 0.5\n").unwrap();
        assert_eq!(cfg.dt, 0.002);
        assert_eq!(cfg.friction_coeff, 0.5);
        assert_eq!(cfg.stiffness, 2000.0);
        assert!(PhysicsConfig::from_toml_str("dt = 0.0").is_err());
        assert!(PhysicsConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn blowup_flags_trajectory() {
        let g = TrussGraph::new(
            vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 1.0)],
            vec![[0, 1]],
            1,
            vec![],
            0,
        )
        .unwrap();
        let cfg = PhysicsConfig {
            stiffness: 1e9,
            damping: 0.0,
            ..Default::default()
        };
        let sim = Simulator::new(&g, cfg).unwrap();
        let a = ChannelAssignment::new(vec![0]);
        let mut s0 = sim.initial_state();
        s0.positions[1].x = 1.5;
        let mut ctl = |_: usize, _: &SimState| vec![true];
        let t = sim.rollout(&a, &s0, &mut ctl, 5).unwrap();
        assert_eq!(t.blowup_step, Some(0));
        assert_eq!(t.states.len(), 1);
    }
}
