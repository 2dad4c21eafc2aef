//! Task objectives scored over whole trajectories, and the body frame they
//! are measured in.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::OnceLock;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evo::{ControlSequence, Evaluator, Genome, RatingVector, SENTINEL_RATING};
use crate::sim::{Controller, PhysicsConfig, SimError, SimState, Simulator, Trajectory};
use crate::truss::{ChannelAssignment, TrussGraph, Vec3};

/// Shortest ground projection of the center beam accepted as a heading (m).
const MIN_BEAM_PROJECTION: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("center beam is vertical; heading undefined")]
    DegenerateBeam,
    #[error("trajectory is flagged (blowup during action step {0})")]
    FlaggedTrajectory(usize),
    #[error("trajectory needs at least two snapshots, got {0}")]
    ShortTrajectory(usize),
    #[error("objective needs a tabletop group but the truss has no fixed groups")]
    NoTabletop,
    #[error("invalid objective spec: {0}")]
    InvalidSpec(String),
}

/// Body frame of the truss: center-beam midpoint and heading about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: Vec3,
    /// Rotation about the vertical axis taking world +x to the body forward (rad).
    pub yaw: f64,
}

impl Frame {
    pub fn forward(&self) -> Vec3 {
        Vec3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    /// Expresses a world direction in the body frame (yaw only).
    pub fn rotate_to_local(&self, v: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z)
    }

    pub fn point_to_local(&self, p: &Vec3) -> Vec3 {
        self.rotate_to_local(&(p - self.origin))
    }
}

/// Frame from the center beam, directed from its lower-index vertex to its
/// higher-index vertex.
pub fn center_frame(graph: &TrussGraph, state: &SimState) -> Result<Frame, ObjectiveError> {
    let [a, b] = graph.edges()[graph.center_edge()];
    let (pa, pb) = (state.positions[a], state.positions[b]);
    let d = pb - pa;
    if d.x.hypot(d.y) < MIN_BEAM_PROJECTION {
        return Err(ObjectiveError::DegenerateBeam);
    }
    Ok(Frame {
        origin: (pa + pb) * 0.5,
        yaw: d.y.atan2(d.x),
    })
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    MoveForward,
    Turn,
    Lower,
    Tilt,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MoveForward => "move_forward",
            Self::Turn => "turn",
            Self::Lower => "lower",
            Self::Tilt => "tilt",
        }
    }
}

/// How `lower` measures the achieved height drop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerMode {
    /// Deepest point reached over the trajectory.
    #[default]
    Minimum,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Required for `tilt`; `turn` defaults to 90°.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub lower_mode: LowerMode,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            target_angle_deg: None,
            name: None,
            lower_mode: LowerMode::default(),
        }
    }

    pub fn with_target_deg(mut self, deg: f64) -> Self {
        self.target_angle_deg = Some(deg);
        self
    }

    pub fn name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind.as_str().to_string())
    }

    /// Target angle in radians, for the angular objectives.
    pub fn target_angle(&self) -> Option<f64> {
        match (self.kind, self.target_angle_deg) {
            (ObjectiveKind::Turn, None) => Some(FRAC_PI_2),
            (_, deg) => deg.map(f64::to_radians),
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let angular = matches!(self.kind, ObjectiveKind::Turn | ObjectiveKind::Tilt);
        match (angular, self.target_angle_deg) {
            (false, Some(_)) => Err(ObjectiveError::InvalidSpec(format!(
                "{} takes no target angle",
                self.kind.as_str()
            ))),
            (true, Some(d)) if !d.is_finite() => {
                Err(ObjectiveError::InvalidSpec("target angle must be finite".into()))
            }
            _ if self.kind == ObjectiveKind::Tilt && self.target_angle_deg.is_none() => Err(
                ObjectiveError::InvalidSpec("tilt requires target_angle_deg".into()),
            ),
            _ => Ok(()),
        }
    }
}

fn tabletop(graph: &TrussGraph) -> Result<&[usize], ObjectiveError> {
    graph
        .fixed_groups()
        .first()
        .map(Vec::as_slice)
        .filter(|g| !g.is_empty())
        .ok_or(ObjectiveError::NoTabletop)
}

fn mean_height(state: &SimState, group: &[usize]) -> f64 {
    group.iter().map(|&v| state.positions[v].z).sum::<f64>() / group.len() as f64
}

/// Unit normal of the best-fit plane through the group's vertices.
pub fn group_normal(state: &SimState, group: &[usize]) -> Vec3 {
    let n = group.len() as f64;
    let centroid = group.iter().map(|&v| state.positions[v]).sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for &v in group {
        let d = state.positions[v] - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    eig.eigenvectors.column(k).into_owned()
}

/// Angle between the tabletop normal and the vertical (rad, in [0, π/2]).
pub fn tilt_angle(state: &SimState, group: &[usize]) -> f64 {
    group_normal(state, group).z.abs().min(1.0).acos()
}

/// Rates a trajectory on one objective; higher is better.
pub fn score(
    spec: &ObjectiveSpec,
    graph: &TrussGraph,
    trajectory: &Trajectory,
) -> Result<f64, ObjectiveError> {
    if let Some(step) = trajectory.blowup_step {
        return Err(ObjectiveError::FlaggedTrajectory(step));
    }
    if trajectory.states.len() < 2 {
        return Err(ObjectiveError::ShortTrajectory(trajectory.states.len()));
    }
    let (first, last) = (trajectory.first(), trajectory.last());
    match spec.kind {
        ObjectiveKind::MoveForward => {
            let f0 = center_frame(graph, first)?;
            let f1 = center_frame(graph, last)?;
            Ok((f1.origin - f0.origin).dot(&f0.forward()))
        }
        ObjectiveKind::Turn => {
            let target = spec.target_angle().unwrap_or(FRAC_PI_2);
            let f0 = center_frame(graph, first)?;
            let f1 = center_frame(graph, last)?;
            Ok(-wrap_angle(f1.yaw - f0.yaw - target).abs())
        }
        ObjectiveKind::Lower => {
            let group = tabletop(graph)?;
            let start = mean_height(first, group);
            let reached = match spec.lower_mode {
                LowerMode::Minimum => trajectory
                    .states
                    .iter()
                    .map(|s| mean_height(s, group))
                    .fold(f64::INFINITY, f64::min),
                LowerMode::Final => mean_height(last, group),
            };
            Ok(start - reached)
        }
        ObjectiveKind::Tilt => {
            let group = tabletop(graph)?;
            let target = spec
                .target_angle()
                .ok_or_else(|| ObjectiveError::InvalidSpec("tilt requires a target".into()))?;
            Ok(-(tilt_angle(last, group) - target).abs())
        }
    }
}

/// Like [`score`], but failures become [`SENTINEL_RATING`].
pub fn score_or_sentinel(spec: &ObjectiveSpec, graph: &TrussGraph, trajectory: &Trajectory) -> f64 {
    score(spec, graph, trajectory).unwrap_or(SENTINEL_RATING)
}

/// Episode reward: zero until the last step, then the objective score.
pub fn episode_reward(
    spec: &ObjectiveSpec,
    graph: &TrussGraph,
    trajectory: &Trajectory,
    done: bool,
) -> f64 {
    if done {
        score_or_sentinel(spec, graph, trajectory)
    } else {
        0.0
    }
}

impl crate::sim::Controller for &ControlSequence {
    fn action(&mut self, step: usize, _state: &SimState) -> Vec<bool> {
        ControlSequence::action(self, step).to_vec()
    }
}

/// Rates genomes by simulating their control sequence from the settled pose.
#[derive(Debug)]
pub struct TrussEvaluator {
    graph: TrussGraph,
    physics: PhysicsConfig,
    objectives: Vec<ObjectiveSpec>,
    settled: OnceLock<Result<SimState, SimError>>,
}

impl TrussEvaluator {
    pub fn new(
        graph: TrussGraph,
        physics: PhysicsConfig,
        objectives: Vec<ObjectiveSpec>,
    ) -> Result<Self, EvaluatorError> {
        physics.validate()?;
        Simulator::new(&graph, physics.clone())?;
        for o in &objectives {
            o.validate()?;
        }
        Ok(Self {
            graph,
            physics,
            objectives,
            settled: OnceLock::new(),
        })
    }

    pub fn graph(&self) -> &TrussGraph {
        &self.graph
    }

    pub fn physics(&self) -> &PhysicsConfig {
        &self.physics
    }

    pub fn objectives(&self) -> &[ObjectiveSpec] {
        &self.objectives
    }

    pub fn simulator(&self) -> Simulator<'_> {
        Simulator::new(&self.graph, self.physics.clone()).expect("validated at construction")
    }

    /// The settled initial state, computed once per graph.
    pub fn initial_state(&self) -> Result<&SimState, SimError> {
        self.settled
            .get_or_init(|| {
                let all_off = ChannelAssignment::new(vec![0; self.graph.n_edges()]);
                self.simulator().settle(&all_off)
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Runs any controller from the settled state for `n_actions` action steps.
    pub fn rollout<C: Controller + ?Sized>(
        &self,
        assignment: &ChannelAssignment,
        controller: &mut C,
        n_actions: usize,
    ) -> Result<Trajectory, SimError> {
        let s0 = self.initial_state()?;
        self.simulator().rollout(assignment, s0, controller, n_actions)
    }

    pub fn rate(&self, trajectory: &Trajectory) -> RatingVector {
        RatingVector(
            self.objectives
                .iter()
                .map(|o| score_or_sentinel(o, &self.graph, trajectory))
                .collect(),
        )
    }

    /// Simulates a genome's open-loop schedule and rates the result.
    pub fn simulate(&self, genome: &Genome) -> Result<(Trajectory, RatingVector), SimError> {
        let mut control = &genome.control;
        let trajectory = self.rollout(&genome.channels, &mut control, genome.control.n_steps())?;
        let rating = self.rate(&trajectory);
        Ok((trajectory, rating))
    }
}

impl Evaluator for TrussEvaluator {
    fn objective_names(&self) -> Vec<String> {
        self.objectives.iter().map(ObjectiveSpec::name).collect()
    }

    fn evaluate(&self, genome: &Genome) -> RatingVector {
        match self.simulate(genome) {
            Ok((_, rating)) => rating,
            Err(_) => RatingVector::sentinel(self.objectives.len()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluatorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beam_graph() -> TrussGraph {
        TrussGraph::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            vec![[0, 1]],
            1,
            vec![],
            0,
        )
        .unwrap()
    }

    fn state_at(points: &[Vec3]) -> SimState {
        SimState {
            positions: points.to_vec(),
            velocities: vec![Vec3::zeros(); points.len()],
            rest_lengths: vec![],
            channel_states: vec![false],
            time: 0.0,
        }
    }

    fn traj(states: Vec<SimState>) -> Trajectory {
        Trajectory {
            states,
            blowup_step: None,
        }
    }

    #[test]
    fn aligned_and_yawed_frames() {
        let g = beam_graph();
        let f = center_frame(&g, &state_at(&[Vec3::zeros(), Vec3::x()])).unwrap();
        assert_eq!(f.origin, Vec3::new(0.5, 0.0, 0.0));
        assert_eq!(f.yaw, 0.0);
        let f = center_frame(&g, &state_at(&[Vec3::zeros(), Vec3::y()])).unwrap();
        assert!((f.yaw - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(
            center_frame(&g, &state_at(&[Vec3::zeros(), Vec3::z()])),
            Err(ObjectiveError::DegenerateBeam)
        );
    }

    #[test]
    fn null_motion_scores() {
        let g = beam_graph();
        let s = state_at(&[Vec3::zeros(), Vec3::x()]);
        let t = traj(vec![s.clone(), s]);
        assert_eq!(score(&ObjectiveSpec::new(ObjectiveKind::MoveForward), &g, &t), Ok(0.0));
        assert_eq!(
            score(&ObjectiveSpec::new(ObjectiveKind::Turn), &g, &t),
            Ok(-FRAC_PI_2)
        );
    }

    #[test]
    fn rigid_translation_and_rotation() {
        let g = beam_graph();
        let s0 = state_at(&[Vec3::zeros(), Vec3::x()]);
        let s1 = state_at(&[Vec3::x(), Vec3::new(2.0, 0.0, 0.0)]);
        let t = traj(vec![s0.clone(), s1]);
        assert_eq!(score(&ObjectiveSpec::new(ObjectiveKind::MoveForward), &g, &t), Ok(1.0));

        // Quarter turn about the beam midpoint.
        let s2 = state_at(&[Vec3::new(0.5, -0.5, 0.0), Vec3::new(0.5, 0.5, 0.0)]);
        let t = traj(vec![s0, s2]);
        let r = score(&ObjectiveSpec::new(ObjectiveKind::Turn), &g, &t).unwrap();
        assert!(r.abs() < 1e-15, "{r}");
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-15);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn flagged_trajectory_is_sentinel() {
        let g = beam_graph();
        let s = state_at(&[Vec3::zeros(), Vec3::x()]);
        let t = Trajectory {
            states: vec![s],
            blowup_step: Some(3),
        };
        let spec = ObjectiveSpec::new(ObjectiveKind::MoveForward);
        assert_eq!(score(&spec, &g, &t), Err(ObjectiveError::FlaggedTrajectory(3)));
        assert_eq!(score_or_sentinel(&spec, &g, &t), SENTINEL_RATING);
    }

    #[test]
    fn tilt_and_lower_use_first_fixed_group() {
        let pts = vec![
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(0.0, 1.0, 1.0),
        ];
        let g = TrussGraph::new(
            pts.clone(),
            vec![[0, 1], [1, 2], [2, 3], [3, 0]],
            1,
            vec![vec![0, 1, 2, 3]],
            0,
        )
        .unwrap();
        // Tilt the square by 30° about the x axis and drop it by 0.25 m.
        let a = 30f64.to_radians();
        let tilted: Vec<Vec3> = pts
            .iter()
            .map(|p| Vec3::new(p.x, p.y * a.cos(), 0.75 + p.y * a.sin()))
            .collect();
        let t = traj(vec![state_at(&pts), state_at(&tilted)]);
        let tilt = ObjectiveSpec::new(ObjectiveKind::Tilt).with_target_deg(30.0);
        assert!(score(&tilt, &g, &t).unwrap().abs() < 1e-12);
        let lower = ObjectiveSpec::new(ObjectiveKind::Lower);
        let expected = 1.0 - (0.75 + 0.5 * a.sin());
        assert!((score(&lower, &g, &t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn lower_minimum_vs_final() {
        let g = TrussGraph::new(
            vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 1.0)],
            vec![[0, 1]],
            1,
            vec![vec![0, 1]],
            0,
        )
        .unwrap();
        let at = |z: f64| state_at(&[Vec3::new(0.0, 0.0, z), Vec3::new(1.0, 0.0, z)]);
        let t = traj(vec![at(1.0), at(0.5), at(0.9)]);
        let mut spec = ObjectiveSpec::new(ObjectiveKind::Lower);
        assert_eq!(score(&spec, &g, &t), Ok(0.5));
        spec.lower_mode = LowerMode::Final;
        assert!((score(&spec, &g, &t).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(ObjectiveSpec::new(ObjectiveKind::Tilt).validate().is_err());
        assert!(ObjectiveSpec::new(ObjectiveKind::Turn).validate().is_ok());
        assert!(ObjectiveSpec::new(ObjectiveKind::Lower)
            .with_target_deg(5.0)
            .validate()
            .is_err());
        let parsed: ObjectiveSpec =
            serde_json::from_str(r#"{"kind": "tilt", "target_angle_deg": 20}"#).unwrap();
        assert_eq!(parsed.target_angle(), Some(20f64.to_radians()));
        assert_eq!(parsed.name(), "tilt");
    }
}
