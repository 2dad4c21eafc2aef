//! Co-design of channel-grouped variable geometry trusses.
//!
//! * [`truss`]: graph, channel assignment and mirror-symmetry primitives.
//! * [`evo`]: constrained initialisation and mutation, NSGA-II selection and
//!   the elite-pool GA driver.
//! * [`sim`]: deterministic mass-spring simulator with ground contact.
//! * [`objectives`]: trajectory scoring for the table tasks.
//! * [`rl`]: observation encoding, action codec and PPO.
//! * [`testkit`]: random instance generators.

pub mod evo;
pub mod objectives;
pub mod rl;
pub mod sim;
pub mod testkit;
pub mod truss;

pub use evo::{ControlSequence, EvolutionConfig, Genome, RatingVector};
pub use objectives::{ObjectiveKind, ObjectiveSpec, TrussEvaluator};
pub use sim::{PhysicsConfig, SimState, Simulator, Trajectory};
pub use truss::{ChannelAssignment, TrussGraph};
