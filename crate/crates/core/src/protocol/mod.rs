//! Migration programs: the task language, its static analysis and the
//! engine that executes programs across simulated nodes.

pub mod analysis;
mod engine;
pub mod task;

pub use analysis::{placement, Placement, ProgramAnalysis, RoleError, RoleMap};
pub use engine::{
    Decision, EngineConfig, EngineError, MigrationPlan, MigrationPlanner, MigrationStatus, MigrationSummary, NodeInfo, NodeKind,
    PlannerView, QueryDef, RunOutput, SimSetup, Simulation, SourceDef,
};
pub use task::{format_program, parse_program, ControlTask, MoveKind, ParseError, Role, StreamSel, TimeRef};
