//! The built-in migration algorithms as task programs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{compare_outputs, measure, MetricsError, MetricsRecord, MigrationId, OutputCheck};
use crate::protocol::{parse_program, ControlTask, EngineError, MigrationPlan, MigrationStatus, RunOutput, SimSetup, Simulation};
use crate::simnet::{NodeId, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmVariant {
    PauseDrainResume,
    SingleTrackAllAtOnce,
    SingleTrackPartial,
    CheckpointAssistedSingleTrack,
    WindowRecreation,
    StateRecreation,
    CheckpointAssistedParallelTrack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Track {
    Single,
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateHandling {
    Moving,
    NonMoving,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Movement {
    AllAtOnce,
    Partial,
    None,
}

/// Position of a variant in the migration taxonomy. Every built-in moves
/// state directly between hosts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Taxonomy {
    pub track: Track,
    pub state: StateHandling,
    pub movement: Movement,
    pub checkpoint_assisted: bool,
}

impl AlgorithmVariant {
    pub const ALL: [AlgorithmVariant; 7] = [
        AlgorithmVariant::PauseDrainResume,
        AlgorithmVariant::SingleTrackAllAtOnce,
        AlgorithmVariant::SingleTrackPartial,
        AlgorithmVariant::CheckpointAssistedSingleTrack,
        AlgorithmVariant::WindowRecreation,
        AlgorithmVariant::StateRecreation,
        AlgorithmVariant::CheckpointAssistedParallelTrack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmVariant::PauseDrainResume => "pause-drain-resume",
            AlgorithmVariant::SingleTrackAllAtOnce => "single-track-all-at-once",
            AlgorithmVariant::SingleTrackPartial => "single-track-partial",
            AlgorithmVariant::CheckpointAssistedSingleTrack => "checkpoint-assisted-single-track",
            AlgorithmVariant::WindowRecreation => "window-recreation",
            AlgorithmVariant::StateRecreation => "state-recreation",
            AlgorithmVariant::CheckpointAssistedParallelTrack => "checkpoint-assisted-parallel-track",
        }
    }

    pub fn pascal_name(self) -> &'static str {
        match self {
            AlgorithmVariant::PauseDrainResume => "PauseDrainResume",
            AlgorithmVariant::SingleTrackAllAtOnce => "SingleTrackAllAtOnce",
            AlgorithmVariant::SingleTrackPartial => "SingleTrackPartial",
            AlgorithmVariant::CheckpointAssistedSingleTrack => "CheckpointAssistedSingleTrack",
            AlgorithmVariant::WindowRecreation => "WindowRecreation",
            AlgorithmVariant::StateRecreation => "StateRecreation",
            AlgorithmVariant::CheckpointAssistedParallelTrack => "CheckpointAssistedParallelTrack",
        }
    }

    pub fn taxonomy(self) -> Taxonomy {
        use AlgorithmVariant::*;
        let track = match self {
            WindowRecreation | StateRecreation | CheckpointAssistedParallelTrack => Track::Parallel,
            _ => Track::Single,
        };
        let state = match self {
            PauseDrainResume | WindowRecreation => StateHandling::NonMoving,
            _ => StateHandling::Moving,
        };
        let movement = match self {
            PauseDrainResume | WindowRecreation => Movement::None,
            SingleTrackAllAtOnce | StateRecreation => Movement::AllAtOnce,
            _ => Movement::Partial,
        };
        let checkpoint_assisted = matches!(self, CheckpointAssistedSingleTrack | CheckpointAssistedParallelTrack);
        Taxonomy { track, state, movement, checkpoint_assisted }
    }

    pub fn is_parallel(self) -> bool {
        self.taxonomy().track == Track::Parallel
    }

    pub fn moves_state(self) -> bool {
        self.taxonomy().state == StateHandling::Moving
    }
}

impl fmt::Display for AlgorithmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown algorithm variant '{0}'")]
pub struct UnknownVariant(pub String);

impl FromStr for AlgorithmVariant {
    type Err = UnknownVariant;

    /// Accepts kebab-case and PascalCase names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AlgorithmVariant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.pascal_name() == s)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

/// Where single-track variants hold tuples while state is in transit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferLocation {
    #[default]
    NewHost,
    Upstream,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantOptions {
    pub buffer_location: BufferLocation,
    /// Allow pause-drain-resume on a stateful query, losing its state.
    pub consistency_waiver: bool,
    /// When checkpoint replication to the new host starts; without it the
    /// base checkpoint is sent when the migration starts.
    pub bootstrap_at: Option<SimTime>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MigrationRequest {
    pub old_host: NodeId,
    pub new_host: NodeId,
    pub variant: AlgorithmVariant,
    pub trigger: SimTime,
    pub options: VariantOptions,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgorithmError {
    #[error("pause-drain-resume loses the state of a stateful query; set consistency_waiver to run it anyway")]
    StatefulPauseDrainResume,
    #[error("old and new host are both {0}")]
    SameHost(NodeId),
    #[error("bootstrap at {bootstrap} is after the migration trigger {trigger}")]
    LateBootstrap { bootstrap: SimTime, trigger: SimTime },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MigrationPrograms {
    pub bootstrap: Option<Vec<ControlTask>>,
    pub migration: Vec<ControlTask>,
    pub label: String,
}

const PAUSE_DRAIN_RESUME: &str = "
ControlMessage(Upstream
  BufferStreams(Streams(query))
  StopStreams(Streams(query))
  ControlMessage(NH, StartQuery(query))
  Redirect(Streams(query), OH, NH)
  Resume(Streams(query)))";

const MOVING_STATE_UPSTREAM_BUFFER: &str = "
ControlMessage(OH
  ControlMessage(Upstream
    BufferStreams(Streams(query))
    StopStreams(Streams(query))
    Redirect(Streams(query), OH, NH)
    ControlMessage(OH, MoveState(query, NH))
    Resume(Streams(query))))";

const ALL_AT_ONCE: &str = "
ControlMessage(OH
  ControlMessage(NH,
    RequestMigration(query),
    BufferStreams(Streams(query))
    StopStreams(Streams(query)))
  ControlMessage(Upstream,
    Redirect(Streams(query), OH, NH))
  MoveState(query, NH)
  AddNextHop(Streams(query), NH))";

const PARTIAL: &str = "
ControlMessage(OH
  ControlMessage(NH,
    RequestMigration(query),
    BufferStreams(Streams(query))
    StopStreams(Streams(query)))
  MoveImmutableState(query, NH)
  ControlMessage(Upstream,
    Redirect(Streams(query), OH, NH))
  MoveIncrementalState(query, NH)
  AddNextHop(Streams(query), NH))";

const PARTIAL_UPSTREAM_BUFFER: &str = "
ControlMessage(OH
  MoveImmutableState(query, NH)
  ControlMessage(Upstream
    BufferStreams(Streams(query))
    StopStreams(Streams(query))
    Redirect(Streams(query), OH, NH)
    ControlMessage(OH, MoveIncrementalState(query, NH))
    Resume(Streams(query))))";

const WINDOW_RECREATION: &str = "
ControlMessage(Upstream
  ControlMessage(NH,
    StartQuery(query))
  ControlMessage(OH
    ControlMessage(Upstream,
      Schedule(RemoveNextHop(Streams(query), OH)
               TakeoverTime(query))
      AddNextHop(Streams(Upstream), NH))))";

const STATE_RECREATION: &str = "
ControlMessage(Upstream
  ControlMessage(OH
    ControlMessage(NH,
      StopStreams(OutputStreams(query))
      StartQuery(query)
      Schedule(TakeoverTime(query)
               StartStreams(Streams(query))))
    ControlMessage(Upstream,
      Schedule(RemoveNextHop(Streams(query), OH),
               TakeoverTime(query))
      AddNextHop(Streams(Upstream), NH)))
  MoveState(query, NH))";

const CHECKPOINT_BOOTSTRAP: &str = "ControlMessage(OH, ReplicateCheckpoint(NH))";

const CHECKPOINT_SINGLE_TRACK: &str = "
ControlMessage(Upstream
  ControlMessage(NH,
    BufferStreams(NH, Streams(query))
    StopStreams(NH, Streams(query)))
  ControlMessage(OH,
    Redirect(Streams(query), OH, NH)
    MoveIncrementalState(query, NH)
    ControlMessage(NH, StartStreams(Streams(query)))))";

const CHECKPOINT_SINGLE_TRACK_UPSTREAM_BUFFER: &str = "
ControlMessage(Upstream
  BufferStreams(Streams(query))
  StopStreams(Streams(query))
  Redirect(Streams(query), OH, NH)
  ControlMessage(OH, MoveIncrementalState(query, NH))
  Resume(Streams(query)))";

// The delta is moved once the new host receives the duplicated streams,
// and the old host is detached only after that.
const CHECKPOINT_PARALLEL_TRACK: &str = "
ControlMessage(US, AddNextHop(Streams(query), NH))
ControlMessage(NH,
  ControlMessage(OH, MoveImmutableState(query, NH)))
ControlMessage(US, RemoveNextHop(Streams(query), OH))
ControlMessage(OH, StopQuery(query))";

fn program(text: &str) -> Vec<ControlTask> {
    parse_program(text).expect("built-in program parses")
}

/// Task programs implementing `variant`.
pub fn build_program(variant: AlgorithmVariant, options: &VariantOptions, stateful: bool) -> Result<MigrationPrograms, AlgorithmError> {
    use AlgorithmVariant::*;
    if variant == PauseDrainResume && stateful && !options.consistency_waiver {
        return Err(AlgorithmError::StatefulPauseDrainResume);
    }
    let upstream_buffer = options.buffer_location == BufferLocation::Upstream;
    let text = match variant {
        PauseDrainResume => PAUSE_DRAIN_RESUME,
        SingleTrackAllAtOnce if upstream_buffer => MOVING_STATE_UPSTREAM_BUFFER,
        SingleTrackAllAtOnce => ALL_AT_ONCE,
        SingleTrackPartial if upstream_buffer => PARTIAL_UPSTREAM_BUFFER,
        SingleTrackPartial => PARTIAL,
        CheckpointAssistedSingleTrack if upstream_buffer => CHECKPOINT_SINGLE_TRACK_UPSTREAM_BUFFER,
        CheckpointAssistedSingleTrack => CHECKPOINT_SINGLE_TRACK,
        WindowRecreation => WINDOW_RECREATION,
        StateRecreation => STATE_RECREATION,
        CheckpointAssistedParallelTrack => CHECKPOINT_PARALLEL_TRACK,
    };
    let mut migration = program(text);
    let mut bootstrap = None;
    let mut label = variant.name().to_string();
    if variant.taxonomy().checkpoint_assisted {
        if options.bootstrap_at.is_some() {
            bootstrap = Some(program(CHECKPOINT_BOOTSTRAP));
        } else {
            let mut with_base = program(CHECKPOINT_BOOTSTRAP);
            with_base.append(&mut migration);
            migration = with_base;
            label.push_str(" (no-DCR)");
        }
    }
    Ok(MigrationPrograms { bootstrap, migration, label })
}

/// The migration plans a request injects into a simulation.
pub fn plans_for(req: &MigrationRequest, stateful: bool) -> Result<Vec<MigrationPlan>, AlgorithmError> {
    if req.old_host == req.new_host {
        return Err(AlgorithmError::SameHost(req.old_host));
    }
    let programs = build_program(req.variant, &req.options, stateful)?;
    let mut plans = Vec::new();
    if let (Some(boot), Some(at)) = (programs.bootstrap, req.options.bootstrap_at) {
        if at > req.trigger {
            return Err(AlgorithmError::LateBootstrap { bootstrap: at, trigger: req.trigger });
        }
        plans.push(MigrationPlan {
            at,
            old_host: req.old_host,
            new_host: req.new_host,
            program: boot,
            label: format!("{} bootstrap", req.variant),
            bootstrap: true,
        });
    }
    plans.push(MigrationPlan {
        at: req.trigger,
        old_host: req.old_host,
        new_host: req.new_host,
        program: programs.migration,
        label: programs.label,
        bootstrap: false,
    });
    Ok(plans)
}

/// Setup with the request's plans installed and duplicate suppression at
/// the sink for parallel-track variants.
pub fn setup_for(base: &SimSetup, req: &MigrationRequest) -> Result<SimSetup, AlgorithmError> {
    let mut setup = base.clone();
    setup.plans = plans_for(req, base.query.spec.is_stateful())?;
    setup.config.sink_dedup |= req.variant.is_parallel();
    Ok(setup)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MigrationReport {
    pub metrics: MetricsRecord,
    pub status: MigrationStatus,
    /// Sink outputs compared with the run without migration.
    pub outputs: Option<OutputCheck>,
    pub run: RunOutput,
    pub baseline: Option<RunOutput>,
}

impl MigrationReport {
    /// The migration completed and, when a baseline ran, the sink saw the
    /// same outputs.
    pub fn is_correct(&self) -> bool {
        self.status == MigrationStatus::Completed && self.outputs.as_ref().map_or(true, OutputCheck::is_equal)
    }
}

/// Runs one migration on `base`, plus a twin without migration when
/// `with_baseline` is set.
pub fn run_migration(base: &SimSetup, req: &MigrationRequest, with_baseline: bool) -> Result<MigrationReport, AlgorithmError> {
    let setup = setup_for(base, req)?;
    let run = Simulation::new(&setup)?.run()?;
    let baseline = if with_baseline {
        let mut twin = setup.clone();
        twin.plans.clear();
        Some(Simulation::new(&twin)?.run()?)
    } else {
        None
    };
    let summary = run.migrations.iter().rfind(|m| !m.bootstrap).expect("request always has a migration plan");
    let mid: MigrationId = summary.mid;
    let status = summary.status;
    let metrics = measure(&run.log, mid, baseline.as_ref().map(|b| &b.log))?;
    let outputs = baseline.as_ref().map(|b| compare_outputs(&run.log, &b.log));
    Ok(MigrationReport { metrics, status, outputs, run, baseline })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn has_move(p: &[ControlTask]) -> bool {
        let mut found = false;
        for t in p {
            t.visit(&mut |x| found |= matches!(x, ControlTask::Move { .. }));
        }
        found
    }

    #[test]
    fn names_round_trip() {
        for v in AlgorithmVariant::ALL {
            assert_eq!(v.name().parse::<AlgorithmVariant>().unwrap(), v);
            assert_eq!(v.pascal_name().parse::<AlgorithmVariant>().unwrap(), v);
        }
        assert!("flux".parse::<AlgorithmVariant>().is_err());
    }

    #[test]
    fn moves_appear_only_in_moving_variants() {
        let opts = VariantOptions { consistency_waiver: true, ..Default::default() };
        for v in AlgorithmVariant::ALL {
            let p = build_program(v, &opts, true).unwrap();
            assert_eq!(has_move(&p.migration), v.moves_state(), "{v}");
        }
    }

    #[test]
    fn stateful_pause_drain_resume_needs_waiver() {
        assert_eq!(
            build_program(AlgorithmVariant::PauseDrainResume, &VariantOptions::default(), true),
            Err(AlgorithmError::StatefulPauseDrainResume)
        );
        assert!(build_program(AlgorithmVariant::PauseDrainResume, &VariantOptions::default(), false).is_ok());
    }

    #[test]
    fn partial_adds_one_immutable_move() {
        let opts = VariantOptions::default();
        let all = build_program(AlgorithmVariant::SingleTrackAllAtOnce, &opts, true).unwrap().migration;
        let partial = build_program(AlgorithmVariant::SingleTrackPartial, &opts, true).unwrap().migration;
        let text = format!("{}", partial[0]);
        assert!(text.contains("MoveImmutableState(query, NH), ControlMessage(Upstream"));
        assert!(format!("{}", all[0]).contains("MoveState(query, NH)"));
    }

    #[test]
    fn checkpoint_variants_without_bootstrap_send_base_first() {
        let p = build_program(AlgorithmVariant::CheckpointAssistedSingleTrack, &VariantOptions::default(), true).unwrap();
        assert!(p.bootstrap.is_none());
        assert!(p.label.ends_with("(no-DCR)"));
        assert_eq!(p.migration[0].to_string(), "ControlMessage(OH, ReplicateCheckpoint(NH))");
        let opts = VariantOptions { bootstrap_at: Some(SimTime::ZERO), ..Default::default() };
        let p = build_program(AlgorithmVariant::CheckpointAssistedSingleTrack, &opts, true).unwrap();
        assert!(p.bootstrap.is_some());
    }
}
