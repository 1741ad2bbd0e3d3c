//! Task descriptions, the task lifecycle, and admission checks.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pilot::PilotDescription;
use crate::scheduler::Placement;
use crate::time::Micros;
use crate::tracer::{names, Tracer};

/// What a task runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// A stand-alone program spawned as a child process.
    Executable,
    /// A named function from the executor's registry.
    Function,
}

/// A single file copy, relative paths resolved by the stager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingDirective {
    pub source: String,
    pub target: String,
}

impl StagingDirective {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        StagingDirective {
            source: source.into(),
            target: target.into(),
        }
    }
}

/// User-facing description of a unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub uid: String,
    pub kind: TaskKind,
    /// Program path or registry function name.
    pub name: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default = "one")]
    pub cores_per_task: u32,
    #[serde(default)]
    pub gpus_per_task: u32,
    /// Only MPI tasks may span nodes.
    #[serde(default)]
    pub uses_mpi: bool,
    /// Advisory only; the scheduler never reads it.
    #[serde(default)]
    pub expected_runtime_s: Option<f64>,
    #[serde(default)]
    pub stage_in: Vec<StagingDirective>,
    #[serde(default)]
    pub stage_out: Vec<StagingDirective>,
    /// Node or DVM pinning key.
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
}

fn one() -> u32 {
    1
}

impl TaskDescription {
    pub fn executable(uid: impl Into<String>, program: impl Into<String>) -> Self {
        TaskDescription {
            uid: uid.into(),
            kind: TaskKind::Executable,
            name: program.into(),
            arguments: Vec::new(),
            cores_per_task: 1,
            gpus_per_task: 0,
            uses_mpi: false,
            expected_runtime_s: None,
            stage_in: Vec::new(),
            stage_out: Vec::new(),
            tag: None,
            environment: BTreeMap::new(),
        }
    }

    pub fn function(uid: impl Into<String>, function: impl Into<String>) -> Self {
        TaskDescription {
            kind: TaskKind::Function,
            ..TaskDescription::executable(uid, function)
        }
    }

    /// Compact resource shape recorded in traces: `<cores>c<gpus>g`, with a
    /// trailing `m` for MPI tasks.
    pub fn shape(&self) -> String {
        let m = if self.uses_mpi { "m" } else { "" };
        format!("{}c{}g{m}", self.cores_per_task, self.gpus_per_task)
    }

    pub fn with_args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.arguments = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_cores(mut self, cores: u32) -> Self {
        self.cores_per_task = cores;
        self
    }

    pub fn with_gpus(mut self, gpus: u32) -> Self {
        self.gpus_per_task = gpus;
        self
    }

    pub fn with_mpi(mut self, mpi: bool) -> Self {
        self.uses_mpi = mpi;
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }
}

/// Why a description cannot run on a pilot.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("task uid is empty")]
    EmptyUid,
    #[error("task {uid}: cores_per_task must be at least 1")]
    ZeroCores { uid: String },
    #[error("task {uid}: function tasks cannot request gpus")]
    FunctionGpus { uid: String },
    #[error("task {uid}: {detail}")]
    TooLarge { uid: String, detail: String },
    #[error("task {uid}: non-MPI task needs {cores} cores/{gpus} gpus but a node has {node_cores}/{node_gpus}")]
    SingleNodeViolation {
        uid: String,
        cores: u32,
        gpus: u32,
        node_cores: u32,
        node_gpus: u32,
    },
}

/// A description that has been checked against a resource shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedDescription(TaskDescription);

impl ValidatedDescription {
    pub fn into_inner(self) -> TaskDescription {
        self.0
    }
}

impl Deref for ValidatedDescription {
    type Target = TaskDescription;
    fn deref(&self) -> &TaskDescription {
        &self.0
    }
}

/// Admission check of `td` against the whole pilot `pd`.
pub fn validate_task_description(
    td: &TaskDescription,
    pd: &PilotDescription,
) -> Result<ValidatedDescription, ValidationError> {
    validate_against_shape(td, pd.nodes, pd.cores_per_node, pd.gpus_per_node)
}

/// Admission check against `nodes` identical nodes, as seen by an empty slot
/// map. MPI tasks spread over `ceil(cores / cores_per_node)` nodes and their
/// gpus must come from those same nodes.
pub fn validate_against_shape(
    td: &TaskDescription,
    nodes: u32,
    cores_per_node: u32,
    gpus_per_node: u32,
) -> Result<ValidatedDescription, ValidationError> {
    let uid = td.uid.clone();
    if td.uid.trim().is_empty() {
        return Err(ValidationError::EmptyUid);
    }
    if td.cores_per_task == 0 {
        return Err(ValidationError::ZeroCores { uid });
    }
    if td.kind == TaskKind::Function && td.gpus_per_task > 0 {
        return Err(ValidationError::FunctionGpus { uid });
    }
    let total_cores = u64::from(nodes) * u64::from(cores_per_node);
    let total_gpus = u64::from(nodes) * u64::from(gpus_per_node);
    let cores = u64::from(td.cores_per_task);
    let gpus = u64::from(td.gpus_per_task);
    if cores > total_cores || gpus > total_gpus {
        return Err(ValidationError::TooLarge {
            uid,
            detail: format!(
                "requests {cores} cores/{gpus} gpus, pilot holds {total_cores}/{total_gpus}"
            ),
        });
    }
    if td.uses_mpi {
        let nodes_used = cores.div_ceil(u64::from(cores_per_node.max(1)));
        if gpus > nodes_used * u64::from(gpus_per_node) {
            return Err(ValidationError::TooLarge {
                uid,
                detail: format!(
                    "{gpus} gpus cannot be co-located with {cores} cores spread over {nodes_used} node(s)"
                ),
            });
        }
    } else if td.cores_per_task > cores_per_node || td.gpus_per_task > gpus_per_node {
        return Err(ValidationError::SingleNodeViolation {
            uid,
            cores: td.cores_per_task,
            gpus: td.gpus_per_task,
            node_cores: cores_per_node,
            node_gpus: gpus_per_node,
        });
    }
    Ok(ValidatedDescription(td.clone()))
}

/// The linear task lifecycle. Declaration order is lifecycle order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    New,
    Submitted,
    AgentPulled,
    StagingIn,
    Scheduled,
    Executing,
    StagingOut,
    Done,
    Failed,
    Canceled,
}

impl TaskState {
    pub const ALL: [TaskState; 10] = [
        TaskState::New,
        TaskState::Submitted,
        TaskState::AgentPulled,
        TaskState::StagingIn,
        TaskState::Scheduled,
        TaskState::Executing,
        TaskState::StagingOut,
        TaskState::Done,
        TaskState::Failed,
        TaskState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed | TaskState::Canceled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::New => "NEW",
            TaskState::Submitted => "SUBMITTED",
            TaskState::AgentPulled => "AGENT_PULLED",
            TaskState::StagingIn => "STAGING_IN",
            TaskState::Scheduled => "SCHEDULED",
            TaskState::Executing => "EXECUTING",
            TaskState::StagingOut => "STAGING_OUT",
            TaskState::Done => "DONE",
            TaskState::Failed => "FAILED",
            TaskState::Canceled => "CANCELED",
        }
    }

    /// Legal next states for a task with the given staging needs.
    pub fn successors(self, has_stage_in: bool, has_stage_out: bool) -> Vec<TaskState> {
        use TaskState::*;
        let forward: &[TaskState] = match self {
            New => &[Submitted],
            Submitted => &[AgentPulled],
            AgentPulled if has_stage_in => &[StagingIn],
            AgentPulled => &[Scheduled],
            StagingIn => &[Scheduled],
            Scheduled => &[Executing],
            Executing if has_stage_out => &[StagingOut],
            Executing => &[Done],
            StagingOut => &[Done],
            Done | Failed | Canceled => return Vec::new(),
        };
        let mut next = forward.to_vec();
        next.push(Failed);
        next.push(Canceled);
        next
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("task {uid}: illegal transition {from} -> {to}")]
    IllegalTransition {
        uid: String,
        from: TaskState,
        to: TaskState,
    },
    #[error("task {uid}: cannot enter SCHEDULED without a placement")]
    MissingPlacement { uid: String },
    #[error("task {uid}: requeue not allowed from {from}")]
    IllegalRequeue { uid: String, from: TaskState },
}

/// A task instance as it moves through the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub description: TaskDescription,
    pub state: TaskState,
    /// Held slots; present from SCHEDULED until the slots are released.
    pub placement: Option<Placement>,
    pub exit_code: Option<i32>,
    pub reason: Option<String>,
    pub pilot: Option<String>,
    /// Number of requeues after a launcher failure.
    pub retries: u32,
    pub timestamps: BTreeMap<TaskState, Micros>,
}

impl Task {
    pub fn new(description: TaskDescription) -> Self {
        Task {
            description,
            state: TaskState::New,
            placement: None,
            exit_code: None,
            reason: None,
            pilot: None,
            retries: 0,
            timestamps: BTreeMap::new(),
        }
    }

    pub fn uid(&self) -> &str {
        &self.description.uid
    }

    pub fn can_advance_to(&self, next: TaskState) -> bool {
        self.state
            .successors(
                !self.description.stage_in.is_empty(),
                !self.description.stage_out.is_empty(),
            )
            .contains(&next)
    }

    /// Moves to `next`, stamps it with `now`, and records a `task_state`
    /// event. Leaving EXECUTING drops the placement.
    pub fn advance(
        &mut self,
        next: TaskState,
        now: Micros,
        tracer: &mut Tracer,
    ) -> Result<(), TaskError> {
        if !self.can_advance_to(next) {
            return Err(TaskError::IllegalTransition {
                uid: self.description.uid.clone(),
                from: self.state,
                to: next,
            });
        }
        if next == TaskState::Scheduled && self.placement.is_none() {
            return Err(TaskError::MissingPlacement {
                uid: self.description.uid.clone(),
            });
        }
        if next > TaskState::Executing || next.is_terminal() {
            self.placement = None;
        }
        self.state = next;
        self.timestamps.insert(next, now);
        tracer.emit(
            now,
            names::TASK_STATE,
            Some(&self.description.uid),
            Some(next.as_str()),
        );
        Ok(())
    }

    /// Terminal failure with a reason, from any non-terminal state.
    pub fn fail(
        &mut self,
        reason: impl Into<String>,
        now: Micros,
        tracer: &mut Tracer,
    ) -> Result<(), TaskError> {
        self.reason = Some(reason.into());
        self.advance(TaskState::Failed, now, tracer)
    }

    /// Returns a SCHEDULED or EXECUTING task to the scheduler after its
    /// launcher failed: placement and the SCHEDULED/EXECUTING timestamps
    /// are dropped.
    pub fn requeue(&mut self, now: Micros, tracer: &mut Tracer) -> Result<(), TaskError> {
        if !matches!(self.state, TaskState::Scheduled | TaskState::Executing) {
            return Err(TaskError::IllegalRequeue {
                uid: self.description.uid.clone(),
                from: self.state,
            });
        }
        self.placement = None;
        self.timestamps.remove(&TaskState::Scheduled);
        self.timestamps.remove(&TaskState::Executing);
        self.retries += 1;
        // inputs are already staged, so the task re-enters just before
        // scheduling
        self.state = if self.description.stage_in.is_empty() {
            TaskState::AgentPulled
        } else {
            TaskState::StagingIn
        };
        tracer.emit(now, names::TASK_REQUEUE, Some(&self.description.uid), None);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilot::{Fabric, PilotDescription};
    use crate::scheduler::{NodeAssignment, Placement};

    fn pilot(nodes: u32, cores: u32, gpus: u32) -> PilotDescription {
        PilotDescription {
            nodes,
            cores_per_node: cores,
            gpus_per_node: gpus,
            ..PilotDescription::new("p", Fabric::Simulated)
        }
    }

    fn placement(uid: &str) -> Placement {
        Placement {
            task_uid: uid.into(),
            assignments: vec![NodeAssignment {
                node_index: 0,
                core_indices: vec![0],
                gpu_indices: vec![],
            }],
            dvm_id: None,
        }
    }

    #[test]
    fn exact_fit_is_valid() {
        let td = TaskDescription::executable("t", "x").with_cores(4);
        assert!(validate_task_description(&td, &pilot(1, 4, 0)).is_ok());
    }

    #[test]
    fn oversized_non_mpi_violates_single_node_rule() {
        let td = TaskDescription::executable("t", "x").with_cores(6);
        let err = validate_task_description(&td, &pilot(2, 4, 0)).unwrap_err();
        assert!(matches!(err, ValidationError::SingleNodeViolation { .. }));
    }

    #[test]
    fn mpi_may_span_nodes() {
        let td = TaskDescription::executable("t", "x").with_cores(6).with_mpi(true);
        assert!(validate_task_description(&td, &pilot(2, 4, 0)).is_ok());
        let td = td.with_cores(9);
        assert!(matches!(
            validate_task_description(&td, &pilot(2, 4, 0)),
            Err(ValidationError::TooLarge { .. })
        ));
    }

    #[test]
    fn rejects_empty_uid_zero_cores_and_function_gpus() {
        let p = pilot(1, 4, 1);
        let td = TaskDescription::executable("", "x");
        assert_eq!(validate_task_description(&td, &p), Err(ValidationError::EmptyUid));
        let td = TaskDescription::executable("t", "x").with_cores(0);
        assert!(matches!(
            validate_task_description(&td, &p),
            Err(ValidationError::ZeroCores { .. })
        ));
        let td = TaskDescription::function("t", "noop").with_gpus(1);
        assert!(matches!(
            validate_task_description(&td, &p),
            Err(ValidationError::FunctionGpus { .. })
        ));
    }

    #[test]
    fn gpu_task_on_gpu_less_pilot_is_too_large() {
        let td = TaskDescription::executable("t", "x").with_gpus(1);
        assert!(matches!(
            validate_task_description(&td, &pilot(1, 4, 0)),
            Err(ValidationError::TooLarge { .. })
        ));
    }

    #[test]
    fn lifecycle_walk_and_illegal_transition() {
        let mut tr = Tracer::disabled("test");
        let mut t = Task::new(TaskDescription::executable("t", "x"));
        t.advance(TaskState::Submitted, Micros(1), &mut tr).unwrap();
        t.advance(TaskState::AgentPulled, Micros(2), &mut tr).unwrap();
        assert!(matches!(
            t.advance(TaskState::Scheduled, Micros(3), &mut tr),
            Err(TaskError::MissingPlacement { .. })
        ));
        t.placement = Some(placement("t"));
        t.advance(TaskState::Scheduled, Micros(3), &mut tr).unwrap();
        t.advance(TaskState::Executing, Micros(7), &mut tr).unwrap();
        assert_eq!(t.timestamps[&TaskState::Executing], Micros(7));
        let err = t.advance(TaskState::StagingIn, Micros(8), &mut tr).unwrap_err();
        assert_eq!(
            err,
            TaskError::IllegalTransition {
                uid: "t".into(),
                from: TaskState::Executing,
                to: TaskState::StagingIn
            }
        );
        assert!(err.to_string().contains("EXECUTING"));
        assert!(err.to_string().contains("STAGING_IN"));
        t.advance(TaskState::Done, Micros(9), &mut tr).unwrap();
        assert!(t.placement.is_none());
        assert!(t.advance(TaskState::Failed, Micros(10), &mut tr).is_err());
    }

    #[test]
    fn staging_states_are_mandatory_with_directives() {
        let mut tr = Tracer::disabled("test");
        let mut td = TaskDescription::executable("t", "x");
        td.stage_in.push(StagingDirective::new("a", "b"));
        let mut t = Task::new(td);
        t.advance(TaskState::Submitted, Micros(0), &mut tr).unwrap();
        t.advance(TaskState::AgentPulled, Micros(0), &mut tr).unwrap();
        t.placement = Some(placement("t"));
        assert!(t.advance(TaskState::Scheduled, Micros(0), &mut tr).is_err());
        t.advance(TaskState::StagingIn, Micros(0), &mut tr).unwrap();
        t.advance(TaskState::Scheduled, Micros(0), &mut tr).unwrap();
    }

    #[test]
    fn requeue_returns_to_scheduler_queue() {
        let mut tr = Tracer::disabled("test");
        let mut t = Task::new(TaskDescription::executable("t", "x"));
        t.advance(TaskState::Submitted, Micros(0), &mut tr).unwrap();
        t.advance(TaskState::AgentPulled, Micros(0), &mut tr).unwrap();
        assert!(t.requeue(Micros(0), &mut tr).is_err());
        t.placement = Some(placement("t"));
        t.advance(TaskState::Scheduled, Micros(1), &mut tr).unwrap();
        t.advance(TaskState::Executing, Micros(2), &mut tr).unwrap();
        t.requeue(Micros(3), &mut tr).unwrap();
        assert_eq!(t.state, TaskState::AgentPulled);
        assert_eq!(t.retries, 1);
        assert!(t.placement.is_none());
        assert!(!t.timestamps.contains_key(&TaskState::Executing));
    }
}
