//! Error types, grouped by the stage that raises them.

use thiserror::Error;

/// Errors raised while composing a workflow with the builder DSL.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("model id `{0}` is already registered")]
    DuplicateModelId(String),
    #[error("invalid port spec on `{model}`: {reason}")]
    InvalidPortSpec { model: String, reason: String },
    #[error("a workflow builder scope is already active (`{0}`)")]
    NestedScope(String),
    #[error("no active workflow builder scope")]
    NoActiveScope,
    #[error("required input port `{port}` of `{model}` is not bound")]
    UnboundRequiredInput { model: String, port: String },
    #[error("dtype mismatch binding `{port}` of `{model}`: port is {expected}, value is {found}")]
    DtypeMismatch {
        model: String,
        port: String,
        expected: String,
        found: String,
    },
    #[error("value produced inside loop region {region} used outside it without a carry declaration")]
    UncarriedLoopDependency { region: usize },
    #[error("loop regions cannot nest")]
    NestedLoop,
    #[error("carried value {slot} of loop region {region}: {reason}")]
    BadCarry {
        region: usize,
        slot: usize,
        reason: String,
    },
    #[error("model `{0}` is not patchable")]
    NotPatchable(String),
    #[error("model `{0}` is not a weight-patching adapter")]
    NotAnAdapter(String),
    #[error("patch ({target}, {lora}) not present")]
    PatchNotFound { target: String, lora: String },
    #[error("workflow `{0}` has no nodes, inputs or outputs")]
    EmptyWorkflow(String),
    #[error("workflow `{workflow}` contains a cycle involving `{node}`")]
    CycleDetected { workflow: String, node: String },
    #[error("workflow output `{0}` is not reachable from any workflow input")]
    UnreachableOutput(String),
    #[error("dangling binding in `{workflow}`: {reference}")]
    DanglingBinding { workflow: String, reference: String },
    #[error("unknown model id `{0}`")]
    UnknownModel(String),
    #[error("template json: {0}")]
    Json(String),
}

/// Errors raised while lowering a template or applying rewrite passes.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompileError {
    #[error("pass `{pass}` produced a cycle")]
    PassProducedCycle { pass: String },
    #[error("pass `{pass}` broke port typing: {reason}")]
    PassTypeError { pass: String, reason: String },
    #[error("pass order must be loop_fusion -> approx_cache -> async_lora; got `{0}`")]
    PassOrder(String),
    #[error("approximate caching: workflow has no latent-initialization node")]
    NoLatentInit,
    #[error("approximate caching: workflow has multiple latent-initialization nodes")]
    MultipleLatentInit,
    #[error("async lora: patch target `{0}` is not in the workflow")]
    TargetNotInWorkflow(String),
    #[error("template invalid: {0}")]
    Template(#[from] BuildError),
    #[error("request is missing workflow input `{0}`")]
    MissingInput(String),
    #[error("loop trip count must be positive, got {0}")]
    TripCountNonPositive(i64),
}

/// Errors raised while loading or querying latency profiles.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("no latency profile for model `{0}`")]
    MissingProfile(String),
    #[error("profile `{model}` violates monotonicity: {reason}")]
    MonotonicityViolation { model: String, reason: String },
    #[error("profile `{model}` invalid: {reason}")]
    Invalid { model: String, reason: String },
    #[error("batch {batch} exceeds B_max {b_max} for `{model}`")]
    BatchExceedsMax {
        model: String,
        batch: usize,
        b_max: usize,
    },
    #[error("parallelism {k} exceeds k_max {k_max} for `{model}`")]
    ParallelismExceedsMax {
        model: String,
        k: usize,
        k_max: usize,
    },
    #[error("profile json: {0}")]
    Json(String),
}

/// Errors raised while validating an experiment configuration.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("model `{model}` ({mem} bytes) larger than executor capacity ({cap} bytes)")]
    ModelLargerThanCapacity { model: String, mem: u64, cap: u64 },
    #[error("workflow `{workflow}` footprint ({mem} bytes) exceeds executor capacity ({cap} bytes)")]
    FootprintExceedsCapacity { workflow: String, mem: u64, cap: u64 },
}

/// Errors raised during a simulation run. Invariant violations abort the run.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("invariant violated at t={t_us}us: {reason}")]
    InvariantViolation { t_us: u64, reason: String },
    #[error("duplicate completion for node `{0}`")]
    DuplicateCompletion(String),
    #[error("fetch of reclaimed tensor handle {0}")]
    HandleReclaimed(u64),
    #[error("reclaim of tensor handle {0} with active consumers")]
    ActiveConsumers(u64),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("event log corrupt: {0}")]
    CorruptLog(String),
}
