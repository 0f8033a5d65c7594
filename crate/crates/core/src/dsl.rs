//! Declarative workflow composition.
//!
//! Models are registered with typed input/output ports; a workflow is built
//! by invoking registered models inside a builder scope. Every invocation is
//! recorded as a node and data dependencies are derived from the bindings —
//! the developer never wires a DAG by hand. Iterative denoising is expressed
//! with [`WorkflowContext::counted_loop`], whose body is traced exactly once;
//! the trip count stays symbolic until a request arrives.
//!
//! Finalized templates are immutable, serializable to a byte-stable JSON
//! document, and safe to share across threads.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::BuildError;

/// Port payload type tags.
///
/// `Tensor` is the generic payload type: `Image` and `Latent` values may bind
/// to a `Tensor` port (and vice versa), since both are tensors with extra
/// meaning attached. `Text` and `Int` never coerce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Tensor,
    Text,
    Int,
    Image,
    Latent,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::Tensor => "tensor",
            Dtype::Text => "text",
            Dtype::Int => "int",
            Dtype::Image => "image",
            Dtype::Latent => "latent",
        }
    }

    fn is_payload(self) -> bool {
        matches!(self, Dtype::Tensor | Dtype::Image | Dtype::Latent)
    }

    /// Whether a value of type `value` may bind to a port of type `self`.
    pub fn accepts(self, value: Dtype) -> bool {
        self == value
            || (self == Dtype::Tensor && value.is_payload())
            || (value == Dtype::Tensor && self.is_payload())
    }
}

/// Port payload size: fixed, or resolved against the request's image
/// resolution at instantiation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeSpec {
    Bytes(u64),
    BytesPerMegapixel(u64),
}

impl SizeSpec {
    pub fn resolve(self, megapixels: f64) -> u64 {
        match self {
            SizeSpec::Bytes(b) => b,
            SizeSpec::BytesPerMegapixel(b) => (b as f64 * megapixels).round() as u64,
        }
    }
}

/// A typed model input or output port.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortSpec {
    pub name: String,
    pub dtype: Dtype,
    pub size: SizeSpec,
    #[serde(default)]
    pub deferred: bool,
}

impl PortSpec {
    pub fn new(name: &str, dtype: Dtype, bytes: u64) -> Self {
        PortSpec {
            name: name.to_string(),
            dtype,
            size: SizeSpec::Bytes(bytes),
            deferred: false,
        }
    }

    pub fn deferred(mut self) -> Self {
        self.deferred = true;
        self
    }
}

/// What a model is, from the scheduler's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TextEncoder,
    Diffusion,
    Vae,
    Controlnet,
    LoraPatch,
    LatentInit,
    CacheLookup,
    Aux,
}

/// Static description of a model: identity, typed ports, memory footprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub kind: ModelKind,
    pub inputs: Vec<PortSpec>,
    pub outputs: Vec<PortSpec>,
    pub param_bytes: u64,
    pub mem_bytes: u64,
    #[serde(default)]
    pub patchable: bool,
}

impl ModelSpec {
    fn validate(&self) -> Result<(), BuildError> {
        let err = |reason: &str| {
            Err(BuildError::InvalidPortSpec {
                model: self.model_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.mem_bytes < self.param_bytes {
            return err("mem_bytes must be >= param_bytes");
        }
        for ports in [&self.inputs, &self.outputs] {
            let mut seen = BTreeSet::new();
            for p in ports {
                if !seen.insert(p.name.as_str()) {
                    return err(&format!("duplicate port name `{}`", p.name));
                }
            }
        }
        if self.outputs.iter().any(|p| p.deferred) {
            return err("output ports cannot be deferred");
        }
        if self.kind != ModelKind::Diffusion && self.inputs.iter().any(|p| p.deferred) {
            return err("only diffusion models may declare deferred inputs");
        }
        if self.kind == ModelKind::LoraPatch {
            if self.patchable {
                return err("adapters are applied via add_patch and cannot themselves be patchable");
            }
            if !self.inputs.is_empty() || !self.outputs.is_empty() {
                return err("adapters carry no compute ports");
            }
        }
        Ok(())
    }
}

/// Opaque handle returned by [`ModelRegistry::register`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelHandle(usize);

/// Append-only registry of model specs; shared by workflow builders.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    specs: Vec<ModelSpec>,
    by_id: BTreeMap<String, usize>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ModelSpec) -> Result<ModelHandle, BuildError> {
        spec.validate()?;
        if self.by_id.contains_key(&spec.model_id) {
            return Err(BuildError::DuplicateModelId(spec.model_id));
        }
        let idx = self.specs.len();
        self.by_id.insert(spec.model_id.clone(), idx);
        self.specs.push(spec);
        Ok(ModelHandle(idx))
    }

    pub fn get(&self, h: ModelHandle) -> &ModelSpec {
        &self.specs[h.0]
    }

    pub fn lookup(&self, model_id: &str) -> Result<&ModelSpec, BuildError> {
        self.by_id
            .get(model_id)
            .map(|&i| &self.specs[i])
            .ok_or_else(|| BuildError::UnknownModel(model_id.to_string()))
    }

    pub fn handle(&self, model_id: &str) -> Result<ModelHandle, BuildError> {
        self.by_id
            .get(model_id)
            .map(|&i| ModelHandle(i))
            .ok_or_else(|| BuildError::UnknownModel(model_id.to_string()))
    }

    pub fn specs(&self) -> &[ModelSpec] {
        &self.specs
    }
}

/// Symbolic handle to a value flowing through the workflow under
/// construction. Returned by `invoke` and usable as a downstream binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueRef(usize);

/// Where a bound value comes from. The serialized form of the dependency
/// graph; resolvable against the template's own node and input lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BindingSource {
    Input { name: String },
    Node { node_id: String, port: String },
    Const { dtype: Dtype, value: String },
    /// Value carried across loop iterations; `slot` indexes the region's
    /// carried list. Valid only inside that region's body.
    Carried { region: usize, slot: usize },
    /// Final value of a carried slot after the region's last iteration.
    LoopOut { region: usize, slot: usize },
}

#[derive(Debug, Clone)]
enum ValueOrigin {
    WfInput(usize),
    NodeOut { node: usize, port: usize },
    Const { dtype: Dtype, value: String },
    Carried { region: usize, slot: usize },
    LoopOut { region: usize, slot: usize },
}

#[derive(Debug, Clone)]
struct ValueInfo {
    origin: ValueOrigin,
    dtype: Dtype,
    /// Region the value is confined to, if produced inside a loop body.
    region: Option<usize>,
}

/// A workflow input placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WfInput {
    pub name: String,
    pub dtype: Dtype,
    pub size: SizeSpec,
}

/// A named workflow output binding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WfOutput {
    pub name: String,
    pub source: BindingSource,
}

/// One recorded model invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTemplate {
    pub node_id: String,
    pub model_id: String,
    /// input port name -> source, in the model's declared port order.
    /// Deferred ports may be absent (adapter not used).
    pub bindings: Vec<(String, BindingSource)>,
    /// Loop region this node belongs to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<usize>,
}

/// An edge derived from bindings; kept explicit in the serialized form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTemplate {
    pub from_node: String,
    pub from_port: String,
    pub to_node: String,
    pub to_port: String,
    pub deferred: bool,
}

/// One carried value of a loop region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarriedValue {
    /// Value feeding iteration 0.
    pub init: BindingSource,
    /// Body value feeding the next iteration (and the final loop output).
    pub next: BindingSource,
    pub dtype: Dtype,
}

/// A counted loop over a traced body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopRegion {
    pub region_id: usize,
    /// Node ids of the body, in trace order.
    pub body: Vec<String>,
    /// Workflow input (dtype int) or int constant giving the trip count.
    pub trip_count: BindingSource,
    pub carried: Vec<CarriedValue>,
}

/// A finalized, immutable workflow template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowTemplate {
    pub workflow_id: String,
    pub inputs: Vec<WfInput>,
    pub outputs: Vec<WfOutput>,
    pub nodes: Vec<NodeTemplate>,
    pub edges: Vec<EdgeTemplate>,
    pub loops: Vec<LoopRegion>,
    /// (target model id, lora model id) pairs.
    pub patches: Vec<(String, String)>,
}

struct BuilderState {
    workflow_id: String,
    inputs: Vec<WfInput>,
    outputs: Vec<WfOutput>,
    nodes: Vec<NodeTemplate>,
    /// Output port names per node, parallel to `nodes`.
    out_ports: Vec<Vec<String>>,
    loops: Vec<LoopRegion>,
    patches: Vec<(String, String)>,
    values: Vec<ValueInfo>,
    /// Per-model ordinal counters for canonical node ids.
    ordinals: BTreeMap<String, usize>,
    /// Region currently being traced, if inside `counted_loop`.
    open_region: Option<usize>,
}

/// Builder context. One scope may be active at a time; finalized templates
/// are immutable and independent of the context.
pub struct WorkflowContext {
    pub registry: ModelRegistry,
    active: Option<BuilderState>,
}

impl WorkflowContext {
    pub fn new(registry: ModelRegistry) -> Self {
        WorkflowContext {
            registry,
            active: None,
        }
    }

    pub fn register_model(&mut self, spec: ModelSpec) -> Result<ModelHandle, BuildError> {
        self.registry.register(spec)
    }

    pub fn begin_workflow(&mut self, workflow_id: &str) -> Result<(), BuildError> {
        if let Some(b) = &self.active {
            return Err(BuildError::NestedScope(b.workflow_id.clone()));
        }
        self.active = Some(BuilderState {
            workflow_id: workflow_id.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            nodes: Vec::new(),
            out_ports: Vec::new(),
            loops: Vec::new(),
            patches: Vec::new(),
            values: Vec::new(),
            ordinals: BTreeMap::new(),
            open_region: None,
        });
        Ok(())
    }

    fn state(&mut self) -> Result<&mut BuilderState, BuildError> {
        self.active.as_mut().ok_or(BuildError::NoActiveScope)
    }

    /// Declare a workflow input placeholder.
    pub fn add_input(&mut self, name: &str, dtype: Dtype, size: SizeSpec) -> Result<ValueRef, BuildError> {
        let b = self.state()?;
        let idx = b.inputs.len();
        b.inputs.push(WfInput {
            name: name.to_string(),
            dtype,
            size,
        });
        b.values.push(ValueInfo {
            origin: ValueOrigin::WfInput(idx),
            dtype,
            region: None,
        });
        Ok(ValueRef(b.values.len() - 1))
    }

    /// A constant binding (e.g. a mode selector).
    pub fn const_text(&mut self, value: &str) -> Result<ValueRef, BuildError> {
        let b = self.state()?;
        b.values.push(ValueInfo {
            origin: ValueOrigin::Const {
                dtype: Dtype::Text,
                value: value.to_string(),
            },
            dtype: Dtype::Text,
            region: None,
        });
        Ok(ValueRef(b.values.len() - 1))
    }

    pub fn const_int(&mut self, value: i64) -> Result<ValueRef, BuildError> {
        let b = self.state()?;
        b.values.push(ValueInfo {
            origin: ValueOrigin::Const {
                dtype: Dtype::Int,
                value: value.to_string(),
            },
            dtype: Dtype::Int,
            region: None,
        });
        Ok(ValueRef(b.values.len() - 1))
    }

    /// Record a model invocation. Returns one value per declared output port.
    pub fn invoke(
        &mut self,
        model: ModelHandle,
        bindings: &[(&str, ValueRef)],
    ) -> Result<Vec<ValueRef>, BuildError> {
        let spec = self.registry.get(model).clone();
        let b = self.state()?;
        if spec.kind == ModelKind::LoraPatch {
            return Err(BuildError::NotPatchable(spec.model_id));
        }
        let open_region = b.open_region;

        let mut resolved: Vec<(String, BindingSource)> = Vec::new();
        for port in &spec.inputs {
            let bound = bindings.iter().find(|(name, _)| *name == port.name);
            match bound {
                None if port.deferred => continue,
                None => {
                    return Err(BuildError::UnboundRequiredInput {
                        model: spec.model_id.clone(),
                        port: port.name.clone(),
                    })
                }
                Some((_, vref)) => {
                    let info = b
                        .values
                        .get(vref.0)
                        .ok_or(BuildError::NoActiveScope)?
                        .clone();
                    if !port.dtype.accepts(info.dtype) {
                        return Err(BuildError::DtypeMismatch {
                            model: spec.model_id.clone(),
                            port: port.name.clone(),
                            expected: port.dtype.name().to_string(),
                            found: info.dtype.name().to_string(),
                        });
                    }
                    // Symbolic taint: a value confined to a loop region may
                    // only be read inside that region.
                    if let Some(r) = info.region {
                        if open_region != Some(r) {
                            return Err(BuildError::UncarriedLoopDependency { region: r });
                        }
                    }
                    resolved.push((port.name.clone(), binding_source(b, &info)));
                }
            }
        }
        for (name, _) in bindings {
            if !spec.inputs.iter().any(|p| p.name == *name) {
                return Err(BuildError::UnboundRequiredInput {
                    model: spec.model_id.clone(),
                    port: format!("{name} (no such port)"),
                });
            }
        }

        let ordinal = *b
            .ordinals
            .entry(spec.model_id.clone())
            .and_modify(|o| *o += 1)
            .or_insert(0);
        let node_id = format!("{}/{}#{}", b.workflow_id, spec.model_id, ordinal);
        let node_idx = b.nodes.len();
        b.nodes.push(NodeTemplate {
            node_id,
            model_id: spec.model_id.clone(),
            bindings: resolved,
            region: open_region,
        });
        b.out_ports
            .push(spec.outputs.iter().map(|p| p.name.clone()).collect());

        let mut outs = Vec::new();
        for (port_idx, port) in spec.outputs.iter().enumerate() {
            b.values.push(ValueInfo {
                origin: ValueOrigin::NodeOut {
                    node: node_idx,
                    port: port_idx,
                },
                dtype: port.dtype,
                region: open_region,
            });
            outs.push(ValueRef(b.values.len() - 1));
        }
        Ok(outs)
    }

    /// Trace a counted loop once. `carried_inits` are the values entering
    /// iteration 0; the body receives one symbolic carried-in ref per slot
    /// and must return the slot values feeding the next iteration. The
    /// returned refs are the final carried values after the last iteration.
    pub fn counted_loop<F>(
        &mut self,
        trip_count: ValueRef,
        carried_inits: &[ValueRef],
        body: F,
    ) -> Result<Vec<ValueRef>, BuildError>
    where
        F: FnOnce(&mut Self, &[ValueRef]) -> Result<Vec<ValueRef>, BuildError>,
    {
        let carried_in = {
            let b = self.state()?;
            if b.open_region.is_some() {
                return Err(BuildError::NestedLoop);
            }
            let trip_info = b.values.get(trip_count.0).ok_or(BuildError::NoActiveScope)?;
            if trip_info.dtype != Dtype::Int {
                return Err(BuildError::DtypeMismatch {
                    model: "loop".into(),
                    port: "trip_count".into(),
                    expected: "int".into(),
                    found: trip_info.dtype.name().into(),
                });
            }
            let region = b.loops.len();
            let trip_source = binding_source(b, &b.values[trip_count.0].clone());
            let mut carried = Vec::new();
            let mut carried_in = Vec::new();
            for (slot, init) in carried_inits.iter().enumerate() {
                let info = b.values[init.0].clone();
                if info.region.is_some() {
                    return Err(BuildError::BadCarry {
                        region,
                        slot,
                        reason: "carry init must come from outside the loop".into(),
                    });
                }
                carried.push(CarriedValue {
                    init: binding_source(b, &info),
                    next: BindingSource::Carried { region, slot }, // patched after trace
                    dtype: info.dtype,
                });
                b.values.push(ValueInfo {
                    origin: ValueOrigin::Carried { region, slot },
                    dtype: info.dtype,
                    region: Some(region),
                });
                carried_in.push(ValueRef(b.values.len() - 1));
            }
            b.loops.push(LoopRegion {
                region_id: region,
                body: Vec::new(),
                trip_count: trip_source,
                carried,
            });
            b.open_region = Some(region);
            carried_in
        };

        let region_idx = self.state()?.loops.len() - 1;
        let body_start = self.state()?.nodes.len();
        let carried_out = body(self, &carried_in)?;

        let b = self.state()?;
        b.open_region = None;
        let body_nodes: Vec<String> = b.nodes[body_start..]
            .iter()
            .map(|n| n.node_id.clone())
            .collect();
        b.loops[region_idx].body = body_nodes;

        if carried_out.len() != carried_in.len() {
            return Err(BuildError::BadCarry {
                region: region_idx,
                slot: carried_out.len(),
                reason: format!(
                    "body returned {} carried values, expected {}",
                    carried_out.len(),
                    carried_in.len()
                ),
            });
        }
        let mut finals = Vec::new();
        for (slot, out) in carried_out.iter().enumerate() {
            let info = b.values[out.0].clone();
            let expected = b.loops[region_idx].carried[slot].dtype;
            if !expected.accepts(info.dtype) {
                return Err(BuildError::BadCarry {
                    region: region_idx,
                    slot,
                    reason: format!(
                        "carried dtype mismatch: {} vs {}",
                        expected.name(),
                        info.dtype.name()
                    ),
                });
            }
            if info.region != Some(region_idx) {
                return Err(BuildError::BadCarry {
                    region: region_idx,
                    slot,
                    reason: "carried-out value must be produced inside the body".into(),
                });
            }
            let next = binding_source(b, &info);
            b.loops[region_idx].carried[slot].next = next;
            b.values.push(ValueInfo {
                origin: ValueOrigin::LoopOut {
                    region: region_idx,
                    slot,
                },
                dtype: info.dtype,
                region: None,
            });
            finals.push(ValueRef(b.values.len() - 1));
        }
        Ok(finals)
    }

    /// Attach a weight-patching adapter to a patchable model.
    pub fn add_patch(&mut self, target: ModelHandle, lora: ModelHandle) -> Result<(), BuildError> {
        let target_spec = self.registry.get(target).clone();
        let lora_spec = self.registry.get(lora).clone();
        if !target_spec.patchable {
            return Err(BuildError::NotPatchable(target_spec.model_id));
        }
        if lora_spec.kind != ModelKind::LoraPatch {
            return Err(BuildError::NotAnAdapter(lora_spec.model_id));
        }
        let b = self.state()?;
        b.patches.push((target_spec.model_id, lora_spec.model_id));
        Ok(())
    }

    pub fn rm_patch(&mut self, target: ModelHandle, lora: ModelHandle) -> Result<(), BuildError> {
        let target_id = self.registry.get(target).model_id.clone();
        let lora_id = self.registry.get(lora).model_id.clone();
        let b = self.state()?;
        let pos = b
            .patches
            .iter()
            .position(|(t, l)| *t == target_id && *l == lora_id)
            .ok_or(BuildError::PatchNotFound {
                target: target_id,
                lora: lora_id,
            })?;
        b.patches.remove(pos);
        Ok(())
    }

    /// Declare a workflow output.
    pub fn add_output(&mut self, name: &str, value: ValueRef) -> Result<(), BuildError> {
        let b = self.state()?;
        let info = b.values.get(value.0).ok_or(BuildError::NoActiveScope)?.clone();
        if let Some(r) = info.region {
            return Err(BuildError::UncarriedLoopDependency { region: r });
        }
        let source = binding_source(b, &info);
        b.outputs.push(WfOutput {
            name: name.to_string(),
            source,
        });
        Ok(())
    }

    /// Validate and seal the template. The builder scope closes; the
    /// template is immutable from here on.
    pub fn finalize(&mut self) -> Result<WorkflowTemplate, BuildError> {
        let b = self.active.take().ok_or(BuildError::NoActiveScope)?;
        if b.open_region.is_some() {
            return Err(BuildError::NestedLoop);
        }
        let template = WorkflowTemplate {
            workflow_id: b.workflow_id,
            inputs: b.inputs,
            outputs: b.outputs,
            nodes: b.nodes,
            edges: Vec::new(),
            loops: b.loops,
            patches: b.patches,
        };
        let template = template.with_derived_edges(&self.registry)?;
        template.validate(&self.registry)?;
        Ok(template)
    }
}

fn binding_source(b: &BuilderState, info: &ValueInfo) -> BindingSource {
    match &info.origin {
        ValueOrigin::WfInput(i) => BindingSource::Input {
            name: b.inputs[*i].name.clone(),
        },
        ValueOrigin::NodeOut { node, port } => BindingSource::Node {
            node_id: b.nodes[*node].node_id.clone(),
            port: port_name(b, *node, *port),
        },
        ValueOrigin::Const { dtype, value } => BindingSource::Const {
            dtype: *dtype,
            value: value.clone(),
        },
        ValueOrigin::Carried { region, slot } => BindingSource::Carried {
            region: *region,
            slot: *slot,
        },
        ValueOrigin::LoopOut { region, slot } => BindingSource::LoopOut {
            region: *region,
            slot: *slot,
        },
    }
}

fn port_name(b: &BuilderState, node: usize, port: usize) -> String {
    b.out_ports[node][port].clone()
}

impl WorkflowTemplate {
    /// Derive the explicit edge list from bindings (eager and deferred).
    fn with_derived_edges(mut self, registry: &ModelRegistry) -> Result<Self, BuildError> {
        let mut edges = Vec::new();
        for node in &self.nodes {
            let spec = registry.lookup(&node.model_id)?;
            for (port, source) in &node.bindings {
                let deferred = spec
                    .inputs
                    .iter()
                    .find(|p| p.name == *port)
                    .map(|p| p.deferred)
                    .unwrap_or(false);
                if let BindingSource::Node { node_id, port: from_port } = source {
                    edges.push(EdgeTemplate {
                        from_node: node_id.clone(),
                        from_port: from_port.clone(),
                        to_node: node.node_id.clone(),
                        to_port: port.clone(),
                        deferred,
                    });
                }
            }
        }
        self.edges = edges;
        Ok(self)
    }

    /// Revalidate all template invariants. Runs at finalize and after
    /// deserialization, where hand-edited documents may be inconsistent.
    pub fn validate(&self, registry: &ModelRegistry) -> Result<(), BuildError> {
        if self.nodes.is_empty() || self.inputs.is_empty() || self.outputs.is_empty() {
            return Err(BuildError::EmptyWorkflow(self.workflow_id.clone()));
        }
        let node_index: BTreeMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id.as_str(), i))
            .collect();
        let dangling = |reference: String| BuildError::DanglingBinding {
            workflow: self.workflow_id.clone(),
            reference,
        };

        // Resolve every binding source; check dtypes and port existence.
        let resolve_dtype = |source: &BindingSource| -> Result<Dtype, BuildError> {
            match source {
                BindingSource::Input { name } => self
                    .inputs
                    .iter()
                    .find(|i| i.name == *name)
                    .map(|i| i.dtype)
                    .ok_or_else(|| dangling(format!("workflow input `{name}`"))),
                BindingSource::Node { node_id, port } => {
                    let idx = node_index
                        .get(node_id.as_str())
                        .ok_or_else(|| dangling(format!("node `{node_id}`")))?;
                    let spec = registry.lookup(&self.nodes[*idx].model_id)?;
                    spec.outputs
                        .iter()
                        .find(|p| p.name == *port)
                        .map(|p| p.dtype)
                        .ok_or_else(|| dangling(format!("port `{node_id}.{port}`")))
                }
                BindingSource::Const { dtype, .. } => Ok(*dtype),
                BindingSource::Carried { region, slot } | BindingSource::LoopOut { region, slot } => self
                    .loops
                    .get(*region)
                    .and_then(|l| l.carried.get(*slot))
                    .map(|c| c.dtype)
                    .ok_or_else(|| dangling(format!("carried value {region}/{slot}"))),
            }
        };

        for node in &self.nodes {
            let spec = registry.lookup(&node.model_id)?;
            for port in &spec.inputs {
                let bound = node.bindings.iter().find(|(name, _)| *name == port.name);
                match bound {
                    None if port.deferred => {}
                    None => {
                        return Err(BuildError::UnboundRequiredInput {
                            model: node.node_id.clone(),
                            port: port.name.clone(),
                        })
                    }
                    Some((_, source)) => {
                        let found = resolve_dtype(source)?;
                        if !port.dtype.accepts(found) {
                            return Err(BuildError::DtypeMismatch {
                                model: node.node_id.clone(),
                                port: port.name.clone(),
                                expected: port.dtype.name().to_string(),
                                found: found.name().to_string(),
                            });
                        }
                    }
                }
            }
        }
        for out in &self.outputs {
            resolve_dtype(&out.source)?;
        }
        for lp in &self.loops {
            for c in &lp.carried {
                resolve_dtype(&c.init)?;
                resolve_dtype(&c.next)?;
            }
            for node_id in &lp.body {
                if !node_index.contains_key(node_id.as_str()) {
                    return Err(dangling(format!("loop body node `{node_id}`")));
                }
            }
        }

        self.check_acyclic(&node_index)?;
        self.check_reachability(&node_index)?;
        Ok(())
    }

    /// Cycle check over eager+deferred edges with loop regions condensed
    /// into single composite vertices.
    fn check_acyclic(&self, node_index: &BTreeMap<&str, usize>) -> Result<(), BuildError> {
        // Vertex = region id for loop members, or usize::MAX - node index
        // for free nodes. Map both to a compact id space.
        let vertex_of = |node_idx: usize| -> usize {
            match self.nodes[node_idx].region {
                Some(r) => r,
                None => self.loops.len() + node_idx,
            }
        };
        let n_vertices = self.loops.len() + self.nodes.len();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_vertices];
        for e in &self.edges {
            let from = vertex_of(node_index[e.from_node.as_str()]);
            let to = vertex_of(node_index[e.to_node.as_str()]);
            if from != to {
                adj[from].insert(to);
            }
        }
        // Loop init bindings create edges into the region vertex.
        for (r, lp) in self.loops.iter().enumerate() {
            for c in &lp.carried {
                if let BindingSource::Node { node_id, .. } = &c.init {
                    if let Some(&idx) = node_index.get(node_id.as_str()) {
                        let from = vertex_of(idx);
                        if from != r {
                            adj[from].insert(r);
                        }
                    }
                }
            }
        }
        // LoopOut consumption creates edges out of the region vertex.
        let add_loopout = |source: &BindingSource, to: usize, adj: &mut Vec<BTreeSet<usize>>| {
            if let BindingSource::LoopOut { region, .. } = source {
                if *region != to {
                    adj[*region].insert(to);
                }
            }
        };
        for node in &self.nodes {
            let to = vertex_of(node_index[node.node_id.as_str()]);
            for (_, source) in &node.bindings {
                add_loopout(source, to, &mut adj);
            }
        }

        // Kahn's algorithm.
        let mut indeg = vec![0usize; n_vertices];
        for out in &adj {
            for &v in out {
                indeg[v] += 1;
            }
        }
        let mut queue: Vec<usize> = (0..n_vertices).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop() {
            seen += 1;
            for &w in &adj[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push(w);
                }
            }
        }
        if seen != n_vertices {
            let culprit = (0..n_vertices)
                .find(|&v| indeg[v] > 0)
                .and_then(|v| {
                    if v < self.loops.len() {
                        self.loops[v].body.first().cloned()
                    } else {
                        Some(self.nodes[v - self.loops.len()].node_id.clone())
                    }
                })
                .unwrap_or_default();
            return Err(BuildError::CycleDetected {
                workflow: self.workflow_id.clone(),
                node: culprit,
            });
        }
        Ok(())
    }

    /// Every output must be reachable from at least one workflow input.
    fn check_reachability(&self, node_index: &BTreeMap<&str, usize>) -> Result<(), BuildError> {
        // Taint nodes transitively reachable from any workflow input.
        let mut tainted: Vec<bool> = vec![false; self.nodes.len()];
        let is_tainted_source = |source: &BindingSource, tainted: &[bool]| -> bool {
            match source {
                BindingSource::Input { .. } => true,
                BindingSource::Node { node_id, .. } => tainted[node_index[node_id.as_str()]],
                BindingSource::Const { .. } => false,
                BindingSource::Carried { region, slot } | BindingSource::LoopOut { region, slot } => {
                    // Carried values inherit taint from their init chain.
                    let c = &self.loops[*region].carried[*slot];
                    match &c.init {
                        BindingSource::Input { .. } => true,
                        BindingSource::Node { node_id, .. } => tainted[node_index[node_id.as_str()]],
                        _ => false,
                    }
                }
            }
        };
        let mut changed = true;
        while changed {
            changed = false;
            for (idx, node) in self.nodes.iter().enumerate() {
                if tainted[idx] {
                    continue;
                }
                if node
                    .bindings
                    .iter()
                    .any(|(_, s)| is_tainted_source(s, &tainted))
                {
                    tainted[idx] = true;
                    changed = true;
                }
            }
        }
        for out in &self.outputs {
            if !is_tainted_source(&out.source, &tainted) {
                return Err(BuildError::UnreachableOutput(out.name.clone()));
            }
        }
        Ok(())
    }

    /// Byte-stable JSON serialization (struct field order, pretty-printed).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serialization cannot fail")
    }

    /// Parse and revalidate a template document.
    pub fn from_json(doc: &str, registry: &ModelRegistry) -> Result<Self, BuildError> {
        let t: WorkflowTemplate =
            serde_json::from_str(doc).map_err(|e| BuildError::Json(e.to_string()))?;
        t.validate(registry)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1024 * 1024;

    fn text_encoder() -> ModelSpec {
        ModelSpec {
            model_id: "enc".into(),
            kind: ModelKind::TextEncoder,
            inputs: vec![
                PortSpec::new("prompt", Dtype::Text, 4096),
                PortSpec::new("negative_prompt", Dtype::Text, 4096),
            ],
            outputs: vec![PortSpec::new("prompt_embeds", Dtype::Tensor, 2 * MIB)],
            param_bytes: MIB,
            mem_bytes: MIB,
            patchable: false,
        }
    }

    fn diffusion() -> ModelSpec {
        ModelSpec {
            model_id: "base".into(),
            kind: ModelKind::Diffusion,
            inputs: vec![
                PortSpec::new("latents", Dtype::Latent, 2 * MIB),
                PortSpec::new("prompt_embeds", Dtype::Tensor, 2 * MIB),
                PortSpec::new("controlnet_inputs", Dtype::Tensor, 16 * MIB).deferred(),
            ],
            outputs: vec![PortSpec::new("noise_pred", Dtype::Latent, 2 * MIB)],
            param_bytes: MIB,
            mem_bytes: MIB,
            patchable: true,
        }
    }

    fn lora() -> ModelSpec {
        ModelSpec {
            model_id: "style-lora".into(),
            kind: ModelKind::LoraPatch,
            inputs: vec![],
            outputs: vec![],
            param_bytes: MIB,
            mem_bytes: MIB,
            patchable: false,
        }
    }

    fn ctx() -> WorkflowContext {
        let mut reg = ModelRegistry::new();
        reg.register(text_encoder()).unwrap();
        reg.register(diffusion()).unwrap();
        reg.register(lora()).unwrap();
        WorkflowContext::new(reg)
    }

    #[test]
    fn register_rejects_duplicates_and_bad_ports() {
        let mut reg = ModelRegistry::new();
        reg.register(text_encoder()).unwrap();
        assert_eq!(
            reg.register(text_encoder()).unwrap_err(),
            BuildError::DuplicateModelId("enc".into())
        );
        // deferred output port
        let mut bad = text_encoder();
        bad.model_id = "bad".into();
        bad.outputs[0].deferred = true;
        assert!(matches!(
            reg.register(bad),
            Err(BuildError::InvalidPortSpec { .. })
        ));
        // deferred input on a non-diffusion model
        let mut bad = text_encoder();
        bad.model_id = "bad2".into();
        bad.inputs[0].deferred = true;
        assert!(matches!(
            reg.register(bad),
            Err(BuildError::InvalidPortSpec { .. })
        ));
    }

    #[test]
    fn node_count_equals_invoke_count() {
        let mut c = ctx();
        let enc = c.registry.handle("enc").unwrap();
        c.begin_workflow("wf").unwrap();
        let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let n = c.add_input("neg", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        for _ in 0..3 {
            let e = c
                .invoke(enc, &[("prompt", p), ("negative_prompt", n)])
                .unwrap();
            assert_eq!(e.len(), 1);
        }
        let last = c.invoke(enc, &[("prompt", p), ("negative_prompt", n)]).unwrap();
        c.add_output("embeds", last[0]).unwrap();
        let t = c.finalize().unwrap();
        assert_eq!(t.nodes.len(), 4);
        assert_eq!(t.nodes[0].node_id, "wf/enc#0");
        assert_eq!(t.nodes[3].node_id, "wf/enc#3");
    }

    #[test]
    fn nested_scope_is_rejected() {
        let mut c = ctx();
        c.begin_workflow("a").unwrap();
        assert_eq!(
            c.begin_workflow("b").unwrap_err(),
            BuildError::NestedScope("a".into())
        );
    }

    #[test]
    fn empty_workflow_fails_at_finalize() {
        let mut c = ctx();
        c.begin_workflow("empty").unwrap();
        assert_eq!(
            c.finalize().unwrap_err(),
            BuildError::EmptyWorkflow("empty".into())
        );
    }

    #[test]
    fn deferred_port_may_stay_unbound() {
        let mut c = ctx();
        let enc = c.registry.handle("enc").unwrap();
        let base = c.registry.handle("base").unwrap();
        c.begin_workflow("wf").unwrap();
        let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let lat = c.add_input("latents", Dtype::Latent, SizeSpec::Bytes(MIB)).unwrap();
        let e = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
        let out = c
            .invoke(base, &[("latents", lat), ("prompt_embeds", e[0])])
            .unwrap();
        c.add_output("noise", out[0]).unwrap();
        let t = c.finalize().unwrap();
        let node = t.nodes.iter().find(|n| n.model_id == "base").unwrap();
        assert!(!node.bindings.iter().any(|(p, _)| p == "controlnet_inputs"));
    }

    #[test]
    fn unbound_required_input_and_dtype_mismatch() {
        let mut c = ctx();
        let enc = c.registry.handle("enc").unwrap();
        let base = c.registry.handle("base").unwrap();
        c.begin_workflow("wf").unwrap();
        let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let steps = c.add_input("steps", Dtype::Int, SizeSpec::Bytes(8)).unwrap();
        assert!(matches!(
            c.invoke(enc, &[("prompt", p)]),
            Err(BuildError::UnboundRequiredInput { .. })
        ));
        // int value bound to a tensor port
        let e = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
        assert!(matches!(
            c.invoke(base, &[("latents", steps), ("prompt_embeds", e[0])]),
            Err(BuildError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn patches_add_and_remove() {
        let mut c = ctx();
        let enc = c.registry.handle("enc").unwrap();
        let base = c.registry.handle("base").unwrap();
        let lora = c.registry.handle("style-lora").unwrap();
        c.begin_workflow("wf").unwrap();
        assert_eq!(
            c.add_patch(enc, lora).unwrap_err(),
            BuildError::NotPatchable("enc".into())
        );
        assert_eq!(
            c.add_patch(base, enc).unwrap_err(),
            BuildError::NotAnAdapter("enc".into())
        );
        c.add_patch(base, lora).unwrap();
        c.rm_patch(base, lora).unwrap();
        c.add_patch(base, lora).unwrap();
        let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let e = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
        c.add_output("embeds", e[0]).unwrap();
        let t = c.finalize().unwrap();
        assert_eq!(t.patches, vec![("base".to_string(), "style-lora".to_string())]);
    }

    #[test]
    fn rm_patch_after_add_restores_template_equality() {
        let build = |with_patch_cycle: bool| {
            let mut c = ctx();
            let enc = c.registry.handle("enc").unwrap();
            let base = c.registry.handle("base").unwrap();
            let lora = c.registry.handle("style-lora").unwrap();
            c.begin_workflow("wf").unwrap();
            if with_patch_cycle {
                c.add_patch(base, lora).unwrap();
                c.rm_patch(base, lora).unwrap();
            }
            let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
            let e = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
            c.add_output("embeds", e[0]).unwrap();
            c.finalize().unwrap()
        };
        assert_eq!(build(true), build(false));
    }

    #[test]
    fn loop_body_traced_once_with_carry() {
        let mut c = ctx();
        let base = c.registry.handle("base").unwrap();
        c.begin_workflow("wf").unwrap();
        let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let enc = c.registry.handle("enc").unwrap();
        let e = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
        let lat0 = c.add_input("latents", Dtype::Latent, SizeSpec::Bytes(MIB)).unwrap();
        let steps = c.add_input("n_steps", Dtype::Int, SizeSpec::Bytes(8)).unwrap();
        let finals = c
            .counted_loop(steps, &[lat0], |c, carried| {
                let out = c.invoke(base, &[("latents", carried[0]), ("prompt_embeds", e[0])])?;
                Ok(vec![out[0]])
            })
            .unwrap();
        c.add_output("latents", finals[0]).unwrap();
        let t = c.finalize().unwrap();
        assert_eq!(t.loops.len(), 1);
        assert_eq!(t.loops[0].body, vec!["wf/base#0".to_string()]);
        assert_eq!(t.loops[0].carried.len(), 1);
        // body traced exactly once
        assert_eq!(t.nodes.iter().filter(|n| n.model_id == "base").count(), 1);
    }

    #[test]
    fn uncarried_loop_value_cannot_escape() {
        let mut c = ctx();
        let enc = c.registry.handle("enc").unwrap();
        let base = c.registry.handle("base").unwrap();
        c.begin_workflow("wf").unwrap();
        let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let e = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
        let lat0 = c.add_input("latents", Dtype::Latent, SizeSpec::Bytes(MIB)).unwrap();
        let steps = c.add_input("n_steps", Dtype::Int, SizeSpec::Bytes(8)).unwrap();
        let mut leaked = None;
        let _ = c
            .counted_loop(steps, &[lat0], |c, carried| {
                let out = c.invoke(base, &[("latents", carried[0]), ("prompt_embeds", e[0])])?;
                leaked = Some(out[0]);
                Ok(vec![out[0]])
            })
            .unwrap();
        assert_eq!(
            c.add_output("noise", leaked.unwrap()).unwrap_err(),
            BuildError::UncarriedLoopDependency { region: 0 }
        );
    }

    #[test]
    fn builder_is_deterministic() {
        let build = || {
            let mut c = ctx();
            let enc = c.registry.handle("enc").unwrap();
            c.begin_workflow("wf").unwrap();
            let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
            let e = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
            c.add_output("embeds", e[0]).unwrap();
            c.finalize().unwrap().to_json()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn json_round_trip_revalidates() {
        let mut c = ctx();
        let enc = c.registry.handle("enc").unwrap();
        c.begin_workflow("wf").unwrap();
        let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let e = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
        c.add_output("embeds", e[0]).unwrap();
        let t = c.finalize().unwrap();
        let json = t.to_json();
        let t2 = WorkflowTemplate::from_json(&json, &c.registry).unwrap();
        assert_eq!(t, t2);

        // tampered document: output bound to a value never produced
        let mut bad = t.clone();
        bad.outputs[0].source = BindingSource::Node {
            node_id: "wf/enc#9".into(),
            port: "prompt_embeds".into(),
        };
        assert!(matches!(
            WorkflowTemplate::from_json(&bad.to_json(), &c.registry),
            Err(BuildError::DanglingBinding { .. })
        ));
    }

    #[test]
    fn hand_crafted_cycle_is_detected() {
        let mut c = ctx();
        let enc = c.registry.handle("enc").unwrap();
        c.begin_workflow("wf").unwrap();
        let p = c.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let e0 = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
        let _e1 = c.invoke(enc, &[("prompt", p), ("negative_prompt", p)]).unwrap();
        c.add_output("embeds", e0[0]).unwrap();
        let mut t = c.finalize().unwrap();
        // wire the two encoder nodes to each other's outputs
        t.nodes[0].bindings.push((
            "negative_prompt".into(),
            BindingSource::Node {
                node_id: "wf/enc#1".into(),
                port: "prompt_embeds".into(),
            },
        ));
        t.nodes[1].bindings.push((
            "negative_prompt".into(),
            BindingSource::Node {
                node_id: "wf/enc#0".into(),
                port: "prompt_embeds".into(),
            },
        ));
        let t = t.with_derived_edges(&c.registry).unwrap();
        assert!(matches!(
            t.validate(&c.registry),
            Err(BuildError::CycleDetected { .. })
        ));
    }
}
