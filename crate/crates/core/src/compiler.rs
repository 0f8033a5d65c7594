//! Lowering of workflow templates into schedulable DAGs.
//!
//! `compile` resolves a finalized template against the model registry into a
//! topologically ordered node list, then applies rewrite passes in a fixed
//! declared order (loop fusion, then approximate caching, then async LoRA).
//! Every pass output is revalidated: acyclic, typed, depth-monotone.
//!
//! Compiled workflows keep unfusable loops symbolic; `instantiate` unrolls
//! them per request once the trip count is known, resolves all port sizes to
//! bytes, and decides the cache hit from the request's own seed.

use serde::{Deserialize, Serialize};

use crate::digest::split_seed;
use crate::dsl::{
    BindingSource, Dtype, ModelKind, ModelRegistry, SizeSpec, WorkflowTemplate,
};
use crate::error::CompileError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Approximate-caching configuration: hit probability and the fraction of
/// denoising steps a hit removes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheCfg {
    pub hit_rate: f64,
    pub step_reduction: f64,
}

/// A graph-rewriting pass. The three built-ins run in the declared order;
/// `Custom` exists for tests that need to exercise pass validation.
#[derive(Clone)]
pub enum RewritePass {
    LoopFusion,
    ApproxCache(CacheCfg),
    AsyncLora,
    Noop,
    Custom {
        id: &'static str,
        apply: fn(&mut CompiledWorkflow) -> Result<(), CompileError>,
    },
}

impl RewritePass {
    pub fn id(&self) -> &str {
        match self {
            RewritePass::LoopFusion => "loop_fusion",
            RewritePass::ApproxCache(_) => "approx_cache",
            RewritePass::AsyncLora => "async_lora",
            RewritePass::Noop => "noop",
            RewritePass::Custom { id, .. } => id,
        }
    }
}

impl std::fmt::Debug for RewritePass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Where a compiled input comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CSource {
    Input { name: String },
    Node { node: usize, port: usize },
    Const { value: String },
    /// Carried value read inside a symbolic loop body.
    Carried { region: usize, slot: usize },
    /// Final carried value read after a symbolic loop.
    LoopOut { region: usize, slot: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledInput {
    pub port: String,
    pub dtype: Dtype,
    pub size: SizeSpec,
    pub deferred: bool,
    pub source: CSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledOutput {
    pub port: String,
    pub dtype: Dtype,
    pub size: SizeSpec,
}

/// Node behavior classes introduced by lowering and passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum NodeRole {
    Regular,
    /// Whole denoising loop collapsed into one node; per-step cost also
    /// covers the listed auxiliary models folded out of the body.
    FusedDiffusion { aux: Vec<String> },
    /// Loop-fused adapter producing a per-step deferred output stream.
    FusedControlnet,
    /// Zero-cost root that starts a background adapter fetch.
    LoraTrigger { lora: String },
    /// Cache lookup replacing latent initialization; `miss_model` is the
    /// replaced node's model, whose cost applies on a miss.
    CacheInit { miss_model: String },
}

/// How a node's step count resolves at instantiation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepsSpec {
    /// Non-iterative node: flat profile cost.
    Flat,
    FromInput { name: String },
    Fixed { count: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledNode {
    pub node_id: String,
    pub model_id: String,
    pub kind: ModelKind,
    pub role: NodeRole,
    pub steps: StepsSpec,
    pub inputs: Vec<CompiledInput>,
    pub outputs: Vec<CompiledOutput>,
    /// Longest eager-edge path from any root (roots are depth 0). Symbolic
    /// loop members carry their region's condensed depth.
    pub depth: u32,
    /// Symbolic loop membership; fused nodes have none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<usize>,
    /// Adapter to patch in: (lora model id, patched asynchronously).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora: Option<(String, bool)>,
}

/// A loop kept symbolic (unfusable or fusion pass not applied); unrolled at
/// instantiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicLoop {
    pub region_id: usize,
    /// Indices into `CompiledWorkflow::nodes`, in body order.
    pub body: Vec<usize>,
    pub trip: StepsSpec,
    pub carried: Vec<CompiledCarry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledCarry {
    /// External value feeding iteration 0.
    pub init: CSource,
    /// Body node and output port feeding the next iteration.
    pub next_node: usize,
    pub next_port: usize,
    pub dtype: Dtype,
    pub size: SizeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledWorkflowOutput {
    pub name: String,
    pub source: CSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledWorkflow {
    pub workflow_id: String,
    /// Topologically ordered (eager and deferred edges; loops condensed).
    pub nodes: Vec<CompiledNode>,
    pub loops: Vec<SymbolicLoop>,
    pub outputs: Vec<CompiledWorkflowOutput>,
    pub inputs: Vec<crate::dsl::WfInput>,
    /// Cache configuration once the approx-cache pass has run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheCfg>,
    pub passes_applied: Vec<String>,
}

/// Fixed relative order for the built-in passes.
fn pass_rank(id: &str) -> Option<usize> {
    match id {
        "loop_fusion" => Some(0),
        "approx_cache" => Some(1),
        "async_lora" => Some(2),
        _ => None,
    }
}

/// Lower a finalized template and apply `passes` in order.
pub fn compile(
    registry: &ModelRegistry,
    template: &WorkflowTemplate,
    passes: &[RewritePass],
) -> Result<CompiledWorkflow, CompileError> {
    let mut last_rank = None;
    for p in passes {
        if let Some(rank) = pass_rank(p.id()) {
            if let Some(prev) = last_rank {
                if rank <= prev {
                    return Err(CompileError::PassOrder(
                        passes.iter().map(|p| p.id().to_string()).collect::<Vec<_>>().join(","),
                    ));
                }
            }
            last_rank = Some(rank);
        }
    }

    let mut cw = lower(registry, template)?;
    revalidate(&mut cw, "lower")?;
    for pass in passes {
        apply_pass(&mut cw, pass)?;
        revalidate(&mut cw, pass.id())?;
        cw.passes_applied.push(pass.id().to_string());
    }
    Ok(cw)
}

fn lower(
    registry: &ModelRegistry,
    template: &WorkflowTemplate,
) -> Result<CompiledWorkflow, CompileError> {
    template.validate(registry)?;
    let node_index: BTreeMap<&str, usize> = template
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.node_id.as_str(), i))
        .collect();

    let to_steps = |source: &BindingSource| -> StepsSpec {
        match source {
            BindingSource::Input { name } => StepsSpec::FromInput { name: name.clone() },
            BindingSource::Const { value, .. } => StepsSpec::Fixed {
                count: value.parse().unwrap_or(0),
            },
            _ => StepsSpec::Flat,
        }
    };
    let to_csource = |source: &BindingSource| -> CSource {
        match source {
            BindingSource::Input { name } => CSource::Input { name: name.clone() },
            BindingSource::Node { node_id, port } => {
                let idx = node_index[node_id.as_str()];
                let spec = registry.lookup(&template.nodes[idx].model_id).unwrap();
                let port_idx = spec.outputs.iter().position(|p| p.name == *port).unwrap();
                CSource::Node {
                    node: idx,
                    port: port_idx,
                }
            }
            BindingSource::Const { value, .. } => CSource::Const {
                value: value.clone(),
            },
            BindingSource::Carried { region, slot } => CSource::Carried {
                region: *region,
                slot: *slot,
            },
            BindingSource::LoopOut { region, slot } => CSource::LoopOut {
                region: *region,
                slot: *slot,
            },
        }
    };

    let mut nodes = Vec::new();
    for nt in &template.nodes {
        let spec = registry.lookup(&nt.model_id)?;
        let mut inputs = Vec::new();
        for port in &spec.inputs {
            if let Some((_, source)) = nt.bindings.iter().find(|(p, _)| *p == port.name) {
                inputs.push(CompiledInput {
                    port: port.name.clone(),
                    dtype: port.dtype,
                    size: port.size,
                    deferred: port.deferred,
                    source: to_csource(source),
                });
            }
        }
        let outputs = spec
            .outputs
            .iter()
            .map(|p| CompiledOutput {
                port: p.name.clone(),
                dtype: p.dtype,
                size: p.size,
            })
            .collect();
        // Per-step cost tables apply to diffusion nodes inside a loop; a
        // diffusion node outside any loop is a single invocation.
        let steps = StepsSpec::Flat;
        nodes.push(CompiledNode {
            node_id: nt.node_id.clone(),
            model_id: nt.model_id.clone(),
            kind: spec.kind,
            role: NodeRole::Regular,
            steps,
            inputs,
            outputs,
            depth: 0,
            region: nt.region,
            lora: None,
        });
    }

    let mut loops = Vec::new();
    for lp in &template.loops {
        let body: Vec<usize> = lp.body.iter().map(|id| node_index[id.as_str()]).collect();
        let mut carried = Vec::new();
        for c in &lp.carried {
            let (next_node, next_port, size) = match &c.next {
                BindingSource::Node { node_id, port } => {
                    let idx = node_index[node_id.as_str()];
                    let spec = registry.lookup(&template.nodes[idx].model_id)?;
                    let pidx = spec
                        .outputs
                        .iter()
                        .position(|p| p.name == *port)
                        .expect("validated");
                    (idx, pidx, spec.outputs[pidx].size)
                }
                _ => {
                    return Err(CompileError::Template(
                        crate::error::BuildError::DanglingBinding {
                            workflow: template.workflow_id.clone(),
                            reference: "carried next must be a body node output".into(),
                        },
                    ))
                }
            };
            carried.push(CompiledCarry {
                init: to_csource(&c.init),
                next_node,
                next_port,
                dtype: c.dtype,
                size,
            });
        }
        loops.push(SymbolicLoop {
            region_id: lp.region_id,
            body,
            trip: to_steps(&lp.trip_count),
            carried,
        });
    }

    // Sync-patch annotation; the async pass upgrades it later.
    for (target, lora) in &template.patches {
        let mut found = false;
        for node in nodes.iter_mut() {
            if node.model_id == *target {
                node.lora = Some((lora.clone(), false));
                found = true;
            }
        }
        if !found {
            return Err(CompileError::TargetNotInWorkflow(target.clone()));
        }
    }

    let outputs = template
        .outputs
        .iter()
        .map(|o| CompiledWorkflowOutput {
            name: o.name.clone(),
            source: to_csource(&o.source),
        })
        .collect();

    let mut cw = CompiledWorkflow {
        workflow_id: template.workflow_id.clone(),
        nodes,
        loops,
        outputs,
        inputs: template.inputs.clone(),
        cache: None,
        passes_applied: Vec::new(),
    };
    toposort(&mut cw, "lower")?;
    Ok(cw)
}

fn apply_pass(cw: &mut CompiledWorkflow, pass: &RewritePass) -> Result<(), CompileError> {
    match pass {
        RewritePass::Noop => Ok(()),
        RewritePass::Custom { apply, .. } => apply(cw),
        RewritePass::LoopFusion => pass_loop_fusion(cw),
        RewritePass::ApproxCache(cfg) => pass_approx_cache(cw, *cfg),
        RewritePass::AsyncLora => pass_async_lora(cw),
    }
}

/// Replace each fusable loop (at most one diffusion node, at most one
/// controlnet node, any auxiliary latent-update nodes) with a fused
/// controlnet node streaming per-step outputs into a fused diffusion node.
/// Unfusable loops are left symbolic and unroll at instantiation.
fn pass_loop_fusion(cw: &mut CompiledWorkflow) -> Result<(), CompileError> {
    loop {
        let Some(region_pos) = cw.loops.iter().position(|lp| {
            let mut diffusion = 0;
            let mut controlnet = 0;
            let mut other = 0;
            for &n in &lp.body {
                match cw.nodes[n].kind {
                    ModelKind::Diffusion => diffusion += 1,
                    ModelKind::Controlnet => controlnet += 1,
                    ModelKind::Aux => {}
                    _ => other += 1,
                }
            }
            diffusion == 1 && controlnet <= 1 && other == 0
        }) else {
            break;
        };
        fuse_one(cw, region_pos)?;
    }
    Ok(())
}

fn fuse_one(cw: &mut CompiledWorkflow, region_pos: usize) -> Result<(), CompileError> {
    let lp = cw.loops[region_pos].clone();
    let region_id = lp.region_id;
    let body_set: Vec<usize> = lp.body.clone();
    let diff_idx = *body_set
        .iter()
        .find(|&&n| cw.nodes[n].kind == ModelKind::Diffusion)
        .expect("checked fusable");
    let cn_idx = body_set
        .iter()
        .copied()
        .find(|&n| cw.nodes[n].kind == ModelKind::Controlnet);
    let aux_models: Vec<String> = body_set
        .iter()
        .filter(|&&n| cw.nodes[n].kind == ModelKind::Aux)
        .map(|&n| cw.nodes[n].model_id.clone())
        .collect();

    let external_inputs = |node: usize, cw: &CompiledWorkflow| -> Vec<CompiledInput> {
        cw.nodes[node]
            .inputs
            .iter()
            .filter_map(|inp| match &inp.source {
                CSource::Carried { region, slot } if *region == region_id => {
                    // Carried latents: the diffusion side consumes the init
                    // value eagerly for iteration 0; the controlnet side
                    // keeps them internal.
                    if node == diff_idx {
                        let mut rewired = inp.clone();
                        rewired.source = lp.carried[*slot].init.clone();
                        rewired.deferred = false;
                        Some(rewired)
                    } else {
                        None
                    }
                }
                CSource::Node { node: src, .. } if body_set.contains(src) => None,
                _ => Some(inp.clone()),
            })
            .collect()
    };

    // Fused controlnet: external inputs only; its declared outputs become
    // per-step streams consumed via deferred fetch.
    let fused_cn = cn_idx.map(|cn| CompiledNode {
        node_id: cw.nodes[cn].node_id.clone(),
        model_id: cw.nodes[cn].model_id.clone(),
        kind: ModelKind::Controlnet,
        role: NodeRole::FusedControlnet,
        steps: lp.trip.clone(),
        inputs: external_inputs(cn, cw),
        outputs: cw.nodes[cn].outputs.clone(),
        depth: 0,
        region: None,
        lora: None,
    });

    // Fused diffusion: external inputs from every body node (so auxiliary
    // nodes' outside reads are preserved), plus the deferred stream edge.
    let mut fd_inputs: Vec<CompiledInput> = Vec::new();
    let mut push_unique = |inp: CompiledInput, fd_inputs: &mut Vec<CompiledInput>| {
        if !fd_inputs.iter().any(|e| e.source == inp.source && e.port == inp.port) {
            fd_inputs.push(inp);
        }
    };
    for &n in &body_set {
        if Some(n) == cn_idx {
            continue;
        }
        for inp in external_inputs(n, cw) {
            push_unique(inp, &mut fd_inputs);
        }
    }
    if let Some(cn) = cn_idx {
        // The diffusion node's deferred port bound to the controlnet output.
        if let Some(stream_port) = cw.nodes[diff_idx]
            .inputs
            .iter()
            .find(|i| matches!(&i.source, CSource::Node { node, .. } if *node == cn))
        {
            let mut edge = stream_port.clone();
            edge.source = CSource::Node {
                node: usize::MAX, // patched to the fused cn index below
                port: match &stream_port.source {
                    CSource::Node { port, .. } => *port,
                    _ => 0,
                },
            };
            edge.deferred = true;
            fd_inputs.push(edge);
        }
    }

    // Outputs: one per carried slot, exposed under the producing port name.
    let fd_outputs: Vec<CompiledOutput> = lp
        .carried
        .iter()
        .map(|c| CompiledOutput {
            port: cw.nodes[c.next_node].outputs[c.next_port].port.clone(),
            dtype: c.dtype,
            size: c.size,
        })
        .collect();

    let fused_diff = CompiledNode {
        node_id: cw.nodes[diff_idx].node_id.clone(),
        model_id: cw.nodes[diff_idx].model_id.clone(),
        kind: ModelKind::Diffusion,
        role: NodeRole::FusedDiffusion { aux: aux_models },
        steps: lp.trip.clone(),
        inputs: fd_inputs,
        outputs: fd_outputs,
        depth: 0,
        region: None,
        lora: cw.nodes[diff_idx].lora.clone(),
    };

    // Rebuild the node list: body nodes replaced by [fused_cn?, fused_diff]
    // at the body's position; all indices remapped.
    let insert_at = *body_set.iter().min().unwrap();
    let mut new_nodes: Vec<CompiledNode> = Vec::new();
    let mut old_to_new: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fused_cn_new = None;
    let mut fused_diff_new = None;
    for (old_idx, node) in cw.nodes.iter().enumerate() {
        if old_idx == insert_at {
            if let Some(fc) = &fused_cn {
                fused_cn_new = Some(new_nodes.len());
                new_nodes.push(fc.clone());
            }
            fused_diff_new = Some(new_nodes.len());
            new_nodes.push(fused_diff.clone());
        }
        if body_set.contains(&old_idx) {
            continue;
        }
        old_to_new.insert(old_idx, new_nodes.len());
        new_nodes.push(node.clone());
    }
    if !old_to_new.contains_key(&insert_at) && insert_at == cw.nodes.len() {
        unreachable!();
    }
    // Body at the very end of the list.
    if fused_diff_new.is_none() {
        if let Some(fc) = &fused_cn {
            fused_cn_new = Some(new_nodes.len());
            new_nodes.push(fc.clone());
        }
        fused_diff_new = Some(new_nodes.len());
        new_nodes.push(fused_diff);
    }
    let fd_new = fused_diff_new.unwrap();

    let remap = |source: &mut CSource| {
        match source {
            CSource::Node { node, port } => {
                if *node == usize::MAX {
                    *node = fused_cn_new.expect("stream edge implies fused controlnet");
                } else if let Some(&n) = old_to_new.get(node) {
                    *node = n;
                } else {
                    // Reference into the fused body: only carried outputs
                    // survive, exposed on the fused diffusion node.
                    let slot = lp
                        .carried
                        .iter()
                        .position(|c| c.next_node == *node && c.next_port == *port)
                        .expect("validated: only carried values escape a loop");
                    *node = fd_new;
                    *port = slot;
                }
            }
            CSource::LoopOut { region, slot } if *region == region_id => {
                *source = CSource::Node {
                    node: fd_new,
                    port: *slot,
                };
            }
            _ => {}
        }
    };

    for node in new_nodes.iter_mut() {
        for inp in node.inputs.iter_mut() {
            remap(&mut inp.source);
        }
    }
    for out in cw.outputs.iter_mut() {
        remap(&mut out.source);
    }
    let mut new_loops = Vec::new();
    for (i, mut l) in cw.loops.clone().into_iter().enumerate() {
        if i == region_pos {
            continue;
        }
        l.body = l
            .body
            .iter()
            .map(|b| *old_to_new.get(b).expect("loops are disjoint"))
            .collect();
        for c in l.carried.iter_mut() {
            remap(&mut c.init);
            c.next_node = *old_to_new.get(&c.next_node).expect("loops are disjoint");
        }
        new_loops.push(l);
    }
    // Region indices referenced from node sources stay valid: Carried and
    // LoopOut sources use the original region ids, which we preserve.
    for node in new_nodes.iter_mut() {
        if let Some(r) = node.region {
            if r == region_id {
                node.region = None;
            }
        }
    }

    cw.nodes = new_nodes;
    cw.loops = new_loops;
    Ok(())
}

/// Replace the latent-initialization node with a cache-lookup node and
/// record the cache configuration for instantiation.
fn pass_approx_cache(cw: &mut CompiledWorkflow, cfg: CacheCfg) -> Result<(), CompileError> {
    let inits: Vec<usize> = cw
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.kind == ModelKind::LatentInit)
        .map(|(i, _)| i)
        .collect();
    if inits.is_empty() {
        return Err(CompileError::NoLatentInit);
    }
    if inits.len() > 1 {
        return Err(CompileError::MultipleLatentInit);
    }
    let idx = inits[0];
    let node = &mut cw.nodes[idx];
    let miss_model = node.model_id.clone();
    let ordinal_suffix = node
        .node_id
        .rsplit_once('#')
        .map(|(_, ord)| ord.to_string())
        .unwrap_or_else(|| "0".into());
    node.node_id = format!("{}/cache-lookup#{}", cw.workflow_id, ordinal_suffix);
    node.model_id = "cache-lookup".into();
    node.kind = ModelKind::CacheLookup;
    node.role = NodeRole::CacheInit { miss_model };
    cw.cache = Some(cfg);
    Ok(())
}

/// For each patch annotation, insert a zero-cost root node that starts the
/// background adapter fetch, and mark the target diffusion node to patch at
/// the first step boundary after the fetch completes.
fn pass_async_lora(cw: &mut CompiledWorkflow) -> Result<(), CompileError> {
    let mut triggers = Vec::new();
    for node in cw.nodes.iter_mut() {
        if let Some((lora, asynchronous)) = &mut node.lora {
            if node.kind != ModelKind::Diffusion {
                return Err(CompileError::TargetNotInWorkflow(node.model_id.clone()));
            }
            *asynchronous = true;
            triggers.push((node.node_id.clone(), lora.clone()));
        }
    }
    for (i, (_, lora)) in triggers.iter().enumerate() {
        cw.nodes.insert(
            0,
            CompiledNode {
                node_id: format!("{}/lora-fetch#{}", cw.workflow_id, triggers.len() - 1 - i),
                model_id: lora.clone(),
                kind: ModelKind::Aux,
                role: NodeRole::LoraTrigger { lora: lora.clone() },
                steps: StepsSpec::Flat,
                inputs: Vec::new(),
                outputs: Vec::new(),
                depth: 0,
                region: None,
                lora: None,
            },
        );
        shift_indices(cw, 1);
    }
    Ok(())
}

/// Shift all node-index references after inserting `by` nodes at the front.
fn shift_indices(cw: &mut CompiledWorkflow, by: usize) {
    let bump = |source: &mut CSource| {
        if let CSource::Node { node, .. } = source {
            *node += by;
        }
    };
    for node in cw.nodes.iter_mut().skip(by) {
        for inp in node.inputs.iter_mut() {
            bump(&mut inp.source);
        }
    }
    // The freshly inserted trigger has no inputs, skip(by) above also skips
    // nothing else since triggers sit at the front.
    for out in cw.outputs.iter_mut() {
        bump(&mut out.source);
    }
    for lp in cw.loops.iter_mut() {
        for b in lp.body.iter_mut() {
            *b += by;
        }
        for c in lp.carried.iter_mut() {
            bump(&mut c.init);
            c.next_node += by;
        }
    }
}

/// Deterministic topological sort (condensing symbolic loops) and depth
/// assignment. Depths count eager edges only; deferred edges join the cycle
/// check but not the depth relation.
fn toposort(cw: &mut CompiledWorkflow, pass: &str) -> Result<(), CompileError> {
    let n = cw.nodes.len();
    // Condense loop members onto a representative (the first body node).
    let mut rep: Vec<usize> = (0..n).collect();
    for lp in &cw.loops {
        if let Some(&first) = lp.body.first() {
            for &b in &lp.body {
                rep[b] = first;
            }
        }
    }
    let mut edges_all: Vec<(usize, usize)> = Vec::new(); // cycle check
    let mut edges_eager: Vec<(usize, usize)> = Vec::new(); // depths
    let mut add_edge = |from: usize, to: usize, deferred: bool,
                        edges_all: &mut Vec<(usize, usize)>,
                        edges_eager: &mut Vec<(usize, usize)>| {
        let (f, t) = (rep[from], rep[to]);
        if f == t {
            return;
        }
        edges_all.push((f, t));
        if !deferred {
            edges_eager.push((f, t));
        }
    };
    for (idx, node) in cw.nodes.iter().enumerate() {
        for inp in &node.inputs {
            match &inp.source {
                CSource::Node { node: src, .. } => add_edge(*src, idx, inp.deferred, &mut edges_all, &mut edges_eager),
                CSource::LoopOut { region, .. } => {
                    if let Some(lp) = cw.loops.iter().find(|l| l.region_id == *region) {
                        if let Some(&first) = lp.body.first() {
                            add_edge(first, idx, inp.deferred, &mut edges_all, &mut edges_eager);
                        }
                    }
                }
                _ => {}
            }
        }
    }
    for lp in &cw.loops {
        if let CSource::Node { node: src, .. } = &lp.carried.first().map(|c| c.init.clone()).unwrap_or(CSource::Const { value: String::new() }) {
            if let Some(&first) = lp.body.first() {
                add_edge(*src, first, false, &mut edges_all, &mut edges_eager);
            }
        }
        // Remaining carried inits.
        for c in lp.carried.iter().skip(1) {
            if let CSource::Node { node: src, .. } = &c.init {
                if let Some(&first) = lp.body.first() {
                    add_edge(*src, first, false, &mut edges_all, &mut edges_eager);
                }
            }
        }
    }

    // Kahn over all edges, smallest original index first: canonical order.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for &(f, t) in &edges_all {
        adj[f].push(t);
        indeg[t] += 1;
    }
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
        .filter(|&v| rep[v] == v && indeg[v] == 0)
        .map(std::cmp::Reverse)
        .collect();
    let mut emitted = vec![false; n];
    while let Some(std::cmp::Reverse(v)) = heap.pop() {
        if emitted[v] {
            continue;
        }
        emitted[v] = true;
        order.push(v);
        for &w in &adj[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                heap.push(std::cmp::Reverse(w));
            }
        }
    }
    let reps_total = (0..n).filter(|&v| rep[v] == v).count();
    if order.len() != reps_total {
        return Err(CompileError::PassProducedCycle {
            pass: pass.to_string(),
        });
    }

    // Depths over eager edges, on representatives; members share the depth.
    let mut depth = vec![0u32; n];
    for &v in &order {
        for &(f, t) in edges_eager.iter().filter(|&&(f, _)| f == v) {
            depth[t] = depth[t].max(depth[f] + 1);
        }
    }
    // Expand representatives into a full node order: members follow their
    // representative in body order.
    let mut full_order: Vec<usize> = Vec::with_capacity(n);
    for &v in &order {
        if let Some(lp) = cw.loops.iter().find(|lp| lp.body.first() == Some(&v)) {
            full_order.extend(lp.body.iter().copied());
        } else {
            full_order.push(v);
        }
    }
    debug_assert_eq!(full_order.len(), n);

    // Reorder node list to the canonical topological order.
    let mut new_index = vec![0usize; n];
    for (new_pos, &old) in full_order.iter().enumerate() {
        new_index[old] = new_pos;
    }
    let mut new_nodes: Vec<CompiledNode> = full_order.iter().map(|&i| cw.nodes[i].clone()).collect();
    for (new_pos, node) in new_nodes.iter_mut().enumerate() {
        node.depth = depth[rep[full_order[new_pos]]];
        for inp in node.inputs.iter_mut() {
            if let CSource::Node { node: s, .. } = &mut inp.source {
                *s = new_index[*s];
            }
        }
    }
    for out in cw.outputs.iter_mut() {
        if let CSource::Node { node: s, .. } = &mut out.source {
            *s = new_index[*s];
        }
    }
    for lp in cw.loops.iter_mut() {
        for b in lp.body.iter_mut() {
            *b = new_index[*b];
        }
        for c in lp.carried.iter_mut() {
            if let CSource::Node { node: s, .. } = &mut c.init {
                *s = new_index[*s];
            }
            c.next_node = new_index[c.next_node];
        }
    }
    cw.nodes = new_nodes;
    Ok(())
}

/// Post-pass validation: acyclicity (via re-sorting), port typing across
/// every edge, and depth monotonicity along eager edges.
fn revalidate(cw: &mut CompiledWorkflow, pass: &str) -> Result<(), CompileError> {
    toposort(cw, pass)?;
    for node in &cw.nodes {
        for inp in &node.inputs {
            if let CSource::Node { node: src, port } = &inp.source {
                let out = cw.nodes[*src]
                    .outputs
                    .get(*port)
                    .ok_or_else(|| CompileError::PassTypeError {
                        pass: pass.to_string(),
                        reason: format!(
                            "`{}` references missing output {} of `{}`",
                            node.node_id, port, cw.nodes[*src].node_id
                        ),
                    })?;
                if !inp.dtype.accepts(out.dtype) {
                    return Err(CompileError::PassTypeError {
                        pass: pass.to_string(),
                        reason: format!(
                            "edge `{}`.{} -> `{}`.{} has dtype {} vs {}",
                            cw.nodes[*src].node_id,
                            out.port,
                            node.node_id,
                            inp.port,
                            out.dtype.name(),
                            inp.dtype.name()
                        ),
                    });
                }
                if !inp.deferred && node.region.is_none() && cw.nodes[*src].region.is_none() {
                    debug_assert!(
                        node.depth > cw.nodes[*src].depth,
                        "depth monotonicity violated by pass {pass}"
                    );
                }
            }
        }
    }
    Ok(())
}

/// Graphviz dump of a compiled workflow.
pub fn to_dot(cw: &CompiledWorkflow) -> String {
    let mut dot = String::new();
    dot.push_str("digraph workflow {\n  rankdir=LR;\n");
    for (i, node) in cw.nodes.iter().enumerate() {
        let shape = match node.role {
            NodeRole::FusedDiffusion { .. } => "box3d",
            NodeRole::FusedControlnet => "component",
            NodeRole::LoraTrigger { .. } => "cds",
            NodeRole::CacheInit { .. } => "folder",
            NodeRole::Regular => "box",
        };
        dot.push_str(&format!(
            "  n{} [label=\"{}\\ndepth={}\" shape={}];\n",
            i, node.node_id, node.depth, shape
        ));
    }
    for (i, node) in cw.nodes.iter().enumerate() {
        for inp in &node.inputs {
            if let CSource::Node { node: src, .. } = &inp.source {
                let style = if inp.deferred { " [style=dashed]" } else { "" };
                dot.push_str(&format!("  n{} -> n{}{};\n", src, i, style));
            }
        }
    }
    dot.push_str("}\n");
    dot
}

// ---- Request instantiation ----

/// Concrete values a request supplies for the workflow inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestInputs {
    pub seed: u64,
    /// Values for int-typed inputs (step counts, seeds).
    pub ints: BTreeMap<String, i64>,
    /// Names of supplied non-int inputs (prompts, images).
    pub supplied: Vec<String>,
    /// Image resolution driving size formulas.
    pub megapixels: f64,
}

impl RequestInputs {
    /// Inputs matching a compiled workflow's declared placeholders.
    pub fn matching(cw: &CompiledWorkflow, seed: u64, steps: u32) -> Self {
        let mut ints = BTreeMap::new();
        let mut supplied = Vec::new();
        for inp in &cw.inputs {
            match inp.dtype {
                Dtype::Int => {
                    let v = if inp.name.contains("seed") {
                        seed as i64
                    } else {
                        i64::from(steps)
                    };
                    ints.insert(inp.name.clone(), v);
                }
                _ => supplied.push(inp.name.clone()),
            }
        }
        RequestInputs {
            seed,
            ints,
            supplied,
            megapixels: 1.0,
        }
    }
}

/// One instantiated node of a request DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct InstNode {
    pub node_id: String,
    pub model_id: String,
    pub kind: ModelKind,
    pub role: NodeRole,
    /// 0 for flat-cost nodes; per-step count for fused/unrolled iteration.
    pub steps: u32,
    pub inputs: Vec<InstInput>,
    pub outputs: Vec<InstOutput>,
    pub depth: u32,
    pub lora: Option<(String, bool)>,
    /// Extra words folded into the node digest (steps, adapter, cache hit).
    pub digest_extras: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstInput {
    pub port: String,
    pub source: InstSource,
    pub bytes: u64,
    pub deferred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstSource {
    WfInput { name: String, payload: bool },
    Node { node: usize, port: usize },
    Const { value: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstOutput {
    pub port: String,
    pub bytes: u64,
    /// Produced as a per-step stream (consumed via deferred fetch).
    pub stream: bool,
}

/// A per-request instantiation of a compiled workflow: loops unrolled or
/// given concrete step counts, sizes in bytes, depths final. Immutable.
#[derive(Debug, Clone)]
pub struct RequestDag {
    pub workflow_id: String,
    pub nodes: Vec<InstNode>,
    pub outputs: Vec<(String, usize, usize)>,
    pub cache_hit: Option<bool>,
    pub salt: u64,
}

impl RequestDag {
    pub fn roots(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                !n.inputs
                    .iter()
                    .any(|i| matches!(i.source, InstSource::Node { .. }) && !i.deferred)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Eager consumers of each node, for readiness propagation.
    pub fn eager_consumers(&self, node: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                n.inputs
                    .iter()
                    .any(|i| matches!(i.source, InstSource::Node { node: s, .. } if s == node) && !i.deferred)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Instantiate a compiled workflow for one request.
pub fn instantiate(
    cw: &CompiledWorkflow,
    inputs: &RequestInputs,
    force_cache_miss: bool,
) -> Result<RequestDag, CompileError> {
    // Every declared workflow input must be supplied.
    for wf_in in &cw.inputs {
        let present = match wf_in.dtype {
            Dtype::Int => inputs.ints.contains_key(&wf_in.name),
            _ => inputs.supplied.iter().any(|s| *s == wf_in.name),
        };
        if !present {
            return Err(CompileError::MissingInput(wf_in.name.clone()));
        }
    }
    let resolve_trip = |spec: &StepsSpec| -> Result<u32, CompileError> {
        match spec {
            StepsSpec::Flat => Ok(0),
            StepsSpec::Fixed { count } => {
                if *count == 0 {
                    Err(CompileError::TripCountNonPositive(0))
                } else {
                    Ok(*count)
                }
            }
            StepsSpec::FromInput { name } => {
                let v = *inputs
                    .ints
                    .get(name)
                    .ok_or_else(|| CompileError::MissingInput(name.clone()))?;
                if v <= 0 {
                    Err(CompileError::TripCountNonPositive(v))
                } else {
                    Ok(v as u32)
                }
            }
        }
    };

    // Cache-hit decision from the request's own seed stream.
    let mut cache_hit = None;
    let mut step_scale = 1.0f64;
    if let Some(cfg) = &cw.cache {
        let hit = if force_cache_miss {
            false
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(inputs.seed, "cache-hit"));
            rng.random::<f64>() < cfg.hit_rate
        };
        cache_hit = Some(hit);
        if hit {
            step_scale = 1.0 - cfg.step_reduction;
        }
    }
    let effective_steps = |trip: u32| -> u32 {
        if step_scale < 1.0 {
            (f64::from(trip) * step_scale).ceil().max(1.0) as u32
        } else {
            trip
        }
    };

    let mp = inputs.megapixels;
    let mut nodes: Vec<InstNode> = Vec::new();
    // old compiled index -> instantiated index (for non-loop nodes).
    let mut placed: BTreeMap<usize, usize> = BTreeMap::new();
    // (region, slot) -> (inst node, port) for final carried values.
    let mut loop_outs: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();

    let in_loop: BTreeMap<usize, usize> = cw
        .loops
        .iter()
        .flat_map(|lp| lp.body.iter().map(move |&b| (b, lp.region_id)))
        .collect();

    let resolve_source = |src: &CSource,
                          placed: &BTreeMap<usize, usize>,
                          iter_map: Option<(&BTreeMap<usize, usize>, &BTreeMap<usize, (usize, usize)>)>,
                          loop_outs: &BTreeMap<(usize, usize), (usize, usize)>|
     -> InstSource {
        match src {
            CSource::Input { name } => {
                let payload = cw
                    .inputs
                    .iter()
                    .find(|i| i.name == *name)
                    .map(|i| !matches!(i.dtype, Dtype::Int | Dtype::Text))
                    .unwrap_or(false);
                InstSource::WfInput {
                    name: name.clone(),
                    payload,
                }
            }
            CSource::Const { value } => InstSource::Const {
                value: value.clone(),
            },
            CSource::Node { node, port } => {
                if let Some((iter_nodes, _)) = iter_map {
                    if let Some(&inst) = iter_nodes.get(node) {
                        return InstSource::Node {
                            node: inst,
                            port: *port,
                        };
                    }
                }
                InstSource::Node {
                    node: placed[node],
                    port: *port,
                }
            }
            CSource::Carried { slot, .. } => {
                let (_, carried_map) = iter_map.expect("carried source outside a loop body");
                let (n, p) = carried_map[slot];
                InstSource::Node { node: n, port: p }
            }
            CSource::LoopOut { region, slot } => {
                let (n, p) = loop_outs[&(*region, *slot)];
                InstSource::Node { node: n, port: p }
            }
        }
    };

    for (idx, cn) in cw.nodes.iter().enumerate() {
        if let Some(&region) = in_loop.get(&idx) {
            // Unroll the region once, when visiting its first body node.
            let lp = cw.loops.iter().find(|l| l.region_id == region).unwrap();
            if lp.body.first() != Some(&idx) {
                continue;
            }
            let trip = effective_steps(resolve_trip(&lp.trip)?);
            // carried slot -> (inst node, port) of the previous iteration.
            let mut carry: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for i in 0..trip {
                let mut iter_nodes: BTreeMap<usize, usize> = BTreeMap::new();
                for &b in &lp.body {
                    let body_node = &cw.nodes[b];
                    let mut inst_inputs = Vec::new();
                    for inp in &body_node.inputs {
                        let source = match &inp.source {
                            CSource::Carried { region: r, slot } if *r == region => {
                                if i == 0 {
                                    resolve_source(&lp.carried[*slot].init, &placed, None, &loop_outs)
                                } else {
                                    let (n, p) = carry[slot];
                                    InstSource::Node { node: n, port: p }
                                }
                            }
                            other => resolve_source(
                                other,
                                &placed,
                                Some((&iter_nodes, &carry)),
                                &loop_outs,
                            ),
                        };
                        inst_inputs.push(InstInput {
                            port: inp.port.clone(),
                            source,
                            bytes: inp.size.resolve(mp),
                            deferred: inp.deferred,
                        });
                    }
                    let steps = if body_node.kind == ModelKind::Diffusion { 1 } else { 0 };
                    let mut extras = Vec::new();
                    if steps > 0 {
                        extras.push(u64::from(steps));
                    }
                    if let Some((lora, _)) = &body_node.lora {
                        extras.push(crate::digest::const_digest(lora));
                    }
                    let inst_idx = nodes.len();
                    nodes.push(InstNode {
                        node_id: format!("{}@{}", body_node.node_id, i),
                        model_id: body_node.model_id.clone(),
                        kind: body_node.kind,
                        role: body_node.role.clone(),
                        steps,
                        inputs: inst_inputs,
                        outputs: body_node
                            .outputs
                            .iter()
                            .map(|o| InstOutput {
                                port: o.port.clone(),
                                bytes: o.size.resolve(mp),
                                stream: false,
                            })
                            .collect(),
                        depth: 0,
                        lora: body_node.lora.clone(),
                        digest_extras: extras,
                    });
                    iter_nodes.insert(b, inst_idx);
                }
                for (slot, c) in lp.carried.iter().enumerate() {
                    carry.insert(slot, (iter_nodes[&c.next_node], c.next_port));
                }
            }
            for (slot, _) in lp.carried.iter().enumerate() {
                loop_outs.insert((region, slot), carry[&slot]);
            }
            continue;
        }

        // Free node (possibly fused).
        let steps = match &cn.steps {
            StepsSpec::Flat => 0,
            spec => effective_steps(resolve_trip(spec)?),
        };
        let mut inst_inputs = Vec::new();
        for inp in &cn.inputs {
            inst_inputs.push(InstInput {
                port: inp.port.clone(),
                source: resolve_source(&inp.source, &placed, None, &loop_outs),
                bytes: inp.size.resolve(mp),
                deferred: inp.deferred,
            });
        }
        let stream_out = matches!(cn.role, NodeRole::FusedControlnet);
        let mut extras = Vec::new();
        if steps > 0 {
            extras.push(u64::from(steps));
        }
        if let Some((lora, _)) = &cn.lora {
            extras.push(crate::digest::const_digest(lora));
        }
        if let NodeRole::CacheInit { .. } = &cn.role {
            extras.push(u64::from(cache_hit.unwrap_or(false)));
        }
        let inst_idx = nodes.len();
        nodes.push(InstNode {
            node_id: cn.node_id.clone(),
            model_id: cn.model_id.clone(),
            kind: cn.kind,
            role: cn.role.clone(),
            steps,
            inputs: inst_inputs,
            outputs: cn
                .outputs
                .iter()
                .map(|o| InstOutput {
                    port: o.port.clone(),
                    bytes: o.size.resolve(mp),
                    stream: stream_out,
                })
                .collect(),
            depth: 0,
            lora: cn.lora.clone(),
            digest_extras: extras,
        });
        placed.insert(idx, inst_idx);
    }

    let outputs = cw
        .outputs
        .iter()
        .map(|o| {
            let src = resolve_source(&o.source, &placed, None, &loop_outs);
            match src {
                InstSource::Node { node, port } => (o.name.clone(), node, port),
                _ => (o.name.clone(), usize::MAX, 0),
            }
        })
        .collect();

    let mut dag = RequestDag {
        workflow_id: cw.workflow_id.clone(),
        nodes,
        outputs,
        cache_hit,
        salt: inputs.seed,
    };
    compute_depths(&mut dag);
    Ok(dag)
}

fn compute_depths(dag: &mut RequestDag) {
    // Instantiation emits nodes in topological order already; one pass.
    for i in 0..dag.nodes.len() {
        let mut d = 0;
        for inp in &dag.nodes[i].inputs {
            if inp.deferred {
                continue;
            }
            if let InstSource::Node { node, .. } = inp.source {
                d = d.max(dag.nodes[node].depth + 1);
            }
        }
        dag.nodes[i].depth = d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{build_workflow, preset, reference_registry};
    use crate::dsl::WorkflowContext;

    fn compiled(name: &str, passes: &[RewritePass]) -> CompiledWorkflow {
        let p = preset(name).unwrap();
        let mut ctx = WorkflowContext::new(reference_registry());
        let t = build_workflow(&mut ctx, &p).unwrap();
        compile(&ctx.registry, &t, passes).unwrap()
    }

    #[test]
    fn lowered_roots_sit_at_depth_zero() {
        let cw = compiled("sd3-cn1", &[]);
        let roots: Vec<&str> = cw
            .nodes
            .iter()
            .filter(|n| n.depth == 0)
            .map(|n| n.model_id.as_str())
            .collect();
        assert!(roots.contains(&"latent-init"));
        assert!(roots.contains(&"text-encoder"));
        assert!(roots.contains(&"vae")); // encode mode
        // loop body nodes share the condensed region depth
        let body_depths: Vec<u32> = cw
            .nodes
            .iter()
            .filter(|n| n.region.is_some())
            .map(|n| n.depth)
            .collect();
        assert!(!body_depths.is_empty());
        assert!(body_depths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn noop_pass_changes_nothing() {
        let a = compiled("sd3-basic", &[]);
        let b = compiled("sd3-basic", &[RewritePass::Noop]);
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.loops, b.loops);
    }

    #[test]
    fn compile_is_idempotent() {
        let a = compiled("sd3-cn1", &[RewritePass::LoopFusion]);
        let b = compiled("sd3-cn1", &[RewritePass::LoopFusion]);
        assert_eq!(a, b);
    }

    #[test]
    fn cycle_inserting_pass_is_rejected() {
        fn close_cycle(cw: &mut CompiledWorkflow) -> Result<(), CompileError> {
            // bind the first root's input to the last node's output
            let last = cw.nodes.len() - 1;
            let first_input = CompiledInput {
                port: "loopback".into(),
                dtype: Dtype::Tensor,
                size: SizeSpec::Bytes(1),
                deferred: false,
                source: CSource::Node { node: last, port: 0 },
            };
            cw.nodes[0].inputs.push(first_input);
            Ok(())
        }
        let p = preset("sd3-basic").unwrap();
        let mut ctx = WorkflowContext::new(reference_registry());
        let t = build_workflow(&mut ctx, &p).unwrap();
        let err = compile(
            &ctx.registry,
            &t,
            &[RewritePass::LoopFusion, RewritePass::Custom {
                id: "close_cycle",
                apply: close_cycle,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, CompileError::PassProducedCycle { .. }));
    }

    #[test]
    fn pass_order_is_enforced() {
        let p = preset("sd3-lora").unwrap();
        let mut ctx = WorkflowContext::new(reference_registry());
        let t = build_workflow(&mut ctx, &p).unwrap();
        let err = compile(
            &ctx.registry,
            &t,
            &[RewritePass::AsyncLora, RewritePass::LoopFusion],
        )
        .unwrap_err();
        assert!(matches!(err, CompileError::PassOrder(_)));
    }

    #[test]
    fn fusion_of_controlnet_loop_yields_stream_pair() {
        let cw = compiled("sd3-cn1", &[RewritePass::LoopFusion]);
        assert!(cw.loops.is_empty());
        let fused_cn: Vec<_> = cw
            .nodes
            .iter()
            .filter(|n| matches!(n.role, NodeRole::FusedControlnet))
            .collect();
        let fused_d: Vec<_> = cw
            .nodes
            .iter()
            .filter(|n| matches!(n.role, NodeRole::FusedDiffusion { .. }))
            .collect();
        assert_eq!(fused_cn.len(), 1);
        assert_eq!(fused_d.len(), 1);
        // exactly one deferred stream edge, into the fused diffusion node
        let deferred: Vec<_> = cw
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().filter(|i| i.deferred))
            .collect();
        assert_eq!(deferred.len(), 1);
        // the denoise helper folded into the fused diffusion node
        match &fused_d[0].role {
            NodeRole::FusedDiffusion { aux } => assert_eq!(aux, &vec!["denoise".to_string()]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn fusion_without_controlnet_yields_single_node_no_streams() {
        let cw = compiled("sd3-basic", &[RewritePass::LoopFusion]);
        assert!(cw.loops.is_empty());
        assert_eq!(
            cw.nodes
                .iter()
                .filter(|n| matches!(n.role, NodeRole::FusedDiffusion { .. }))
                .count(),
            1
        );
        assert_eq!(
            cw.nodes
                .iter()
                .flat_map(|n| n.inputs.iter())
                .filter(|i| i.deferred)
                .count(),
            0
        );
    }

    #[test]
    fn unfusable_loop_stays_symbolic_and_unrolls() {
        // hand-build a workflow whose loop body contains a vae node
        let mut ctx = WorkflowContext::new(reference_registry());
        let init = ctx.registry.handle("latent-init").unwrap();
        let enc = ctx.registry.handle("text-encoder").unwrap();
        let base = ctx.registry.handle("sd3").unwrap();
        let vae = ctx.registry.handle("vae").unwrap();
        let denoise = ctx.registry.handle("denoise").unwrap();
        ctx.begin_workflow("vae-in-loop").unwrap();
        let seed = ctx.add_input("seed", Dtype::Int, SizeSpec::Bytes(8)).unwrap();
        let prompt = ctx.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4096)).unwrap();
        let n = ctx.add_input("n_steps", Dtype::Int, SizeSpec::Bytes(8)).unwrap();
        let lat0 = ctx.invoke(init, &[("seed", seed)]).unwrap()[0];
        let e = ctx.invoke(enc, &[("prompt", prompt)]).unwrap()[0];
        let finals = ctx
            .counted_loop(n, &[lat0], |ctx, carried| {
                let noise = ctx.invoke(base, &[("latents", carried[0]), ("prompt_embeds", e)])?[0];
                let lat = ctx.invoke(denoise, &[("noise_pred", noise), ("latents", carried[0])])?[0];
                let mode = ctx.const_text("decode")?;
                let img = ctx.invoke(vae, &[("data", lat), ("mode", mode)])?[0];
                let mode2 = ctx.const_text("encode")?;
                let lat2 = ctx.invoke(vae, &[("data", img), ("mode", mode2)])?[0];
                Ok(vec![lat2])
            })
            .unwrap();
        let mode = ctx.const_text("decode").unwrap();
        let img = ctx.invoke(vae, &[("data", finals[0]), ("mode", mode)]).unwrap()[0];
        ctx.add_output("image", img).unwrap();
        let t = ctx.finalize().unwrap();

        let cw = compile(&ctx.registry, &t, &[RewritePass::LoopFusion]).unwrap();
        assert_eq!(cw.loops.len(), 1, "vae body is unfusable");
        let body_len = cw.loops[0].body.len();
        assert_eq!(body_len, 4);

        let inputs = RequestInputs::matching(&cw, 7, 4);
        let dag = instantiate(&cw, &inputs, false).unwrap();
        // 4 iterations x 4 body nodes + init + enc + final vae
        let body_instances = dag
            .nodes
            .iter()
            .filter(|n| n.node_id.contains('@'))
            .count();
        assert_eq!(body_instances, 4 * body_len);
        assert_eq!(dag.nodes.len(), 4 * body_len + 3);
    }

    #[test]
    fn unroll_with_trip_one_matches_inline_body() {
        let cw = compiled("sd3-basic", &[]);
        let inputs = RequestInputs::matching(&cw, 1, 1);
        let dag = instantiate(&cw, &inputs, false).unwrap();
        // 1 iteration of {base, denoise} + init + enc + vae
        assert_eq!(dag.nodes.len(), 5);
        let base = dag.nodes.iter().find(|n| n.model_id == "sd3").unwrap();
        assert_eq!(base.steps, 1);
    }

    #[test]
    fn fused_instantiation_keeps_node_count_and_carries_steps() {
        let cw = compiled("sd3-basic", &[RewritePass::LoopFusion]);
        let inputs = RequestInputs::matching(&cw, 1, 28);
        let dag = instantiate(&cw, &inputs, false).unwrap();
        assert_eq!(dag.nodes.len(), cw.nodes.len());
        let fused = dag
            .nodes
            .iter()
            .find(|n| matches!(n.role, NodeRole::FusedDiffusion { .. }))
            .unwrap();
        assert_eq!(fused.steps, 28);
    }

    #[test]
    fn missing_input_is_rejected() {
        let cw = compiled("sd3-basic", &[RewritePass::LoopFusion]);
        let mut inputs = RequestInputs::matching(&cw, 1, 28);
        inputs.supplied.retain(|s| s != "prompt");
        assert_eq!(
            instantiate(&cw, &inputs, false).unwrap_err(),
            CompileError::MissingInput("prompt".into())
        );
        let cw2 = compiled("sd3-basic", &[RewritePass::LoopFusion]);
        let mut inputs2 = RequestInputs::matching(&cw2, 1, 28);
        inputs2.ints.insert("n_steps".into(), 0);
        assert_eq!(
            instantiate(&cw2, &inputs2, false).unwrap_err(),
            CompileError::TripCountNonPositive(0)
        );
    }

    #[test]
    fn approx_cache_replaces_init_and_reduces_steps_on_hit() {
        let cfg = CacheCfg {
            hit_rate: 1.0,
            step_reduction: 0.2,
        };
        let cw = compiled(
            "sdxl-basic",
            &[RewritePass::LoopFusion, RewritePass::ApproxCache(cfg)],
        );
        assert!(cw.nodes.iter().all(|n| n.kind != ModelKind::LatentInit));
        let lookup = cw
            .nodes
            .iter()
            .find(|n| n.kind == ModelKind::CacheLookup)
            .unwrap();
        assert!(matches!(&lookup.role, NodeRole::CacheInit { miss_model } if miss_model == "latent-init"));

        // guaranteed hit: 50 steps -> ceil(0.8 * 50) = 40
        let inputs = RequestInputs::matching(&cw, 99, 50);
        let dag = instantiate(&cw, &inputs, false).unwrap();
        assert_eq!(dag.cache_hit, Some(true));
        let fused = dag
            .nodes
            .iter()
            .find(|n| matches!(n.role, NodeRole::FusedDiffusion { .. }))
            .unwrap();
        assert_eq!(fused.steps, 40);

        // r = 0.4 -> 30 steps
        let cfg40 = CacheCfg {
            hit_rate: 1.0,
            step_reduction: 0.4,
        };
        let cw40 = compiled(
            "sdxl-basic",
            &[RewritePass::LoopFusion, RewritePass::ApproxCache(cfg40)],
        );
        let dag40 = instantiate(&cw40, &RequestInputs::matching(&cw40, 99, 50), false).unwrap();
        let fused40 = dag40
            .nodes
            .iter()
            .find(|n| matches!(n.role, NodeRole::FusedDiffusion { .. }))
            .unwrap();
        assert_eq!(fused40.steps, 30);

        // p = 0: steps unchanged
        let cfg0 = CacheCfg {
            hit_rate: 0.0,
            step_reduction: 0.4,
        };
        let cw0 = compiled(
            "sdxl-basic",
            &[RewritePass::LoopFusion, RewritePass::ApproxCache(cfg0)],
        );
        let dag0 = instantiate(&cw0, &RequestInputs::matching(&cw0, 99, 50), false).unwrap();
        assert_eq!(dag0.cache_hit, Some(false));
        let fused0 = dag0
            .nodes
            .iter()
            .find(|n| matches!(n.role, NodeRole::FusedDiffusion { .. }))
            .unwrap();
        assert_eq!(fused0.steps, 50);
    }

    #[test]
    fn approx_cache_requires_exactly_one_init() {
        let p = preset("sd3-basic").unwrap();
        let mut ctx = WorkflowContext::new(reference_registry());
        let t = build_workflow(&mut ctx, &p).unwrap();
        let cfg = CacheCfg {
            hit_rate: 0.5,
            step_reduction: 0.2,
        };
        // applying the pass twice: second application finds no init node
        let err = compile(
            &ctx.registry,
            &t,
            &[
                RewritePass::ApproxCache(cfg),
                RewritePass::Custom {
                    id: "approx_cache_again",
                    apply: |cw| pass_approx_cache(cw, CacheCfg { hit_rate: 0.5, step_reduction: 0.2 }),
                },
            ],
        )
        .unwrap_err();
        assert_eq!(err, CompileError::NoLatentInit);
    }

    #[test]
    fn async_lora_inserts_trigger_and_marks_target() {
        let cw = compiled(
            "sd3-lora",
            &[RewritePass::LoopFusion, RewritePass::AsyncLora],
        );
        let trigger = cw
            .nodes
            .iter()
            .find(|n| matches!(n.role, NodeRole::LoraTrigger { .. }))
            .expect("trigger node inserted");
        assert_eq!(trigger.depth, 0);
        assert!(trigger.inputs.is_empty());
        let fused = cw
            .nodes
            .iter()
            .find(|n| matches!(n.role, NodeRole::FusedDiffusion { .. }))
            .unwrap();
        assert_eq!(fused.lora, Some(("lora-style".to_string(), true)));

        // without the pass, the patch is synchronous
        let cw_sync = compiled("sd3-lora", &[RewritePass::LoopFusion]);
        let fused_sync = cw_sync
            .nodes
            .iter()
            .find(|n| matches!(n.role, NodeRole::FusedDiffusion { .. }))
            .unwrap();
        assert_eq!(fused_sync.lora, Some(("lora-style".to_string(), false)));
    }

    #[test]
    fn dot_dump_mentions_all_nodes() {
        let cw = compiled("sd3-cn1", &[RewritePass::LoopFusion]);
        let dot = to_dot(&cw);
        for n in &cw.nodes {
            assert!(dot.contains(&n.node_id));
        }
        assert!(dot.contains("style=dashed"), "stream edge rendered dashed");
    }
}
