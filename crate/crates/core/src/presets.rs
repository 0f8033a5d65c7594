//! Bundled model specs and workflow presets matching the reference profile.
//!
//! Families: `sd3`, `sd35`, `flux-schnell`, `flux-dev`, `sdxl`. Each family
//! has `-basic` (encoder, base, decoder), `-cn1`/`-cn2` (plus a large/small
//! ControlNet running alongside the base each step) and `-lora` (basic plus
//! a weight-patching adapter) variants. Mix presets `s1`..`s6` group them
//! the way the evaluation settings do.

use std::collections::BTreeMap;

use crate::dsl::{
    Dtype, ModelKind, ModelRegistry, ModelSpec, PortSpec, SizeSpec, WorkflowContext,
    WorkflowTemplate,
};
use crate::error::BuildError;

const KIB: u64 = 1024;
const MIB: u64 = 1024 * 1024;
const GIB: u64 = 1024 * 1024 * 1024;

pub const FAMILIES: [&str; 5] = ["sd3", "sd35", "flux-schnell", "flux-dev", "sdxl"];

/// Default denoising step counts per family.
pub fn default_steps(family: &str) -> u32 {
    match family {
        "flux-schnell" => 4,
        "sd35" => 40,
        "sdxl" => 50,
        _ => 28,
    }
}

fn diffusion_spec(model_id: &str, mem: u64) -> ModelSpec {
    ModelSpec {
        model_id: model_id.into(),
        kind: ModelKind::Diffusion,
        inputs: vec![
            PortSpec::new("latents", Dtype::Latent, 2 * MIB),
            PortSpec::new("prompt_embeds", Dtype::Tensor, 2 * MIB),
            PortSpec::new("controlnet_inputs", Dtype::Tensor, 16 * MIB).deferred(),
        ],
        outputs: vec![PortSpec::new("noise_pred", Dtype::Latent, 2 * MIB)],
        param_bytes: mem,
        mem_bytes: mem,
        patchable: true,
    }
}

fn controlnet_spec(model_id: &str, mem: u64) -> ModelSpec {
    ModelSpec {
        model_id: model_id.into(),
        kind: ModelKind::Controlnet,
        inputs: vec![
            PortSpec::new("latents", Dtype::Latent, 2 * MIB),
            PortSpec::new("prompt_embeds", Dtype::Tensor, 2 * MIB),
            PortSpec::new("control_image", Dtype::Tensor, 4 * MIB),
        ],
        outputs: vec![PortSpec::new("features", Dtype::Tensor, 16 * MIB)],
        param_bytes: mem,
        mem_bytes: mem,
        patchable: false,
    }
}

/// Model registry mirroring `profiles/reference.json`, plus the trivial
/// latent-initialization and latent-update helpers.
pub fn reference_registry() -> ModelRegistry {
    let mut reg = ModelRegistry::new();
    let mut add = |spec: ModelSpec| {
        reg.register(spec).expect("reference registry is consistent");
    };

    add(ModelSpec {
        model_id: "latent-init".into(),
        kind: ModelKind::LatentInit,
        inputs: vec![PortSpec::new("seed", Dtype::Int, 8)],
        outputs: vec![PortSpec::new("latents", Dtype::Latent, 2 * MIB)],
        param_bytes: 0,
        mem_bytes: 64 * MIB,
        patchable: false,
    });
    add(ModelSpec {
        model_id: "cache-lookup".into(),
        kind: ModelKind::CacheLookup,
        inputs: vec![PortSpec::new("seed", Dtype::Int, 8)],
        outputs: vec![PortSpec::new("latents", Dtype::Latent, 2 * MIB)],
        param_bytes: 0,
        mem_bytes: 512 * MIB,
        patchable: false,
    });
    add(ModelSpec {
        model_id: "denoise".into(),
        kind: ModelKind::Aux,
        inputs: vec![
            PortSpec::new("noise_pred", Dtype::Latent, 2 * MIB),
            PortSpec::new("latents", Dtype::Latent, 2 * MIB),
        ],
        outputs: vec![PortSpec::new("latents", Dtype::Latent, 2 * MIB)],
        param_bytes: 0,
        mem_bytes: 0,
        patchable: false,
    });
    add(ModelSpec {
        model_id: "text-encoder".into(),
        kind: ModelKind::TextEncoder,
        inputs: vec![PortSpec::new("prompt", Dtype::Text, 4 * KIB)],
        outputs: vec![PortSpec::new("prompt_embeds", Dtype::Tensor, 2 * MIB)],
        param_bytes: 4 * GIB,
        mem_bytes: 4 * GIB,
        patchable: false,
    });
    add(ModelSpec {
        model_id: "vae".into(),
        kind: ModelKind::Vae,
        inputs: vec![
            PortSpec::new("data", Dtype::Tensor, 4 * MIB),
            PortSpec::new("mode", Dtype::Text, 8),
        ],
        outputs: vec![PortSpec::new("result", Dtype::Tensor, 4 * MIB)],
        param_bytes: 1100 * MIB,
        mem_bytes: 1126 * MIB,
        patchable: false,
    });
    add(diffusion_spec("sd3", 3994 * MIB));
    add(diffusion_spec("sd35", 16 * GIB));
    add(diffusion_spec("flux-schnell", 24 * GIB));
    add(diffusion_spec("flux-dev", 24 * GIB));
    add(diffusion_spec("sdxl", 6963 * MIB));
    add(controlnet_spec("controlnet-large", 3277 * MIB));
    add(controlnet_spec("controlnet-small", 1475 * MIB));
    add(ModelSpec {
        model_id: "lora-style".into(),
        kind: ModelKind::LoraPatch,
        inputs: vec![],
        outputs: vec![],
        param_bytes: 886 * MIB,
        mem_bytes: 886 * MIB,
        patchable: false,
    });
    reg
}

/// A named workflow variant: base model plus optional adapters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowPreset {
    pub workflow_id: String,
    pub base: String,
    pub controlnet: Option<String>,
    pub lora: Option<String>,
    pub default_steps: u32,
}

/// Resolve a preset name like `sd3-cn1` or `flux-dev-lora`.
pub fn preset(name: &str) -> Option<WorkflowPreset> {
    let (family, variant) = FAMILIES
        .iter()
        .find_map(|f| name.strip_prefix(&format!("{f}-")).map(|v| (*f, v)))?;
    let (controlnet, lora) = match variant {
        "basic" => (None, None),
        "cn1" => (Some("controlnet-large"), None),
        "cn2" => (Some("controlnet-small"), None),
        "lora" => (None, Some("lora-style")),
        _ => return None,
    };
    Some(WorkflowPreset {
        workflow_id: name.to_string(),
        base: family.to_string(),
        controlnet: controlnet.map(String::from),
        lora: lora.map(String::from),
        default_steps: default_steps(family),
    })
}

/// Build the template for a preset inside the given context.
pub fn build_workflow(
    ctx: &mut WorkflowContext,
    preset: &WorkflowPreset,
) -> Result<WorkflowTemplate, BuildError> {
    let latent_init = ctx.registry.handle("latent-init")?;
    let text_enc = ctx.registry.handle("text-encoder")?;
    let vae = ctx.registry.handle("vae")?;
    let denoise = ctx.registry.handle("denoise")?;
    let base = ctx.registry.handle(&preset.base)?;
    let cn = preset
        .controlnet
        .as_deref()
        .map(|id| ctx.registry.handle(id))
        .transpose()?;
    let lora = preset
        .lora
        .as_deref()
        .map(|id| ctx.registry.handle(id))
        .transpose()?;

    ctx.begin_workflow(&preset.workflow_id)?;
    let seed = ctx.add_input("seed", Dtype::Int, SizeSpec::Bytes(8))?;
    let prompt = ctx.add_input("prompt", Dtype::Text, SizeSpec::Bytes(4 * KIB))?;
    let n_steps = ctx.add_input("n_steps", Dtype::Int, SizeSpec::Bytes(8))?;
    let ref_image = if cn.is_some() {
        Some(ctx.add_input("ref_image", Dtype::Image, SizeSpec::BytesPerMegapixel(4 * MIB))?)
    } else {
        None
    };

    if let Some(l) = lora {
        ctx.add_patch(base, l)?;
    }

    let latents0 = ctx.invoke(latent_init, &[("seed", seed)])?[0];
    let embeds = ctx.invoke(text_enc, &[("prompt", prompt)])?[0];
    let ref_latents = match (cn, ref_image) {
        (Some(_), Some(img)) => {
            let mode = ctx.const_text("encode")?;
            Some(ctx.invoke(vae, &[("data", img), ("mode", mode)])?[0])
        }
        _ => None,
    };

    let finals = ctx.counted_loop(n_steps, &[latents0], |ctx, carried| {
        let lat = carried[0];
        let mut noise_bindings = vec![("latents", lat), ("prompt_embeds", embeds)];
        if let (Some(cn), Some(ref_lat)) = (cn, ref_latents) {
            let feats = ctx.invoke(
                cn,
                &[
                    ("latents", lat),
                    ("prompt_embeds", embeds),
                    ("control_image", ref_lat),
                ],
            )?[0];
            noise_bindings.push(("controlnet_inputs", feats));
        }
        let noise = ctx.invoke(base, &noise_bindings)?[0];
        let next = ctx.invoke(denoise, &[("noise_pred", noise), ("latents", lat)])?[0];
        Ok(vec![next])
    })?;

    let mode = ctx.const_text("decode")?;
    let image = ctx.invoke(vae, &[("data", finals[0]), ("mode", mode)])?[0];
    ctx.add_output("image", image)?;
    ctx.finalize()
}

/// Evaluation mix presets: workflow ids with probabilities summing to 1.
pub fn mix_preset(name: &str) -> Option<BTreeMap<String, f64>> {
    let single = |family: &str| -> BTreeMap<String, f64> {
        [
            (format!("{family}-basic"), 1.0 / 3.0),
            (format!("{family}-cn1"), 1.0 / 3.0),
            (format!("{family}-cn2"), 1.0 / 3.0),
        ]
        .into_iter()
        .collect()
    };
    let merge = |a: BTreeMap<String, f64>, b: BTreeMap<String, f64>| {
        a.into_iter()
            .chain(b)
            .map(|(k, v)| (k, v / 2.0))
            .collect()
    };
    match name {
        "s1" => Some(single("sd3")),
        "s2" => Some(single("sd35")),
        "s3" => Some(single("flux-schnell")),
        "s4" => Some(single("flux-dev")),
        "s5" => Some(merge(single("sd3"), single("sd35"))),
        "s6" => Some(merge(single("flux-schnell"), single("flux-dev"))),
        _ => None,
    }
}
