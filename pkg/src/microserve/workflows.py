"""Bundled model catalogue, workflow templates and workload mixes.

Families: sd3, sd35, flux_schnell, flux_dev (each with basic, one-ControlNet
and two-ControlNet variants), plus an SDXL text-to-image workflow and a Flux
workflow with ControlNet and a LoRA adapter.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Any, Mapping

from .dsl import ModelRegistry, ModelSpec, PortSpec, Workflow, WorkflowTemplate
from .profiles import MIB, reference_profiles

LATENT_SIZE = "height * width // 64 * 16 * 2"
IMAGE_SIZE = "height * width * 3"
EMBED_SIZE = 4 * MIB
CONTROL_SIZE = "height * width * 16"

FAMILIES = {
    # family: (diffusion, text encoder, controlnet, vae, default steps)
    "sd3": ("sd3", "text_encoder_sd3", "controlnet_sd3", "vae_sd3", 28),
    "sd35": ("sd35", "text_encoder_sd3", "controlnet_sd35", "vae_sd3", 28),
    "flux_schnell": ("flux_schnell", "text_encoder_flux", "controlnet_flux", "vae_flux", 4),
    "flux_dev": ("flux_dev", "text_encoder_flux", "controlnet_flux", "vae_flux", 28),
}
SDXL_STEPS = 50

MIXES: dict[str, dict[str, float]] = {}
for _i, _fam in enumerate(("sd3", "sd35", "flux_schnell", "flux_dev"), start=1):
    MIXES[f"S{_i}"] = {f"{_fam}_basic": 1 / 3, f"{_fam}_cn1": 1 / 3, f"{_fam}_cn2": 1 / 3}
MIXES["S5"] = {k: 1 / 6 for k in (*MIXES["S1"], *MIXES["S2"])}
MIXES["S6"] = {k: 1 / 6 for k in (*MIXES["S3"], *MIXES["S4"])}


def _mem(model_id: str) -> int:
    prof = reference_profiles()
    return prof[model_id].mem_bytes if model_id in prof else 0


def _spec(model_id: str, kind: str, inputs=(), outputs=(), patchable=False) -> ModelSpec:
    mem = _mem(model_id)
    return ModelSpec(model_id, kind, tuple(inputs), tuple(outputs), param_bytes=mem,
                     mem_bytes=mem, patchable=patchable)


def model_specs() -> list[ModelSpec]:
    specs = [
        _spec("latent_init", "latent_init", [PortSpec("seed", "int")],
              [PortSpec("latents", "latent", LATENT_SIZE)]),
        _spec("denoise", "aux",
              [PortSpec("noise_pred", "latent"), PortSpec("latents", "latent")],
              [PortSpec("latents", "latent", LATENT_SIZE)]),
        _spec("lora_style", "lora_patch"),
    ]
    diffusion = sorted({f[0] for f in FAMILIES.values()} | {"sdxl"})
    for m in diffusion:
        specs.append(_spec(m, "diffusion", [
            PortSpec("latents", "latent"),
            PortSpec("prompt_embeds", "tensor"),
            PortSpec("controlnet_inputs", "tensor", deferred=True),
            PortSpec("controlnet_inputs_2", "tensor", deferred=True),
        ], [PortSpec("noise_pred", "latent", LATENT_SIZE)], patchable=True))
    for m in sorted({f[1] for f in FAMILIES.values()} | {"text_encoder_sdxl"}):
        specs.append(_spec(m, "text_encoder", [PortSpec("prompt", "text")],
                           [PortSpec("prompt_embeds", "tensor", EMBED_SIZE)]))
    for m in sorted({f[2] for f in FAMILIES.values()}):
        specs.append(_spec(m, "controlnet", [
            PortSpec("latents", "latent"),
            PortSpec("prompt_embeds", "tensor"),
            PortSpec("cond", "latent"),
        ], [PortSpec("residuals", "tensor", CONTROL_SIZE)]))
    for m in sorted({f[3] for f in FAMILIES.values()} | {"vae_sdxl"}):
        # one model for both directions; the mode input selects encode/decode
        specs.append(_spec(m, "vae", [
            PortSpec("image", "image", optional=True),
            PortSpec("latents", "latent", optional=True),
            PortSpec("mode", "text"),
        ], [PortSpec("latents", "latent", LATENT_SIZE), PortSpec("image", "image", IMAGE_SIZE)]))
    return specs


def build_registry() -> ModelRegistry:
    reg = ModelRegistry()
    for s in model_specs():
        reg.register(s)
    return reg


def _family_workflow(reg: ModelRegistry, family: str, n_cn: int) -> WorkflowTemplate:
    diff_id, enc_id, cn_id, vae_id, _ = FAMILIES[family]
    suffix = "basic" if n_cn == 0 else f"cn{n_cn}"
    latent_init, denoise = reg.handle("latent_init"), reg.handle("denoise")
    enc, diff, cn, vae = (reg.handle(m) for m in (enc_id, diff_id, cn_id, vae_id))
    with Workflow(f"{family}_{suffix}", reg) as wf:
        prompt = wf.add_input("prompt", "text")
        seed = wf.add_input("seed", "int")
        steps = wf.add_input("steps", "int")
        conds = []
        for i in range(n_cn):
            img = wf.add_input(f"control_image_{i}", "image")
            conds.append(vae(image=img, mode="encode")[0])
        latents = latent_init(seed=seed)
        embeds = enc(prompt=prompt)

        def body(latents):
            extra = {}
            for i, c in enumerate(conds):
                port = "controlnet_inputs" if i == 0 else f"controlnet_inputs_{i + 1}"
                extra[port] = cn(latents=latents, prompt_embeds=embeds, cond=c)
            noise = diff(latents=latents, prompt_embeds=embeds, **extra)
            return {"latents": denoise(noise_pred=noise, latents=latents)}

        out = wf.loop(steps, body, latents=latents)
        image = vae(latents=out["latents"], mode="decode")[1]
        wf.add_output(image, "image")
    return wf.template


def _sdxl_workflow(reg: ModelRegistry) -> WorkflowTemplate:
    latent_init, denoise = reg.handle("latent_init"), reg.handle("denoise")
    enc, diff, vae = (reg.handle(m) for m in ("text_encoder_sdxl", "sdxl", "vae_sdxl"))
    with Workflow("sdxl_basic", reg) as wf:
        prompt = wf.add_input("prompt", "text")
        seed = wf.add_input("seed", "int")
        steps = wf.add_input("steps", "int")
        latents = latent_init(seed=seed)
        embeds = enc(prompt=prompt)
        out = wf.loop(steps, lambda latents: {"latents": denoise(
            noise_pred=diff(latents=latents, prompt_embeds=embeds), latents=latents)},
            latents=latents)
        wf.add_output(vae(latents=out["latents"], mode="decode")[1], "image")
    return wf.template


def _flux_lora_workflow(reg: ModelRegistry, with_controlnet: bool = True) -> WorkflowTemplate:
    latent_init, denoise = reg.handle("latent_init"), reg.handle("denoise")
    enc, flux, vae = (reg.handle(m) for m in ("text_encoder_flux", "flux_dev", "vae_flux"))
    cn, lora = reg.handle("controlnet_flux"), reg.handle("lora_style")
    wid = "flux_lora_cn" if with_controlnet else "flux_lora"
    with Workflow(wid, reg) as wf:
        seed = wf.add_input("seed", "int")
        prompt = wf.add_input("prompt", "text")
        steps = wf.add_input("steps", "int")
        ref = None
        if with_controlnet:
            ref_image = wf.add_input("ref_image", "image")
        flux.add_patch(lora)
        latents = latent_init(seed=seed)
        embeds = enc(prompt=prompt)
        if with_controlnet:
            ref = vae(image=ref_image, mode="encode")[0]

        def body(latents):
            extra = {}
            if ref is not None:
                extra["controlnet_inputs"] = cn(latents=latents, prompt_embeds=embeds, cond=ref)
            noise = flux(latents=latents, prompt_embeds=embeds, **extra)
            return {"latents": denoise(noise_pred=noise, latents=latents)}

        out = wf.loop(steps, body, latents=latents)
        wf.add_output(vae(latents=out["latents"], mode="decode")[1], "output_img")
    return wf.template


@lru_cache(maxsize=None)
def library() -> dict[str, WorkflowTemplate]:
    reg = build_registry()
    out: dict[str, WorkflowTemplate] = {}
    for fam in FAMILIES:
        for n_cn in (0, 1, 2):
            t = _family_workflow(reg, fam, n_cn)
            out[t.workflow_id] = t
    for t in (_sdxl_workflow(reg), _flux_lora_workflow(reg, True), _flux_lora_workflow(reg, False)):
        out[t.workflow_id] = t
    return out


def template(workflow_id: str) -> WorkflowTemplate:
    return library()[workflow_id]


def default_steps(workflow_id: str) -> int:
    if workflow_id.startswith("sdxl"):
        return SDXL_STEPS
    for fam in sorted(FAMILIES, key=len, reverse=True):
        if workflow_id.startswith(fam + "_"):
            return FAMILIES[fam][4]
    return 28


def default_inputs(tmpl: WorkflowTemplate, seed: int = 0, steps: int | None = None,
                   prompt: str = "a lighthouse at dusk") -> dict[str, Any]:
    """Request inputs for any template: text prompt, seed, step count, images."""
    values: dict[str, Any] = {}
    for name, dtype in tmpl.inputs:
        if dtype == "text":
            values[name] = prompt
        elif dtype == "int":
            if name == "seed":
                values[name] = seed
            else:
                values[name] = steps if steps is not None else default_steps(tmpl.workflow_id)
        elif dtype == "image":
            values[name] = f"image:{name}"
        else:
            values[name] = 0
    return values


def resolve_mix(mix: str | Mapping[str, float]) -> dict[str, float]:
    if isinstance(mix, str):
        if mix in MIXES:
            return dict(MIXES[mix])
        return {mix: 1.0}
    return dict(mix)
