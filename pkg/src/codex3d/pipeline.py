"""End-to-end experiment orchestration with content-addressed stage outputs.

Every artifact for a configuration lives under workdir/<config_hash>/, so a
config edit can never silently reuse stale outputs. Completed stages are
detected by the config hash embedded in their artifacts and skipped on
rerun; a stage whose prerequisites are missing fails with a DependencyError
naming the missing file.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from codex3d import diffusion, metrics, vqvae
from codex3d.checkpoint import (
    load_checkpoint,
    model_tensors,
    restore_model,
    save_checkpoint,
)
from codex3d.config import ExperimentConfig
from codex3d.data_synth import (
    ViewImage,
    VolumeGrid,
    build_dataset,
    load_dataset,
    load_manifest,
    save_dataset,
)
from codex3d.denoiser import Denoiser, DenoiserConfig, SequenceLayout
from codex3d.diffusion import DiffusionSchedule
from codex3d.errors import ConfigError, DependencyError
from codex3d.util import atomic_write_bytes, atomic_write_text, derive_seed, release_heap
from codex3d.vqvae import AutoencoderConfig, VQVae

ARTIFACT_SCHEMA_VERSION = 1
SIGMA = 0.1


@dataclass
class TranslationModels:
    """Everything needed to map views to volumes (and score likelihoods)."""

    vqvae2d: VQVae
    vqvae3d: VQVae
    denoiser: Denoiser
    schedule: DiffusionSchedule
    sigma: float = SIGMA


def _noop_log(message: str) -> None:
    pass


# --------------------------------------------------------------- layout


def stage_root(config: ExperimentConfig, workdir) -> str:
    root = os.path.join(str(workdir), config.config_hash)
    os.makedirs(root, exist_ok=True)
    marker = os.path.join(root, "config.yaml")
    if not os.path.exists(marker):
        atomic_write_text(marker, config.to_yaml())
    return root


def _paths(root: str) -> dict:
    return {
        "train_data": os.path.join(root, "data", "train"),
        "heldout_data": os.path.join(root, "data", "heldout"),
        "vqvae2d": os.path.join(root, "vqvae2d.ckpt"),
        "vqvae3d": os.path.join(root, "vqvae3d.ckpt"),
        "denoiser": os.path.join(root, "denoiser.ckpt"),
        "denoiser_steps": os.path.join(root, "denoiser_steps"),
        "samples": os.path.join(root, "samples"),
        "report_text": os.path.join(root, "report.txt"),
        "report_json": os.path.join(root, "report.json"),
        "mip_report_json": os.path.join(root, "report_mip.json"),
        "nll_json": os.path.join(root, "nll.json"),
    }


def append_scalar_log(path, step: int, values: dict) -> None:
    """Append-only training log: one `step metric value` line per scalar."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    lines = "".join(f"{step} {k} {v}\n" for k, v in values.items() if k != "step")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(lines)
        fh.flush()


def _dataset_is_current(path: str, config_hash: str) -> bool:
    try:
        manifest = load_manifest(path)
    except Exception:
        return False
    return manifest.get("meta", {}).get("config_hash") == config_hash


def _checkpoint_is_current(path: str, config_hash: str) -> bool:
    if not os.path.exists(path):
        return False
    try:
        return load_checkpoint(path).config_hash == config_hash
    except Exception:
        return False


def _require(path: str, what: str):
    if not os.path.exists(path):
        raise DependencyError(f"missing {what}: {path} (run the producing stage first)")


# --------------------------------------------------------------- stages


def run_gen_data(config: ExperimentConfig, workdir, log=_noop_log) -> dict:
    root = stage_root(config, workdir)
    paths = _paths(root)
    h = config.config_hash
    d = config.data
    for split, count, seed_tag in (
        ("train_data", d.count, "train"),
        ("heldout_data", d.heldout_count, "heldout"),
    ):
        out = paths[split]
        if count == 0:
            continue
        if _dataset_is_current(out, h):
            log(f"gen-data: {out} is current, skipping")
            continue
        log(f"gen-data: generating {count} samples into {out}")
        samples = build_dataset(
            d.phantom_spec(),
            count=count,
            seed=derive_seed("data", config.seed, seed_tag),
            azimuths_deg=d.azimuths,
            mode=d.projection_mode,
            mu=d.mu,
            misalign=d.misaligned,
            max_rotation_deg=d.max_rotation_deg,
            max_translation_vox=d.max_translation_vox,
        )
        save_dataset(samples, out, meta={
            "config_hash": h,
            "artifact_schema_version": ARTIFACT_SCHEMA_VERSION,
            "split": seed_tag,
        })
    return paths


def run_train_vqvae(config: ExperimentConfig, workdir, domain: str, log=_noop_log) -> str:
    root = stage_root(config, workdir)
    paths = _paths(root)
    h = config.config_hash
    component = f"vqvae{domain}"
    out = paths[component]
    if _checkpoint_is_current(out, h):
        log(f"train-vqvae: {out} is current, skipping")
        return out
    _require(os.path.join(paths["train_data"], "manifest.json"), "training dataset")
    samples = load_dataset(paths["train_data"])
    if domain == "2d":
        data = [view for _, views in samples for view in views]
    elif domain == "3d":
        data = [vol for vol, _ in samples]
    else:
        raise ConfigError(f"domain must be '2d' or '3d', got {domain!r}")
    log(f"train-vqvae: stage 1 ({domain}) on {len(data)} samples")
    log_path = os.path.join(root, f"{component}.log")
    model, rows = vqvae.train_stage1(
        data,
        config.autoencoder_config(domain),
        config.stage1_hyper(domain),
        on_log=lambda row: append_scalar_log(log_path, row["step"], row),
    )
    step = rows[-1]["step"] if rows else 0
    save_checkpoint(
        out,
        component=component,
        config={"model": dataclass_dict(config.autoencoder_config(domain))},
        step=step,
        tensors=model_tensors(model),
        config_hash=h,
    )
    log(f"train-vqvae: wrote {out} at step {step}")
    return out


def dataclass_dict(obj) -> dict:
    from dataclasses import asdict

    d = asdict(obj)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d


def load_vqvae(path: str) -> VQVae:
    ckpt = load_checkpoint(path)
    if not ckpt.component.startswith("vqvae"):
        raise DependencyError(f"{path} holds a {ckpt.component!r} checkpoint, expected a vqvae")
    model_cfg = dict(ckpt.config["model"])
    model = VQVae(AutoencoderConfig(**model_cfg))
    restore_model(model, ckpt)
    model.eval()
    return model


def load_denoiser(path: str):
    ckpt = load_checkpoint(path)
    if ckpt.component != "denoiser":
        raise DependencyError(f"{path} holds a {ckpt.component!r} checkpoint, expected denoiser")
    den_cfg = DenoiserConfig(**ckpt.config["denoiser"])
    layout_cfg = dict(ckpt.config["layout"])
    layout_cfg["target_shape"] = tuple(layout_cfg["target_shape"])
    layout = SequenceLayout(**layout_cfg)
    sched = DiffusionSchedule(**ckpt.config["schedule"])
    model = Denoiser(den_cfg, layout)
    restore_model(model, ckpt)
    model.eval()
    return model, sched


def check_compatible(models: TranslationModels) -> TranslationModels:
    den = models.denoiser
    cfg2, cfg3 = models.vqvae2d.config, models.vqvae3d.config
    if den.config.vocab_cond != cfg2.codebook_K:
        raise DependencyError(
            f"denoiser condition vocabulary {den.config.vocab_cond} != 2D codebook {cfg2.codebook_K}"
        )
    if den.config.vocab_target != cfg3.codebook_K + 1:
        raise DependencyError(
            f"denoiser target vocabulary {den.config.vocab_target} != 3D codebook {cfg3.codebook_K} + 1"
        )
    if tuple(den.layout.target_shape) != cfg3.latent_shape:
        raise DependencyError(
            f"denoiser target layout {tuple(den.layout.target_shape)} != 3D latent {cfg3.latent_shape}"
        )
    per_view = int(np.prod(cfg2.latent_shape))
    if den.layout.cond_len != den.layout.view_count * per_view:
        raise DependencyError(
            f"denoiser condition length {den.layout.cond_len} does not cover "
            f"{den.layout.view_count} views of {per_view} tokens"
        )
    if models.schedule.mask_token != cfg3.codebook_K:
        raise DependencyError(
            f"schedule mask token {models.schedule.mask_token} != 3D codebook {cfg3.codebook_K}"
        )
    return models


def load_models(vq2d_path: str, vq3d_path: str, denoiser_path: str,
                sigma: float = SIGMA) -> TranslationModels:
    for path, what in ((vq2d_path, "2D autoencoder checkpoint"),
                       (vq3d_path, "3D autoencoder checkpoint"),
                       (denoiser_path, "denoiser checkpoint")):
        _require(path, what)
    den, sched = load_denoiser(denoiser_path)
    return check_compatible(TranslationModels(
        vqvae2d=load_vqvae(vq2d_path),
        vqvae3d=load_vqvae(vq3d_path),
        denoiser=den,
        schedule=sched,
        sigma=sigma,
    ))


def encode_pairs(samples, models: TranslationModels):
    """(volume, views) pairs -> (3D CodeGrid, ConditionSet) pairs."""
    out = []
    for i, (vol, views) in enumerate(samples):
        out.append((
            vqvae.encode(vol, models.vqvae3d),
            vqvae.encode_condition(views, models.vqvae2d),
        ))
        if i % 64 == 63:
            release_heap()
    release_heap()
    return out


def run_train_diffusion(config: ExperimentConfig, workdir, log=_noop_log) -> str:
    root = stage_root(config, workdir)
    paths = _paths(root)
    h = config.config_hash
    out = paths["denoiser"]
    if _checkpoint_is_current(out, h):
        log(f"train-diffusion: {out} is current, skipping")
        return out
    for key, what in (("vqvae2d", "2D autoencoder checkpoint"),
                      ("vqvae3d", "3D autoencoder checkpoint")):
        _require(paths[key], what)
    _require(os.path.join(paths["train_data"], "manifest.json"), "training dataset")

    vq2 = load_vqvae(paths["vqvae2d"])
    vq3 = load_vqvae(paths["vqvae3d"])
    sched = config.schedule()
    den = Denoiser(config.denoiser_config(), config.sequence_layout(),
                   seed=derive_seed("denoiser-model", config.seed))
    bundle = TranslationModels(vqvae2d=vq2, vqvae3d=vq3, denoiser=den, schedule=sched)
    check_compatible(bundle)

    samples = load_dataset(paths["train_data"])
    log(f"train-diffusion: encoding {len(samples)} pairs")
    pairs = encode_pairs(samples, bundle)
    del samples
    release_heap()

    snapshot = {
        "denoiser": dataclass_dict(config.denoiser_config()),
        "layout": dataclass_dict(config.sequence_layout()),
        "schedule": dataclass_dict(sched),
    }
    interval = config.diffusion.checkpoint_interval
    log_path = os.path.join(root, "denoiser.log")

    def checkpoint_hook(step, model, opt):
        if interval and step % interval == 0:
            os.makedirs(paths["denoiser_steps"], exist_ok=True)
            save_checkpoint(
                os.path.join(paths["denoiser_steps"], f"step_{step:06d}.ckpt"),
                component="denoiser", config=snapshot, step=step,
                tensors=model_tensors(model), config_hash=h,
            )

    log(f"train-diffusion: stage 2 for {config.diffusion.steps} steps")
    rows = diffusion.train_stage2(
        den, sched, pairs, config.diffusion.hyper(config.seed),
        on_log=lambda row: append_scalar_log(log_path, row["step"], row),
        on_checkpoint=checkpoint_hook,
    )
    step = rows[-1]["step"] if rows else 0
    save_checkpoint(out, component="denoiser", config=snapshot, step=step,
                    tensors=model_tensors(den), config_hash=h)
    log(f"train-diffusion: wrote {out} at step {step}")
    return out


def models_from_workdir(config: ExperimentConfig, workdir) -> TranslationModels:
    paths = _paths(stage_root(config, workdir))
    return load_models(paths["vqvae2d"], paths["vqvae3d"], paths["denoiser"])


def translate_views(views, models: TranslationModels, steps: int = 64,
                    temperature: float = 1.0, order: str = "random",
                    seed: int = 0) -> VolumeGrid:
    """views -> condition codes -> reverse diffusion -> decoded volume."""
    if len(views) != models.denoiser.layout.view_count:
        raise ConfigError(
            f"model conditions on {models.denoiser.layout.view_count} views, got {len(views)}"
        )
    cond = vqvae.encode_condition(views, models.vqvae2d)
    grid = diffusion.sample(models.denoiser, cond, models.schedule, steps=steps,
                            seed=seed, temperature=temperature, order=order)
    return vqvae.decode(grid, models.vqvae3d)


def run_sample(config: ExperimentConfig, workdir, log=_noop_log, seed=None) -> str:
    root = stage_root(config, workdir)
    paths = _paths(root)
    h = config.config_hash
    out = paths["samples"]
    if seed is None:
        seed = derive_seed("sample-stage", config.seed)
    if _dataset_is_current(out, h):
        meta = load_manifest(out).get("meta", {})
        if meta.get("sample_seed") == seed:
            log(f"sample: {out} is current, skipping")
            return out
    models = models_from_workdir(config, workdir)
    _require(os.path.join(paths["heldout_data"], "manifest.json"), "held-out dataset")
    heldout = load_dataset(paths["heldout_data"])
    d = config.diffusion
    log(f"sample: translating {len(heldout)} held-out view sets")
    generated = []
    for i, (_, views) in enumerate(heldout):
        vol = translate_views(views, models, steps=d.sample_steps,
                              temperature=d.temperature, order=d.order,
                              seed=derive_seed(seed, i))
        generated.append((vol, views))
        if i % 8 == 7:
            release_heap()
    save_dataset(generated, out, meta={
        "config_hash": h,
        "artifact_schema_version": ARTIFACT_SCHEMA_VERSION,
        "split": "generated",
        "sample_seed": seed,
    })
    log(f"sample: wrote {len(generated)} volumes to {out}")
    return out


def median_density_coverage(real_items, fake_items, k: int, embed_dim: int, seeds):
    per_seed = []
    for s in seeds:
        real = metrics.random_encoder_embed(real_items, seed=s, embed_dim=embed_dim)
        fake = metrics.random_encoder_embed(fake_items, seed=s, embed_dim=embed_dim)
        per_seed.append(metrics.density_coverage(real, fake, k=k))
    densities = sorted(d for d, _ in per_seed)
    coverages = sorted(c for _, c in per_seed)
    mid = len(per_seed) // 2
    return densities[mid], coverages[mid], per_seed


def paired_distortion(real_vols, fake_vols):
    rows = [metrics.distortion_report(r.values, f.values)
            for r, f in zip(real_vols, fake_vols)]
    return {key: float(np.mean([row[key] for row in rows])) for key in rows[0]}


def run_eval(config: ExperimentConfig, workdir, log=_noop_log) -> metrics.MetricReport:
    root = stage_root(config, workdir)
    paths = _paths(root)
    h = config.config_hash
    if os.path.exists(paths["report_json"]):
        stored = json.loads(open(paths["report_json"], encoding="utf-8").read())
        if stored.get("config_hash") == h:
            log("eval: report is current, skipping")
            return metrics.MetricReport(
                density=stored["density"], coverage=stored["coverage"],
                ssim=stored["ssim"], psnr=stored["psnr"], mse=stored["mse"],
                mae=stored["mae"], config_hash=stored["config_hash"],
                nll=stored.get("nll"),
            )
    _require(os.path.join(paths["heldout_data"], "manifest.json"), "held-out dataset")
    _require(os.path.join(paths["samples"], "manifest.json"), "generated samples")
    real = [vol for vol, _ in load_dataset(paths["heldout_data"])]
    fake = [vol for vol, _ in load_dataset(paths["samples"])]
    m = config.metrics
    density, coverage, per_seed = median_density_coverage(
        real, fake, m.k, m.embed_dim, m.embed_seeds
    )
    paired = paired_distortion(real, fake[: len(real)])
    report = metrics.MetricReport(
        density=density, coverage=coverage, ssim=paired["ssim"],
        psnr=paired["psnr"], mse=paired["mse"], mae=paired["mae"], config_hash=h,
    )
    payload = report.as_dict()
    payload["schema_version"] = ARTIFACT_SCHEMA_VERSION
    payload["per_seed"] = [{"seed": s, "density": d, "coverage": c}
                           for s, (d, c) in zip(m.embed_seeds, per_seed)]
    atomic_write_text(paths["report_text"], report.as_text())
    atomic_write_text(paths["report_json"], json.dumps(payload, indent=2, sort_keys=True))
    log(f"eval: density={density:.3f} coverage={coverage:.3f} ssim={report.ssim:.3f}")
    return report


def run_eval_mip(config: ExperimentConfig, workdir, log=_noop_log) -> dict:
    root = stage_root(config, workdir)
    paths = _paths(root)
    h = config.config_hash
    _require(os.path.join(paths["heldout_data"], "manifest.json"), "held-out dataset")
    _require(os.path.join(paths["samples"], "manifest.json"), "generated samples")
    real = [vol for vol, _ in load_dataset(paths["heldout_data"])]
    fake = [vol for vol, _ in load_dataset(paths["samples"])]
    m = config.metrics
    per_axis = {}
    for axis in (0, 1, 2):
        real_mips = [metrics.mip(v, axis) for v in real]
        fake_mips = [metrics.mip(v, axis) for v in fake]
        density, coverage, _ = median_density_coverage(
            real_mips, fake_mips, m.k, m.embed_dim, m.embed_seeds
        )
        ssim_mean = float(np.mean([
            metrics.ssim(r.values, f.values)
            for r, f in zip(real_mips, fake_mips[: len(real_mips)])
        ]))
        per_axis[f"axis{axis}"] = {"density": density, "coverage": coverage,
                                   "ssim": ssim_mean}
    summary = {
        key: float(np.mean([per_axis[a][key] for a in per_axis]))
        for key in ("density", "coverage", "ssim")
    }
    payload = {"config_hash": h, "schema_version": ARTIFACT_SCHEMA_VERSION,
               "per_axis": per_axis, "summary": summary}
    atomic_write_text(paths["mip_report_json"], json.dumps(payload, indent=2, sort_keys=True))
    log(f"eval-mip: {summary}")
    return payload


def run_nll(config: ExperimentConfig, workdir, log=_noop_log, limit: int = 0) -> dict:
    root = stage_root(config, workdir)
    paths = _paths(root)
    models = models_from_workdir(config, workdir)
    results = {}
    for split in ("train_data", "heldout_data"):
        _require(os.path.join(paths[split], "manifest.json"), f"{split} dataset")
        samples = load_dataset(paths[split])
        if limit:
            samples = samples[:limit]
        values = [
            metrics.estimate_conditional_loglik(
                vol, views, models, n_mc=config.metrics.nll_mc,
                seed=derive_seed("nll", config.seed, split, i),
            )
            for i, (vol, views) in enumerate(samples)
        ]
        results[split.replace("_data", "")] = {
            "mean_loglik": float(np.mean(values)),
            "count": len(values),
        }
    results["train_heldout_gap"] = (
        results["train"]["mean_loglik"] - results["heldout"]["mean_loglik"]
    )
    payload = {"config_hash": config.config_hash,
               "schema_version": ARTIFACT_SCHEMA_VERSION, **results}
    atomic_write_text(paths["nll_json"], json.dumps(payload, indent=2, sort_keys=True))
    log(f"nll: train={results['train']['mean_loglik']:.2f} "
        f"heldout={results['heldout']['mean_loglik']:.2f}")
    return payload


def run_pipeline(config: ExperimentConfig, workdir, log=_noop_log) -> metrics.MetricReport:
    """gen-data -> stage-1 (both domains) -> stage-2 -> sample -> eval."""
    config.validate()
    run_gen_data(config, workdir, log)
    run_train_vqvae(config, workdir, "2d", log)
    run_train_vqvae(config, workdir, "3d", log)
    run_train_diffusion(config, workdir, log)
    run_sample(config, workdir, log)
    return run_eval(config, workdir, log)


# ----------------------------------------------------- file-level helpers


def load_view_file(path) -> ViewImage:
    """Read a single view from .npy (float array) or an 8/16-bit image file."""
    path = str(path)
    if path.endswith(".npy"):
        values = np.load(path)
        if values.ndim != 2:
            raise ConfigError(f"{path}: expected a 2D array, got shape {values.shape}")
        return ViewImage(values=values.astype(np.float32), azimuth_deg=0.0)
    from PIL import Image

    with Image.open(path) as img:
        gray = img.convert("I;16") if img.mode == "I;16" else img.convert("L")
        arr = np.asarray(gray, dtype=np.float32)
    peak = 65535.0 if arr.max() > 255 else 255.0
    return ViewImage(values=arr / peak, azimuth_deg=0.0)


def write_volume_artifact(path, volume: VolumeGrid, meta: dict) -> None:
    """Volume values + JSON metadata in one .npz file."""
    import io

    meta = dict(meta)
    meta.setdefault("schema_version", ARTIFACT_SCHEMA_VERSION)
    buf = io.BytesIO()
    np.savez(buf, values=volume.values.astype(np.float32),
             meta_json=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))
    atomic_write_bytes(path, buf.getvalue())


def load_volume_artifact(path):
    with np.load(path) as data:
        values = data["values"]
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
    return VolumeGrid(values=values), meta


def write_mip_images(volume: VolumeGrid, out_prefix: str, meta: dict) -> list:
    """Write axis-0/1/2 maximum projections as 8-bit PNGs; returns paths."""
    from PIL import Image, PngImagePlugin

    written = []
    for axis in (0, 1, 2):
        img = metrics.mip(volume, axis)
        data = np.clip(np.round(img.values * 255.0), 0, 255).astype(np.uint8)
        info = PngImagePlugin.PngInfo()
        for key, value in meta.items():
            info.add_text(str(key), str(value))
        path = f"{out_prefix}_mip{axis}.png"
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        Image.fromarray(data, mode="L").save(path, pnginfo=info)
        written.append(path)
    return written
