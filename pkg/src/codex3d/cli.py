"""codex3d command-line interface.

Subcommands cover the full two-stage workflow: `gen-data`, `train-vqvae`,
`train-diffusion`, `sample`, `translate`, `eval`, `eval-mip`, `nll`, and
`pipeline`. Standalone commands read and write explicit paths; `pipeline`
drives every stage into a content-addressed working directory.

Environment: CODEX3D_SEED overrides the config seed, CODEX3D_DEVICE selects
the compute device (this build supports "cpu" and fails closed otherwise).
Exit codes: 0 success, 2 config/format error, 3 missing dependency,
4 numerical failure.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from codex3d import diffusion, metrics, pipeline, vqvae
from codex3d.checkpoint import model_tensors, save_checkpoint
from codex3d.config import ExperimentConfig, load_config
from codex3d.data_synth import build_dataset, load_dataset, save_dataset
from codex3d.denoiser import Denoiser
from codex3d.errors import CodexError, ConfigError
from codex3d.util import atomic_write_bytes, atomic_write_text, derive_seed


def _env_seed() -> int | None:
    raw = os.environ.get("CODEX3D_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"CODEX3D_SEED must be an integer, got {raw!r}") from exc


def _check_device() -> str:
    device = os.environ.get("CODEX3D_DEVICE", "cpu")
    if device != "cpu":
        raise ConfigError(
            f"CODEX3D_DEVICE={device!r} is not available: this build runs on cpu only"
        )
    return device


def _load_experiment(path) -> ExperimentConfig:
    config = load_config(path)
    env = _env_seed()
    if env is not None:
        config = dataclasses.replace(config, seed=env)
        config.validate()
    return config


def _seed_or_env(args_seed: int | None, fallback: int) -> int:
    if args_seed is not None:
        return args_seed
    env = _env_seed()
    return env if env is not None else fallback


# ------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    config = _load_experiment(args.spec)
    d = config.data
    count = args.count if args.count is not None else d.count
    seed = _seed_or_env(args.seed, config.seed)
    samples = build_dataset(
        d.phantom_spec(), count=count, seed=seed,
        azimuths_deg=d.azimuths, mode=d.projection_mode, mu=d.mu,
        misalign=d.misaligned, max_rotation_deg=d.max_rotation_deg,
        max_translation_vox=d.max_translation_vox,
    )
    save_dataset(samples, args.out, meta={
        "config_hash": config.config_hash,
        "artifact_schema_version": pipeline.ARTIFACT_SCHEMA_VERSION,
        "seed": seed,
    })
    print(f"wrote {count} samples to {args.out}")
    return 0


def cmd_train_vqvae(args) -> int:
    config = _load_experiment(args.config)
    samples = load_dataset(args.data)
    if args.domain == "2d":
        data = [view for _, views in samples for view in views]
    else:
        data = [vol for vol, _ in samples]
    model, rows = vqvae.train_stage1(
        data, config.autoencoder_config(args.domain), config.stage1_hyper(args.domain),
        on_log=lambda row: print(
            f"step {row['step']}: total={row['total']:.5f} rec={row['rec']:.5f} "
            f"perplexity={row['perplexity']:.1f}"
        ),
    )
    save_checkpoint(
        args.out, component=f"vqvae{args.domain}",
        config={"model": pipeline.dataclass_dict(config.autoencoder_config(args.domain))},
        step=rows[-1]["step"] if rows else 0,
        tensors=model_tensors(model), config_hash=config.config_hash,
    )
    print(f"wrote {args.out}")
    return 0


def cmd_train_diffusion(args) -> int:
    config = _load_experiment(args.config)
    models = pipeline.TranslationModels(
        vqvae2d=pipeline.load_vqvae(args.vq2d),
        vqvae3d=pipeline.load_vqvae(args.vq3d),
        denoiser=Denoiser(config.denoiser_config(), config.sequence_layout(),
                          seed=derive_seed("denoiser-model", config.seed)),
        schedule=config.schedule(),
    )
    pipeline.check_compatible(models)
    pairs = pipeline.encode_pairs(load_dataset(args.data), models)
    rows = diffusion.train_stage2(
        models.denoiser, models.schedule, pairs, config.diffusion.hyper(config.seed),
        on_log=lambda row: print(f"step {row['step']}: loss={row['loss']:.5f}"),
    )
    snapshot = {
        "denoiser": pipeline.dataclass_dict(config.denoiser_config()),
        "layout": pipeline.dataclass_dict(config.sequence_layout()),
        "schedule": pipeline.dataclass_dict(config.schedule()),
    }
    save_checkpoint(args.out, component="denoiser", config=snapshot,
                    step=rows[-1]["step"] if rows else 0,
                    tensors=model_tensors(models.denoiser),
                    config_hash=config.config_hash)
    print(f"wrote {args.out}")
    return 0


def _models_from_args(args) -> pipeline.TranslationModels:
    return pipeline.load_models(args.vq2d, args.vq3d, args.ckpt)


def cmd_sample(args) -> int:
    models = _models_from_args(args)
    views = [pipeline.load_view_file(p) for p in args.views]
    if len(views) != models.denoiser.layout.view_count:
        raise ConfigError(
            f"model conditions on {models.denoiser.layout.view_count} views, got {len(views)}"
        )
    cond = vqvae.encode_condition(views, models.vqvae2d)
    seed = _seed_or_env(args.seed, 0)
    grid = diffusion.sample(models.denoiser, cond, models.schedule,
                            steps=args.steps, seed=seed,
                            temperature=args.temperature, order=args.order)
    import io

    meta = {"config_hash": "", "schema_version": pipeline.ARTIFACT_SCHEMA_VERSION,
            "seed": seed, "kind": "code-grid", "num_codes": grid.num_codes}
    buf = io.BytesIO()
    np.savez(buf, indices=grid.indices.numpy().astype(np.int64),
             meta_json=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))
    atomic_write_bytes(args.out, buf.getvalue())
    print(f"wrote sampled code grid to {args.out}")
    return 0


def cmd_translate(args) -> int:
    models = _models_from_args(args)
    views = [pipeline.load_view_file(p) for p in args.views]
    seed = _seed_or_env(args.seed, 0)
    volume = pipeline.translate_views(views, models, steps=args.steps,
                                      temperature=args.temperature,
                                      order=args.order, seed=seed)
    meta = {"schema_version": pipeline.ARTIFACT_SCHEMA_VERSION, "seed": seed,
            "steps": args.steps, "temperature": args.temperature, "order": args.order}
    pipeline.write_volume_artifact(args.out, volume, meta)
    print(f"wrote volume to {args.out}")
    if args.emit_mips:
        prefix = args.out[:-4] if args.out.endswith(".npz") else args.out
        for path in pipeline.write_mip_images(volume, prefix, meta):
            print(f"wrote {path}")
    return 0


def _eval_datasets(args):
    real = [vol for vol, _ in load_dataset(args.real)]
    fake = [vol for vol, _ in load_dataset(args.generated)]
    seeds = tuple(args.embed_seeds) if args.embed_seeds else (0, 1, 2, 3, 4)
    return real, fake, seeds


def cmd_eval(args) -> int:
    real, fake, seeds = _eval_datasets(args)
    density, coverage, per_seed = pipeline.median_density_coverage(
        real, fake, args.k, args.embed_dim, seeds
    )
    paired = pipeline.paired_distortion(real, fake[: len(real)])
    report = metrics.MetricReport(
        density=density, coverage=coverage, ssim=paired["ssim"],
        psnr=paired["psnr"], mse=paired["mse"], mae=paired["mae"],
    )
    atomic_write_text(args.report, report.as_text())
    payload = report.as_dict()
    payload["schema_version"] = pipeline.ARTIFACT_SCHEMA_VERSION
    payload["per_seed"] = [
        {"seed": s, "density": d, "coverage": c}
        for s, (d, c) in zip(seeds, per_seed)
    ]
    atomic_write_text(args.report + ".json", json.dumps(payload, indent=2, sort_keys=True))
    print(report.as_text(), end="")
    return 0


def cmd_eval_mip(args) -> int:
    real, fake, seeds = _eval_datasets(args)
    per_axis = {}
    for axis in (0, 1, 2):
        real_mips = [metrics.mip(v, axis) for v in real]
        fake_mips = [metrics.mip(v, axis) for v in fake]
        density, coverage, _ = pipeline.median_density_coverage(
            real_mips, fake_mips, args.k, args.embed_dim, seeds
        )
        ssim_mean = float(np.mean([
            metrics.ssim(r.values, f.values)
            for r, f in zip(real_mips, fake_mips[: len(real_mips)])
        ]))
        per_axis[f"axis{axis}"] = {"density": density, "coverage": coverage, "ssim": ssim_mean}
    summary = {key: float(np.mean([per_axis[a][key] for a in per_axis]))
               for key in ("density", "coverage", "ssim")}
    payload = {"schema_version": pipeline.ARTIFACT_SCHEMA_VERSION,
               "per_axis": per_axis, "summary": summary}
    atomic_write_text(args.report, json.dumps(payload, indent=2, sort_keys=True))
    for key, value in summary.items():
        print(f"{key}={value}")
    return 0


def cmd_nll(args) -> int:
    models = _models_from_args(args)
    samples = load_dataset(args.data)
    if args.limit:
        samples = samples[: args.limit]
    seed = _seed_or_env(args.seed, 0)
    values = [
        metrics.estimate_conditional_loglik(vol, views, models, n_mc=args.mc,
                                            seed=derive_seed("nll", seed, i))
        for i, (vol, views) in enumerate(samples)
    ]
    mean = float(np.mean(values))
    print(f"mean_loglik={mean} count={len(values)}")
    if args.out:
        atomic_write_text(args.out, json.dumps(
            {"schema_version": pipeline.ARTIFACT_SCHEMA_VERSION,
             "mean_loglik": mean, "count": len(values)},
            indent=2, sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    config = _load_experiment(args.config)
    report = pipeline.run_pipeline(config, args.workdir, log=print)
    print(report.as_text(), end="")
    return 0


# --------------------------------------------------------------- parser


def _add_model_args(p):
    p.add_argument("--vq2d", required=True, help="2D autoencoder checkpoint")
    p.add_argument("--vq3d", required=True, help="3D autoencoder checkpoint")
    p.add_argument("--ckpt", required=True, help="denoiser checkpoint")


def _add_sampling_args(p):
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--order", choices=("random", "confidence", "raster"), default="random")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codex3d",
        description="Two-view to volume translation: data synthesis, two-stage "
                    "training, sampling, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--spec", required=True, help="experiment config file")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vqvae", help="train one stage-1 autoencoder")
    p.add_argument("--domain", choices=("2d", "3d"), required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("train-diffusion", help="train the stage-2 denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--vq2d", required=True)
    p.add_argument("--vq3d", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("sample", help="sample a 3D code grid from views")
    _add_model_args(p)
    p.add_argument("--views", nargs="+", required=True)
    _add_sampling_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("translate", help="views in, decoded volume out")
    _add_model_args(p)
    p.add_argument("--views", nargs="+", required=True)
    _add_sampling_args(p)
    p.add_argument("--out", required=True, help="output .npz volume")
    p.add_argument("--emit-mips", action="store_true")
    p.set_defaults(func=cmd_translate)

    for name, func in (("eval", cmd_eval), ("eval-mip", cmd_eval_mip)):
        p = sub.add_parser(name, help=f"{name} generated volumes against real ones")
        p.add_argument("--real", required=True)
        p.add_argument("--generated", required=True)
        p.add_argument("--report", required=True)
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--embed-dim", type=int, default=512)
        p.add_argument("--embed-seeds", type=int, nargs="+", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("nll", help="conditional log-likelihood over a dataset")
    _add_model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mc", type=int, default=16)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_nll)

    p = sub.add_parser("pipeline", help="run every stage into a workdir")
    p.add_argument("--config", required=True)
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _check_device()
        return args.func(args)
    except CodexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
