"""``pasyn`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import os
import platform
import shutil
import sys
import tempfile
from contextlib import contextmanager
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from . import __version__
from .config import RunConfig
from .eval_rank import (METRICS, evaluate_case, metric_table, ranking_report, read_metrics_csv, render_blob_svg,
                        write_metrics_csv)
from .geometry import generate_forearm_labelmap, load_labelmap, load_mask_dataset, save_mask_dataset
from .models.gan import SITE_LATENT_DIM, sample_masks, save_gan_checkpoint, train_gan, write_gan_history
from .models.unet import UNetQuantifier, train_unet, write_unet_history
from .synth_pipeline import (CONFIGS, DatasetManifest, MultispectralImage, build_dataset, derive_seed,
                             materialize_dataset, preprocess, simulate_multispectral)
from .volume_io import load_volume


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _versions() -> dict:
    out = {"pasyn": __version__, "python": platform.python_version()}
    for dist in ("numpy", "scipy", "numba", "scikit-learn", "Pillow"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:  # pragma: no cover
            out[dist] = None
    return out


@contextmanager
def staged_output(out):
    """Write into a hidden sibling directory; move into ``out`` only on success."""
    out = Path(out).resolve()
    created = None
    for parent in reversed(out.parents):
        if not parent.exists():
            created = created or parent
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        if created is not None:
            shutil.rmtree(created, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        item.rename(dest)
    stage.rmdir()


def _write_run_json(stage: Path, args, cfg: RunConfig, seeds: dict, argv) -> None:
    outputs = sorted(str(p.relative_to(stage)) for p in stage.rglob("*") if p.is_file())
    record = {
        "command": args.command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seeds": {"seed": cfg.seed, **seeds},
        "workers": cfg.workers,
        "versions": _versions(),
        "outputs": outputs,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (stage / "run.json").write_text(json.dumps(record, indent=2) + "\n")


def _log(args):
    if getattr(args, "quiet", False):
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# subcommands; each writes into ``stage`` and returns extra seeds for run.json


def cmd_gen_masks(args, cfg, stage):
    if args.site != "forearm":
        raise CliError(f"no procedural model for site {args.site!r}; only 'forearm' is available")
    if args.n < 1:
        raise CliError("-n must be >= 1")
    params = cfg.geometry_params()
    seeds = [derive_seed(cfg.seed, "mask", i) for i in range(args.n)]
    masks = [generate_forearm_labelmap(params, s) for s in seeds]
    save_mask_dataset(masks, stage, "literature", body_site=args.site, seeds=seeds)
    return {"mask_seeds": "derive_seed(seed, 'mask', i)"}


def cmd_train_gan(args, cfg, stage):
    masks = load_mask_dataset(args.data)
    if not masks:
        raise CliError(f"no mask_*.png files in {args.data}")
    overrides = {}
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    hp = cfg.gan_hyperparams(args.site)
    for k, v in overrides.items():
        setattr(hp, k, v)
    hp.validate()
    res = train_gan(masks, hp, seed=cfg.seed, checkpoint_dir=stage, log=_log(args))
    save_gan_checkpoint(stage / "gan.ckpt", res)
    write_gan_history(stage / "history.csv", res.history)
    return {}


def cmd_sample_masks(args, cfg, stage):
    if args.n < 1:
        raise CliError("-n must be >= 1")
    masks = sample_masks(args.ckpt, args.n, seed=cfg.seed)
    save_mask_dataset(masks, stage, "gan", seeds=[cfg.seed] * len(masks))
    return {}


def _mask_pool(source, directory):
    masks = load_mask_dataset(directory)
    if not masks:
        raise CliError(f"no mask_*.png files in {directory}")
    out = {}
    for i, m in enumerate(masks):
        sid = f"{source}:{i:05d}"
        m.meta["id"] = sid
        out[sid] = m
    return out


def cmd_build_dataset(args, cfg, stage):
    name = args.dataset_config or cfg.dataset.get("config", "gan")
    sizes = {k: tuple(v) for k, v in cfg.dataset.get("split_sizes", {}).items()}
    need = {"lit-gan-anno": ("anno", "gan", "lit"), "gan-anno": ("anno", "gan")}.get(name, (name,))
    masks, pools = {}, {}
    dirs = {"anno": args.anno_dir, "gan": args.gan_dir, "lit": args.lit_dir}
    for src in ("anno", "gan", "lit"):
        if dirs[src] is not None:
            pool = _mask_pool(src, dirs[src])
        elif src == "lit" and src in need:
            from .experiment import procedural_masks

            n = int(cfg.dataset.get("pool_sizes", {}).get("lit", 500))
            pool = procedural_masks(cfg.geometry_params(), n, cfg.seed, "lit")
        elif src in need:
            raise CliError(f"dataset config {name!r} needs --{src}-dir")
        else:
            continue
        masks.update(pool)
        pools[src] = sorted(pool)
    manifest = build_dataset(name, pools, cfg.seed, sizes or None)
    limit = args.limit if args.limit is not None else cfg.dataset.get("limit")
    materialize_dataset(manifest, masks, stage, cfg.optics_spec(), cfg.grid(), cfg.sim_params(), cfg.noise_sigma,
                        limit=limit, log=_log(args))
    return {"per_sample": "derive_seed(seed, id, 'instance'|'sim'|'noise')"}


def cmd_simulate(args, cfg, stage):
    mask = load_labelmap(args.mask)
    inst, sim, noise = (derive_seed(cfg.seed, k) for k in ("instance", "sim", "noise"))
    p0, mua = simulate_multispectral(mask, cfg.optics_spec(), cfg.grid(), cfg.sim_params(), inst, sim)
    p0.save(stage / "p0.vol16")
    mua.save(stage / "mua.vol16")
    preprocess(p0, cfg.noise_sigma, noise).save(stage / "input.vol16")
    preprocess(mua, 0.0).save(stage / "gt_mua.vol16")
    return {"instance_seed": inst, "sim_seed": sim, "noise_seed": noise}


def cmd_train_unet(args, cfg, stage):
    manifest = Path(args.manifest)
    DatasetManifest.load(manifest)  # validates the file
    params = cfg.unet_params()
    if args.epochs is not None:
        params["epochs"] = args.epochs
    if args.lr is not None:
        params["lr"] = args.lr
    epochs = params.pop("epochs", 10)
    lr = params.pop("lr", 2e-4)
    model = train_unet(manifest.parent, epochs=epochs, lr=lr, seed=cfg.seed, log=_log(args), **params)
    model.save(stage / "unet.ckpt", {"manifest": str(manifest), "seed": cfg.seed})
    write_unet_history(stage / "history.csv", model.history_)
    return {}


def cmd_predict(args, cfg, stage):
    model = UNetQuantifier.load(args.ckpt)
    src = Path(args.input)
    items = [(src, stage / "pred_mua.vol16")] if src.is_file() else [
        (d / "input.vol16", stage / d.name / "pred_mua.vol16") for d in sorted(src.glob("sample_*"))]
    if not items:
        raise CliError(f"no input.vol16 samples under {src}")
    for inp, dest in items:
        img = MultispectralImage.load(inp)
        est = model.predict(img.data)
        dest.parent.mkdir(parents=True, exist_ok=True)
        MultispectralImage(est, img.spacing_mm, img.wavelengths_nm, "log-mua-pred",
                           {"input": str(inp), "checkpoint": str(args.ckpt)}).save(dest)
        meta = inp.parent / "meta.json"
        if dest.parent != stage and meta.exists():
            shutil.copy(meta, dest.parent / "meta.json")
    return {}


def cmd_evaluate(args, cfg, stage):
    gt_dir = Path(args.gt_dir)
    samples = sorted(gt_dir.glob("sample_*"))
    if not samples:
        raise CliError(f"no sample_* directories under {gt_dir}")
    names = args.algorithm or [Path(p).name for p in args.pred_dir]
    if len(names) != len(args.pred_dir):
        raise CliError("give one --algorithm per --pred-dir")
    records = []
    for name, pdir in zip(names, args.pred_dir):
        for s in samples:
            pred_path = Path(pdir) / s.name / "pred_mua.vol16"
            if not pred_path.exists():
                raise CliError(f"missing prediction {pred_path}")
            est, _ = load_volume(pred_path)
            gt, header = load_volume(s / "gt_mua.vol16")
            case = json.loads((s / "meta.json").read_text())["id"]
            records += evaluate_case(name, case, est, gt, load_labelmap(s / "mask.png"), header["wavelengths_nm"])
    write_metrics_csv(records, stage / args.out_file)
    return {}


def cmd_rank(args, cfg, stage):
    records = read_metrics_csv(args.metrics)
    for k, cls in enumerate(args.classes):
        values, algs, tasks, _ = metric_table(records, args.metric, cls)
        rep = ranking_report(values, algs, tasks, args.metric, cls, args.boot, cfg.seed)
        stem = "ranking" if k == 0 else f"ranking_c{cls}"
        rep.save(stage / f"{stem}.json")
        render_blob_svg(rep, stage / f"{stem}.svg")
    return {"bootstrap_seed": cfg.seed}


def cmd_experiment(args, cfg, stage):
    from .experiment import run_experiment

    run_experiment(cfg, stage, log=_log(args))
    return {"gan": derive_seed(cfg.seed, "gan"), "unet": cfg.seed}


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--workers", type=int, help="photon transport workers (default: all cores)")
    common.add_argument("--paper-scale", action="store_true", help="full-resolution geometry and volumes")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress messages")

    parser = _Parser(prog="pasyn", description="Photoacoustic training-data synthesis and evaluation.")
    parser.add_argument("--version", action="version", version=f"pasyn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_, out_required=True, out_default=None):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--out", required=out_required, default=out_default, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("gen-masks", cmd_gen_masks, "draw procedural forearm masks")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--site", default="forearm", choices=sorted(SITE_LATENT_DIM))

    p = add("train-gan", cmd_train_gan, "train the mask GAN")
    p.add_argument("--data", required=True, help="directory of mask_*.png")
    p.add_argument("--site", default="forearm", choices=sorted(SITE_LATENT_DIM))
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)

    p = add("sample-masks", cmd_sample_masks, "sample masks from a GAN checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("-n", type=int, required=True)

    p = add("build-dataset", cmd_build_dataset, "assemble and simulate a dataset configuration")
    p.add_argument("--dataset-config", choices=CONFIGS, help="dataset configuration name")
    p.add_argument("--anno-dir")
    p.add_argument("--gan-dir")
    p.add_argument("--lit-dir")
    p.add_argument("--limit", type=int, help="write at most this many samples per split")

    p = add("simulate", cmd_simulate, "simulate one mask at every wavelength")
    p.add_argument("--mask", required=True)

    p = add("train-unet", cmd_train_unet, "train a U-Net on a materialised dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = add("predict", cmd_predict, "estimate log absorption from an input volume or sample directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)

    p = add("evaluate", cmd_evaluate, "compute AE/RE/SSIM records")
    p.add_argument("--pred-dir", action="append", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--algorithm", action="append")

    p = add("rank", cmd_rank, "rank-then-aggregate with bootstrap stability")
    p.add_argument("--metrics", required=True)
    p.add_argument("--metric", default="AE", choices=METRICS)
    p.add_argument("--classes", type=int, nargs="+", default=[0])
    p.add_argument("--boot", type=int, default=1000)

    add("experiment", cmd_experiment, "run the dataset-strategy comparison", out_required=False,
        out_default="pasyn_experiment")
    return parser


def _split_config_flag(args):
    """``--config`` names a TOML file, or a dataset configuration for build-dataset."""
    args.dataset_config = getattr(args, "dataset_config", None)
    if args.config in CONFIGS and not Path(args.config).exists():
        if args.command != "build-dataset":
            raise CliError(f"--config {args.config!r} is a dataset configuration; expected a TOML file")
        args.dataset_config, args.config = args.config, None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = argv[0] if argv else None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        _split_config_flag(args)
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(seed=args.seed, workers=args.workers or cfg.workers or os.cpu_count(),
                                 paper_scale=args.paper_scale)
        if cfg.paper_scale:
            print("warning: --paper-scale uses 256x128 images at 0.16 mm; simulation and training "
                  "take hours to days", file=sys.stderr)
        out = Path(args.out)
        args.out_file = None
        if args.command == "evaluate":
            # --out may name the CSV file itself
            if out.suffix == ".csv":
                out, args.out_file = out.parent, out.name
            else:
                args.out_file = "metrics.csv"
        with staged_output(out) as stage:
            seeds = args.func(args, cfg, stage) or {}
            _write_run_json(stage, args, cfg, seeds, argv)
    except KeyboardInterrupt:
        print(json.dumps({"error": "Interrupted", "command": command, "message": "interrupted"}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(json.dumps({"error": type(exc).__name__, "command": command, "message": message}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
