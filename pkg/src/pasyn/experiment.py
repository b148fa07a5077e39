"""Desk-scale data-strategy comparison: datasets -> U-Nets -> metrics -> ranking."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .eval_rank import (HIGHER_IS_BETTER, evaluate_case, metric_table, ranking_report, render_blob_svg,
                        write_metrics_csv)
from .geometry import generate_forearm_labelmap, hflip_copy_augment
from .models.gan import sample_masks, save_gan_checkpoint, train_gan, write_gan_history
from .models.unet import UNetQuantifier, load_split, write_unet_history
from .synth_pipeline import (DEFAULT_SPLITS, DatasetManifest, build_dataset, derive_seed, materialize_dataset)
from .volume_io import save_volume

SOURCES = ("anno", "gan", "lit")


def _needed_sources(configs) -> set:
    need = set()
    for c in configs:
        need |= {"anno", "gan", "lit"} if c == "lit-gan-anno" else ({"anno", "gan"} if c == "gan-anno" else {c})
    return need


def procedural_masks(params, n, seed, source):
    """``n`` forearm maps keyed ``<source>:%05d``, each from its own derived seed."""
    out = {}
    for i in range(n):
        sid = f"{source}:{i:05d}"
        m = generate_forearm_labelmap(params, derive_seed(seed, source, i))
        m.meta["id"] = sid
        out[sid] = m
    return out


def run_experiment(cfg: RunConfig, out_dir, log=None) -> dict:
    """Train one U-Net per dataset configuration and rank them on the shared target test split.

    The ``anno`` source is drawn from the ``[geometry]`` distribution and
    stands in for annotated masks; ``lit`` uses ``[geometry]`` updated by
    ``[experiment] lit_geometry``; ``gan`` masks come from a GAN trained on
    the (flip-augmented) anno training masks.  Returns a summary dictionary
    that is also written to ``summary.json``.
    """
    log = log or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = cfg.experiment
    configs = list(exp.get("configs", ["anno", "lit"]))
    metric = exp.get("metric", "AE")
    if metric not in HIGHER_IS_BETTER:
        raise ValueError(f"unknown metric {metric!r}")
    classes = [int(c) for c in exp.get("classes", [0])]
    n_boot = int(exp.get("n_boot", 1000))
    sizes = {k: tuple(v) for k, v in {**DEFAULT_SPLITS, **exp.get("split_sizes", {})}.items()}
    pool_sizes = {k: int(sum(sizes[k])) for k in SOURCES}
    pool_sizes.update({k: int(v) for k, v in exp.get("pool_sizes", {}).items()})
    seed = cfg.seed
    need = _needed_sources(configs) | {"anno"}

    masks = procedural_masks(cfg.geometry_params(), pool_sizes["anno"], seed, "anno")
    pools = {"anno": sorted(masks)}
    if "lit" in need:
        lit = procedural_masks(cfg.geometry_params(exp.get("lit_geometry", {})), pool_sizes["lit"], seed, "lit")
        masks.update(lit)
        pools["lit"] = sorted(lit)
    if "gan" in need:
        anno_train = build_dataset("anno", pools, seed, sizes).train
        train_masks = hflip_copy_augment([masks[s] for s in anno_train])
        log(f"training GAN on {len(train_masks)} masks")
        res = train_gan(train_masks, cfg.gan_hyperparams(exp.get("gan_site", "forearm")),
                        seed=derive_seed(seed, "gan"))
        gdir = out / "gan"
        gdir.mkdir(exist_ok=True)
        save_gan_checkpoint(gdir / "gan.ckpt", res)
        write_gan_history(gdir / "history.csv", res.history)
        gan = sample_masks(res, pool_sizes["gan"], seed=derive_seed(seed, "gan-sample"))
        ids = [f"gan:{i:05d}" for i in range(len(gan))]
        for sid, m in zip(ids, gan):
            m.meta["id"] = sid
        masks.update(zip(ids, gan))
        pools["gan"] = ids

    spec = cfg.optics_spec()
    grid = cfg.grid()
    sim = cfg.sim_params()
    cache = {}
    manifests = {c: build_dataset(c, pools, seed, sizes) for c in configs}
    target = manifests[configs[0]].target_test
    tman = DatasetManifest("target_test", [], [], list(target), list(target), {}, seed)
    troot = materialize_dataset(tman, masks, out, spec, grid, sim, cfg.noise_sigma, cache=cache,
                                splits=("test",), log=log)
    x_test, y_test, m_test, id_test = load_split(troot, "test")

    records = []
    summary = {"configs": configs, "metric": metric, "seed": seed, "target_test": len(target), "variants": {}}
    for c in configs:
        man = manifests[c]
        root = materialize_dataset(man, masks, out / "datasets", spec, grid, sim, cfg.noise_sigma, cache=cache,
                                   splits=("train", "val"), log=log)
        X, y, _, _ = load_split(root, "train")
        Xv, yv, _, _ = load_split(root, "val")
        model = UNetQuantifier(**cfg.unet_params(), random_state=seed)
        log(f"training U-Net on {c}: {len(X)} train / {len(Xv)} val samples")
        model.fit(X, y, Xv if len(Xv) else None, yv if len(yv) else None, log=log)
        mdir = out / "models" / c
        mdir.mkdir(parents=True, exist_ok=True)
        model.save(mdir / "unet.ckpt", {"dataset_config": c, "seed": seed})
        write_unet_history(mdir / "history.csv", model.history_)
        pred = model.predict(x_test)
        pdir = out / "predictions" / c
        for i, (sid, est, gt, m) in enumerate(zip(id_test, pred, y_test, m_test)):
            sdir = pdir / f"sample_{i:05d}"
            sdir.mkdir(parents=True, exist_ok=True)
            save_volume(sdir / "pred_mua.vol16", est, spacing_mm=m.spacing_mm, kind="log-mua-pred",
                        wavelengths_nm=list(grid.wavelengths_nm), provenance={"id": sid, "model": c})
            records += evaluate_case(c, sid, est, gt, m, grid.wavelengths_nm)
        overall = [r.value for r in records if r.algorithm == c and r.metric == "AE" and r.cls == 0]
        summary["variants"][c] = {"train": man.counts["train"], "val": man.counts["val"],
                                  "mean_AE_overall": float(np.mean(overall))}

    write_metrics_csv(records, out / "metrics.csv")
    for k, cls in enumerate(classes):
        values, algs, tasks, _ = metric_table(records, metric, cls)
        rep = ranking_report(values, algs, tasks, metric, cls, n_boot, seed)
        stem = "ranking" if k == 0 else f"ranking_c{cls}"
        rep.save(out / f"{stem}.json")
        render_blob_svg(rep, out / f"{stem}.svg")
        if k == 0:
            for a, r in zip(algs, rep.consensus):
                summary["variants"][a]["consensus_rank"] = int(r)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
