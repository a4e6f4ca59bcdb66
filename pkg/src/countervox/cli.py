"""Command-line front end.

Subcommands wire the library into reproducible runs: ``phantom`` builds
synthetic cohorts, ``scm fit``/``scm cf`` fit and query causal graphs,
``mask`` edits a single ROI mask, ``diffuse`` trains and drives the MLP
denoiser, ``pipeline`` runs end-to-end counterfactual generation from a
config file, and ``eval`` runs the group-statistics battery.

Every command writes a machine-readable JSON report (including its fully
resolved configuration) next to its outputs and prints a short human
summary. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure. The environment variable ``COUNTERVOX_OUT`` supplies a default
root for relative output paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diffusion, maskedit, phantom, pipeline, scm, study, volio
from .grid import LabelVolume, VoxelGrid, roi_label, roi_volume_mm3

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise _UsageError(message)


def _out_path(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get("COUNTERVOX_OUT")
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_report(out_dir: Path, name: str, payload: dict) -> None:
    (out_dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _parse_assignments(pairs) -> dict[str, float]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise _UsageError(f"expected key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        try:
            out[key.strip()] = float(value)
        except ValueError as exc:
            raise _UsageError(f"bad numeric value in {pair!r}") from exc
    return out


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc


def _resolve(args, config: dict, key: str, default):
    """Flag value if given, else config-file value, else the default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(","))


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    config = _load_config(args.config)
    dims = _ints(_resolve(args, config, "dims", "48,48,48"))
    spacing = _floats(_resolve(args, config, "spacing", "1,1,1"))
    num_rois = int(_resolve(args, config, "num-rois", 6))
    n = int(_resolve(args, config, "n", 0))
    seed = int(_resolve(args, config, "seed", 0))
    noise_sigma = float(_resolve(args, config, "noise-sigma", 0.0))
    spec = phantom.PhantomSpec(
        dims=dims, spacing=spacing, num_rois=num_rois, noise_sigma=noise_sigma, seed=seed
    )
    if args.gt_scm:
        gt = scm.load_graph(args.gt_scm)
    else:
        gt = phantom.scaled_gt_graph(spec)
    out = _out_path(args.out)
    records = phantom.sample_cohort(spec, gt, n, seed=seed)
    phantom.save_cohort(records, out / "manifest.csv")
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_json(), indent=2) + "\n")
    scm.save_graph(gt, out / "gt_scm.json")
    written = 0
    if not args.no_volumes:
        for rec in records:
            vol, labels, _ = phantom.render_phantom(spec, rec)
            volio.write_volume(vol, out / f"{rec.id}_volume.nii")
            volio.write_volume(labels, out / f"{rec.id}_labels.nii")
            written += 1
    report = {
        "command": "phantom",
        "config": {
            "dims": list(dims), "spacing": list(spacing), "num_rois": num_rois,
            "n": n, "seed": seed, "noise_sigma": noise_sigma,
            "gt_scm": args.gt_scm, "out": str(out), "volumes_written": written,
        },
        "subjects": [r.id for r in records],
        "groups": {g: sum(1 for r in records if r.group == g) for g in ("control", "case")},
    }
    _write_report(out, "phantom_report.json", report)
    print(f"phantom: {n} subjects -> {out} ({written} volumes rendered)")
    return 0


# ---------------------------------------------------------------------------
# scm fit / scm cf


def cmd_scm_fit(args) -> int:
    records = phantom.load_cohort(args.cohort)
    if not records:
        raise scm.FitError(f"{args.cohort}: cohort is empty")
    data = phantom.cohort_arrays(records)
    if args.skeleton:
        skeleton = scm.load_skeleton(args.skeleton)
    else:
        num_rois = sum(1 for k in data if k.startswith("roi_"))
        skeleton = phantom.default_skeleton(num_rois)
    config = scm.FitConfig(constant_scale=args.constant_scale)
    result = scm.fit(skeleton, data, config)
    out = _out_path(args.out)
    scm.save_graph(result.graph, out / "scm_model.json")
    report = {
        "command": "scm fit",
        "config": {"cohort": args.cohort, "skeleton": args.skeleton,
                   "constant_scale": args.constant_scale, "out": str(out)},
        "n_subjects": len(records),
        "nll": result.nll,
        "node_nll": result.node_nll,
        "node_iters": result.node_iters,
    }
    _write_report(out, "scm_fit_report.json", report)
    print(f"scm fit: {len(records)} subjects, nll={result.nll:.4f} -> {out / 'scm_model.json'}")
    return 0


def cmd_scm_cf(args) -> int:
    graph = scm.load_graph(args.model)
    obs = {k: float(v) for k, v in json.loads(Path(args.obs).read_text()).items()}
    interventions = _parse_assignments(args.do)
    values = scm.counterfactual(graph, obs, interventions)
    out = _out_path(args.out)
    report = {
        "command": "scm cf",
        "config": {"model": args.model, "obs": args.obs,
                   "do": interventions, "out": str(out)},
        "observation": obs,
        "counterfactual": values,
    }
    _write_report(out, "scm_cf_report.json", report)
    changed = {k: v for k, v in values.items() if obs.get(k) != v}
    print(f"scm cf: do({interventions}) -> {len(changed)} values changed")
    for k in sorted(changed):
        print(f"  {k}: {obs[k]:.4f} -> {values[k]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# mask


def cmd_mask(args) -> int:
    labels = volio.read_volume(args.labels)
    if not isinstance(labels, LabelVolume):
        raise ValueError(f"{args.labels} does not hold an integer label volume")
    if args.probs:
        probs = volio.load_probability(args.probs)
    else:
        probs = phantom.probability_from_labels(labels)
    roi = int(args.roi)
    count = int(np.count_nonzero(labels.labels == roi))
    d = maskedit.volume_delta(count, float(args.target_mm3), labels.spacing)
    edited, plan = maskedit.apply_edit(labels, probs, roi, d, args.mode)
    out = _out_path(args.out)
    volio.write_volume(edited, out / "edited_labels.nii")
    report = {
        "command": "mask",
        "config": {"labels": args.labels, "probs": args.probs, "roi": roi,
                   "target_mm3": float(args.target_mm3), "mode": args.mode, "out": str(out)},
        "v_orig_voxels": count,
        "d": d,
        "plan": maskedit.plan_to_json(plan),
    }
    _write_report(out, "mask_report.json", report)
    print(f"mask: roi {roi} d={d:+d}, achieved {plan.achieved}"
          + (" (exhausted)" if plan.exhausted else ""))
    return 0


# ---------------------------------------------------------------------------
# diffuse train / sample / invert


def _schedule_from(args, config: dict) -> diffusion.NoiseSchedule:
    return diffusion.make_schedule(
        str(_resolve(args, config, "schedule-kind", "linear")),
        int(_resolve(args, config, "T", 1000)),
        float(_resolve(args, config, "beta-min", 1e-4)),
        float(_resolve(args, config, "beta-max", 0.02)),
    )


def cmd_diffuse_train(args) -> int:
    config = _load_config(args.config)
    sched = _schedule_from(args, config)
    data_dir = Path(args.data)
    volumes = sorted(data_dir.glob("*_volume.nii"))
    if not volumes:
        raise FileNotFoundError(f"no *_volume.nii files under {data_dir}")
    manifest = data_dir / "manifest.csv"
    meta_by_id: dict[str, np.ndarray] = {}
    if manifest.exists():
        records = phantom.load_cohort(manifest)
        stats = pipeline.metadata_stats_from_cohort(records)
        keys = sorted(records[0].metadata)
        for rec in records:
            meta_by_id[rec.id] = pipeline.metadata_vector(rec.metadata, keys, stats)
    data = []
    for path in volumes:
        vol = volio.read_volume(path)
        sid = path.name.replace("_volume.nii", "")
        meta = meta_by_id.get(sid)
        cond = diffusion.Conditioning(metadata=meta) if meta is not None else diffusion.NULL_CONDITIONING
        data.append((vol.values, cond))
    train_cfg = diffusion.TrainConfig(
        steps=int(_resolve(args, config, "steps", 4000)),
        batch_size=int(_resolve(args, config, "batch-size", 32)),
        lr=float(_resolve(args, config, "lr", 1e-2)),
        p_uncond=float(_resolve(args, config, "p-uncond", 0.1)),
        hidden=tuple(_ints(_resolve(args, config, "hidden", "64,64"))),
    )
    seed = int(_resolve(args, config, "seed", 0))
    mlp, losses = diffusion.train_mlp_denoiser(data, sched, train_cfg, seed=seed)
    out = _out_path(args.out)
    diffusion.save_denoiser(mlp, out / "denoiser")
    report = {
        "command": "diffuse train",
        "config": {"data": str(data_dir), "steps": train_cfg.steps,
                   "batch_size": train_cfg.batch_size, "lr": train_cfg.lr,
                   "p_uncond": train_cfg.p_uncond, "hidden": list(train_cfg.hidden),
                   "seed": seed, "T": sched.T, "schedule": sched.kind, "out": str(out)},
        "n_volumes": len(data),
        "n_params": mlp.n_params,
        "final_loss": float(losses[-1]) if len(losses) else None,
    }
    _write_report(out, "diffuse_train_report.json", report)
    print(f"diffuse train: {len(data)} volumes, {train_cfg.steps} steps, "
          f"final loss {report['final_loss']}")
    return 0


def cmd_diffuse_sample(args) -> int:
    config = _load_config(args.config)
    sched = _schedule_from(args, config)
    mlp = diffusion.load_denoiser(Path(args.model))
    substeps = int(_resolve(args, config, "substeps", 50))
    guidance_w = float(_resolve(args, config, "guidance-w", 2.0))
    seed = int(_resolve(args, config, "seed", 0))
    n = int(_resolve(args, config, "n", 1))
    metadata = _parse_assignments(args.metadata)
    cond = (
        diffusion.Conditioning(metadata=np.array([metadata[k] for k in sorted(metadata)]))
        if metadata else None
    )
    rng = np.random.default_rng(seed)
    out = _out_path(args.out)
    spacing = _floats(_resolve(args, config, "spacing", "1,1,1"))
    for i in range(n):
        x_T = rng.standard_normal(mlp.grid_shape)
        x0 = diffusion.ddim_sample(mlp, cond, sched, substeps, x_T, guidance_w)[-1]
        volio.write_volume(VoxelGrid(x0, spacing), out / f"sample_{i:04d}.nii")
    report = {
        "command": "diffuse sample",
        "config": {"model": args.model, "n": n, "substeps": substeps,
                   "guidance_w": guidance_w, "seed": seed, "metadata": metadata,
                   "T": sched.T, "schedule": sched.kind, "out": str(out)},
    }
    _write_report(out, "diffuse_sample_report.json", report)
    print(f"diffuse sample: {n} volumes -> {out}")
    return 0


def cmd_diffuse_invert(args) -> int:
    config = _load_config(args.config)
    sched = _schedule_from(args, config)
    mlp = diffusion.load_denoiser(Path(args.model))
    vol = volio.read_volume(args.volume)
    if not isinstance(vol, VoxelGrid):
        raise ValueError(f"{args.volume} must hold a scalar volume")
    substeps = int(_resolve(args, config, "substeps", 50))
    guidance_w = float(_resolve(args, config, "guidance-w", 1.0))
    metadata = _parse_assignments(args.metadata)
    cond = (
        diffusion.Conditioning(metadata=np.array([metadata[k] for k in sorted(metadata)]))
        if metadata else None
    )
    seq = diffusion.ddim_invert(mlp, cond, sched, substeps, vol.values, guidance_w)
    out = _out_path(args.out)
    np.savez_compressed(out / "inversion.npz",
                        sequence=seq,
                        timesteps=diffusion.ddim_timesteps(sched.T, substeps)[::-1])
    report = {
        "command": "diffuse invert",
        "config": {"model": args.model, "volume": args.volume, "substeps": substeps,
                   "guidance_w": guidance_w, "metadata": metadata,
                   "T": sched.T, "schedule": sched.kind, "out": str(out)},
        "sequence_shape": list(seq.shape),
    }
    _write_report(out, "diffuse_invert_report.json", report)
    print(f"diffuse invert: {seq.shape[0]} latents -> {out / 'inversion.npz'}")
    return 0


# ---------------------------------------------------------------------------
# pipeline


def _denoiser_from_config(doc: dict | None, sched: diffusion.NoiseSchedule):
    if doc is None:
        return None
    kind = doc.get("kind")
    if kind == "oracle":
        return diffusion.GaussianOracleDenoiser(sched, float(doc.get("mean", 0.0)),
                                                float(doc.get("var", 1.0)))
    if kind == "latent-oracle":
        return diffusion.LatentOracleDenoiser(sched, float(doc.get("var", 1e-6)))
    if kind == "mlp":
        return diffusion.load_denoiser(Path(doc["path"]))
    raise ValueError(f"unknown denoiser kind {kind!r}")


def cmd_pipeline(args) -> int:
    config = _load_config(args.config)
    if not config:
        raise _UsageError("pipeline requires --config FILE")
    sched_doc = config.get("schedule", {})
    sched = diffusion.make_schedule(
        sched_doc.get("kind", "linear"), int(sched_doc.get("T", 1000)),
        float(sched_doc.get("beta_min", 1e-4)), float(sched_doc.get("beta_max", 0.02)),
    )
    denoiser = _denoiser_from_config(config.get("denoiser", {"kind": "oracle"}), sched)
    decoder = _denoiser_from_config(config.get("decoder"), sched)
    graph = scm.load_graph(config["model"])
    records = phantom.load_cohort(config["manifest"])
    cohort_dir = Path(config.get("cohort_dir", Path(config["manifest"]).parent))
    subjects = config.get("subjects", "all")
    if subjects != "all":
        wanted = set(subjects)
        records = [r for r in records if r.id in wanted]
    seed = int(_resolve(args, config, "seed", 0))
    jobs = int(_resolve(args, config, "jobs", 1))
    out = _out_path(args.out or config.get("out", "pipeline_out"))
    intervention = {k: float(v) for k, v in config.get("intervention", {}).items()}
    stats = pipeline.metadata_stats_from_cohort(records) if records else None

    requests = []
    for rec in records:
        vol = volio.read_volume(cohort_dir / f"{rec.id}_volume.nii")
        labels = volio.read_volume(cohort_dir / f"{rec.id}_labels.nii")
        requests.append(pipeline.CounterfactualRequest(
            volume=vol, labels=labels, metadata=rec.metadata,
            intervention=intervention,
            tau=float(config.get("tau", 0.8)),
            guidance_w=float(config.get("guidance_w", 2.0)),
            rank_mode=config.get("rank_mode", "difference"),
            seed=seed, subject_id=rec.id,
        ))
    results = pipeline.batch_generate(
        requests, graph, denoiser, sched,
        decoder=decoder,
        encode_factor=int(config.get("encode_factor", 1)),
        substeps=int(config.get("substeps", 50)),
        metadata_stats=stats,
        jobs=jobs,
    )
    failures = []
    study_rows = []
    for rec, res in zip(records, results):
        if res.error:
            failures.append({"subject": res.subject_id, "error": res.error})
            continue
        volio.write_volume(res.volume, out / f"{res.subject_id}_cf_volume.nii")
        volio.write_volume(res.labels, out / f"{res.subject_id}_cf_labels.nii")
        _write_report(out, f"{res.subject_id}_cf_report.json", {
            "subject": res.subject_id,
            "observation": res.observation,
            "counterfactual": res.counterfactual,
            "plans": [maskedit.plan_to_json(p) for p in res.plans],
            "recon_rms": res.recon_rms,
        })
        real_labels = volio.read_volume(cohort_dir / f"{rec.id}_labels.nii")
        study_rows.append((rec.id, rec.group, real_labels))
        if "diagnosis" in intervention:
            cf_group = "cf_case" if intervention["diagnosis"] == 1.0 else "cf_control"
        else:
            cf_group = f"cf_{rec.group}"
        study_rows.append((f"{rec.id}_cf", cf_group, res.labels))
    if study_rows:
        _write_study_csv(out / "study.csv", study_rows)
    resolved = dict(config)
    resolved.update({"seed": seed, "jobs": jobs, "out": str(out)})
    _write_report(out, "pipeline_report.json", {
        "command": "pipeline",
        "config": resolved,
        "n_subjects": len(results),
        "n_failures": len(failures),
        "failures": failures,
    })
    print(f"pipeline: {len(results)} subjects -> {out} ({len(failures)} failures)")
    return 0


def _write_study_csv(path, rows) -> None:
    """Study table rows (real and counterfactual) from label maps."""
    table = study.StudyTable(
        subject_ids=tuple(r[0] for r in rows),
        groups=tuple(r[1] for r in rows),
        visits=tuple(0 for _ in rows),
        covariates={"supratentorial": np.array([phantom.supratentorial_mm3(r[2]) for r in rows])},
        volumes={
            f"roi_{k}": np.array([roi_volume_mm3(r[2], roi_label(k)) for r in rows])
            for k in range(1, rows[0][2].num_rois + 1)
        },
    )
    table.to_csv(path)


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    table_path = _resolve(args, config, "study", None)
    if table_path is None:
        raise _UsageError("eval requires --study CSV or a config with a 'study' entry")
    table = study.StudyTable.from_csv(table_path)
    rois = _resolve(args, config, "rois", None)
    if rois is None:
        rois = sorted(table.volumes)
    elif isinstance(rois, str):
        rois = rois.split(",")
    comparisons = _resolve(args, config, "comparisons", None)
    if comparisons is None:
        comparisons = [c for c in study.DEFAULT_COMPARISONS
                       if {c[0], c[1]} <= set(table.groups)]
    elif isinstance(comparisons, str):
        comparisons = [tuple(c.split(":")) for c in comparisons.split(",")]
    else:
        comparisons = [tuple(c) for c in comparisons]
    alpha = float(_resolve(args, config, "alpha", 0.05))
    covariate = _resolve(args, config, "covariate", "supratentorial")
    jobs = int(_resolve(args, config, "jobs", 1))
    if jobs > 1 and len(rois) > 1:
        # ROI tests are independent; shard them across workers and merge
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial

        worker = partial(_eval_one_roi, table, list(comparisons), alpha, covariate, len(rois))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(worker, rois))
        entries = tuple(e for part in parts for e in part.entries)
        report = study.EffectReport(alpha, parts[0].threshold, entries)
    else:
        report = study.group_study(table, rois, comparisons, alpha=alpha,
                                   covariate=covariate)
    out = _out_path(args.out)
    report.save_json(out / "effect_report.json")
    report.save_csv(out / "effect_grid.csv")
    _write_report(out, "eval_report.json", {
        "command": "eval",
        "config": {"study": str(table_path), "rois": list(rois),
                   "comparisons": [list(c) for c in comparisons],
                   "alpha": alpha, "covariate": covariate, "out": str(out)},
        "threshold": report.threshold,
        "n_significant": sum(1 for e in report.entries if e.significant),
    })
    print(f"eval: {len(report.entries)} tests at threshold {report.threshold:.6g} -> {out}")
    for e in report.entries:
        mark = "*" if e.significant else " "
        print(f"  {mark} {e.comparison[0]} vs {e.comparison[1]} / {e.roi}: "
              f"p={e.p_value:.4g} |d|={e.effect_size:.3f} ({e.bucket})")
    return 0


def _eval_one_roi(table, comparisons, alpha, covariate, n_tests, roi):
    return study.group_study(table, [roi], comparisons, alpha=alpha,
                             covariate=covariate, n_tests=n_tests)


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="countervox", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="sample and render a synthetic cohort")
    p.add_argument("--n", type=int)
    p.add_argument("--dims")
    p.add_argument("--spacing")
    p.add_argument("--num-rois", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--gt-scm", help="ground-truth graph JSON (default built-in)")
    p.add_argument("--no-volumes", action="store_true", help="manifest only, skip rendering")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p_scm = sub.add_parser("scm", help="causal graph operations")
    scm_sub = p_scm.add_subparsers(dest="scm_command", required=True)
    p = scm_sub.add_parser("fit", help="fit mechanisms to a cohort manifest")
    p.add_argument("--cohort", required=True)
    p.add_argument("--skeleton")
    p.add_argument("--constant-scale", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scm_fit)
    p = scm_sub.add_parser("cf", help="counterfactual query on a fitted graph")
    p.add_argument("--model", required=True)
    p.add_argument("--obs", required=True, help="JSON file with the full observation")
    p.add_argument("--do", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scm_cf)

    p = sub.add_parser("mask", help="edit one ROI mask toward a target volume")
    p.add_argument("--labels", required=True)
    p.add_argument("--probs", help="probability .npz (derived from labels when absent)")
    p.add_argument("--roi", required=True, type=int)
    p.add_argument("--target-mm3", required=True, type=float)
    p.add_argument("--mode", choices=maskedit.RANK_MODES, default="difference")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p_diff = sub.add_parser("diffuse", help="train or drive the MLP denoiser")
    diff_sub = p_diff.add_subparsers(dest="diffuse_command", required=True)
    for name, fn in (("train", cmd_diffuse_train),
                     ("sample", cmd_diffuse_sample),
                     ("invert", cmd_diffuse_invert)):
        p = diff_sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--T", type=int, dest="T")
        p.add_argument("--schedule-kind")
        p.add_argument("--beta-min", type=float)
        p.add_argument("--beta-max", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        if name == "train":
            p.add_argument("--data", required=True)
            p.add_argument("--steps", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--p-uncond", type=float)
            p.add_argument("--hidden")
        else:
            p.add_argument("--model", required=True)
            p.add_argument("--substeps", type=int)
            p.add_argument("--guidance-w", type=float)
            p.add_argument("--metadata", action="append", metavar="KEY=VALUE")
            if name == "sample":
                p.add_argument("--n", type=int)
                p.add_argument("--spacing")
            else:
                p.add_argument("--volume", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("pipeline", help="end-to-end counterfactual generation")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="group-difference statistics battery")
    p.add_argument("--config")
    p.add_argument("--study", help="study table CSV")
    p.add_argument("--rois", help="comma-separated ROI columns")
    p.add_argument("--comparisons", help="comma-separated a:b pairs")
    p.add_argument("--alpha", type=float)
    p.add_argument("--covariate")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


_DATA_ERRORS = (
    FileNotFoundError,
    KeyError,
    json.JSONDecodeError,
    volio.VolumeIOError,
    phantom.CapacityError,
    scm.IncompleteObservationError,
)
_NUMERICAL_ERRORS = (
    scm.FitError,
    diffusion.TrainingError,
    study.UndefinedStatisticError,
    FloatingPointError,
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, scm.CyclicGraphError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
