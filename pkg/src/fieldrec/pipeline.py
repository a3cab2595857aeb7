"""End-to-end reconstruction stages and the degradation utilities.

Each stage writes its artifacts as soon as it completes; a failure later in
the pipeline never touches earlier outputs. Every run starts by writing the
fully resolved configuration. All geometry inside the pipeline lives in the
normalized unit frame; final meshes are mapped back through the recorded
transform.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import fileio
from .autodiff import save_checkpoint
from .errors import ArgumentError, StageError, TrainingDivergedError
from .extraction import GridSpec, assign_normals, extract_level_set, inpaint
from .field import attention_similarity, build_field, field_from_checkpoint
from .geometry import NormalizationTransform, PointCloud, TriangleMesh, normalize_unit
from .metrics import evaluate_meshes
from .rimls import RimlsField, RimlsParams
from .rimls import reconstruct as rimls_reconstruct
from .training import generate_queries, train, write_training_log


def _normalization_payload(transform):
    return {"center": [float(c) for c in transform.center],
            "scale": float(transform.scale)}


def _transform_from_payload(payload):
    return NormalizationTransform(center=np.asarray(payload["center"]),
                                  scale=float(payload["scale"]))


def write_normalization(path, transform):
    with open(path, "w") as f:
        json.dump(_normalization_payload(transform), f, indent=2, sort_keys=True)
        f.write("\n")


def read_normalization(path):
    with open(path, "r") as f:
        return _transform_from_payload(json.load(f))


class _Stages:
    """Tracks stage timing and wraps failures with the stage name."""

    def __init__(self):
        self.completed = []

    def run(self, name, fn):
        start = time.time()
        try:
            result = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.completed.append({"stage": name, "seconds": round(time.time() - start, 3)})
        return result


def save_field_checkpoint(path, field, transform=None, config=None):
    manifest = {"field": field.spec.manifest()}
    if transform is not None:
        manifest["normalization"] = _normalization_payload(transform)
    if config is not None:
        manifest["config"] = config.resolved_text()
    save_checkpoint(path, field.store, manifest=manifest)


def run_train(input_path, out_dir, cfg):
    """Stages: load, normalize, queries, train. Returns (field, transform, paths)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved.txt")
    stages = _Stages()

    cloud = stages.run("load", lambda: fileio.load_point_cloud(input_path))
    normalized, transform = stages.run("normalize", lambda: normalize_unit(cloud))
    stages.run("normalize-record",
               lambda: write_normalization(out / "normalization.json", transform))

    queries = stages.run("queries",
                         lambda: generate_queries(normalized, cfg.trainer_config()))

    field = build_field(cfg.field_spec(), seed=cfg.seed)
    ckpt_path = out / "checkpoint.ckpt"

    def do_train():
        def on_checkpoint(iteration):
            save_field_checkpoint(ckpt_path, field, transform, cfg)
        try:
            return train(field, queries, cfg.trainer_config(),
                         schedule=cfg.lr_schedule(), weights=cfg.loss_weights(),
                         on_checkpoint=on_checkpoint)
        except TrainingDivergedError:
            save_field_checkpoint(ckpt_path, field, transform, cfg)  # last good state
            raise

    result = stages.run("train", do_train)
    save_field_checkpoint(ckpt_path, field, transform, cfg)
    write_training_log(out / "training_log.csv", result.log)
    return field, transform, queries, stages


def _field_grid(points, cfg, resolution):
    return GridSpec.for_cloud(points, resolution, margin=cfg.grid_margin)


def run_reconstruct(input_path, out_dir, cfg):
    """The full pipeline; returns the manifest dict."""
    out = Path(out_dir)
    field, transform, queries, stages = run_train(input_path, out_dir, cfg)
    points = queries.points  # normalized, capped input cloud P

    manifest = {"input": str(input_path),
                "field": field.spec.manifest(),
                "parameters": field.store.n_parameters(),
                "normalization": _normalization_payload(transform)}

    if cfg.no_mls:
        grid = _field_grid(points, cfg, cfg.final_grid)
        mesh = stages.run("extract", lambda: extract_level_set(field, grid))
        final = TriangleMesh(transform.invert(mesh.vertices), mesh.faces)
        stages.run("write-mesh", lambda: _write_final(out, final))
    else:
        fill_grid = _field_grid(points, cfg, cfg.fill_grid)
        field_mesh = stages.run("extract", lambda: extract_level_set(field, fill_grid))
        stages.run("write-field-mesh",
                   lambda: fileio.save_mesh(out / "mesh_field.obj", field_mesh))

        if cfg.no_fill:
            merged = PointCloud(points)
        else:
            from .geometry import sample_mesh_surface
            level = stages.run("level-samples",
                               lambda: sample_mesh_surface(field_mesh, cfg.fill_samples,
                                                           seed=cfg.seed + 5))
            report = stages.run("inpaint", lambda: inpaint(PointCloud(points), level))
            report.write_csv(out / "fill_report.csv")
            report.write_summary(out / "fill_summary.json")
            manifest["fill"] = report.summary()
            merged = report.merged

        oriented, dropped = stages.run("normals", lambda: assign_normals(merged, field))
        manifest["degenerate_normals_dropped"] = dropped
        stages.run("write-enhanced",
                   lambda: fileio.save_point_cloud(out / "enhanced_cloud.ply", oriented))

        def do_rimls():
            params = RimlsParams.from_spacing(oriented, **cfg.rimls_kwargs())
            manifest["rimls"] = {"h": params.h, "sigma_r": params.sigma_r,
                                 "sigma_n": params.sigma_n,
                                 "max_iters": params.max_iters, "tol": params.tol}
            grid = _field_grid(points, cfg, cfg.final_grid)
            return rimls_reconstruct(RimlsField(oriented, params), grid)

        mesh = stages.run("rimls", do_rimls)
        final = TriangleMesh(transform.invert(mesh.vertices), mesh.faces)
        stages.run("write-mesh", lambda: _write_final(out, final))

    manifest["final_vertices"] = int(len(final.vertices))
    manifest["final_faces"] = int(len(final.faces))
    manifest["stages"] = stages.completed
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _write_final(out, mesh):
    fileio.save_mesh(out / "final_mesh.obj", mesh)
    fileio.save_mesh(out / "final_mesh.ply", mesh)


# ---------------------------------------------------------------------------
# stage-wise commands
# ---------------------------------------------------------------------------

def run_extract(checkpoint_path, out_dir, cfg):
    """Zero level set of a trained field at the final grid resolution."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved.txt")
    stages = _Stages()
    field, manifest = stages.run("load-checkpoint",
                                 lambda: field_from_checkpoint(checkpoint_path))
    grid = GridSpec.cube(cfg.final_grid, half_extent=0.5 + cfg.grid_margin)
    mesh = stages.run("extract", lambda: extract_level_set(field, grid))
    if "normalization" in manifest:
        transform = _transform_from_payload(manifest["normalization"])
        mesh = TriangleMesh(transform.invert(mesh.vertices), mesh.faces)
    stages.run("write-mesh", lambda: fileio.save_mesh(out / "mesh_field.obj", mesh))
    return mesh


def run_inpaint(checkpoint_path, input_path, out_dir, cfg):
    """Level-set sampling + the 3-sigma fill + gradient normals for a cloud."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved.txt")
    stages = _Stages()
    field, manifest = stages.run("load-checkpoint",
                                 lambda: field_from_checkpoint(checkpoint_path))
    cloud = stages.run("load", lambda: fileio.load_point_cloud(input_path))
    if "normalization" in manifest:
        transform = _transform_from_payload(manifest["normalization"])
        points = transform.apply(cloud.points)
    else:
        points = cloud.points
    grid = _field_grid(points, cfg, cfg.fill_grid)
    mesh = stages.run("extract", lambda: extract_level_set(field, grid))
    from .geometry import sample_mesh_surface
    level = stages.run("level-samples",
                       lambda: sample_mesh_surface(mesh, cfg.fill_samples,
                                                   seed=cfg.seed + 5))
    report = stages.run("inpaint", lambda: inpaint(PointCloud(points), level))
    report.write_csv(out / "fill_report.csv")
    report.write_summary(out / "fill_summary.json")
    oriented, _ = stages.run("normals", lambda: assign_normals(report.merged, field))
    stages.run("write-enhanced",
               lambda: fileio.save_point_cloud(out / "enhanced_cloud.ply", oriented))
    return report


def run_rimls(enhanced_path, out_dir, cfg, normalization_path=None):
    """RIMLS reconstruction from an oriented PLY cloud."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved.txt")
    stages = _Stages()
    oriented = stages.run("load", lambda: fileio.load_oriented_point_cloud(enhanced_path))
    params = RimlsParams.from_spacing(oriented, **cfg.rimls_kwargs())
    grid = GridSpec.for_cloud(oriented, cfg.final_grid, margin=cfg.grid_margin)
    mesh = stages.run("rimls",
                      lambda: rimls_reconstruct(RimlsField(oriented, params), grid))
    if normalization_path is not None:
        transform = read_normalization(normalization_path)
        mesh = TriangleMesh(transform.invert(mesh.vertices), mesh.faces)
    stages.run("write-mesh", lambda: _write_final(out, mesh))
    return mesh


def run_metrics(rec_path, gt_path, cfg, out_path=None):
    rec = fileio.load_mesh(rec_path)
    gt = fileio.load_mesh(gt_path)
    report = evaluate_meshes(rec, gt, cd_samples=cfg.metrics_cd_samples,
                             f_samples=cfg.metrics_f_samples,
                             tau_rel=cfg.metrics_tau_rel, seed=cfg.metrics_seed)
    if out_path is not None:
        report.write_csv(out_path)
    return report


def run_attn_map(checkpoint_path, cloud_path, out_path, anchor):
    """Attention-similarity scalars for every cloud point, written as PLY."""
    field, manifest = field_from_checkpoint(checkpoint_path)
    cloud = fileio.load_point_cloud(cloud_path)
    if "normalization" in manifest:
        transform = _transform_from_payload(manifest["normalization"])
        points = transform.apply(cloud.points)
        anchor_n = transform.apply(np.asarray(anchor, dtype=np.float64)[None])[0]
    else:
        points = cloud.points
        anchor_n = np.asarray(anchor, dtype=np.float64)
    warned = False
    if np.abs(anchor_n).max() > 1.0:  # outside the normalized frame
        warned = True
    sims = attention_similarity(field, anchor_n, points)
    lo, hi = float(sims.min()), float(sims.max())
    if hi - lo < 1e-300:
        scalars = np.ones_like(sims)
    else:
        scalars = (sims - lo) / (hi - lo)
    fileio.write_ply(out_path, cloud.points, scalars=scalars)
    return scalars, warned


def run_degrade(input_path, output_path, mode, value, seed=0, axis="z"):
    """Controlled degradations: gaussian noise, subsampling, cap removal."""
    cloud = fileio.load_point_cloud(input_path)
    pts = cloud.points
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xde9]))
    if mode == "gaussian":
        if value < 0:
            raise ArgumentError("noise percentage must be nonnegative")
        diag = cloud.bbox_diagonal()
        sigma = (value / 100.0) * diag / np.sqrt(3.0)  # isotropic per-axis std
        out = pts + rng.normal(0.0, sigma, size=pts.shape) if value > 0 else pts.copy()
    elif mode == "subsample":
        if not 0.0 < value <= 1.0:
            raise ArgumentError("subsample fraction must be in (0, 1]")
        n = int(round(value * len(pts)))
        idx = np.sort(rng.choice(len(pts), size=max(n, 1), replace=False))
        out = pts[idx]
    elif mode == "remove-cap":
        if not 0.0 < value < 180.0:
            raise ArgumentError("cap angle must be in (0, 180) degrees")
        axes = {"x": [1.0, 0, 0], "y": [0, 1.0, 0], "z": [0, 0, 1.0]}
        if axis not in axes:
            raise ArgumentError(f"unknown axis '{axis}'")
        a = np.asarray(axes[axis])
        lo, hi = cloud.bounds()
        center = (lo + hi) / 2.0
        v = pts - center
        norms = np.linalg.norm(v, axis=1)
        norms[norms == 0] = 1.0
        angles = np.degrees(np.arccos(np.clip((v / norms[:, None]) @ a, -1, 1)))
        out = pts[angles >= value]
        if len(out) == 0:
            raise ArgumentError("cap removal would delete every point")
    else:
        raise ArgumentError(f"unknown degrade mode '{mode}'")
    fileio.save_point_cloud(output_path, PointCloud(out))
    return PointCloud(out)
