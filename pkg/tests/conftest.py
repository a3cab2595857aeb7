import numpy as np
import pytest

from fieldrec.field import FieldSpec, build_field
from fieldrec.training import LrSchedule, TrainerConfig, generate_queries, train


def sphere_cloud(n, radius=0.5, seed=0):
    """Seeded uniform samples on a sphere surface centered at the origin."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v


def capped_sphere_cloud(n, cap_deg=30.0, radius=0.5, seed=0):
    """Sphere samples with the polar cap (angle < cap_deg from +z) removed."""
    pts = sphere_cloud(int(n * 1.6), radius=radius, seed=seed)
    angles = np.degrees(np.arccos(np.clip(pts[:, 2] / radius, -1, 1)))
    pts = pts[angles >= cap_deg]
    return pts[:n] if len(pts) >= n else pts


TINY_SPEC = FieldSpec(tokens=4, heads=4, width=48, layers=4, bands=4)


@pytest.fixture(scope="session")
def trained_sphere():
    """A small field trained briefly on a unit-diameter sphere cloud."""
    cloud = sphere_cloud(1200, radius=0.5, seed=1)
    cfg = TrainerConfig(seed=7, iterations=300, batch_q=256, batch_g=256,
                        rounds=4, max_points=5000, log_every=25,
                        checkpoint_every=150)
    queries = generate_queries(cloud, cfg)
    field = build_field(TINY_SPEC, seed=7)
    schedule = LrSchedule(base=1e-3, warmup=60, total=300)
    result = train(field, queries, cfg, schedule=schedule)
    return field, cloud, result
