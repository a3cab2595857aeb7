"""Query-set generation, self-supervised losses, and the training loop.

The four losses follow the projection-based formulation: off-surface queries
are pulled onto the data by a two-step projection, the zero level set is
anchored on surface samples, predicted displacements are matched to local
centroid displacements across neighborhood scales, and normals are kept
stable under projection. Gradients flow through the projection operator
fully (no detachment), which is what makes the normal-consistency term a
second-order objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import autodiff as ad
from .errors import (ArgumentError, ContractError, InsufficientPointsError,
                     TrainingDivergedError)
from .field import GRAD_EPS, flip_field_sign, value_and_spatial_grad
from .geometry import PointCloud, SpatialIndex, downsample


@dataclass
class LossWeights:
    alpha: float = 0.3
    beta: float = 10.0
    gamma: float = 1.0
    delta: float = 0.01
    rho: float = 10.0   # decay of the level-set weight w(x) = exp(-rho |g|)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "rho"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"loss weight {name} must be nonnegative")


@dataclass
class LrSchedule:
    """Linear warmup from zero, then cosine decay to zero."""

    base: float = 1e-4
    warmup: int = 10000
    total: int = 20000

    def rate(self, iteration):
        it = float(iteration)
        if self.warmup > 0 and it < self.warmup:
            return self.base * it / self.warmup
        if self.total <= self.warmup:
            return self.base
        t = min((it - self.warmup) / (self.total - self.warmup), 1.0)
        return 0.5 * self.base * (1.0 + np.cos(np.pi * t))


@dataclass
class TrainerConfig:
    seed: int = 0
    iterations: int = 20000
    batch_q: int = 5000
    batch_g: int = 5000
    rounds: int = 10
    dis_scale: float = 0.15
    local_scale_k: int = 50
    max_points: int = 300000
    scales: tuple = (4, 8, 16, 32, 64)
    patch_k: int = 64
    max_total_queries: int = 3_000_000
    log_every: int = 10
    checkpoint_every: int = 1000
    divergence_limit: float = 1e6

    def __post_init__(self):
        for name in ("batch_q", "batch_g", "rounds", "local_scale_k",
                     "max_points", "patch_k"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"trainer config {name} must be positive")


class QuerySampleSet:
    """Precomputed training pools: off-surface queries Q and surface anchors G."""

    def __init__(self, points, queries, sources, offsets, targets, patch_idx,
                 centroids, local_scales, surface, scales):
        self.points = points            # the (capped) input cloud P
        self.queries = queries          # (N, 3) perturbed samples
        self.sources = sources          # (N, 3) source point of each query
        self.offsets = offsets          # (N, 3) applied Gaussian offsets
        self.targets = targets          # (N, 3) nearest neighbor of q in P
        self.patch_idx = patch_idx      # (N, K) neighbor indices into P
        self.centroids = centroids      # (N, S, 3) per-scale patch centroids
        self.local_scales = local_scales  # (N,) sigma of each query's source
        self.surface = surface          # (M, 3) on-surface pool G
        self.scales = scales            # effective K_s values

    def __len__(self):
        return len(self.queries)


def generate_queries(cloud, cfg):
    """Build the query pools from a normalized cloud per the sampling recipe.

    Per point: the local scale is the distance to its `local_scale_k`-th
    nearest neighbor; each round perturbs every point by an isotropic
    Gaussian with std dis_scale * local_scale. Every query gets its nearest
    data point and the centroids of its nested neighbor patches.
    """
    if isinstance(cloud, PointCloud):
        cloud = downsample(cloud, cfg.max_points, seed=cfg.seed)
        points = cloud.points
    else:
        points = np.asarray(cloud, dtype=np.float64)
        if len(points) > cfg.max_points:
            points = downsample(PointCloud(points), cfg.max_points, seed=cfg.seed).points
    n = len(points)
    if n < cfg.local_scale_k + 1:
        raise InsufficientPointsError(
            f"need at least {cfg.local_scale_k + 1} points, got {n}")

    index = SpatialIndex(points)
    # k+1 because the nearest neighbor of a data point is itself
    sigma = index.kth_distances(points, cfg.local_scale_k + 1)

    rounds = min(cfg.rounds, max(1, cfg.max_total_queries // n))
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 2]))
    all_offsets = []
    for _ in range(rounds):
        noise = rng.standard_normal((n, 3))
        all_offsets.append(noise * (cfg.dis_scale * sigma)[:, None])
    offsets = np.concatenate(all_offsets, axis=0)
    sources = np.tile(points, (rounds, 1))
    queries = sources + offsets
    local_scales = np.tile(sigma, rounds)

    nn_idx, _ = index.nearest_indices(queries)
    targets = points[nn_idx]

    k = min(cfg.patch_k, n)
    patch_idx, _ = index.knn_bulk(queries, k)
    patch_idx = patch_idx.astype(np.int32)

    scales = tuple(min(int(s), k) for s in cfg.scales)
    centroids = np.empty((len(queries), len(scales), 3))
    for si, ks in enumerate(scales):
        centroids[:, si, :] = points[patch_idx[:, :ks]].mean(axis=1)

    return QuerySampleSet(points=points, queries=queries, sources=sources,
                          offsets=offsets, targets=targets, patch_idx=patch_idx,
                          centroids=centroids, local_scales=local_scales,
                          surface=points, scales=scales)


@dataclass
class TrainingBatch:
    q: np.ndarray           # (Bq, 3) off-surface queries
    q_hat: np.ndarray       # (Bq, 3) nearest data points
    centroids: np.ndarray   # (Bq, S, 3)
    g: np.ndarray           # (Bg, 3) on-surface anchors
    scales: tuple


def sample_batch(queries, rng, batch_q, batch_g):
    nq, ng = len(queries), len(queries.surface)
    qi = rng.integers(0, nq, size=min(batch_q, nq))
    gi = rng.integers(0, ng, size=min(batch_g, ng))
    return TrainingBatch(q=queries.queries[qi], q_hat=queries.targets[qi],
                         centroids=queries.centroids[qi],
                         g=queries.surface[gi], scales=queries.scales)


class _Chain:
    """One projection chain: x -> P1(x) -> P2(x) with values and normals."""

    __slots__ = ("x", "g0", "n0", "p1", "g1", "n1", "p2", "keep", "dropped")


def projection_chain(field, x_np):
    """Differentiable two-step projection; degenerate samples are dropped.

    Returns a `_Chain`; `keep` holds surviving row indices into the input,
    `dropped` counts removed samples (vanishing gradient somewhere along
    the trajectory).
    """
    x_np = np.asarray(x_np, dtype=np.float64)
    keep = np.arange(len(x_np))
    dropped = 0
    while True:
        if len(x_np) == 0:
            raise ArgumentError("all samples in the batch were degenerate")
        x = ad.tensor(x_np, requires_grad=True)
        g0, grad0 = value_and_spatial_grad(field, x, create_graph=True)
        bad = np.linalg.norm(grad0.data, axis=1) <= GRAD_EPS
        if bad.any():
            dropped += int(bad.sum())
            x_np, keep = x_np[~bad], keep[~bad]
            continue
        n0 = ad.rows_unit(grad0)
        p1 = ad.sub(x, ad.mul(g0, n0))
        g1, grad1 = value_and_spatial_grad(field, p1, create_graph=True)
        bad = np.linalg.norm(grad1.data, axis=1) <= GRAD_EPS
        if bad.any():
            dropped += int(bad.sum())
            x_np, keep = x_np[~bad], keep[~bad]
            continue
        n1 = ad.rows_unit(grad1)
        p2 = ad.sub(p1, ad.mul(g1, n1))
        chain = _Chain()
        chain.x, chain.g0, chain.n0 = x, g0, n0
        chain.p1, chain.g1, chain.n1 = p1, g1, n1
        chain.p2, chain.keep, chain.dropped = p2, keep, dropped
        return chain


def loss_components(field, batch, weights, chains=None):
    """All four loss terms as graph tensors, sharing two projection chains."""
    if len(batch.q) == 0 or len(batch.g) == 0:
        raise ArgumentError("loss batches must be nonempty")
    if chains is None:
        chains = (projection_chain(field, batch.q), projection_chain(field, batch.g))
    cq, cg = chains
    nq, ng = len(cq.keep), len(cg.keep)

    q_hat = ad.constant(batch.q_hat[cq.keep])
    g_pts = ad.constant(batch.g[cg.keep])

    # global surface: ||P2(q) - q_hat||^2 + ||P2(g) - g||^2
    l_alpha = ad.add(ad.reduce_mean(ad.rows_sqnorm(ad.sub(cq.p2, q_hat))),
                     ad.reduce_mean(ad.rows_sqnorm(ad.sub(cg.p2, g_pts))))

    # level set: g(g)^2 on anchors, g(P1(t))^2 on the union T = Q u G
    t_term = ad.mul(ad.add(ad.reduce_sum(ad.mul(cq.g1, cq.g1)),
                           ad.reduce_sum(ad.mul(cg.g1, cg.g1))),
                    1.0 / (nq + ng))
    l_beta = ad.add(ad.reduce_mean(ad.mul(cg.g0, cg.g0)), t_term)

    # local displacement across scales
    disp = ad.sub(cq.x, cq.p1)
    l_gamma = None
    for si in range(len(batch.scales)):
        v_s = ad.constant(batch.q[cq.keep] - batch.centroids[cq.keep, si, :])
        term = ad.reduce_mean(ad.rows_sqnorm(ad.sub(disp, v_s)))
        l_gamma = term if l_gamma is None else ad.add(l_gamma, term)

    # normal consistency with level-set proximity weights over T; the relu
    # only clips the -1e-16 rounding when the normals agree exactly
    def weighted_misalignment(chain):
        w = ad.exp(ad.mul(ad.absolute(chain.g0), -weights.rho))
        cos = ad.reduce_sum(ad.mul(chain.n0, chain.n1), axis=1, keepdims=True)
        return ad.reduce_sum(ad.mul(w, ad.relu(ad.sub(1.0, cos))))

    l_delta = ad.mul(ad.add(weighted_misalignment(cq), weighted_misalignment(cg)),
                     1.0 / (nq + ng))

    dropped = cq.dropped + cg.dropped
    return {"alpha": l_alpha, "beta": l_beta, "gamma": l_gamma,
            "delta": l_delta}, dropped


def _single_component(field, batch, weights, name):
    parts, _ = loss_components(field, batch, weights)
    return parts[name]


def loss_global_surface(field, batch, weights=None):
    return _single_component(field, batch, weights or LossWeights(), "alpha")


def loss_level_set(field, batch, weights=None):
    return _single_component(field, batch, weights or LossWeights(), "beta")


def loss_local_displacement(field, batch, weights=None):
    return _single_component(field, batch, weights or LossWeights(), "gamma")


def loss_normal_consistency(field, batch, rho=10.0):
    return _single_component(field, batch, LossWeights(rho=rho), "delta")


def total_loss(field, batch, weights):
    """Weighted sum of the four terms; returns (loss, {name: float})."""
    parts, dropped = loss_components(field, batch, weights)
    values = {}
    for name, t in parts.items():
        v = float(t.data)
        if np.isnan(v):
            raise TrainingDivergedError(f"loss component '{name}' is NaN")
        if v < 0:
            raise ContractError(f"loss component '{name}' is negative: {v}")
        values[name] = v
    total = ad.add(ad.add(ad.mul(parts["alpha"], weights.alpha),
                          ad.mul(parts["beta"], weights.beta)),
                   ad.add(ad.mul(parts["gamma"], weights.gamma),
                          ad.mul(parts["delta"], weights.delta)))
    values["total"] = float(total.data)
    values["dropped"] = dropped
    return total, values


class Adam:
    """First/second-moment adaptive updates with bias correction."""

    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, tensor in self.store.items():
            g = self.store.gradient(name)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    field: object
    queries: QuerySampleSet
    log: list = dataclass_field(default_factory=list)
    dropped_samples: int = 0


LOG_COLUMNS = ("iteration", "lr", "total", "alpha", "beta", "gamma", "delta")


def write_training_log(path, rows):
    with open(path, "w") as f:
        f.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(f"{row[c]:.10g}" if c != "iteration" else str(row[c])
                             for c in LOG_COLUMNS) + "\n")


def train(field, queries, cfg, schedule=None, weights=None, on_checkpoint=None):
    """Run the optimization loop; deterministic for a fixed seed.

    `on_checkpoint(iteration)` fires every `checkpoint_every` iterations and
    once at the end. On divergence the parameters are rolled back to the last
    checkpointed state before `TrainingDivergedError` is raised.
    """
    schedule = schedule or LrSchedule()
    weights = weights or LossWeights()
    store = field.store
    adam = Adam(store)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 3]))

    result = TrainResult(field=field, queries=queries)
    last_good = {n: t.data.copy() for n, t in store.items()}

    for it in range(cfg.iterations):
        lr = schedule.rate(it)
        batch = sample_batch(queries, rng, cfg.batch_q, cfg.batch_g)
        try:
            loss, values = total_loss(field, batch, weights)
        except TrainingDivergedError:
            for n, t in store.items():
                t.data[...] = last_good[n]
            raise
        if not np.isfinite(values["total"]) or values["total"] > cfg.divergence_limit:
            for n, t in store.items():
                t.data[...] = last_good[n]
            raise TrainingDivergedError(
                f"loss {values['total']:.3e} at iteration {it}; rolled back")

        grads = ad.grad(loss, store.tensors())
        store.zero_grads()
        store.accumulate(grads)
        adam.step(lr)
        store.iteration += 1
        result.dropped_samples += values["dropped"]

        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            result.log.append({"iteration": it, "lr": lr, "total": values["total"],
                               "alpha": values["alpha"], "beta": values["beta"],
                               "gamma": values["gamma"], "delta": values["delta"]})
        if (it + 1) % cfg.checkpoint_every == 0 or it == cfg.iterations - 1:
            for n, t in store.items():
                last_good[n][...] = t.data
            if on_checkpoint is not None:
                on_checkpoint(it + 1)

    if cfg.iterations > 0:
        _canonicalize_sign(field, queries.points)
    return result


def _canonicalize_sign(field, points):
    """Make the field positive far outside the data bounding box.

    The four losses are invariant under g -> -g, so the trained sign is
    seed-dependent; flipping the final layer when the exterior evaluates
    negative gives outward gradient normals deterministically. The probe is
    a majority vote over the bounding-box corners pushed 30% outward (ties
    keep the current sign).
    """
    from .field import eval_field
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = (lo + hi) / 2.0
    half = np.maximum((hi - lo) / 2.0, 1e-6 * float((hi - lo).max() or 1.0))
    corners = center + 1.3 * half * np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    values = eval_field(field, corners)
    if (values < 0.0).sum() > 4:
        flip_field_sign(field)
