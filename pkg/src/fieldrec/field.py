"""The dictionary-conditioned implicit distance field and its derived quantities.

An `AttentiveField` maps a 3D query through sinusoidal positional encoding,
multi-head cross-attention over a small learnable token dictionary, a
coordinate skip, and a ReLU MLP with geometric initialization to a scalar
distance value. `MlpField` is the attention-free ablation with a width chosen
to match the attentive parameter count.

Analytic probe fields (`SphereField`, `AffineField`) implement the same
callable contract on autodiff tensors, so every loss and projection helper
can be exercised against exact signed distance functions.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, ContractError, DegenerateGradientError

GRAD_EPS = 1e-12          # below this, a gradient is considered degenerate
FINAL_LAYER_STD = 1e-4    # "small weights" of the geometric initialization


class FieldSpec:
    """Architecture hyperparameters; serialized into checkpoint manifests."""

    def __init__(self, kind="attentive", bands=6, tokens=16, heads=8,
                 layers=8, width=256):
        if kind not in ("attentive", "mlp"):
            raise ArgumentError(f"unknown field kind '{kind}'")
        if kind == "attentive":
            if tokens > width:
                raise ArgumentError("orthonormal token init needs tokens <= width")
            if width % heads != 0:
                raise ArgumentError("width must be divisible by the head count")
        self.kind = kind
        self.bands = int(bands)
        self.tokens = int(tokens)
        self.heads = int(heads)
        self.layers = int(layers)
        self.width = int(width)

    @property
    def query_dim(self):
        return 3 + 6 * self.bands

    def manifest(self):
        return {"kind": self.kind, "bands": self.bands, "tokens": self.tokens,
                "heads": self.heads, "layers": self.layers, "width": self.width}

    @staticmethod
    def from_manifest(m):
        return FieldSpec(kind=m["kind"], bands=m["bands"], tokens=m["tokens"],
                         heads=m["heads"], layers=m["layers"], width=m["width"])

    def n_parameters(self):
        """Closed-form parameter count for this architecture."""
        d_q, w, L = self.query_dim, self.width, self.layers
        mlp = (L - 1) * (w * w + w)         # square hidden layers
        mlp += 2 * w * w + w                # the post-skip layer sees width + d_in
        mlp += 3 * w                        # coordinate projection
        mlp += w + 1                        # scalar head
        if self.kind == "attentive":
            attn = self.tokens * w          # dictionary
            attn += d_q * w                 # query lift
            attn += 3 * self.heads * (w * (w // self.heads))  # per-head q/k/v
            attn += w * w                   # output projection
            return attn + mlp
        return d_q * w + mlp                # lift + mlp


def matched_mlp_width(spec, bands=None):
    """Smallest MLP-ablation width whose parameter count reaches `spec`'s."""
    target = spec.n_parameters()
    bands = spec.bands if bands is None else bands
    w = 8
    while FieldSpec(kind="mlp", bands=bands, tokens=0, heads=1,
                    layers=spec.layers, width=w).n_parameters() < target:
        w += 1
    return w


class PositionalEncoder:
    """x -> [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{B-1} pi x), cos(...)]."""

    def __init__(self, bands=6):
        self.bands = int(bands)

    @property
    def out_dim(self):
        return 3 + 6 * self.bands

    def __call__(self, x):
        parts = [x]
        for b in range(self.bands):
            scaled = ad.mul(x, float(2.0 ** b) * np.pi)
            parts.append(ad.sin(scaled))
            parts.append(ad.cos(scaled))
        return ad.concat(parts, axis=1)

    def encode_np(self, points):
        with ad.no_grad():
            return self(ad.constant(np.atleast_2d(points))).data


def orthonormal_rows(rng, n_rows, dim):
    """Rows of an orthonormal frame from QR of a random Gaussian matrix."""
    if n_rows > dim:
        raise ArgumentError(f"cannot build {n_rows} orthonormal rows in dim {dim}")
    q, r = np.linalg.qr(rng.normal(size=(dim, n_rows)))
    q = q * np.sign(np.diag(r))[None, :]
    return np.ascontiguousarray(q.T)


class EmbeddingDictionary:
    """The learnable token matrix all spatial queries attend to."""

    def __init__(self, store, tokens, dim, rng, name="dict.tokens"):
        self.tokens = store.create(name, orthonormal_rows(rng, tokens, dim))

    @property
    def n_tokens(self):
        return self.tokens.data.shape[0]


class CrossAttention:
    """Multi-head scaled dot-product attention from encoded queries to tokens."""

    def __init__(self, store, rng, d_query, width, heads):
        if width % heads != 0:
            raise ArgumentError("width must be divisible by heads")
        self.heads = heads
        self.d_head = width // heads
        self.scale = 1.0 / np.sqrt(self.d_head)

        def lin(name, rows, cols):
            return store.create(name, rng.normal(0.0, 1.0 / np.sqrt(rows),
                                                 size=(rows, cols)))

        self.w_lift = lin("attn.w_lift", d_query, width)
        self.w_q = [lin(f"attn.w_q.{h}", width, self.d_head) for h in range(heads)]
        self.w_k = [lin(f"attn.w_k.{h}", width, self.d_head) for h in range(heads)]
        self.w_v = [lin(f"attn.w_v.{h}", width, self.d_head) for h in range(heads)]
        self.w_o = lin("attn.w_o", width, width)

    def __call__(self, encoded, tokens):
        q = ad.matmul(encoded, self.w_lift)
        heads = []
        for h in range(self.heads):
            qh = ad.matmul(q, self.w_q[h])
            kh = ad.matmul(tokens, self.w_k[h])
            vh = ad.matmul(tokens, self.w_v[h])
            logits = ad.mul(ad.matmul(qh, ad.transpose(kh)), self.scale)
            heads.append(ad.matmul(ad.softmax(logits, axis=1), vh))
        return ad.matmul(ad.concat(heads, axis=1), self.w_o)

    def weights_np(self, encoded_np, tokens_np):
        """Per-head attention weight rows, shape (B, heads, n_tokens)."""
        q = encoded_np @ self.w_lift.data
        out = []
        for h in range(self.heads):
            logits = (q @ self.w_q[h].data) @ (tokens_np @ self.w_k[h].data).T
            logits *= self.scale
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            out.append(e / e.sum(axis=1, keepdims=True))
        return np.stack(out, axis=1)


class SdfMlp:
    """ReLU MLP head with mid-network skip and geometric initialization."""

    def __init__(self, store, rng, d_in, width, layers, prefix="mlp"):
        if layers < 2:
            raise ArgumentError("the MLP needs at least 2 hidden layers")
        self.skip_at = layers // 2
        self.d_in = d_in
        self.w_proj = store.create(f"{prefix}.w_proj",
                                   rng.normal(0.0, 1.0 / np.sqrt(3.0), size=(3, d_in)))
        self.weights = []
        self.biases = []
        fan_in = d_in
        for i in range(layers):
            if i == self.skip_at:
                fan_in += d_in
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
            self.weights.append(store.create(f"{prefix}.layers.{i}.w", w))
            self.biases.append(store.create(f"{prefix}.layers.{i}.b", np.zeros(width)))
            fan_in = width
        self.head_w = store.create(f"{prefix}.head.w",
                                   rng.normal(0.0, FINAL_LAYER_STD, size=(width, 1)))
        self.head_b = store.create(f"{prefix}.head.b", np.zeros(1))

    def __call__(self, z, x):
        zbar = ad.add(z, ad.matmul(x, self.w_proj))
        h = zbar
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i == self.skip_at:
                h = ad.concat([h, zbar], axis=1)
            h = ad.relu(ad.add(ad.matmul(h, w), b))
        return ad.add(ad.matmul(h, self.head_w), self.head_b)


class AttentiveField:
    """g(x) = mlp(cross_attention(encode(x), dictionary) + proj(x))."""

    kind = "attentive"

    def __init__(self, spec, store, rng):
        self.spec = spec
        self.store = store
        self.encoder = PositionalEncoder(spec.bands)
        self.dictionary = EmbeddingDictionary(store, spec.tokens, spec.width, rng)
        self.attention = CrossAttention(store, rng, self.encoder.out_dim,
                                        spec.width, spec.heads)
        self.mlp = SdfMlp(store, rng, spec.width, spec.width, spec.layers)

    def __call__(self, x):
        encoded = self.encoder(x)
        z = self.attention(encoded, self.dictionary.tokens)
        return self.mlp(z, x)

    def attention_weights(self, points):
        """Concatenated per-head attention rows for numpy points, (B, H*N_k)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        encoded = self.encoder.encode_np(points)
        w = self.attention.weights_np(encoded, self.dictionary.tokens.data)
        return w.reshape(len(points), -1)


class MlpField:
    """Attention-free ablation: g(x) = mlp(lift(encode(x)) + proj(x))."""

    kind = "mlp"

    def __init__(self, spec, store, rng):
        self.spec = spec
        self.store = store
        self.encoder = PositionalEncoder(spec.bands)
        self.w_lift = store.create("lift.w", rng.normal(
            0.0, 1.0 / np.sqrt(self.encoder.out_dim),
            size=(self.encoder.out_dim, spec.width)))
        self.mlp = SdfMlp(store, rng, spec.width, spec.width, spec.layers)

    def __call__(self, x):
        z = ad.matmul(self.encoder(x), self.w_lift)
        return self.mlp(z, x)


def build_field(spec, seed):
    """Construct a freshly initialized field with its own parameter store."""
    store = ad.ParameterStore(seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    cls = AttentiveField if spec.kind == "attentive" else MlpField
    return cls(spec, store, rng)


def field_from_checkpoint(path):
    """Rebuild a field (architecture from the manifest) and load its weights."""
    from .autodiff import load_checkpoint
    loaded, manifest = load_checkpoint(path)
    if "field" not in manifest:
        raise ContractError(f"{path}: checkpoint manifest lacks a field spec")
    spec = FieldSpec.from_manifest(manifest["field"])
    field = build_field(spec, seed=loaded.seed)
    if set(field.store.names()) != set(loaded.names()):
        raise ContractError(f"{path}: checkpoint parameters do not match the manifest")
    for name in field.store.names():
        if field.store[name].data.shape != loaded[name].data.shape:
            raise ContractError(f"{path}: shape mismatch for '{name}'")
        field.store[name].data[...] = loaded[name].data
    field.store.iteration = loaded.iteration
    return field, manifest


def flip_field_sign(field):
    """Negate the final linear layer: exact g -> -g."""
    field.mlp.head_w.data *= -1.0
    field.mlp.head_b.data *= -1.0


# ---------------------------------------------------------------------------
# probe fields (exact analytic distance functions, for tests and oracles)
# ---------------------------------------------------------------------------

class SphereField:
    """Exact signed distance to a sphere."""

    kind = "probe"

    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def __call__(self, x):
        return ad.sub(ad.rows_norm(ad.sub(x, ad.constant(self.center[None, :]))),
                      self.radius)


class AffineField:
    """g(x) = a . x + b (exact SDF of a plane when |a| = 1)."""

    kind = "probe"

    def __init__(self, a, b=0.0):
        self.a = np.asarray(a, dtype=np.float64).reshape(3, 1)
        self.b = float(b)

    def __call__(self, x):
        return ad.add(ad.matmul(x, ad.constant(self.a)), self.b)


class ScaledField:
    """c * inner(x); used to build zero or rescaled probe fields."""

    kind = "probe"

    def __init__(self, inner, factor):
        self.inner = inner
        self.factor = float(factor)

    def __call__(self, x):
        return ad.mul(self.inner(x), self.factor)


# ---------------------------------------------------------------------------
# derived quantities
# ---------------------------------------------------------------------------

def _check_points(points):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.ndim != 2 or points.shape[1] != 3:
        raise ArgumentError(f"expected (N, 3) points, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ArgumentError("points contain non-finite coordinates")
    return points


def eval_field(field, points, batch=8192):
    """Field values at numpy points, evaluated without graph recording."""
    points = _check_points(points)
    out = np.empty(len(points))
    with ad.no_grad():
        for start in range(0, len(points), batch):
            chunk = points[start:start + batch]
            out[start:start + len(chunk)] = field(ad.constant(chunk)).data[:, 0]
    return out


def value_and_spatial_grad(field, x, create_graph=False):
    """(g(x), grad_x g) as graph tensors; `x` must require gradients."""
    if not x.requires_grad:
        raise ContractError("spatial gradients need x.requires_grad=True")
    g = field(x)
    (gx,) = ad.grad(ad.reduce_sum(g), [x], create_graph=create_graph)
    return g, gx


def gradient_np(field, points, batch=8192):
    """Spatial gradient of the field at numpy points."""
    points = _check_points(points)
    out = np.empty_like(points)
    for start in range(0, len(points), batch):
        chunk = points[start:start + batch]
        x = ad.tensor(chunk, requires_grad=True)
        _, gx = value_and_spatial_grad(field, x)
        out[start:start + len(chunk)] = gx.data
    return out


def normal_np(field, points):
    """Unit normals nu = grad/|grad|; raises if any gradient is degenerate."""
    grads = gradient_np(field, points)
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    if np.any(norms <= GRAD_EPS):
        raise DegenerateGradientError(
            f"{int((norms <= GRAD_EPS).sum())} degenerate gradients")
    return grads / norms


def project_np(field, points, m=1):
    """m applications of P(x) = x - g(x) nu(x) on numpy points."""
    if m < 1:
        raise ArgumentError("projection count m must be >= 1")
    points = _check_points(points)
    current = points
    for _ in range(m):
        x = ad.tensor(current, requires_grad=True)
        g, gx = value_and_spatial_grad(field, x)
        norms = np.linalg.norm(gx.data, axis=1, keepdims=True)
        if np.any(norms <= GRAD_EPS):
            raise DegenerateGradientError("degenerate gradient on the trajectory")
        current = current - g.data * (gx.data / norms)
    return current


def attention_similarity(field, anchor, probes):
    """Dot product of attention-weight vectors between an anchor and probes."""
    if not hasattr(field, "attention_weights"):
        raise ArgumentError("field has no attention weights (mlp ablation?)")
    anchor = _check_points(anchor)
    probes_arr = probes.points if hasattr(probes, "points") else probes
    probes_arr = _check_points(probes_arr)
    w_anchor = field.attention_weights(anchor)[0]
    w_probes = field.attention_weights(probes_arr)
    return w_probes @ w_anchor
