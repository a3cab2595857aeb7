import numpy as np
import pytest

from fieldrec import autodiff as ad
from fieldrec import field as F
from fieldrec.errors import ArgumentError, DegenerateGradientError

from oracles import central_diff, rel_err

SMALL = F.FieldSpec(tokens=8, heads=4, width=64, layers=4)


# -- positional encoding -------------------------------------------------------

def test_encode_at_origin():
    enc = F.PositionalEncoder(bands=6)
    out = enc.encode_np(np.zeros((1, 3)))[0]
    assert out.shape == (3 + 6 * 6,)
    np.testing.assert_array_equal(out[:3], 0.0)
    sines = out[3::6][0:1]  # layout: per band, 3 sin then 3 cos
    for b in range(6):
        block = out[3 + 6 * b: 3 + 6 * (b + 1)]
        np.testing.assert_array_equal(block[:3], 0.0)
        np.testing.assert_array_equal(block[3:], 1.0)


def test_encode_half_band_zero():
    enc = F.PositionalEncoder(bands=6)
    out = enc.encode_np(np.array([[0.5, 0.0, 0.0]]))[0]
    # band 0, coordinate 0: sin(pi * 0.5) = 1, cos = 0
    assert out[3] == pytest.approx(1.0, abs=1e-12)
    assert out[6] == pytest.approx(0.0, abs=1e-12)


def test_encode_injective_on_random_pairs():
    enc = F.PositionalEncoder(bands=6)
    rng = np.random.default_rng(5)
    a = rng.uniform(-1, 1, size=(10000, 3))
    b = rng.uniform(-1, 1, size=(10000, 3))
    ea, eb = enc.encode_np(a), enc.encode_np(b)
    same = np.all(ea == eb, axis=1)
    assert not np.any(same & ~np.all(a == b, axis=1))


# -- attention ------------------------------------------------------------------

def test_attention_single_token_weight_is_one():
    spec = F.FieldSpec(tokens=1, heads=4, width=64, layers=2)
    f = F.build_field(spec, seed=0)
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(10, 3))
    w = f.attention_weights(pts)
    np.testing.assert_array_equal(w, np.ones_like(w))
    # z equals W_o applied to the concatenated value rows
    enc = f.encoder.encode_np(pts)
    with ad.no_grad():
        z = f.attention(ad.constant(enc), f.dictionary.tokens).data
    E = f.dictionary.tokens.data
    vs = np.concatenate([np.repeat(E @ f.attention.w_v[h].data, len(pts), axis=0)
                         for h in range(4)], axis=1)
    np.testing.assert_allclose(z, vs @ f.attention.w_o.data, rtol=1e-12)


def test_attention_hand_softmax_case():
    store = ad.ParameterStore(seed=0)
    rng = np.random.default_rng(0)
    attn = F.CrossAttention(store, rng, d_query=2, width=2, heads=1)
    attn.w_lift.data[...] = np.eye(2)
    attn.w_q[0].data[...] = np.eye(2)
    attn.w_k[0].data[...] = np.eye(2)
    attn.w_v[0].data[...] = np.array([[1.0, 2.0], [3.0, 4.0]])
    attn.w_o.data[...] = np.eye(2)
    tokens = ad.constant(np.eye(2))
    # logits after 1/sqrt(2) scaling must be (0, ln 3)
    encoded = ad.constant(np.array([[0.0, np.log(3.0) * np.sqrt(2.0)]]))
    with ad.no_grad():
        z = attn(encoded, tokens).data[0]
    w = attn.weights_np(encoded.data, tokens.data)[0, 0]
    np.testing.assert_allclose(w, [0.25, 0.75], rtol=1e-12)
    np.testing.assert_allclose(z, 0.25 * np.array([1.0, 2.0]) + 0.75 * np.array([3.0, 4.0]),
                               rtol=1e-12)


def test_attention_weights_simplex():
    f = F.build_field(SMALL, seed=2)
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, size=(1000, 3))
    w = f.attention_weights(pts).reshape(len(pts), SMALL.heads, SMALL.tokens)
    assert np.all(w >= 0.0)
    np.testing.assert_allclose(w.sum(axis=2), 1.0, atol=1e-9)


def test_dictionary_orthonormal_at_init():
    f = F.build_field(F.FieldSpec(), seed=7)
    E = f.dictionary.tokens.data
    assert np.abs(E @ E.T - np.eye(E.shape[0])).max() < 1e-6


# -- eval / gradient / normal ----------------------------------------------------

def test_eval_near_zero_at_geometric_init():
    f = F.build_field(F.FieldSpec(), seed=0)
    pts = np.random.default_rng(3).uniform(-0.5, 0.5, size=(1000, 3))
    assert np.abs(F.eval_field(f, pts)).max() < 0.05


def test_eval_pure_and_deterministic():
    f = F.build_field(SMALL, seed=1)
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(64, 3))
    before = {n: t.data.copy() for n, t in f.store.items()}
    a = F.eval_field(f, pts)
    b = F.eval_field(f, pts)
    np.testing.assert_array_equal(a, b)
    for n, t in f.store.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_eval_rejects_nonfinite():
    f = F.build_field(SMALL, seed=1)
    with pytest.raises(ArgumentError):
        F.eval_field(f, np.array([[np.nan, 0.0, 0.0]]))


def test_gradient_matches_fd_on_random_field():
    f = F.build_field(SMALL, seed=4)
    rng = np.random.default_rng(8)
    pts = rng.uniform(-0.4, 0.4, size=(8, 3))
    grads = F.gradient_np(f, pts)
    for i in range(len(pts)):
        fd = central_diff(lambda p: F.eval_field(f, p[None])[0], pts[i].copy())
        assert rel_err(grads[i], fd) < 1e-6


def test_gradient_linear_probe_exact():
    probe = F.AffineField(a=[1.0, -2.0, 0.5], b=0.3)
    pts = np.random.default_rng(0).normal(size=(6, 3))
    grads = F.gradient_np(probe, pts)
    np.testing.assert_allclose(grads, np.tile([1.0, -2.0, 0.5], (6, 1)), rtol=1e-15)


def test_normal_probe_fields():
    plane = F.AffineField(a=[0.0, 0.0, 1.0])
    n = F.normal_np(plane, np.array([[0.2, 0.3, 0.4]]))
    np.testing.assert_allclose(n, [[0.0, 0.0, 1.0]], atol=1e-15)

    sphere = F.SphereField(radius=1.0)
    n = F.normal_np(sphere, np.array([[2.0, 0.0, 0.0]]))
    np.testing.assert_allclose(n, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_normal_unit_norm_property():
    f = F.build_field(SMALL, seed=6)
    pts = np.random.default_rng(2).uniform(-0.5, 0.5, size=(10000, 3))
    n = F.normal_np(f, pts)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)


def test_normal_degenerate_gradient_errors():
    flat = F.ScaledField(F.AffineField(a=[0.0, 0.0, 1.0]), 0.0)
    with pytest.raises(DegenerateGradientError):
        F.normal_np(flat, np.array([[0.0, 0.0, 0.0]]))


# -- projection -------------------------------------------------------------------

def test_project_fixpoint_on_zero_level():
    plane = F.AffineField(a=[0.0, 0.0, 1.0])
    x = np.array([[1.0, 1.0, 0.0]])  # on the zero set
    np.testing.assert_allclose(F.project_np(plane, x, m=1), x, atol=1e-15)


def test_project_exact_sphere_sdf_one_step():
    sphere = F.SphereField(radius=1.0)
    out = F.project_np(sphere, np.array([[2.0, 0.0, 0.0]]), m=1)
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_project_non_eikonal_field_oscillates():
    # g = 2z has |grad| = 2, so P overshoots and oscillates instead of contracting
    steep = F.AffineField(a=[0.0, 0.0, 2.0])
    x = np.array([[0.0, 0.0, 1.0]])
    p1 = F.project_np(steep, x, m=1)
    np.testing.assert_allclose(p1, [[0.0, 0.0, -1.0]], atol=1e-15)
    p2 = F.project_np(steep, x, m=2)
    np.testing.assert_allclose(p2, [[0.0, 0.0, 1.0]], atol=1e-15)


def test_project_requires_positive_m():
    with pytest.raises(ArgumentError):
        F.project_np(F.SphereField(), np.zeros((1, 3)), m=0)


# -- attention similarity ----------------------------------------------------------

def test_attention_similarity_self_value():
    f = F.build_field(SMALL, seed=9)
    anchor = np.array([0.1, 0.2, -0.1])
    sims = F.attention_similarity(f, anchor, anchor[None, :])
    w = f.attention_weights(anchor[None])[0]
    assert sims[0] == pytest.approx(float(w @ w), rel=1e-12)


def test_attention_similarity_single_token_equals_heads():
    spec = F.FieldSpec(tokens=1, heads=4, width=64, layers=2)
    f = F.build_field(spec, seed=0)
    probes = np.random.default_rng(0).uniform(-0.5, 0.5, size=(20, 3))
    sims = F.attention_similarity(f, np.zeros(3), probes)
    np.testing.assert_allclose(sims, 4.0, rtol=1e-12)


def test_attention_similarity_symmetric():
    f = F.build_field(SMALL, seed=11)
    a = np.array([0.3, 0.0, 0.0])
    b = np.array([-0.2, 0.1, 0.4])
    sab = F.attention_similarity(f, a, b[None, :])[0]
    sba = F.attention_similarity(f, b, a[None, :])[0]
    assert sab == pytest.approx(sba, rel=1e-12)


def test_attention_similarity_rejects_mlp_field():
    f = F.build_field(F.FieldSpec(kind="mlp", tokens=0, heads=1, width=64, layers=4), seed=0)
    with pytest.raises(ArgumentError):
        F.attention_similarity(f, np.zeros(3), np.zeros((2, 3)))


# -- checkpoints and ablation -------------------------------------------------------

def test_field_checkpoint_round_trip(tmp_path):
    f = F.build_field(SMALL, seed=13)
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(32, 3))
    vals = F.eval_field(f, pts)
    path = tmp_path / "field.ckpt"
    ad_manifest = {"field": f.spec.manifest()}
    from fieldrec.autodiff import save_checkpoint
    save_checkpoint(path, f.store, manifest=ad_manifest)
    g, manifest = F.field_from_checkpoint(path)
    np.testing.assert_array_equal(F.eval_field(g, pts), vals)
    assert manifest["field"]["width"] == SMALL.width


def test_matched_mlp_width_close():
    spec = F.FieldSpec()
    w = F.matched_mlp_width(spec)
    target = spec.n_parameters()
    got = F.FieldSpec(kind="mlp", tokens=0, heads=1, layers=spec.layers,
                      width=w).n_parameters()
    assert got >= target
    assert (got - target) / target < 0.02


def test_flip_field_sign_exact():
    f = F.build_field(SMALL, seed=3)
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, size=(16, 3))
    vals = F.eval_field(f, pts)
    F.flip_field_sign(f)
    np.testing.assert_array_equal(F.eval_field(f, pts), -vals)
