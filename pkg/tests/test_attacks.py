import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import affine_model, toy_dataset
from uaplab.attacks import (
    AttackConfig,
    PerturbationVector,
    deepfool,
    fgsm,
    fgsm_dataset,
    fooling_ratio,
    generate_uap,
    load_perturbation,
    lp_norm,
    parse_perturbation,
    perturb_dataset,
    perturbation_bytes,
    project_lp_ball,
    save_perturbation,
    sidecar_path,
)
from uaplab.errors import (
    CorruptCheckpoint,
    EmptyDataset,
    InvalidBudget,
    MaxIterExceeded,
    ShapeMismatch,
    TargetNotReached,
    VersionMismatch,
)
from uaplab.models import build_model, predict


# ---------------------------------------------------------------- projection

def test_projection_examples():
    assert np.allclose(project_lp_ball(np.array([0.2, -0.3]), math.inf, 0.1), [0.1, -0.1])
    assert np.allclose(project_lp_ball(np.array([3.0, 4.0]), 2, 1.0), [0.6, 0.8])
    inside = np.array([0.05, 0.05])
    assert np.array_equal(project_lp_ball(inside, "inf", 0.1), inside)


@pytest.mark.parametrize("xi", [0.0, -0.5])
def test_projection_budget(xi):
    with pytest.raises(InvalidBudget):
        project_lp_ball(np.ones(3), 2, xi)


@settings(max_examples=200)
@given(arrays(np.float32, st.integers(1, 50), elements=st.floats(-10, 10, width=32)),
       st.sampled_from([2, math.inf]), st.floats(1e-3, 5.0))
def test_projection_feasible_and_idempotent(v, p, xi):
    once = project_lp_ball(v, p, xi)
    assert lp_norm(once, p) <= xi
    assert np.array_equal(project_lp_ball(once, p, xi), once)
    assert once.dtype == v.dtype


# ---------------------------------------------------------------- DeepFool

def test_deepfool_binary_closed_form():
    m = affine_model([[0.0, 0.0], [3.0, 4.0]])
    res = deepfool(m, np.array([1.0, 1.0]), overshoot=0.02)
    assert np.allclose(res.r, np.array([-0.84, -1.12]) * 1.02, rtol=1e-12)
    assert np.isclose(np.linalg.norm(res.r) / 1.02, 1.4, rtol=1e-12)
    assert (res.label_orig, res.label_adv, res.iterations) == (1, 0, 1)


def test_deepfool_multiclass_against_enumeration(rng):
    for _ in range(25):
        K, d = int(rng.integers(3, 6)), int(rng.integers(2, 12))
        W, b = rng.normal(size=(K, d)), rng.normal(size=K)
        x = rng.normal(size=d)
        f = W @ x + b
        k0 = int(np.argmax(f))
        dists = [abs(f[l] - f[k0]) / np.linalg.norm(W[l] - W[k0]) if l != k0 else np.inf
                 for l in range(K)]
        res = deepfool(affine_model(W, b), x)
        assert res.boundary_class == int(np.argmin(dists))
        assert np.isclose(np.linalg.norm(res.r) / 1.02, min(dists), rtol=1e-9)
        assert res.label_adv == int(np.argmax(W @ (x + res.r) + b)) != k0


def test_deepfool_constant_logits():
    m = affine_model(np.zeros((3, 4)), b=[0.0, 1.0, 2.0])
    with pytest.raises(MaxIterExceeded):
        deepfool(m, np.zeros(4))


def test_deepfool_iteration_budget():
    # on a curved model one step only reaches the linearized boundary
    m = build_model("small-cnn-b", 5, (1, 8, 8), seed=0)
    x = np.random.default_rng(1).uniform(0, 1, (1, 8, 8))
    res = deepfool(m, x, max_iter=50, overshoot=0.0)
    assert res.iterations > 1 and res.label_adv != res.label_orig
    assert predict(m, (x + res.r)[None].astype(np.float32))[0] == res.label_adv
    with pytest.raises(MaxIterExceeded):
        deepfool(m, x, max_iter=res.iterations - 1, overshoot=0.0)


# ---------------------------------------------------------------- fooling ratio and UAP

def test_fooling_ratio_counts():
    # class 1 iff x > 0; x == 0 ties and goes to class 0
    m = affine_model([[0.0], [1.0]], input_shape=(1, 1, 1))
    ds = toy_dataset(np.array([0.1, 0.2, 0.6, 0.7]).reshape(4, 1, 1, 1), [1, 1, 1, 1])
    assert fooling_ratio(m, ds, np.zeros((1, 1, 1), np.float32)) == 0.0
    assert fooling_ratio(m, ds, np.full((1, 1, 1), -0.4, np.float32)) == 0.5
    with pytest.raises(EmptyDataset):
        fooling_ratio(m, ds.subset([]), np.zeros((1, 1, 1), np.float32))


def _separable(rng, n=60, d=6):
    w = rng.normal(size=d)
    w /= np.linalg.norm(w)
    centre = np.full(d, 0.5)
    side = np.where(np.arange(n) % 3 == 0, -1.0, 1.0)
    pts = centre + 0.12 * side[:, None] * w[None] + rng.uniform(-0.05, 0.05, (n, d))
    m = affine_model(np.stack([np.zeros(d), w]), b=[0.0, -w @ centre], input_shape=(d, 1, 1))
    return m, w, toy_dataset(pts.reshape(n, d, 1, 1), (side > 0).astype(int))


def test_uap_direction_follows_weight_vector(rng):
    m, w, ds = _separable(rng)
    cfg = AttackConfig(xi=0.5, p=2, target_fooling=0.3, max_passes=10)
    pv = generate_uap(m, ds, cfg, source_model="affine")
    v = pv.v.reshape(-1)
    assert np.linalg.norm(v) > 0
    assert abs(v @ w) / np.linalg.norm(v) >= 0.99
    assert pv.final_fooling_ratio > 0.3 and len(pv.history) == pv.passes


def test_uap_target_semantics(rng):
    m, _, ds = _separable(rng)
    pv = generate_uap(m, ds, AttackConfig(xi=0.5, p=2, target_fooling=-1.0))
    assert pv.passes == 0 and not pv.v.any() and pv.history == []
    # ratio 0 is not strictly above target 0, so one pass runs
    pv = generate_uap(m, ds, AttackConfig(xi=0.5, p=2, target_fooling=0.0))
    assert pv.passes >= 1 and pv.final_fooling_ratio > 0.0


def test_uap_target_not_reached_carries_best(rng):
    m, _, ds = _separable(rng)
    cfg = AttackConfig(xi=1e-4, p=math.inf, target_fooling=0.9, max_passes=2)
    with pytest.raises(TargetNotReached) as info:
        generate_uap(m, ds, cfg)
    best = info.value.perturbation
    assert best is not None and lp_norm(best.v, math.inf) <= 1e-4
    assert info.value.best_ratio == best.final_fooling_ratio < 0.9
    assert best.passes == 2


def test_uap_respects_budget_and_seed():
    m = build_model("small-cnn-a", 5, (3, 8, 8), seed=1)
    ds = toy_dataset(np.random.default_rng(3).uniform(0, 1, (24, 3, 8, 8)), [0] * 24)
    cfg = AttackConfig(xi=0.05, p=math.inf, target_fooling=0.99, max_passes=2, shuffle_seed=4)
    runs = []
    for _ in range(2):
        try:
            runs.append(generate_uap(m, ds, cfg))
        except TargetNotReached as exc:
            runs.append(exc.perturbation)
    assert np.array_equal(runs[0].v, runs[1].v)
    assert lp_norm(runs[0].v, math.inf) <= 0.05


# ---------------------------------------------------------------- FGSM

def test_fgsm_zero_eps_is_identity(rng):
    m = build_model("mlp", 5, (1, 4, 4))
    x = rng.uniform(0, 1, (1, 4, 4)).astype(np.float32)
    assert np.array_equal(fgsm(m, x, 2, 0.0), x)


def test_fgsm_logistic_sign(rng):
    w = rng.normal(size=6)
    m = affine_model(np.stack([np.zeros(6), w]))
    x = np.full(6, 0.5)
    adv = fgsm(m, x, 1, 0.1)
    assert np.allclose(adv - x, -0.1 * np.sign(w), atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(0, 2**16))
def test_fgsm_stays_in_box(eps, seed):
    r = np.random.default_rng(seed)
    m = build_model("small-cnn-b", 5, (3, 8, 8), seed=seed % 7)
    x = r.uniform(0, 1, (4, 3, 8, 8)).astype(np.float32)
    y = r.integers(0, 5, 4)
    adv = fgsm(m, x, y, eps)
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    assert np.max(np.abs(adv - x)) <= eps + 1e-6


def test_fgsm_dataset_matches_per_image(rng):
    m = build_model("mlp", 5, (1, 4, 4))
    ds = toy_dataset(rng.uniform(0, 1, (5, 1, 4, 4)), [0, 1, 2, 3, 4])
    batch = fgsm_dataset(m, ds, 0.03)
    single = np.stack([fgsm(m, img, g, 0.03) for img, g, _ in ds.items()])
    assert np.allclose(batch.images, single, atol=1e-7)
    with pytest.raises(ShapeMismatch):
        fgsm(m, np.zeros((3, 4, 4), np.float32), 0, 0.1)


# ---------------------------------------------------------------- applying perturbations

def test_perturb_dataset_contract(rng):
    ds = toy_dataset(rng.uniform(0, 1, (6, 1, 3, 3)), [0, 1, 2, 3, 4, 0])
    same = perturb_dataset(ds, np.zeros((1, 3, 3), np.float32))
    assert np.array_equal(same.images, ds.images)
    imgs = np.full((1, 1, 1, 1), 0.99, np.float32)
    out = perturb_dataset(toy_dataset(imgs, [2]), np.full((1, 1, 1), 0.05, np.float32))
    assert out.images[0, 0, 0, 0] == 1.0
    shifted = perturb_dataset(ds, PerturbationVector(np.full((1, 3, 3), 0.1)))
    assert len(shifted) == len(ds) and np.array_equal(shifted.grades, ds.grades)
    assert shifted.ids == ds.ids
    with pytest.raises(ShapeMismatch):
        perturb_dataset(ds, np.zeros((1, 2, 2), np.float32))


# ---------------------------------------------------------------- perturbation files

def _pv(rng, p=math.inf):
    return PerturbationVector(rng.uniform(-0.04, 0.04, (3, 5, 7)), p, 0.04, "small-cnn-a",
                              [0.5, 0.91], 3, 2, 0.91)


@pytest.mark.parametrize("p", [math.inf, 2.0])
def test_perturbation_round_trip(tmp_path, rng, p):
    pv = _pv(rng, p)
    path = save_perturbation(pv, tmp_path / "v.uapv")
    back = load_perturbation(path)
    assert np.array_equal(back.v, pv.v) and back.v.dtype == np.float32
    assert (back.p, back.xi, back.source_model, back.passes) == (p, 0.04, "small-cnn-a", 2)
    assert back.history == [0.5, 0.91] and back.final_fooling_ratio == 0.91
    assert perturbation_bytes(back) == path.read_bytes()


def test_perturbation_without_sidecar(tmp_path, rng):
    path = save_perturbation(_pv(rng), tmp_path / "v.uapv")
    sidecar_path(path).unlink()
    back = load_perturbation(path)
    assert back.source_model == "" and np.float32(back.xi) == np.float32(0.04)


def test_perturbation_corruption(rng):
    blob = perturbation_bytes(_pv(rng))
    with pytest.raises(CorruptCheckpoint):
        parse_perturbation(blob[:-1])
    bad = bytearray(blob)
    bad[30] ^= 0xFF
    with pytest.raises(CorruptCheckpoint):
        parse_perturbation(bytes(bad))
    body = blob[:4] + struct.pack("<H", 7) + blob[6:-4]
    with pytest.raises(VersionMismatch):
        parse_perturbation(body + struct.pack("<I", zlib.crc32(body)))


def test_attack_config_validation():
    assert AttackConfig(p="2").p == 2.0
    assert AttackConfig().to_dict()["p"] == "inf"
    with pytest.raises(InvalidBudget):
        AttackConfig(xi=0)
    with pytest.raises(ValueError):
        AttackConfig(p=1)
    with pytest.raises(ValueError):
        AttackConfig(target_fooling=1.5)
