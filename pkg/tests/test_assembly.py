import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from jointflow.assembly import AssemblyConfig, anchor_gauge, assembly_loss, build_tokens, pad_poses
from jointflow.data.sample import farthest_point_order
from jointflow.errors import EmptyInput, ShapeMismatch
from jointflow.manifold import PoseState, sample_uniform_rotation
from jointflow.model import JointModel, ModelConfig
from jointflow.generation import GenerationConfig
from jointflow.vae import VaeConfig


def tiny_config(width=16, depth=2):
    return ModelConfig(
        vae=VaeConfig(width=width, heads=2, encoder_depth=1, decoder_depth=1, latent_dim=4),
        assembly=AssemblyConfig(width=width, heads=2, depth=depth, point_budget=256),
        generation=GenerationConfig(width=width, heads=2, depth=depth, latent_tokens=8),
    )


def randomize_zero_layers(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.abs().sum() == 0:
                p.copy_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))


def random_fragments(n, seed=0, sizes=(120, 80, 60, 100)):
    rng = np.random.default_rng(seed)
    frags = []
    for i in range(n):
        pts = rng.normal(size=(sizes[i % len(sizes)], 3)) * [0.3, 0.2, 0.1]
        frags.append(pts[farthest_point_order(pts, len(pts))])
    return frags


def run(model, frags, areas, anchor, poses, t=0.3):
    tokens = build_tokens([frags], [areas], model.config.assembly.point_budget, [anchor])
    rot, trans = pad_poses([poses], len(frags))
    with torch.no_grad():
        feats = model.fragment_features(tokens)
        cond = model.cond_encoder.null(1)
        rv, tv = model.assemble(feats, tokens, torch.tensor(rot, dtype=torch.float32),
                                torch.tensor(trans, dtype=torch.float32), torch.tensor([t]), cond)
    return rv[0].numpy(), tv[0].numpy()


def random_poses(n, seed=0):
    rng = np.random.default_rng(seed)
    return PoseState(sample_uniform_rotation(rng, n), 0.5 * rng.standard_normal((n, 3)))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = JointModel(tiny_config()).eval()
    randomize_zero_layers(m.assembly)
    return m


def test_zero_head_gives_zero_velocity():
    torch.manual_seed(0)
    m = JointModel(tiny_config()).eval()
    frags = random_fragments(1)
    rv, tv = run(m, frags, np.ones(1), 0, random_poses(1))
    assert np.all(rv == 0) and np.all(tv == 0)


def test_no_fragments_raises():
    with pytest.raises(EmptyInput):
        build_tokens([[]], [np.zeros(0)])


def test_fragment_order_equivariance(model):
    frags = random_fragments(4, seed=1)
    areas = np.array([3.0, 2.0, 1.0, 2.5])
    poses = random_poses(4, seed=2)
    rv, tv = run(model, frags, areas, 0, poses)
    perm = np.array([2, 0, 3, 1])
    rv2, tv2 = run(model, [frags[i] for i in perm], areas[perm], int(np.argsort(perm)[0]), poses[perm])
    np.testing.assert_allclose(rv2, rv[perm], atol=1e-5)
    np.testing.assert_allclose(tv2, tv[perm], atol=1e-5)


def test_token_order_within_fragments_is_irrelevant(model):
    frags = random_fragments(3, seed=3)
    tokens = build_tokens([frags], [np.ones(3)], 256, [0])
    rot, trans = pad_poses([random_poses(3, seed=4)], 3)
    rot, trans = torch.tensor(rot, dtype=torch.float32), torch.tensor(trans, dtype=torch.float32)
    cond = model.cond_encoder.null(1)
    with torch.no_grad():
        feats = model.fragment_features(tokens)
        a = model.assemble(feats, tokens, rot, trans, torch.tensor([0.5]), cond)
        perm = torch.from_numpy(np.random.default_rng(0).permutation(tokens.tok_mask.shape[1]))
        for name in ("tok_frag", "tok_slot", "tok_fid", "tok_mask"):
            setattr(tokens, name, getattr(tokens, name)[:, perm])
        b = model.assemble(feats[:, perm], tokens, rot, trans, torch.tensor([0.5]), cond)
    for x, y in zip(a, b):
        assert torch.allclose(x, y, atol=1e-5)


def test_forward_deterministic(model):
    frags = random_fragments(3)
    poses = random_poses(3)
    a = run(model, frags, np.ones(3), 1, poses)
    b = run(model, frags, np.ones(3), 1, poses)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_padding_does_not_leak(model):
    """A sample's velocities do not depend on the other samples in its batch."""
    f1, f2 = random_fragments(2, seed=5), random_fragments(4, seed=6)
    p1, p2 = random_poses(2, seed=7), random_poses(4, seed=8)
    alone = run(model, f1, np.ones(2), 0, p1)
    tokens = build_tokens([f1, f2], [np.ones(2), np.ones(4)], 256, [0, 0])
    rot, trans = pad_poses([p1, p2], 4)
    with torch.no_grad():
        feats = model.fragment_features(tokens)
        rv, tv = model.assemble(feats, tokens, torch.tensor(rot, dtype=torch.float32),
                                torch.tensor(trans, dtype=torch.float32), torch.tensor([0.3, 0.3]),
                                model.cond_encoder.null(2))
    np.testing.assert_allclose(rv[0, :2].numpy(), alone[0], atol=1e-5)
    np.testing.assert_allclose(tv[0, :2].numpy(), alone[1], atol=1e-5)


def test_loss_zero_at_target():
    x = torch.randn(2, 3, 3)
    y = torch.randn(2, 3, 3)
    assert assembly_loss(x, y, x, y).item() == 0.0


def test_loss_unit_offset_adds_three():
    rt, at = torch.randn(1, 3, 3, dtype=torch.float64), torch.randn(1, 3, 3, dtype=torch.float64)
    pred_r = rt.clone()
    pred_r[0, 1] += 1.0
    assert assembly_loss(pred_r, at, rt, at).item() == pytest.approx(3.0, abs=1e-12)


def test_loss_matches_brute_force():
    rng = np.random.default_rng(0)
    fr, fa, u, v = (rng.normal(size=(1, 2, 3)) for _ in range(4))
    expected = sum(np.sum((fr[0, i] - u[0, i]) ** 2) + np.sum((fa[0, i] - v[0, i]) ** 2) for i in range(2))
    got = assembly_loss(*(torch.from_numpy(a) for a in (fr, fa, u, v))).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_loss_decomposes():
    g = torch.Generator().manual_seed(1)
    fr, fa, u, v = (torch.randn(3, 4, 3, generator=g, dtype=torch.float64) for _ in range(4))
    total = assembly_loss(fr, fa, u, v)
    rot_only = assembly_loss(fr, v, u, v)
    trans_only = assembly_loss(u, fa, u, v)
    assert total.item() == pytest.approx((rot_only + trans_only).item(), rel=1e-12)


def test_loss_weight_and_batch_mean():
    g = torch.Generator().manual_seed(2)
    fr, fa, u, v = (torch.randn(2, 3, 3, generator=g, dtype=torch.float64) for _ in range(4))
    w = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]], dtype=torch.float64)
    per = ((fr - u) ** 2).sum(-1) + ((fa - v) ** 2).sum(-1)
    assert assembly_loss(fr, fa, u, v, w).item() == pytest.approx((per * w).sum(-1).mean().item(), rel=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        assembly_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), torch.zeros(1, 3, 3), torch.zeros(1, 3, 3))


def test_assembly_loss_gradient_check():
    torch.manual_seed(0)
    m = JointModel(tiny_config(width=16, depth=1)).double()
    randomize_zero_layers(m.assembly)
    frags = random_fragments(3, seed=9)
    tokens = build_tokens([frags], [np.ones(3)], 256, [0])
    tokens.points, tokens.queries = tokens.points.double(), tokens.queries.double()
    rot, trans = pad_poses([random_poses(3, seed=10)], 3)
    rot, trans = torch.tensor(rot), torch.tensor(trans)
    g = torch.Generator().manual_seed(3)
    u, v = torch.randn(1, 3, 3, generator=g, dtype=torch.float64), torch.randn(1, 3, 3, generator=g, dtype=torch.float64)
    with torch.no_grad():
        feats = m.fragment_features(tokens)
    cond = m.cond_encoder.null(1, dtype=torch.float64)

    def loss_fn():
        rv, tv = m.assemble(feats, tokens, rot, trans, torch.tensor([0.4], dtype=torch.float64), cond)
        return assembly_loss(rv, tv, u, v)

    for p in m.parameters():
        p.requires_grad_(False)
    for p in m.assembly.parameters():
        p.requires_grad_(True)
    rel, analytic, _ = check_gradients(loss_fn, m.assembly, n_params=100)
    assert np.count_nonzero(analytic) >= 90
    assert rel < 1e-4


def test_anchor_gauge_centered_unchanged():
    p = random_poses(4)
    p = PoseState(p.rotation, p.translation - p.translation.mean(0))
    q = anchor_gauge(p)
    np.testing.assert_allclose(q.translation, p.translation, atol=1e-15)
    assert np.array_equal(q.rotation, p.rotation)


def test_anchor_gauge_removes_shift():
    p = PoseState(np.tile(np.eye(3), (3, 1, 1)), np.zeros((3, 3)))
    shifted = PoseState(p.rotation, p.translation + 1.0)
    assert np.array_equal(anchor_gauge(shifted).translation, p.translation)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_anchor_gauge_centroid_zero_and_idempotent(n, seed):
    p = random_poses(n, seed)
    q = anchor_gauge(p)
    assert np.abs(q.translation.mean(axis=0)).max() < 1e-9
    np.testing.assert_allclose(anchor_gauge(q).translation, q.translation, atol=1e-12)
