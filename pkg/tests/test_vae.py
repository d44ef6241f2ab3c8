import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from jointflow.data import make_shape
from jointflow.data.sample import farthest_point_order
from jointflow.errors import EmptyInput, EmptySurface
from jointflow.layers import FourierEmbedder
from jointflow.metrics import chamfer
from jointflow.vae import (
    Posterior,
    ShapeVAE,
    VaeConfig,
    allocate_points,
    fragment_inputs,
    mesh_from_sdf,
    pad_sets,
)


def _sphere_cloud(n, seed=0, radius=0.4):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    return radius * x / np.linalg.norm(x, axis=1, keepdims=True)


def _t(a, dtype=torch.float32):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


@pytest.fixture(scope="module")
def vae():
    torch.manual_seed(0)
    return ShapeVAE(VaeConfig()).eval()


@pytest.fixture(scope="module")
def sphere_vae():
    """Small VAE fitted to one radius-0.4 sphere."""
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    shape = make_shape("sphere", rng)
    pts, _, _ = shape.sample_surface(1024, rng)
    queries = pts[farthest_point_order(pts, 32)]
    model = ShapeVAE(VaeConfig(width=64, heads=4, encoder_depth=1, decoder_depth=1, latent_dim=8))
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, 1000)
    P, Q = _t(pts)[None], _t(queries)[None]
    for step in range(1000):
        near = shape.sample_surface(512, rng)[0] + 0.02 * rng.standard_normal((512, 3))
        x = np.concatenate([near, rng.uniform(-1, 1, size=(256, 3))])
        loss, _ = model.loss(P, Q, _t(x)[None], _t(shape.sdf(x))[None], sample=False)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    model.eval()
    with torch.no_grad():
        z_dec = model.decode_latents(model.encode(P, Q).mean)[0]
    return model, z_dec, shape


def test_fourier_embedder_dim():
    emb = FourierEmbedder(num_frequencies=5)
    assert emb.out_dim == 33
    assert emb(torch.zeros(2, 7, 3)).shape == (2, 7, 33)


def test_encode_shape_contract(vae):
    p = _t(_sphere_cloud(512))[None]
    post = vae.encode(p, p[:, :64])
    assert post.mean.shape == (1, 64, vae.config.latent_dim)


def test_encode_empty_queries(vae):
    p = _t(_sphere_cloud(32))[None]
    with pytest.raises(EmptyInput):
        vae.encode(p, p[:, :0])


def test_encode_key_permutation_invariant(vae):
    p = _t(_sphere_cloud(512, seed=1))[None]
    q = p[:, :64]
    perm = torch.from_numpy(np.random.default_rng(0).permutation(512))
    with torch.no_grad():
        a = vae.encode(p, q).mean
        b = vae.encode(p[:, perm], q).mean
    assert torch.allclose(a, b, atol=1e-5)


def test_encode_query_permutation_equivariant(vae):
    p = _t(_sphere_cloud(512, seed=2))[None]
    q = p[:, :64]
    perm = torch.from_numpy(np.random.default_rng(1).permutation(64))
    with torch.no_grad():
        a = vae.encode(p, q).mean
        b = vae.encode(p, q[:, perm]).mean
    assert torch.allclose(a[:, perm], b, atol=1e-5)


def test_zero_weight_decoder_returns_bias():
    torch.manual_seed(0)
    model = ShapeVAE(VaeConfig(width=16, heads=2, encoder_depth=1, decoder_depth=1))
    for mod in (model.from_latent, model.dec_layers, model.dec_norm, model.dec_out):
        for p in mod.parameters():
            torch.nn.init.zeros_(p)
    torch.nn.init.normal_(model.dec_out.bias)
    z = torch.randn(2, 5, model.config.latent_dim)
    out = model.decode_latents(z)
    assert torch.equal(out, model.dec_out.bias.expand_as(out))


def test_decode_deterministic(vae):
    z = torch.randn(1, 64, vae.config.latent_dim, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        assert torch.equal(vae.decode_latents(z), vae.decode_latents(z))


def test_decode_sdf_empty_query(vae):
    z = torch.randn(1, 8, vae.config.width)
    assert vae.decode_sdf(z, torch.zeros(1, 0, 3)).shape == (1, 0)


def test_trained_sphere_surface_and_outside(sphere_vae):
    model, z_dec, shape = sphere_vae
    surf = _t(_sphere_cloud(500, seed=5))
    corners = _t(np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float))
    with torch.no_grad():
        s_surf = model.decode_sdf(z_dec[None], surf[None])[0]
        s_corner = model.decode_sdf(z_dec[None], corners[None])[0]
    assert s_surf.abs().max() < 0.02
    assert (s_corner > 0).all()


def test_mesh_from_sdf_sphere(sphere_vae):
    model, z_dec, _ = sphere_vae
    mesh64 = mesh_from_sdf(model, z_dec, 64)
    radii = np.linalg.norm(mesh64.vertices, axis=1)
    assert np.all(np.abs(radii - 0.4) < 0.03)
    mesh16 = mesh_from_sdf(model, z_dec, 16)
    rng = np.random.default_rng(0)
    assert chamfer(mesh16.sample(2000, rng)[0], mesh64.sample(2000, rng)[0]) < 0.05
    # outward-facing triangles: normals agree with the radial direction
    centers = mesh64.vertices[mesh64.faces].mean(axis=1)
    assert np.mean(np.sum(mesh64.face_normals * centers, axis=1) > 0) > 0.99


def test_mesh_from_constant_field_raises(vae):
    model = ShapeVAE(VaeConfig(width=16, heads=2, encoder_depth=1, decoder_depth=1))
    with torch.no_grad():
        model.sdf_head.weight.zero_()
        model.sdf_head.bias.fill_(1.0)
    with pytest.raises(EmptySurface):
        mesh_from_sdf(model, torch.zeros(4, 16), 16)
    with pytest.raises(ValueError):
        mesh_from_sdf(model, torch.zeros(4, 16), 8)


def test_fragment_token_counts():
    pts = _sphere_cloud(300)
    k, q = fragment_inputs(pts, 256)
    assert len(k) == 256 and len(q) == 64
    k, q = fragment_inputs(pts, 18)
    assert len(q) == 5
    with pytest.raises(EmptyInput):
        fragment_inputs(pts[:10], 10)


def test_allocation_proportional():
    assert list(allocate_points([1.0, 3.0], 512)) == [128, 384]
    assert list(allocate_points([1.0, 1000.0], 512)) == [16, 512]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=20), st.integers(256, 2048))
def test_allocation_budget(areas, budget):
    alloc = allocate_points(areas, budget)
    assert np.all(alloc >= 16)
    assert abs(int(alloc.sum()) - budget) <= 16 * len(areas)
    share = budget * np.asarray(areas) / np.sum(areas)
    big = share >= 16
    assert np.all(np.abs(alloc[big] - share[big]) < 1.0)


def test_embedding_depends_on_orientation(vae):
    rng = np.random.default_rng(0)
    pts = _sphere_cloud(2048, seed=3)
    frag = pts[pts[:, 2] > 0.1]
    frag = frag[farthest_point_order(frag, len(frag))]
    rot = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]) @ np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0.0]])
    outs = []
    for p in (frag, frag @ rot.T):
        k, q = fragment_inputs(p, 256)
        (P, pm), (Q, qm) = pad_sets([k]), pad_sets([q])
        with torch.no_grad():
            outs.append(vae.embed_fragments(P, pm, Q, qm))
    assert outs[0].shape == (1, 64, vae.config.width)
    # no rotation invariance is claimed; the two embeddings may differ
    assert not torch.allclose(outs[0], outs[1])
    del rng


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    post = Posterior(3 * torch.randn(2, 5, 4, generator=g), 4 * torch.randn(2, 5, 4, generator=g))
    assert post.kl() >= 0


def test_zero_kl_weight_is_pure_regression():
    torch.manual_seed(0)
    model = ShapeVAE(VaeConfig(width=16, heads=2, encoder_depth=1, decoder_depth=1, kl_weight=0.0))
    p = _t(_sphere_cloud(128))[None]
    x = torch.rand(1, 50, 3) * 2 - 1
    y = torch.randn(1, 50)
    loss, parts = model.loss(p, p[:, :16], x, y, sample=False)
    pred, _ = model(p, p[:, :16], x, sample=False)
    assert loss.item() == torch.mean((pred - y) ** 2).item()
    assert parts["kl"] > 0


def test_sdf_loss_gradient_check():
    torch.manual_seed(0)
    model = ShapeVAE(VaeConfig(width=16, heads=2, encoder_depth=1, decoder_depth=1, latent_dim=4)).double()
    p = _t(_sphere_cloud(64, seed=4), torch.float64)[None]
    x = torch.rand(1, 40, 3, dtype=torch.float64) * 2 - 1
    y = torch.from_numpy(np.linalg.norm(x[0].numpy(), axis=1) - 0.4)[None]

    def loss_fn():
        return model.loss(p, p[:, :16], x, y, sample=False)[0]

    rel, analytic, _ = check_gradients(loss_fn, model, n_params=100)
    assert np.count_nonzero(analytic) >= 90
    assert rel < 1e-4
