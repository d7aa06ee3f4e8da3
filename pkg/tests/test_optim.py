from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from diffmatch.attnmap import gaussian_tensor
from diffmatch.backend.base import BackendError
from diffmatch.backend.toy import ToyBackend
from diffmatch.core import HyperParams, Point
from diffmatch.optim import (IDENTITY_CROP, CropError, CropParams, EmbeddingCache, OptimizationError,
                             crop_image, crop_loss, crop_tensor, ensemble_from_bytes,
                             ensemble_to_bytes, get_or_optimize, optimize_embedding,
                             optimize_ensemble, sample_crop)


@pytest.fixture(scope="module")
def small():
    return ToyBackend(grid=(4, 4), n_tokens=6, embed_dim=16, input_size=32)


# -- crops ---------------------------------------------------------------------


def test_scale_one_is_identity(rng):
    for _ in range(5):
        assert sample_crop(rng, 1.0) == IDENTITY_CROP
        assert sample_crop(rng, 1.0, must_contain=Point(0.2, 0.9)).is_identity


def test_offsets_uniform(rng):
    crops = [sample_crop(rng, 0.9317) for _ in range(10_000)]
    width = 1 - 0.9317
    for k in (0, 1):
        offs = np.array([c.as_tuple()[k] for c in crops])
        assert offs.min() >= 0 and offs.max() <= width
        assert stats.kstest(offs, stats.uniform(0, width).cdf).pvalue > 0.01


def test_must_contain_corner(rng):
    p = Point(0.01, 0.01)
    for _ in range(2000):
        c = sample_crop(rng, 0.9317, must_contain=p)
        assert bool(c.contains(p.x, p.y))


@settings(max_examples=300, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2 ** 32 - 1))
def test_must_contain_keeps_margin(scale, x, y, seed):
    rng = np.random.default_rng(seed)
    try:
        c = sample_crop(rng, scale, must_contain=Point(x, y))
    except CropError:
        # infeasible only when the point sits within the margin of the image border
        assert scale < 1.0 and min(x, y, 1 - x, 1 - y) < 0.01 * scale + 1e-12
        return
    if c.is_identity:
        return
    cx, cy = c.to_crop(x, y)
    assert min(cx, cy, 1 - cx, 1 - cy) >= 0.01 - 1e-9


def test_infeasible_crop_and_bad_scale(rng):
    with pytest.raises(CropError):
        sample_crop(rng, 0.5, must_contain=Point(0.0, 0.0))
    for bad in (0.0, 1.5):
        with pytest.raises(CropError):
            sample_crop(rng, bad)
    with pytest.raises(CropError):
        CropParams(0.5, 0.6, 0.0)


def test_identity_crop_image_unchanged(toy):
    img = toy.reference_image()
    out, to_crop, to_full = crop_image(img, IDENTITY_CROP)
    assert torch.equal(out, img.network_input())
    assert to_crop(0.3, 0.7) == (0.3, 0.7) == to_full(0.3, 0.7)


def test_round_trip_and_corner(rng):
    for _ in range(100):
        s = rng.uniform(0.1, 1.0)
        c = CropParams(s, *rng.uniform(0, 1 - s, size=2))
        x, y = rng.random(2)
        assert np.allclose(c.to_full(*c.to_crop(x, y)), (x, y), atol=1e-6)
        assert np.allclose(c.to_crop(*c.to_full(x, y)), (x, y), atol=1e-6)
        assert np.allclose(c.to_crop(c.dx, c.dy), (0.0, 0.0), atol=1e-12)


def test_crop_tensor_matches_point_sampler(rng):
    img = torch.as_tensor(rng.random((3, 40, 40)))
    c = CropParams(0.6, 0.15, 0.3)
    out = crop_tensor(img, c, size=24).numpy()
    # independent reference: bilinear sample of the source at each output pixel center
    for i in range(24):
        for j in range(24):
            fx, fy = c.to_full((j + 0.5) / 24, (i + 0.5) / 24)
            sx = min(max(fx * 40 - 0.5, 0), 39)
            sy = min(max(fy * 40 - 0.5, 0), 39)
            x0, y0 = int(sx), int(sy)
            x1, y1 = min(x0 + 1, 39), min(y0 + 1, 39)
            wx, wy = sx - x0, sy - y0
            ref = (img[:, y0, x0] * (1 - wx) * (1 - wy) + img[:, y0, x1] * wx * (1 - wy)
                   + img[:, y1, x0] * (1 - wx) * wy + img[:, y1, x1] * wx * wy).numpy()
            assert np.allclose(out[:, i, j], ref, atol=1e-9)


def test_crop_frame_gaussian_equals_cropped_full_frame(rng):
    for _ in range(20):
        c = sample_crop(rng, rng.uniform(0.5, 1.0))
        center = tuple(rng.random(2))
        full = gaussian_tensor(center, 27.98, (512, 512), dtype=torch.float64)
        cropped = crop_tensor(full[None], c, size=64)[0]
        framed = gaussian_tensor(center, 27.98, (64, 64), crop=c.as_tuple(), dtype=torch.float64)
        assert float((cropped - framed).abs().max()) <= 1e-3


# -- loss and optimization -----------------------------------------------------


def test_crop_loss_gradient_matches_finite_differences(toy64, rng):
    hp = HyperParams(loss_resolution=(8, 8))
    img = toy64.reference_image((32, 32))
    pixels = img.network_input(32)
    noise = toy64.sample_noise(3)
    q = Point(0.4, 0.55)
    crop = sample_crop(rng, 0.9317, must_contain=q)
    e = torch.as_tensor(rng.normal(size=(6, 16)), dtype=torch.float64).requires_grad_(True)
    crop_loss(toy64, pixels, e, q, hp, noise, crop).backward()
    g = e.grad
    h = 1e-6
    for _ in range(10):
        i, j = int(rng.integers(6)), int(rng.integers(16))
        ep, em = e.detach().clone(), e.detach().clone()
        ep[i, j] += h
        em[i, j] -= h
        fd = (crop_loss(toy64, pixels, ep, q, hp, noise, crop)
              - crop_loss(toy64, pixels, em, q, hp, noise, crop)).item() / (2 * h)
        assert abs(fd - g[i, j].item()) <= 1e-4 * max(abs(fd), 1e-3)
    # every token row receives gradient, including the special ones
    assert torch.all(g.abs().sum(1) > 0)


def test_loss_non_increasing_from_planted_embedding(toy):
    q = Point(0.375, 0.625)
    e_star = toy.planted_embedding(q)
    hp = replace(HyperParams(), opt_steps=10)
    emb = optimize_embedding(toy, toy.reference_image(), q, hp, 0, init=e_star)
    trace = emb.loss_trace
    assert len(trace) == 10
    assert all(b <= a for a, b in zip(trace, trace[1:]))


@pytest.mark.slow
def test_final_below_initial_in_95_percent(small):
    img = small.reference_image()
    rng = np.random.default_rng(7)
    ok = 0
    for seed in range(100):
        q = Point(*rng.uniform(0.1, 0.9, size=2))
        trace = optimize_embedding(small, img, q, HyperParams(), seed).loss_trace
        ok += trace[-1] <= trace[0]
    assert ok >= 95


def test_seed_determinism(small):
    img = small.reference_image()
    a = optimize_embedding(small, img, Point(0.3, 0.3), HyperParams(opt_steps=20), 11)
    b = optimize_embedding(small, img, Point(0.3, 0.3), HyperParams(opt_steps=20), 11)
    c = optimize_embedding(small, img, Point(0.3, 0.3), HyperParams(opt_steps=20), 12)
    assert a.matrix.tobytes() == b.matrix.tobytes()
    assert a.loss_trace == b.loss_trace
    assert a.matrix.tobytes() != c.matrix.tobytes()


def test_no_crop_reduces_to_plain_loss(small):
    img = small.reference_image()
    q = Point(0.6, 0.4)
    hp = HyperParams(opt_steps=1, crop_fraction=1.0)
    emb = optimize_embedding(small, img, q, hp, 5)
    from diffmatch.optim import initial_embedding, round_seeds
    init_seed, noise_seed, _ = round_seeds(5)
    e0 = initial_embedding(small, init_seed)
    z = small.add_noise(small.encode(img), hp.timestep, noise=small.sample_noise(noise_seed))
    from diffmatch.attnmap import token_map
    m = token_map(small.attention_forward(z, e0, hp.layers), 1, hp.loss_resolution)
    plain = ((m - gaussian_tensor(q.as_tuple(), hp.sigma, hp.loss_resolution, dtype=m.dtype)) ** 2).sum()
    assert emb.loss_trace[0] == pytest.approx(float(plain), rel=1e-6)


class Scaled(ToyBackend):
    """Toy backend whose attention is multiplied by ``factor`` from call ``after`` on."""

    def __init__(self, factor, after, **kw):
        super().__init__(**kw)
        self.factor, self.after, self.n = factor, after, 0

    def attention_forward(self, latent, e, layers):
        stack = super().attention_forward(latent, e, layers)
        self.n += 1
        return stack.scaled(self.factor) if self.n > self.after else stack


SMALL = dict(grid=(4, 4), n_tokens=6, embed_dim=16, input_size=32)


def test_divergence_guard_reports_step():
    b = Scaled(1000.0, 3, **SMALL)
    with pytest.raises(OptimizationError, match="diverged at step 3") as info:
        optimize_embedding(b, b.reference_image(), Point(0.5, 0.5), HyperParams(opt_steps=10), 0)
    assert info.value.step == 3


def test_nan_guard():
    b = Scaled(float("nan"), 2, **SMALL)
    with pytest.raises(OptimizationError, match="non-finite loss at step 2"):
        optimize_embedding(b, b.reference_image(), Point(0.5, 0.5), HyperParams(opt_steps=10), 0)


def test_member_failure_names_member():
    b = Scaled(float("nan"), 15, **SMALL)
    with pytest.raises(OptimizationError, match="member 1") as info:
        optimize_ensemble(b, b.reference_image(), Point(0.5, 0.5),
                          HyperParams(opt_steps=10, n_embeddings=3), 0)
    assert info.value.member == 1


def test_backend_without_gradients(small):
    class Frozen(ToyBackend):
        pass

    b = Frozen(**SMALL)
    b.descriptor = replace(b.descriptor, supports_gradients=False)
    with pytest.raises(BackendError, match="gradients"):
        optimize_embedding(b, b.reference_image(), Point(0.5, 0.5), HyperParams(opt_steps=2), 0)


def test_ensemble_of_one_equals_single_call(small):
    img = small.reference_image()
    hp = HyperParams(opt_steps=15, n_embeddings=1)
    ens = optimize_ensemble(small, img, Point(0.2, 0.7), hp, 42)
    single = optimize_embedding(small, img, Point(0.2, 0.7), hp, 42)
    assert len(ens) == 1
    assert np.array_equal(ens.members[0].matrix, single.matrix)


def test_ensemble_order_independent_of_workers(small):
    img = small.reference_image()
    hp = HyperParams(opt_steps=8, n_embeddings=3)
    serial = optimize_ensemble(small, img, Point(0.5, 0.3), hp, 9)
    threaded = optimize_ensemble(small, img, Point(0.5, 0.3), hp, 9, workers=3,
                                 backend_factory=lambda: ToyBackend(**SMALL))
    for a, b in zip(serial.members, threaded.members):
        assert np.array_equal(a.matrix, b.matrix)


# -- cache files ---------------------------------------------------------------


def test_pemb_round_trip(small):
    ens = optimize_ensemble(small, small.reference_image(), Point(0.25, 0.75),
                            HyperParams(opt_steps=3, n_embeddings=2), 123, config_digest="abc")
    blob = ensemble_to_bytes(ens)
    assert blob[:4] == b"PEMB"
    assert np.frombuffer(blob[4:20], "<u4").tolist() == [6, 16, 1, 2]
    assert int(np.frombuffer(blob[20:28], "<u8")[0]) == 123
    body = np.frombuffer(blob[32:32 + 2 * 6 * 16 * 4], "<f4").reshape(2, 6, 16)
    assert np.array_equal(body[1], ens.members[1].matrix)
    back = ensemble_from_bytes(blob)
    assert (back.source_id, back.query, back.base_seed, back.config_digest) == \
        (ens.source_id, ens.query, 123, "abc")
    for a, b in zip(back.members, ens.members):
        assert np.array_equal(a.matrix, b.matrix)
    with pytest.raises(ValueError):
        ensemble_from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ValueError):
        ensemble_from_bytes(blob[:100])


def test_cache_hit_and_extension(small, tmp_path):
    img = small.reference_image()
    q = Point(0.4, 0.4)
    cache = EmbeddingCache(tmp_path, "d1")
    hp = HyperParams(opt_steps=4, n_embeddings=2)
    ens, hit = get_or_optimize(small, img, q, hp, 0, cache)
    assert not hit and cache.path(img.id, q).is_file()
    calls = small.calls["attention"]
    again, hit = get_or_optimize(small, img, q, hp, 0, cache)
    assert hit and small.calls["attention"] == calls
    assert np.array_equal(again.members[1].matrix, ens.members[1].matrix)
    # asking for fewer members reuses a prefix
    one, hit = get_or_optimize(small, img, q, replace(hp, n_embeddings=1), 0, cache)
    assert hit and len(one) == 1
    # asking for more only optimizes the missing members
    more, hit = get_or_optimize(small, img, q, replace(hp, n_embeddings=3), 0, cache)
    assert not hit and len(more) == 3
    assert small.calls["attention"] == calls + hp.opt_steps
    assert np.array_equal(more.members[0].matrix, ens.members[0].matrix)
    fresh = optimize_ensemble(small, img, q, replace(hp, n_embeddings=3), more.base_seed)
    assert np.array_equal(fresh.members[2].matrix, more.members[2].matrix)
