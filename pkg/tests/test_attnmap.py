import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffmatch.attnmap import (AggregatedMap, aggregate, gaussian_target, gaussian_tensor, load_map,
                               map_from_bytes, map_to_bytes, resize, sample_map, save_map,
                               select_token, token_map)
from diffmatch.backend.base import AttentionStack, LayerGeometry
from diffmatch.core import Point
from helpers import bilinear_reference


def random_stack(rng, geometry, p=6):
    maps = {}
    for l, g in geometry.items():
        logits = torch.as_tensor(rng.normal(size=(g.heads, g.h * g.w, p)))
        maps[l] = torch.softmax(logits, dim=-1)
    return AttentionStack(maps, geometry)


GEOM = {7: LayerGeometry(4, 4, 2, 2), 8: LayerGeometry(4, 4, 2, 2), 10: LayerGeometry(8, 8, 2, 3)}


def test_constant_layers_give_constant_map():
    geometry = {0: LayerGeometry(2, 2, 1, 2), 1: LayerGeometry(4, 4, 1, 1)}
    maps = {l: torch.full((g.heads, g.h * g.w, 5), 0.2, dtype=torch.float64) for l, g in geometry.items()}
    m = aggregate(AttentionStack(maps, geometry), 1, (8, 8)).values
    assert np.allclose(m, 0.2)


def test_two_by_two_to_four_by_four():
    src = torch.tensor([[0.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    out = resize(src, (4, 4)).numpy()
    # half-pixel centers: output cell (3,3) sits on the last input center
    assert out[3, 3] == pytest.approx(1.0)
    assert out[0, 0] == pytest.approx(0.0)
    assert out[1, 1] == pytest.approx(0.0625)
    assert out[3, 1] == pytest.approx(0.25)
    assert out[1, 3] == pytest.approx(0.25)
    # the continuous midpoint between the four inputs interpolates to 0.25
    midpoint = sample_map(src.numpy(), Point(0.5, 0.5))
    assert midpoint == pytest.approx(0.25)
    assert np.allclose(out, bilinear_reference(src.numpy(), 4, 4))


def test_default_geometry_aggregates_at_64(toy):
    lat = toy.add_noise(toy.encode(toy.reference_image()), 8, seed=0)
    stack = toy.attention_forward(lat, torch.zeros(77, 768), [7, 8, 9, 10])
    assert [(g.h, g.w) for g in stack.geometry.values()] == [(16, 16)] * 3 + [(32, 32)]
    assert aggregate(stack, 1, (64, 64)).values.shape == (64, 64)


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 17), st.integers(1, 17), st.integers(0, 2 ** 32 - 1))
def test_resize_matches_reference(h, w, oh, ow, seed):
    src = np.random.default_rng(seed).random((h, w))
    ours = resize(torch.as_tensor(src), (oh, ow)).numpy()
    assert np.allclose(ours, bilinear_reference(src, oh, ow), atol=1e-6)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_aggregate_linear_and_bounded(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a, b = random_stack(rng, GEOM), random_stack(rng, GEOM)
    lhs = token_map(a.scaled(alpha, b, beta), 1, (16, 16))
    rhs = alpha * token_map(a, 1, (16, 16)) + beta * token_map(b, 1, (16, 16))
    assert torch.allclose(lhs, rhs, atol=1e-9)
    m = token_map(a, 1, (16, 16))
    lo = min(float(x[:, :, 1].min()) for x in a.maps.values())
    hi = max(float(x[:, :, 1].max()) for x in a.maps.values())
    assert lo - 1e-12 <= float(m.min()) and float(m.max()) <= hi + 1e-12


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_row_stochastic_random_logits(seed):
    rng = np.random.default_rng(seed)
    stack = random_stack(rng, GEOM, p=int(rng.integers(2, 80)))
    for a in stack.maps.values():
        assert torch.allclose(a.sum(-1), torch.ones(a.shape[:2], dtype=a.dtype), atol=1e-5)


def test_select_token_rules():
    geometry = {3: LayerGeometry(2, 2, 1, 1)}
    a = torch.zeros(1, 4, 5, dtype=torch.float64)
    a[:, :, 0] = 1.0
    a[0, 2, 0], a[0, 2, 1] = 0.0, 1.0
    stack = AttentionStack({3: a}, geometry)
    m = select_token(stack, 1)[3][0]
    assert m.tolist() == [[0.0, 0.0], [1.0, 0.0]]
    for bad in (0, 4):
        with pytest.raises(ValueError, match="special token"):
            select_token(stack, bad)
    with pytest.raises(ValueError):
        select_token(stack, 9)


def test_empty_stack_rejected():
    with pytest.raises(ValueError):
        token_map(AttentionStack({}, {}), 1, (4, 4))


def test_gaussian_values():
    g = gaussian_target(Point(0.5, 0.5), 27.98, (64, 64))
    assert g.values.max() <= 1.0
    # center between cells 31 and 32: nearest cells share the peak
    assert np.unravel_index(np.argmax(g.values), g.values.shape) == (31, 31)
    # exactly at a cell center the value is 1
    c = Point(32.5 / 64, 10.5 / 64)
    g = gaussian_target(c, 27.98, (64, 64))
    assert g.values[10, 32] == pytest.approx(1.0)
    # 27.98 px of the 512 frame = 3.4975 cells at 64x64; along x at 3 and 4 cells
    for k in (3, 4):
        assert g.values[10, 32 + k] == pytest.approx(math.exp(-(k * 8) ** 2 / (2 * 27.98 ** 2)))
    sigma_cells = 27.98 / 8
    center = (0.5, 0.5)
    val = gaussian_tensor(center, 27.98, (1, 1), crop=(0.5 + sigma_cells / 64 - 0.5, 0.0, 1.0),
                          dtype=torch.float64)
    # a 1x1 grid whose single cell center is shifted by exactly sigma
    assert float(val[0, 0]) == pytest.approx(math.exp(-0.5), abs=1e-12)
    with pytest.raises(ValueError):
        gaussian_target(Point(0.5, 0.5), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(1, 64))
def test_gaussian_radially_monotone(cx, cy, sigma):
    g = gaussian_tensor((cx, cy), sigma, (32, 32), dtype=torch.float64).numpy()
    ys, xs = np.mgrid[0:32, 0:32]
    d = np.hypot((xs + 0.5) / 32 - cx, (ys + 0.5) / 32 - cy).ravel()
    v = g.ravel()
    order = np.argsort(d, kind="stable")
    d, v = d[order], v[order]
    strictly_closer = d[:-1] < d[1:] - 1e-12
    assert np.all(v[:-1][strictly_closer] >= v[1:][strictly_closer])


def test_sample_map_examples(rng):
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert sample_map(m, Point(0.5, 0.5)) == pytest.approx(2.5)
    assert sample_map(m, Point(0.25, 0.75)) == pytest.approx(3.0)
    assert sample_map(m, Point(0.0, 0.0)) == pytest.approx(1.0)        # clamped
    big = rng.random((9, 13))
    for i in range(9):
        for j in range(13):
            assert sample_map(big, Point((j + 0.5) / 13, (i + 0.5) / 9)) == big[i, j]


def test_sample_map_against_independent_interpolator(rng):
    m = rng.random((64, 64))
    for _ in range(100):
        u = Point(*rng.random(2))
        # reference: resample to a single-cell grid positioned at u via the loop oracle
        gx = min(max(u.x * 64 - 0.5, 0), 63)
        gy = min(max(u.y * 64 - 0.5, 0), 63)
        x0, y0 = int(gx), int(gy)
        x1, y1 = min(x0 + 1, 63), min(y0 + 1, 63)
        wx, wy = gx - x0, gy - y0
        ref = (m[y0, x0] * (1 - wx) * (1 - wy) + m[y0, x1] * wx * (1 - wy)
               + m[y1, x0] * (1 - wx) * wy + m[y1, x1] * wx * wy)
        assert abs(sample_map(AggregatedMap(m), u) - ref) <= 1e-6


def test_amap_round_trip(tmp_path, rng):
    m = rng.random((5, 7)).astype(np.float32).astype(np.float64)
    blob = map_to_bytes(m)
    assert blob[:4] == b"AMAP" and len(blob) == 16 + 4 * 35
    assert np.array_equal(map_from_bytes(blob).values, m)
    save_map(tmp_path / "m.amap", AggregatedMap(m))
    assert np.array_equal(load_map(tmp_path / "m.amap").values, m)
    with pytest.raises(ValueError):
        map_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        map_from_bytes(blob[:-4])
