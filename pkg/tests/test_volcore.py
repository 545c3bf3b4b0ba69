import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import downscale_bruteforce, warp_scalar
from volinterp.volcore import (ContractViolation, UVIVFormatError, Volume, downscale_field, read_uviv,
                               resize_volume, scale_field, spatial_gradient, warp, weighted_fuse,
                               write_uviv)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# Volume

def test_volume_adds_channel_axis():
    v = Volume(np.zeros((4, 5, 6), np.float32))
    assert v.data.shape == (1, 4, 5, 6)
    assert v.shape == (4, 5, 6) and v.channels == 1


@pytest.mark.parametrize("bad", [np.zeros((1, 4, 4)), np.full((3, 3, 3), np.nan), np.zeros((2, 2))])
def test_volume_rejects_invalid(bad):
    with pytest.raises(ContractViolation):
        Volume(bad)


def test_normalized_volume_range_checked():
    Volume(np.ones((3, 3, 3)), normalized=True)
    with pytest.raises(ContractViolation):
        Volume(np.full((3, 3, 3), 1.5), normalized=True)


def test_tensor_round_trip():
    rng = np.random.default_rng(0)
    v = Volume(rng.random((2, 3, 4, 5)).astype(np.float32), spacing=(1, 2, 3))
    back = Volume.from_tensor(v.tensor(), spacing=v.spacing)
    np.testing.assert_array_equal(back.data, v.data)


# UVIV container

def test_uviv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    v = Volume(rng.random((2, 3, 4, 5)).astype(np.float32), spacing=(0.5, 1.0, 2.5))
    write_uviv(tmp_path / "v.uviv", v)
    back = read_uviv(tmp_path / "v.uviv")
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == v.spacing


def test_uviv_layout(tmp_path):
    data = np.arange(2 * 2 * 3 * 4, dtype=np.float32).reshape(2, 2, 3, 4)
    write_uviv(tmp_path / "v.uviv", Volume(data))
    raw = (tmp_path / "v.uviv").read_bytes()
    magic, version, dtype, c, d, h, w, *spacing = struct.unpack_from("<4sBBH3I3f", raw)
    assert (magic, version, dtype, c, d, h, w) == (b"UVIV", 1, 1, 2, 2, 3, 4)
    payload = np.frombuffer(raw[struct.calcsize("<4sBBH3I3f"):], dtype="<f4")
    np.testing.assert_array_equal(payload, data.ravel())


@pytest.mark.parametrize("offset,value", [(0, b"XXXX"), (4, b"\x02"), (5, b"\x07")])
def test_uviv_rejects_bad_header(tmp_path, offset, value):
    write_uviv(tmp_path / "v.uviv", Volume(np.zeros((3, 3, 3), np.float32)))
    raw = bytearray((tmp_path / "v.uviv").read_bytes())
    raw[offset:offset + len(value)] = value
    (tmp_path / "bad.uviv").write_bytes(bytes(raw))
    with pytest.raises(UVIVFormatError):
        read_uviv(tmp_path / "bad.uviv")


def test_uviv_rejects_truncated_payload(tmp_path):
    write_uviv(tmp_path / "v.uviv", Volume(np.zeros((3, 3, 3), np.float32)))
    raw = (tmp_path / "v.uviv").read_bytes()
    (tmp_path / "bad.uviv").write_bytes(raw[:-4])
    with pytest.raises(UVIVFormatError):
        read_uviv(tmp_path / "bad.uviv")


# warp

def test_warp_zero_field_identity_exact():
    rng = np.random.default_rng(2)
    v = torch.as_tensor(rng.random((2, 3, 6, 7, 8)), dtype=torch.float32)
    out = warp(v, torch.zeros(2, 3, 6, 7, 8))
    assert torch.equal(out, v)


def test_warp_integer_shift_replicates_border():
    rng = np.random.default_rng(3)
    v = rng.random((1, 1, 6, 6, 6))
    flow = np.zeros((1, 3, 6, 6, 6))
    flow[:, 2] = 1.0
    out = warp(t64(v), t64(flow)).numpy()
    expect = np.concatenate([v[..., 1:], v[..., -1:]], axis=-1)
    np.testing.assert_array_equal(out, expect)


def test_warp_half_voxel_averages_neighbours():
    rng = np.random.default_rng(4)
    v = rng.random((1, 1, 6, 6, 6))
    flow = np.zeros((1, 3, 6, 6, 6))
    flow[:, 2] = 0.5
    out = warp(t64(v), t64(flow)).numpy()
    np.testing.assert_allclose(out[0, 0, 2, 3, 1], (v[0, 0, 2, 3, 1] + v[0, 0, 2, 3, 2]) / 2, atol=1e-15)


def test_warp_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        v = rng.random((2, 6, 6, 6))
        f = rng.uniform(-2, 2, (3, 6, 6, 6))
        out = warp(t64(v[None]), t64(f[None]))[0].numpy()
        np.testing.assert_allclose(out, warp_scalar(v, f), atol=1e-12)


def test_warp_float32_matches_oracle():
    rng = np.random.default_rng(6)
    v = rng.random((1, 6, 6, 6)).astype(np.float32)
    f = rng.uniform(-2, 2, (3, 6, 6, 6)).astype(np.float32)
    out = warp(torch.as_tensor(v[None]), torch.as_tensor(f[None]))[0].numpy()
    np.testing.assert_allclose(out, warp_scalar(v, f), atol=1e-6)


def test_warp_gradcheck():
    rng = np.random.default_rng(7)
    v = t64(rng.random((1, 2, 4, 5, 4))).requires_grad_()
    f = rng.uniform(-1.5, 1.5, (1, 3, 4, 5, 4))
    f = np.floor(f) + np.clip(f - np.floor(f), 0.1, 0.9)
    f = t64(f).requires_grad_()
    assert torch.autograd.gradcheck(warp, (v, f))


def test_warp_gradient_zero_when_clamped():
    v = t64(np.random.default_rng(8).random((1, 1, 4, 4, 4)))
    f = torch.full((1, 3, 4, 4, 4), 10.0, dtype=torch.float64, requires_grad=True)
    warp(v, f).sum().backward()
    assert torch.count_nonzero(f.grad) == 0


def test_warp_rejects_bad_field():
    v = torch.zeros(1, 1, 4, 4, 4)
    with pytest.raises(ContractViolation):
        warp(v, torch.zeros(1, 2, 4, 4, 4))
    with pytest.raises(ContractViolation):
        warp(v, torch.zeros(1, 3, 4, 4, 5))
    with pytest.raises(ContractViolation):
        warp(v, torch.full((1, 3, 4, 4, 4), float("nan")))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(2, 6), st.integers(2, 6))
def test_warp_zero_field_identity_property(seed, d, h, w):
    v = torch.as_tensor(np.random.default_rng(seed).random((1, 2, d, h, w)), dtype=torch.float32)
    assert torch.equal(warp(v, torch.zeros(1, 3, d, h, w)), v)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-3, 3), st.integers(0, 2))
def test_warp_integer_shift_property(seed, shift, axis):
    v = np.random.default_rng(seed).random((1, 1, 5, 5, 5))
    flow = np.zeros((1, 3, 5, 5, 5))
    flow[:, axis] = shift
    out = warp(t64(v), t64(flow)).numpy()
    idx = np.clip(np.arange(5) + shift, 0, 4)
    expect = np.take(v, idx, axis=2 + axis)
    np.testing.assert_array_equal(out, expect)


# field helpers

def test_scale_field():
    f = torch.randn(1, 3, 4, 4, 4)
    assert torch.equal(scale_field(f, 0.5), f * 0.5)
    with pytest.raises(ContractViolation):
        scale_field(f, float("inf"))


@pytest.mark.parametrize("factor", [0.5, 0.25])
def test_downscale_matches_bruteforce(factor):
    f = np.random.default_rng(9).normal(size=(3, 8, 8, 8))
    out = downscale_field(t64(f[None]), factor)[0].numpy()
    np.testing.assert_allclose(out, downscale_bruteforce(f, factor), atol=1e-12)


def test_downscale_constant_field_scales():
    f = torch.full((1, 3, 8, 8, 8), 2.0, dtype=torch.float64)
    np.testing.assert_allclose(downscale_field(f, 0.5).numpy(), 1.0)
    np.testing.assert_allclose(downscale_field(f, 0.25).numpy(), 0.5)
    assert downscale_field(f, 1) is f


def test_downscale_rejects_bad_input():
    with pytest.raises(ContractViolation):
        downscale_field(torch.zeros(1, 3, 8, 8, 8), 0.3)
    with pytest.raises(ContractViolation):
        downscale_field(torch.zeros(1, 3, 6, 8, 8), 0.25)


def test_weighted_fuse():
    a, b = torch.ones(1, 1, 2, 2, 2), torch.zeros(1, 1, 2, 2, 2)
    assert torch.equal(weighted_fuse(a, b, 1.0, 0.0), a)
    np.testing.assert_allclose(weighted_fuse(a, b, 0.25, 0.75).numpy(), 0.25)
    for wa, wb in [(0.5, 0.6), (-0.1, 1.1)]:
        with pytest.raises(ContractViolation):
            weighted_fuse(a, b, wa, wb)


def test_spatial_gradient_linear_field():
    z, y, x = np.meshgrid(np.arange(4.0), np.arange(5.0), np.arange(6.0), indexing="ij")
    f = t64(np.stack([0 * x, 0 * x, 0.7 * x])[None])
    dd, dh, dw = spatial_gradient(f)
    assert dd.shape == (1, 3, 3, 5, 6) and dh.shape == (1, 3, 4, 4, 6) and dw.shape == (1, 3, 4, 5, 5)
    np.testing.assert_allclose(dw[:, 2].numpy(), 0.7, atol=1e-14)
    assert float(dd.abs().max()) == 0.0


def test_resize_volume():
    v = torch.rand(1, 1, 4, 4, 4)
    same = resize_volume(v, (4, 4, 4))
    assert torch.equal(same, v) and same is not v
    up = resize_volume(v, (7, 7, 7))
    assert up.shape == (1, 1, 7, 7, 7)
    # corner-aligned sampling keeps the corners
    assert torch.allclose(up[..., 0, 0, 0], v[..., 0, 0, 0]) and torch.allclose(up[..., -1, -1, -1], v[..., -1, -1, -1])
    with pytest.raises(ContractViolation):
        resize_volume(v, (1, 4, 4))
