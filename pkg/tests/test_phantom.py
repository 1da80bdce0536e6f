import itertools
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgvae.phantom import (
    MaskVolume, OrganSpec, PGPVError, PhantomSpec, Volume, default_phantom_spec, generate_phantom,
    load_volume, normalize_intensity, save_volume, slice_axial, target_slices,
)


def single_target_spec(seed=0, center=((0.5, 0.5),) * 3, radii=((2, 2), (4, 4), (3, 3))):
    target = OrganSpec(center, radii, (80.0, 80.0), target=True)
    return PhantomSpec(dims=(32, 128, 128), organs=(target,), noise_std=5.0, seed=seed)


def test_empty_spec_is_constant_background():
    vol, mask = generate_phantom(PhantomSpec(dims=(16, 64, 64), organs=(), noise_std=0.0, seed=4))
    assert np.unique(vol.voxels).size == 1
    assert mask.voxels.sum() == 0


def test_generation_is_deterministic():
    a = generate_phantom(default_phantom_spec(seed=11))
    b = generate_phantom(default_phantom_spec(seed=11))
    assert a[0].voxels.tobytes() == b[0].voxels.tobytes()
    assert a[1].voxels.tobytes() == b[1].voxels.tobytes()
    c = generate_phantom(default_phantom_spec(seed=12))
    assert a[0].voxels.tobytes() != c[0].voxels.tobytes()


def _brute_force_count(center, radii, dims):
    n = 0
    lo = [max(0, int(math.floor(c - r))) for c, r in zip(center, radii)]
    hi = [min(d - 1, int(math.ceil(c + r))) for c, r, d in zip(center, radii, dims)]
    for z, y, x in itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi))):
        if ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2 <= 1:
            n += 1
    return n


@pytest.mark.parametrize("seed", range(5))
def test_target_voxel_count_matches_ellipsoid_volume(seed):
    spec = single_target_spec(seed=seed, center=((0.3, 0.7),) * 3)
    _, mask = generate_phantom(spec)
    count = int(mask.voxels.sum())
    expected = 4.0 / 3.0 * math.pi * 2 * 4 * 3
    assert abs(count - expected) <= 0.2 * expected
    # the mask is exactly the lattice points of one (2,4,3) ellipsoid
    zs, ys, xs = np.nonzero(mask.voxels)
    center = (zs.mean(), ys.mean(), xs.mean())
    assert abs(_brute_force_count(center, (2, 4, 3), spec.dims) - count) <= 0.2 * expected


def test_target_fraction_bound_over_many_seeds():
    for seed in range(100):
        spec = default_phantom_spec(seed=seed)
        _, mask = generate_phantom(spec)
        assert mask.voxels.mean() <= spec.max_target_fraction
        assert len(target_slices(mask)) >= 1


def test_errors():
    with pytest.raises(ValueError, match="below minimum"):
        generate_phantom(PhantomSpec(dims=(8, 64, 64)))
    huge = OrganSpec(radii_range=((10, 10), (30, 30), (30, 30)), target=True)
    with pytest.raises(ValueError, match="infeasible"):
        generate_phantom(PhantomSpec(dims=(16, 64, 64), organs=(huge,)))


def test_spec_from_dict_rejects_unknown_keys():
    spec = PhantomSpec.from_dict({"dims": [16, 64, 64], "organs": [{"target": True}], "seed": 3})
    assert spec.organs[0].target and spec.dims == (16, 64, 64)
    with pytest.raises(ValueError):
        PhantomSpec.from_dict({"dimz": [16, 64, 64]})


@pytest.mark.parametrize("which", [0, 1])
def test_save_load_roundtrip_is_bit_exact(tmp_path, which):
    v = generate_phantom(default_phantom_spec(seed=2))[which]
    path = tmp_path / "v.pgpv"
    save_volume(v, path)
    loaded = load_volume(path)
    assert type(loaded) is type(v)
    assert loaded.voxels.tobytes() == v.voxels.tobytes()
    save_volume(loaded, tmp_path / "w.pgpv")
    assert (tmp_path / "w.pgpv").read_bytes() == path.read_bytes()


def test_header_layout(tmp_path):
    v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), (1.0, 2.0, 3.0))
    save_volume(v, tmp_path / "a.pgpv")
    raw = (tmp_path / "a.pgpv").read_bytes()
    assert raw[:4] == b"PGPV"
    assert struct.unpack_from("<IB3I3f", raw, 4) == (1, 0, 2, 2, 2, 1.0, 2.0, 3.0)
    assert len(raw) == 4 + 4 + 1 + 12 + 12 + 32


def test_bad_magic(tmp_path):
    p = tmp_path / "x.pgpv"
    p.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(PGPVError, match="magic"):
        load_volume(p)


def test_truncated_payload(tmp_path):
    header = b"PGPV" + struct.pack("<IB3I3f", 1, 0, 2, 2, 2, 1, 1, 1)
    p = tmp_path / "t.pgpv"
    p.write_bytes(header + bytes(31))
    with pytest.raises(PGPVError, match="truncated"):
        load_volume(p)
    p.write_bytes(header + bytes(32))
    assert load_volume(p).dims == (2, 2, 2)


def test_version_and_size_mismatch(tmp_path):
    p = tmp_path / "t.pgpv"
    p.write_bytes(b"PGPV" + struct.pack("<IB3I3f", 2, 0, 1, 1, 1, 1, 1, 1) + bytes(4))
    with pytest.raises(PGPVError, match="version"):
        load_volume(p)
    p.write_bytes(b"PGPV" + struct.pack("<IB3I3f", 1, 0, 1, 1, 1, 1, 1, 1) + bytes(8))
    with pytest.raises(PGPVError, match="mismatch"):
        load_volume(p)
    p.write_bytes(b"PGPV" + struct.pack("<IB3I3f", 1, 1, 1, 1, 2, 1, 1, 1) + bytes([0, 7]))
    with pytest.raises(PGPVError, match="binary"):
        load_volume(p)


def test_normalize_examples():
    v = Volume(np.array([-200.0, 50.0, 800.0, -1000.0], dtype=np.float32).reshape(1, 1, 4))
    out = normalize_intensity(v).voxels.ravel()
    np.testing.assert_array_equal(out, [-1.0, 0.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        normalize_intensity(v, 10, 10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1, width=32), min_size=1, max_size=50))
def test_normalize_identity_on_unit_window(vals):
    v = Volume(np.array(vals, dtype=np.float32).reshape(1, 1, -1))
    np.testing.assert_allclose(normalize_intensity(v, -1.0, 1.0).voxels, v.voxels, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3000, 3000, width=32), min_size=2, max_size=50))
def test_normalize_monotone(vals):
    vals = sorted(vals)
    out = normalize_intensity(Volume(np.array(vals, dtype=np.float32).reshape(1, 1, -1))).voxels.ravel()
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= -1 and out.max() <= 1


def test_slice_axial():
    v = Volume(np.full((16, 64, 64), 3.0, dtype=np.float32))
    assert np.all(slice_axial(v, 5) == 3.0)
    with pytest.raises(IndexError):
        slice_axial(v, 16)
    with pytest.raises(IndexError):
        slice_axial(v, -1)


def test_slice_through_target_center():
    spec = single_target_spec(center=((10 / 31, 10 / 31), (0.5, 0.5), (0.5, 0.5)))
    _, mask = generate_phantom(spec)
    assert slice_axial(mask, 10).sum() > 0
    assert slice_axial(mask, 0).sum() == 0


def test_mask_volume_rejects_non_binary():
    with pytest.raises(ValueError):
        MaskVolume(np.full((1, 2, 2), 2, dtype=np.uint8))
