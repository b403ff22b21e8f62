import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelbridge import preprocess as pp
from voxelbridge.errors import ValidationError
from voxelbridge.volume_io import BrainVolume

DIMS = (6, 6, 6)
SPEC = pp.PatchSpec(edge=3, canonical_dims=DIMS)


def vol_from(rng, dims=DIMS):
    return BrainVolume("s", rng.standard_normal(dims).astype(np.float32))


def full_mask(dims=DIMS):
    return pp.TaskMask(np.ones(dims, dtype=bool))


class TestNormalize:
    def test_hand_computed_zscores(self):
        data = np.zeros((3, 1, 1), dtype=np.float32)
        data[:, 0, 0] = [1.0, 2.0, 3.0]
        mask = pp.TaskMask(np.ones((3, 1, 1), dtype=bool))
        out = pp.normalize(BrainVolume("s", data), mask)
        want = np.array([-1.2247448713915890, 0.0, 1.2247448713915890])
        assert np.max(np.abs(out.data[:, 0, 0] - want)) < 1e-6

    def test_idempotent_within_float_error(self, rng):
        v = vol_from(rng)
        mask = full_mask()
        once = pp.normalize(v, mask)
        twice = pp.normalize(once, mask)
        assert np.max(np.abs(once.data - twice.data)) < 1e-6

    def test_constant_field_maps_to_zero(self):
        v = BrainVolume("s", np.full(DIMS, 4.2, dtype=np.float32))
        out = pp.normalize(v, full_mask())
        assert np.array_equal(out.data, np.zeros(DIMS, dtype=np.float32))

    def test_unmasked_voxels_share_affine_map(self, rng):
        v = vol_from(rng)
        mask_data = np.zeros(DIMS, dtype=bool)
        mask_data[:3] = True
        out = pp.normalize(v, pp.TaskMask(mask_data))
        vals = v.data[mask_data].astype(np.float64)
        mu, sigma = vals.mean(), vals.std()
        want = (v.data.astype(np.float64) - mu) / sigma
        assert np.max(np.abs(out.data - want)) < 1e-5


class TestPatchify:
    def test_canonical_arithmetic(self):
        spec = pp.PatchSpec(edge=14, canonical_dims=(83, 104, 81))
        assert spec.padded_dims == (84, 112, 84)
        assert spec.grid_dims == (6, 8, 6)
        assert int(np.prod(spec.grid_dims)) == 288
        assert spec.patch_len == 2744

    def test_full_mask_retains_all(self, rng):
        spec = pp.PatchSpec(edge=14, canonical_dims=(83, 104, 81))
        v = BrainVolume("s", rng.standard_normal((83, 104, 81)).astype(np.float32))
        sig = pp.patchify(v, spec, pp.TaskMask(np.ones((83, 104, 81), dtype=bool)))
        assert sig.index_map.n_patches == 288
        assert sig.values.shape == (288, 2744)

    def test_single_voxel_mask(self, rng):
        v = vol_from(rng)
        mask = np.zeros(DIMS, dtype=bool)
        mask[0, 0, 0] = True
        sig = pp.patchify(v, SPEC, pp.TaskMask(mask))
        assert sig.index_map.n_patches == 1
        assert sig.index_map.retained.tolist() == [0]

    def test_empty_retention_is_error(self, rng):
        # threshold above the largest per-cube mask count
        mask = np.zeros(DIMS, dtype=bool)
        mask[0, 0, 0] = True
        spec = pp.PatchSpec(edge=3, canonical_dims=DIMS, retain_threshold=2)
        with pytest.raises(ValidationError):
            pp.patchify(vol_from(np.random.default_rng(0)), spec, pp.TaskMask(mask))

    def test_wrong_dims_rejected(self, rng):
        v = BrainVolume("s", rng.standard_normal((5, 6, 6)).astype(np.float32))
        with pytest.raises(ValidationError):
            pp.patchify(v, SPEC, full_mask())

    def test_retention_monotone_in_mask(self, rng):
        v = vol_from(rng)
        small = np.zeros(DIMS, dtype=bool)
        small[1, 1, 1] = small[4, 4, 4] = True
        grown = small.copy()
        grown[2, 5, 0] = grown[0, 3, 3] = True
        kept_small = set(pp.patchify(v, SPEC, pp.TaskMask(small)).index_map.retained.tolist())
        kept_grown = set(pp.patchify(v, SPEC, pp.TaskMask(grown)).index_map.retained.tolist())
        assert kept_small <= kept_grown


class TestDepatchify:
    def test_roundtrip_inside_retained_cubes(self, rng):
        v = vol_from(rng)
        mask = np.zeros(DIMS, dtype=bool)
        mask[0:3, 0:3, 0:3] = True
        mask[3:6, 3:6, 3:6] = True
        sig = pp.patchify(v, SPEC, pp.TaskMask(mask))
        back = pp.depatchify(sig)
        assert np.array_equal(back.data[0:3, 0:3, 0:3], v.data[0:3, 0:3, 0:3])
        assert np.array_equal(back.data[3:6, 3:6, 3:6], v.data[3:6, 3:6, 3:6])
        # patchify of the reconstruction restores the retained rows exactly
        again = pp.patchify(back, SPEC, pp.TaskMask(mask))
        assert np.array_equal(again.values, sig.values)

    def test_full_mask_roundtrip_exact(self, rng):
        dims = (5, 7, 4)  # deliberately not multiples of the edge
        spec = pp.PatchSpec(edge=3, canonical_dims=dims)
        v = BrainVolume("s", np.random.default_rng(5).standard_normal(dims).astype(np.float32))
        sig = pp.patchify(v, spec, pp.TaskMask(np.ones(dims, dtype=bool)))
        back = pp.depatchify(sig)
        assert back.dims == dims
        assert np.array_equal(back.data, v.data)

    def test_single_patch_zero_elsewhere(self, rng):
        v = vol_from(rng)
        mask = np.zeros(DIMS, dtype=bool)
        mask[0, 0, 0] = True
        back = pp.depatchify(pp.patchify(v, SPEC, pp.TaskMask(mask)))
        outside = back.data.copy()
        outside[0:3, 0:3, 0:3] = 0
        assert np.array_equal(outside, np.zeros(DIMS, dtype=np.float32))


class TestMixup:
    def _pair(self, rng):
        v1, v2 = vol_from(rng), vol_from(rng)
        m = full_mask()
        return pp.patchify(v1, SPEC, m), pp.patchify(v2, SPEC, m)

    def test_endpoints_exact(self, rng):
        b1, b2 = self._pair(rng)
        assert np.array_equal(pp.mixup(b1, b2, 1.0).values, b1.values)
        assert np.array_equal(pp.mixup(b1, b2, 0.0).values, b2.values)

    def test_quarter_mix(self):
        im = pp.PatchIndexMap((2, 2, 2), np.arange(8), (0, 0, 0))
        spec = pp.PatchSpec(edge=3, canonical_dims=DIMS)
        b1 = pp.PatchedSignal(np.full((8, 27), 4.0, np.float32), im, spec)
        b2 = pp.PatchedSignal(np.full((8, 27), 8.0, np.float32), im, spec)
        out = pp.mixup(b1, b2, 0.25)
        assert np.array_equal(out.values, np.full((8, 27), 7.0, np.float32))

    def test_mismatched_maps_rejected(self, rng):
        b1, _ = self._pair(rng)
        mask = np.zeros(DIMS, dtype=bool)
        mask[0, 0, 0] = True
        other = pp.patchify(vol_from(rng), SPEC, pp.TaskMask(mask))
        with pytest.raises(ValidationError):
            pp.mixup(b1, other, 0.5)

    @given(lam=st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=25, deadline=None)
    def test_convexity(self, lam):
        rng = np.random.default_rng(99)
        im = pp.PatchIndexMap((2, 2, 2), np.arange(8), (0, 0, 0))
        spec = pp.PatchSpec(edge=3, canonical_dims=DIMS)
        b1 = pp.PatchedSignal(rng.standard_normal((8, 27)).astype(np.float32), im, spec)
        b2 = pp.PatchedSignal(rng.standard_normal((8, 27)).astype(np.float32), im, spec)
        out = pp.mixup(b1, b2, lam).values
        lo = np.minimum(b1.values, b2.values) - 1e-6
        hi = np.maximum(b1.values, b2.values) + 1e-6
        assert np.all(out >= lo) and np.all(out <= hi)


class TestUnionMask:
    def test_single_is_identity(self):
        m = full_mask()
        assert np.array_equal(pp.build_union_mask([m]).data, m.data)

    def test_disjoint_counts_add(self):
        a = np.zeros(DIMS, dtype=bool)
        b = np.zeros(DIMS, dtype=bool)
        a.ravel()[:10] = True
        b.ravel()[50:70] = True
        u = pp.build_union_mask([pp.TaskMask(a), pp.TaskMask(b)])
        assert int(u.data.sum()) == 30

    def test_idempotent(self):
        m = full_mask()
        assert np.array_equal(pp.build_union_mask([m, m]).data, m.data)

    def test_empty_list_rejected(self):
        with pytest.raises(ValidationError):
            pp.build_union_mask([])


class TestNpatFormat:
    def test_roundtrip(self, rng, tmp_path):
        v = vol_from(rng)
        mask = np.zeros(DIMS, dtype=bool)
        mask[0:3, :, :] = True
        sig = pp.patchify(v, SPEC, pp.TaskMask(mask))
        p = tmp_path / "sig.npat"
        pp.write_patched(sig, p)
        back = pp.read_patched(p)
        assert np.array_equal(back.values, sig.values)
        assert back.index_map.same_layout(sig.index_map)
        assert back.spec.edge == sig.spec.edge
        assert back.spec.canonical_dims == sig.spec.canonical_dims

    def test_resize_identity_copy(self, rng):
        v = vol_from(rng)
        out = pp.trilinear_resize(v, DIMS)
        assert np.array_equal(out.data, v.data)
        assert out.data is not v.data
