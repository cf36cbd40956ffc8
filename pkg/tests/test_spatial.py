import numpy as np
import pytest

import medvox as mv


def ramp_volume(dims=(12, 12, 12)):
    data = np.indices(dims).sum(axis=0).astype(np.float32)[np.newaxis]
    return mv.MetaVolume(data, mv.identity_affine())


def random_volume(dims=(10, 11, 12), seed=0):
    rng = mv.Rng(seed)
    data = rng.float_array(int(np.prod(dims))).astype(np.float32).reshape((1, *dims))
    return mv.MetaVolume(data, mv.identity_affine())


class TestOrientation:
    def test_identity_when_already_ras(self):
        v = random_volume()
        out = mv.orientation_to(v, "RAS")
        assert np.array_equal(out.data, v.data)
        assert np.array_equal(out.affine, v.affine)

    def test_las_to_ras(self):
        v = random_volume((8, 9, 10)).evolve(affine=np.diag([-1.0, 1.0, 1.0, 1.0]))
        out = mv.orientation_to(v, "RAS")
        assert np.array_equal(out.data[0], v.data[0][::-1])
        assert out.affine[0, 0] == 1.0
        assert out.affine[0, 3] == -(8 - 1)
        for idx in [(0, 0, 0), (3, 4, 5), (7, 8, 9)]:
            remapped = (8 - 1 - idx[0], idx[1], idx[2])
            assert np.allclose(mv.volume_to_world(v, idx),
                               mv.volume_to_world(out, remapped), atol=1e-9)

    def test_random_orthogonal_affines(self):
        # signed permutations perturbed by small rotations keep dominance strict
        rng = np.random.default_rng(0)
        for _ in range(100):
            perm = rng.permutation(3)
            signs = rng.choice([-1.0, 1.0], 3)
            base = np.zeros((3, 3))
            for j, (p, s) in enumerate(zip(perm, signs)):
                base[p, j] = s
            rot = mv.spatial._rotation_matrix(3, rng.uniform(-0.3, 0.3, 3))
            aff = mv.identity_affine()
            aff[:3, :3] = rot @ base
            aff[:3, 3] = rng.normal(size=3)
            v = random_volume((6, 7, 8)).evolve(affine=aff)
            codes = "".join(rng.choice(list(c)) for c in ("RL", "AP", "SI"))
            out = mv.orientation_to(v, codes)
            assert mv.axis_codes(out.affine) == codes

    def test_world_preserved_everywhere(self):
        v = random_volume((5, 6, 7)).evolve(affine=np.diag([-2.0, 1.0, -1.5, 1.0]))
        out = mv.orientation_to(v, "RAS")
        for idx in np.ndindex(5, 6, 7):
            remapped = (5 - 1 - idx[0], idx[1], 7 - 1 - idx[2])
            assert np.allclose(mv.volume_to_world(v, idx),
                               mv.volume_to_world(out, remapped), atol=1e-9)

    def test_invert_bitwise(self):
        v = random_volume((6, 7, 8)).evolve(affine=np.diag([-1.0, 1.0, -1.0, 1.0]))
        out = mv.invert(mv.orientation_to(v, "RPS"))
        assert np.array_equal(out.data, v.data)
        assert np.array_equal(out.affine, v.affine)

    def test_ambiguous_direction_rejected(self):
        aff = mv.identity_affine()
        aff[:3, :3] = np.array([[1.0, 0.9, 0], [0.1, 1.0, 0], [0, 0, 1.0]])
        aff[:3, :3] = np.array([[1.0, 1.0, 0], [0.5, 0.2, 0], [0, 0, 1.0]])
        v = random_volume((4, 4, 4)).evolve(affine=aff)
        with pytest.raises(ValueError):
            mv.orientation_to(v, "RAS")


class TestSpacing:
    def test_dims_ratio(self):
        v = random_volume((10, 10, 10)).evolve(affine=np.diag([2.0, 2.0, 2.0, 1.0]))
        out = mv.spacing_to(v, (1, 1, 1))
        assert out.spatial_shape == (20, 20, 20)

    def test_same_spacing_identity(self):
        v = random_volume((8, 8, 8))
        out = mv.spacing_to(v, (1, 1, 1))
        assert np.abs(out.data - v.data).max() <= 1e-6

    def test_constant_fixed_point(self):
        v = mv.MetaVolume(np.full((1, 8, 8, 8), 3.5, np.float32), mv.identity_affine())
        for spacing in [(0.7, 1.3, 2.0), (2.5, 2.5, 2.5)]:
            out = mv.spacing_to(v, spacing)
            assert np.abs(out.data - 3.5).max() <= 1e-6

    def test_origin_anchored(self):
        v = random_volume((8, 8, 8)).evolve(affine=np.diag([2.0, 2.0, 2.0, 1.0]))
        out = mv.spacing_to(v, (1, 1, 1))
        assert np.allclose(mv.volume_to_world(out, (0, 0, 0)),
                           mv.volume_to_world(v, (0, 0, 0)))

    def test_nonpositive_spacing(self):
        with pytest.raises(ValueError):
            mv.spacing_to(random_volume(), (1, -1, 1))


class TestFlip:
    def test_involution_bitwise(self):
        v = random_volume()
        out = mv.flip(mv.flip(v, [0, 2]), [0, 2])
        assert np.array_equal(out.data, v.data)

    def test_empty_axes_identity(self):
        v = random_volume()
        out = mv.flip(v, [])
        assert np.array_equal(out.data, v.data)
        assert np.array_equal(out.affine, v.affine)

    def test_world_coordinates_preserved(self):
        v = random_volume((6, 6, 6))
        out = mv.flip(v, [1])
        for i in range(6):
            assert np.allclose(mv.volume_to_world(out, (2, i, 3)),
                               mv.volume_to_world(v, (2, 6 - 1 - i, 3)), atol=1e-9)

    def test_axis_out_of_range(self):
        with pytest.raises(ValueError):
            mv.flip(random_volume(), [3])


class TestRotate:
    def test_zero_angles_identity(self):
        v = ramp_volume()
        out = mv.rotate(v, (0.0, 0.0, 0.0))
        assert np.abs(out.data - v.data).max() <= 1e-6

    def test_round_trip_interior(self):
        # margin covers the corner region clipped by the forward rotation
        v = ramp_volume((16, 16, 16))
        out = mv.invert(mv.rotate(v, (0.3, 0.2, -0.2)))
        err = np.abs(out.data - v.data)[0, 4:-4, 4:-4, 4:-4].max()
        assert err <= 1e-2

    def test_90deg_delta_spike_nearest(self):
        dims = (9, 9, 9)
        data = np.zeros((1, *dims), np.float32)
        data[0, 6, 4, 4] = 1.0
        v = mv.MetaVolume(data, mv.identity_affine())
        out = mv.rotate(v, (0.0, 0.0, np.pi / 2), mode="nearest")
        # independent oracle: output x samples input at c + R(x - c)
        c = np.array([4.0, 4.0, 4.0])
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        target = None
        for idx in np.ndindex(*dims):
            src = c + rot @ (np.array(idx) - c)
            if np.allclose(np.round(src), [6, 4, 4]):
                target = idx
        assert out.data[0][target] == 1.0
        assert out.data.sum() == 1.0


class TestCropPad:
    def test_full_region_identity(self):
        v = random_volume()
        out = mv.crop_pad(v, [0, 0, 0], list(v.spatial_shape))
        assert np.array_equal(out.data, v.data)
        assert np.array_equal(out.affine, v.affine)

    def test_negative_start_pads_zeros(self):
        v = random_volume((6, 6, 6))
        out = mv.crop_pad(v, [-2, 0, 0], [8, 6, 6])
        assert np.all(out.data[:, :2] == 0)
        assert np.array_equal(out.data[:, 2:], v.data)

    def test_center_crop_then_invert(self):
        v = random_volume((10, 10, 10))
        out = mv.invert(mv.crop_pad(v, [2, 2, 2], [6, 6, 6]))
        assert out.spatial_shape == (10, 10, 10)
        assert np.array_equal(out.affine, v.affine)
        assert np.array_equal(out.data[:, 2:8, 2:8, 2:8], v.data[:, 2:8, 2:8, 2:8])
        assert np.all(out.data[:, :2] == 0)

    def test_affine_translation_advanced(self):
        v = random_volume((8, 8, 8)).evolve(affine=np.diag([2.0, 2.0, 2.0, 1.0]))
        out = mv.crop_pad(v, [1, 2, 3], [4, 4, 4])
        assert np.allclose(out.affine[:3, 3], [2.0, 4.0, 6.0])

    def test_bad_size(self):
        with pytest.raises(ValueError):
            mv.crop_pad(random_volume(), [0, 0, 0], [0, 4, 4])

    def test_edge_and_reflect_modes(self):
        v = random_volume((5, 5, 5))
        edge = mv.crop_pad(v, [-1, 0, 0], [6, 5, 5], pad_mode="edge")
        assert np.array_equal(edge.data[:, 0], v.data[:, 0])
        refl = mv.crop_pad(v, [-1, 0, 0], [6, 5, 5], pad_mode="reflect")
        assert np.array_equal(refl.data[:, 0], v.data[:, 1])


class TestAffineResample:
    def test_identity_params(self):
        v = ramp_volume()
        out = mv.affine_resample(v)
        assert np.abs(out.data - v.data).max() <= 1e-6

    def test_integer_translation_equals_crop_shift(self):
        v = random_volume((8, 8, 8))
        out = mv.affine_resample(v, translation=(2, 0, 0), mode="nearest")
        shifted = mv.crop_pad(v, [2, 0, 0], [8, 8, 8])
        assert np.array_equal(out.data, shifted.data)

    def test_scale_round_trip_interior(self):
        v = ramp_volume((14, 14, 14))
        out = mv.invert(mv.affine_resample(v, scale=(2.0, 2.0, 2.0)))
        err = np.abs(out.data - v.data)[0, 3:-3, 3:-3, 3:-3].max()
        assert err <= 1e-2

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            mv.affine_resample(random_volume(), scale=(0.0, 1.0, 1.0))


class TestZoom:
    def test_round_trip(self):
        # zoom out first: the whole extent survives, unlike a zoom-in round trip
        v = ramp_volume((14, 14, 14))
        out = mv.invert(mv.zoom(v, 0.8))
        err = np.abs(out.data - v.data)[0, 2:-2, 2:-2, 2:-2].max()
        assert err <= 1e-2


class TestElastic:
    def test_prob_zero_identity(self):
        v = random_volume()
        out = mv.rand_elastic_3d(v, mv.Rng(0), prob=0.0)
        assert np.array_equal(out.data, v.data)
        assert out.applied[-1].do_transform is False

    def test_zero_magnitude_equals_affine_path(self):
        v = ramp_volume()
        a = mv.rand_elastic_3d(v, mv.Rng(5), magnitude_range=(0.0, 0.0), prob=1.0)
        # replay the same draws to build the matching pure-affine warp
        rng = mv.Rng(5)
        rng.next_float()                      # gate
        spacing = rng.uniform(8.0, 16.0)
        rng.uniform(0.0, 0.0)                 # magnitude
        angles = [rng.uniform(-0.05, 0.05) for _ in range(3)]
        scales = [1.0 + rng.uniform(-0.05, 0.05) for _ in range(3)]
        rot = mv.spatial._rotation_matrix(3, angles) @ np.diag(scales)
        c = (np.array(v.spatial_shape) - 1) / 2.0
        idx = np.indices(v.spatial_shape, dtype=np.float64)
        coords = np.tensordot(rot, idx - c.reshape(3, 1, 1, 1), axes=1) + c.reshape(3, 1, 1, 1)
        from medvox.interp import sample_volume
        expect = sample_volume(v.data, coords, "trilinear", "zeros")
        assert np.abs(a.data - expect).max() <= 1e-5

    def test_fixed_seed_bit_exact(self):
        v = random_volume()
        a = mv.rand_elastic_3d(v, mv.Rng(7), prob=1.0)
        b = mv.rand_elastic_3d(v, mv.Rng(7), prob=1.0)
        assert np.array_equal(a.data, b.data)

    def test_rng_consumption_independent_of_gate(self):
        v = random_volume()
        r0, r1 = mv.Rng(3), mv.Rng(3)
        mv.rand_elastic_3d(v, r0, prob=0.0)
        mv.rand_elastic_3d(v, r1, prob=1.0)
        assert r0.state == r1.state

    def test_not_invertible(self):
        out = mv.rand_elastic_3d(random_volume(), mv.Rng(1), prob=1.0)
        with pytest.raises(mv.NonInvertibleError):
            mv.invert(out)


class TestWarp:
    def test_zero_field_identity(self):
        v = random_volume()
        field = np.zeros((3, *v.spatial_shape))
        out = mv.warp(v, field, mode="nearest")
        assert np.array_equal(out.data, v.data)
        out = mv.warp(v, field, mode="trilinear")
        assert np.abs(out.data - v.data).max() <= 1e-6

    def test_constant_integer_field_shifts(self):
        v = random_volume((6, 6, 6))
        field = np.zeros((3, 6, 6, 6))
        field[0] = 1.0
        out = mv.warp(v, field, mode="nearest")
        assert np.array_equal(out.data[:, :5], v.data[:, 1:])
        assert np.all(out.data[:, 5] == 0)

    def test_label_set_preserved_nearest(self):
        _, lbl = mv.synth_volume(mv.Rng(3), (10, 10, 10), 2, 0.0)
        field = mv.Rng(4).gauss_array(3 * 1000).reshape(3, 10, 10, 10) * 2.0
        out = mv.warp(lbl, field, mode="nearest")
        assert set(np.unique(out.data)) <= set(np.unique(lbl.data)) | {0.0}

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mv.warp(random_volume((6, 6, 6)), np.zeros((3, 5, 5, 5)))


class TestLabelSafety:
    def test_nearest_ops_preserve_label_values(self):
        _, lbl = mv.synth_volume(mv.Rng(8), (12, 12, 12), 2, 0.0)
        values = set(np.unique(lbl.data))
        for out in [
            mv.rotate(lbl, (0.5, 0.2, -0.3), mode="nearest"),
            mv.zoom(lbl, 1.3, mode="nearest"),
            mv.spacing_to(lbl, (1.7, 0.8, 1.1), mode="nearest"),
            mv.affine_resample(lbl, rotation=(0.2, 0, 0), scale=(1.1, 0.9, 1.0), mode="nearest"),
        ]:
            assert set(np.unique(out.data)) <= values | {0.0}


class TestConstantFixedPoint:
    @pytest.mark.parametrize("mode", ["nearest", "trilinear", "tricubic"])
    def test_resampling_preserves_constants(self, mode):
        v = mv.MetaVolume(np.full((1, 9, 9, 9), 2.5, np.float32), mv.identity_affine())
        for out in [
            mv.rotate(v, (0.3, 0.1, 0.2), mode=mode, padding="border"),
            mv.zoom(v, 0.8, mode=mode, padding="border"),
            mv.spacing_to(v, (1.4, 1.4, 1.4), mode=mode, padding="border"),
        ]:
            assert np.abs(out.data - 2.5).max() <= 1e-6
