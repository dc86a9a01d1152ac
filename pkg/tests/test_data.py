import math
import struct

import numpy as np
import pytest

from sawunet.data import (
    CUBE_MAGIC, BatchPlan, HsiCube, extract_window, generate_synthetic, load_cube, load_matrix,
    make_batches, measured_snr, n_batches, read_pgm, save_cube, save_matrix, write_pgm,
)
from sawunet.errors import CubeFormatError, UsageError


@pytest.fixture
def small_cube():
    rng = np.random.default_rng(0)
    return HsiCube(rng.uniform(size=(5, 6, 4)))


class TestCubeFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        values = np.random.default_rng(1).normal(size=(2, 2, 3))
        save_cube(tmp_path / "c.bin", values)
        back = load_cube(tmp_path / "c.bin").values
        assert back.tobytes() == values.tobytes()

    def test_header_layout(self, tmp_path):
        save_cube(tmp_path / "c.bin", np.zeros((2, 3, 4)))
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw[:8] == CUBE_MAGIC
        assert struct.unpack("<III", raw[8:20]) == (2, 3, 4)
        assert len(raw) == 20 + 2 * 3 * 4 * 8

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(struct.pack("<8sIII", CUBE_MAGIC, 2, 2, 1) + np.zeros(3).tobytes())
        with pytest.raises(CubeFormatError, match="truncated"):
            load_cube(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "long.bin"
        path.write_bytes(struct.pack("<8sIII", CUBE_MAGIC, 1, 1, 2) + np.zeros(3).tobytes())
        with pytest.raises(CubeFormatError):
            load_cube(path, fmt="binary")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOTACUBE" + bytes(12))
        with pytest.raises(CubeFormatError, match="magic"):
            load_cube(path, fmt="binary")

    def test_zero_dimension(self, tmp_path):
        path = tmp_path / "z.bin"
        path.write_bytes(struct.pack("<8sIII", CUBE_MAGIC, 0, 2, 2))
        with pytest.raises(CubeFormatError):
            load_cube(path)

    def test_non_finite(self, tmp_path):
        path = tmp_path / "nan.bin"
        path.write_bytes(struct.pack("<8sIII", CUBE_MAGIC, 1, 1, 2) + np.array([1.0, np.nan]).tobytes())
        with pytest.raises(CubeFormatError):
            load_cube(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CubeFormatError):
            load_cube(tmp_path / "nope.bin")

    def test_jasper_sized_cube(self, tmp_path):
        values = np.random.default_rng(2).uniform(size=(100, 100, 198))
        save_cube(tmp_path / "jasper.bin", values)
        cube = load_cube(tmp_path / "jasper.bin")
        assert (cube.height, cube.width, cube.bands) == (100, 100, 198)

    def test_text_cube(self, tmp_path):
        values = np.arange(24, dtype=float).reshape(6, 4)
        np.savetxt(tmp_path / "c.txt", values)
        cube = load_cube(tmp_path / "c.txt", shape=(2, 3))
        np.testing.assert_array_equal(cube.values.reshape(6, 4), values)
        with pytest.raises(CubeFormatError):
            load_cube(tmp_path / "c.txt", shape=(4, 4))

    def test_matrix_round_trip(self, tmp_path):
        m = np.random.default_rng(3).uniform(size=(7, 3))
        save_matrix(tmp_path / "m.txt", m)
        assert load_matrix(tmp_path / "m.txt").tobytes() == m.tobytes()


class TestWindows:
    def test_k1_is_the_pixel(self, small_cube):
        for i in range(small_cube.height):
            for j in range(small_cube.width):
                w = extract_window(small_cube, i, j, 1)
                np.testing.assert_array_equal(w.pixels, small_cube.values[i, j][None])

    def test_interior_matches_direct_indexing(self, small_cube):
        w = extract_window(small_cube, 2, 3, 3)
        for p in range(3):
            for q in range(3):
                np.testing.assert_array_equal(w.pixels[p * 3 + q], small_cube.values[2 + p - 1, 3 + q - 1])
        np.testing.assert_array_equal(w.pixels[4], small_cube.values[2, 3])

    def test_corner_reflects_without_repeating_edge(self, small_cube):
        w = extract_window(small_cube, 0, 0, 3, "reflect")
        np.testing.assert_array_equal(w.pixels[0], small_cube.values[1, 1])

    def test_reflect_matches_numpy_pad(self, small_cube):
        k = 5
        padded = np.pad(small_cube.values, ((2, 2), (2, 2), (0, 0)), mode="reflect")
        for i in range(small_cube.height):
            for j in range(small_cube.width):
                expected = padded[i:i + k, j:j + k].reshape(k * k, -1)
                np.testing.assert_array_equal(extract_window(small_cube, i, j, k).pixels, expected)

    def test_edge_and_zero_padding(self, small_cube):
        assert np.all(extract_window(small_cube, 0, 0, 3, "zero").pixels[0] == 0)
        np.testing.assert_array_equal(extract_window(small_cube, 0, 0, 3, "edge").pixels[0],
                                      small_cube.values[0, 0])

    def test_even_window(self, small_cube):
        with pytest.raises(UsageError):
            extract_window(small_cube, 0, 0, 2)

    def test_outside_pixel(self, small_cube):
        with pytest.raises(UsageError):
            extract_window(small_cube, 5, 0, 3)


class TestBatches:
    def test_tiny_cube_single_batch(self):
        cube = HsiCube(np.ones((2, 2, 3)))
        batches = list(make_batches(cube, BatchPlan(0, 128), 3))
        assert len(batches) == 1 and batches[0].windows.shape == (4, 9, 3)

    def test_deterministic(self, small_cube):
        a = [b.index for b in make_batches(small_cube, BatchPlan(7, 4), 3)]
        b = [b.index for b in make_batches(small_cube, BatchPlan(7, 4), 3)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_count_for_100x100(self):
        assert n_batches(100 * 100, 128) == 79 == math.ceil(10000 / 128)
        cube = HsiCube(np.zeros((100, 100, 2)) + 1.0)
        sizes = [b.index.size for b in make_batches(cube, BatchPlan(0, 128), 1)]
        assert len(sizes) == 79 and sizes[:-1] == [128] * 78 and sizes[-1] == 16

    @pytest.mark.parametrize("epoch", [0, 1, 5])
    def test_epoch_visits_every_pixel_once(self, small_cube, epoch):
        seen = np.concatenate([b.index for b in make_batches(small_cube, BatchPlan(3, 7), 3, epoch=epoch)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(small_cube.n_pixels))

    def test_epochs_shuffle_differently(self, small_cube):
        plan = BatchPlan(3, 100)
        assert not np.array_equal(plan.order(30, 0), plan.order(30, 1))


class TestSynthetic:
    def test_noiseless_lies_in_convex_hull(self):
        cube, gt = generate_synthetic(3, 20, 16, 16, math.inf, seed=4)
        ab = gt.abundances.reshape(-1, 3)
        assert np.all(ab >= 0)
        np.testing.assert_allclose(ab.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(cube.pixels(), ab @ gt.endmembers.T, atol=0, rtol=0)

    def test_snr_30db(self):
        clean, _ = generate_synthetic(4, 100, 64, 64, math.inf, seed=0)
        noisy, _ = generate_synthetic(4, 100, 64, 64, 30.0, seed=0)
        assert 29.9 <= measured_snr(clean.values, noisy.values) <= 30.1

    def test_same_seed_bit_identical(self):
        a, _ = generate_synthetic(4, 30, 12, 12, 30.0, seed=9)
        b, _ = generate_synthetic(4, 30, 12, 12, 30.0, seed=9)
        assert a.values.tobytes() == b.values.tobytes()

    def test_no_pure_pixels_and_positive_endmembers(self):
        _, gt = generate_synthetic(4, 50, 32, 32, 30.0, seed=1)
        assert gt.abundances.max() <= 0.8 + 1e-12
        assert np.all(gt.endmembers > 0)

    @pytest.mark.parametrize("dims", [(1, 10, 4, 4), (5, 5, 4, 4), (3, 10, 0, 4)])
    def test_invalid_dims(self, dims):
        with pytest.raises(UsageError):
            generate_synthetic(*dims)


def test_pgm_pure_pixel_is_white(tmp_path):
    img = np.array([[0.0, 1.0], [0.5, 1.2]])
    write_pgm(tmp_path / "m.pgm", img)
    back = read_pgm(tmp_path / "m.pgm")
    np.testing.assert_array_equal(back, [[0, 255], [128, 255]])
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")
