import numpy as np
import pytest

from onenet.imagery import (GridError, bicubic_upsample, box_downsample, clamp_image,
                            extract_patches, make_grid, nearest_upsample, psnr,
                            stitch_patches)
from onenet.linops import box_downsample_op
from onenet.tensor import DimensionError, RngStream


def rand_image(h, w, c=1, seed=0):
    return RngStream(seed).uniform(-1.0, 1.0, (h, w, c))


def test_psnr_identical_is_inf():
    img = rand_image(8, 8)
    assert psnr(img, img) == float("inf")


def test_psnr_constant_offset():
    a = np.zeros((4, 4, 1))
    b = a + 0.2  # 0.1 on the [0, 1] scale
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-10)


def test_psnr_against_direct_formula():
    a, b = rand_image(9, 7, seed=1), rand_image(9, 7, seed=2)
    ua, ub = (a + 1) / 2, (b + 1) / 2
    mse = sum((p - q) ** 2 for p, q in zip(ua.ravel(), ub.ravel())) / ua.size
    expected = 10 * np.log10(1 / mse)
    assert abs(psnr(a, b) - expected) / expected < 1e-10
    assert psnr(a, b) == psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_patch_grid_counts():
    _, grid = extract_patches(rand_image(128, 128), 64)
    assert (grid.rows, grid.cols) == (2, 2)
    patches, grid = extract_patches(rand_image(64, 64), 64)
    assert len(patches) == 1
    _, grid = extract_patches(rand_image(100, 100), 64)
    assert grid.row_origins == (0, 36) and grid.col_origins == (0, 36)


def test_patch_grid_covers_every_pixel():
    for h, w, s in [(100, 100, 64), (70, 130, 32), (28, 28, 28), (45, 17, 16)]:
        grid = make_grid(h, w, s)
        hits = np.zeros((h, w), dtype=int)
        for r, c in grid.origins():
            hits[r:r + s, c:c + s] += 1
        assert hits.min() >= 1


def test_patch_too_large():
    with pytest.raises(DimensionError):
        extract_patches(rand_image(32, 32), 64)


@pytest.mark.parametrize("size,patch", [(128, 64), (64, 64), (100, 64)])
def test_extract_stitch_roundtrip(size, patch):
    img = rand_image(size, size, seed=size)
    patches, grid = extract_patches(img, patch)
    assert np.array_equal(stitch_patches(patches, grid), img)


def test_stitch_last_writer_wins():
    img = np.zeros((6, 6, 1))
    patches, grid = extract_patches(img, 4)
    patches = [p + i + 1 for i, p in enumerate(patches)]
    out = stitch_patches(patches, grid)
    assert out[3, 3, 0] == 4  # covered by all four patches, last one wins
    assert out[0, 0, 0] == 1


def test_stitch_count_mismatch():
    patches, grid = extract_patches(rand_image(8, 8), 4)
    with pytest.raises(GridError):
        stitch_patches(patches[:-1], grid)


def test_box_downsample():
    img = np.array([[1.0, 3.0], [5.0, 7.0]])
    assert box_downsample(img, 2).tolist() == [[4.0]]
    const = np.full((6, 6, 1), 0.3)
    np.testing.assert_allclose(box_downsample(const, 3), 0.3, atol=1e-15)
    with pytest.raises(DimensionError):
        box_downsample(np.zeros((5, 4)), 2)


def test_box_downsample_matches_operator_matrix():
    op = box_downsample_op(8, 8, 1, 2)
    mat = op.to_dense()
    img = rand_image(8, 8, seed=4)
    np.testing.assert_allclose(mat @ img.ravel(), box_downsample(img, 2).ravel(), atol=1e-15)
    eye = np.eye(op.out_dim)
    adj = np.stack([op.adjoint(e) for e in eye], axis=1)
    np.testing.assert_allclose(adj, mat.T, atol=1e-15)


def test_nearest_upsample():
    assert nearest_upsample(np.array([[4.0]]), 2).tolist() == [[4.0, 4.0], [4.0, 4.0]]
    img = rand_image(5, 3)
    assert np.array_equal(nearest_upsample(img, 1), img)
    np.testing.assert_allclose(box_downsample(nearest_upsample(img, 3), 3), img, atol=1e-15)


def test_downsample_upsample_preserves_block_means():
    img = rand_image(12, 12, seed=9)
    up = nearest_upsample(box_downsample(img, 3), 3)
    np.testing.assert_allclose(box_downsample(up, 3), box_downsample(img, 3), atol=1e-15)


def test_bicubic_constant_and_identity():
    const = np.full((5, 7, 1), -0.4)
    out = bicubic_upsample(const, 23, 19)
    np.testing.assert_allclose(out, -0.4, atol=1e-14)
    img = rand_image(6, 6)
    assert np.array_equal(bicubic_upsample(img, 6, 6), img)


def test_bicubic_reproduces_ramp_in_interior():
    n = 16
    ramp = np.tile(np.arange(n, dtype=float), (n, 1)) * 0.1
    out = bicubic_upsample(ramp, 2 * n, 2 * n)
    # output pixel j samples input coordinate (j + 0.5) / 2 - 0.5
    coords = (np.arange(2 * n) + 0.5) / 2 - 0.5
    expected = np.tile(coords * 0.1, (2 * n, 1))
    interior = slice(4, 2 * n - 4)
    assert np.max(np.abs(out[interior, interior] - expected[interior, interior])) < 1e-6


def test_bicubic_refuses_to_shrink():
    with pytest.raises(DimensionError):
        bicubic_upsample(np.zeros((8, 8)), 4, 8)


def test_clamp():
    out = clamp_image(np.array([1.5, -2.0, 0.3]))
    assert out.tolist() == [1.0, -1.0, 0.3]
    img = rand_image(4, 4)
    assert np.array_equal(clamp_image(img), img)
