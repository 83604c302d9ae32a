import numpy as np
import pytest

from silcarve.autodiff import Tensor, backward, tensor_sum
from silcarve.voxel import (
    carve_hull,
    load_vox,
    project_at,
    project_min,
    rotate_z,
    save_vox,
)

from .oracles import fd_gradient, max_rel_err, project_rotated_loops

rng = np.random.default_rng(42)


def random_binary_grid(d, fill=0.65, seed=None):
    local = rng if seed is None else np.random.default_rng(seed)
    return (local.random((d, d, d)) > fill).astype(np.float64)


@pytest.mark.parametrize("theta", [0.0, 360.0, -360.0])
def test_rotate_identity_is_bit_exact(theta):
    v = rng.random((7, 7, 7))
    assert np.array_equal(rotate_z(v, theta), v)


def test_rotate_90_moves_single_voxel():
    d = 5
    v = np.ones((d, d, d))
    v[4, 1, 3] = 0.0
    out = rotate_z(v, 90.0)
    occupied = np.argwhere(out == 0.0)
    # output (i, j) reads source (4 - j, i): the voxel lands at i=1, j=0
    assert occupied.tolist() == [[1, 0, 3]]


def test_rotate_fills_out_of_bounds_with_empty():
    d = 5
    v = np.zeros((d, d, d))  # fully occupied
    out = rotate_z(v, 45.0)
    assert np.all((out == 0.0) | (out == 1.0))
    assert np.any(out == 1.0)  # corners spin out of the cube


def test_rotate_batched_matches_per_item():
    vs = rng.random((3, 6, 6, 6))
    thetas = np.array([10.0, 85.0, 200.0])
    out = rotate_z(vs, thetas)
    for b in range(3):
        assert np.array_equal(out[b], rotate_z(vs[b], thetas[b]))


def test_project_min_values_and_gradient_routing():
    v = np.ones((3, 3, 3))
    v[1, 2, 0] = 0.2
    v[2, 2, 0] = 0.1
    out = project_min(v)
    assert out[2, 0] == 0.1
    t = Tensor(v, requires_grad=True)
    backward(tensor_sum(project_min(t)))
    # min over the depth axis; first minimum wins the gradient
    assert t.grad[2, 2, 0] == 1.0
    assert t.grad[1, 2, 0] == 0.0
    assert t.grad.sum() == 9.0


@pytest.mark.parametrize("theta", [0.0, 33.7, 90.0, 120.0, 245.5])
def test_project_at_matches_scalar_oracle(theta):
    v = random_binary_grid(9, seed=int(theta * 10))
    assert np.array_equal(project_at(v, theta), project_rotated_loops(v, theta))


def test_project_at_gradient_vs_fd():
    d = 5
    v = rng.uniform(0.2, 1.0, size=(d, d, d))
    w = rng.normal(size=(d, d))
    t = Tensor(v.copy(), requires_grad=True)
    backward(tensor_sum(project_at(t, 33.7) * Tensor(w)))

    def f(x):
        return float((project_at(x, 33.7) * w).sum())

    assert max_rel_err(t.grad, fd_gradient(f, v)) < 1e-6


def test_project_at_batched_matches_per_item():
    vs = rng.uniform(0, 1, size=(2, 7, 7, 7))
    thetas = np.array([15.0, 75.0])
    out = project_at(Tensor(vs), thetas)
    for b in range(2):
        assert np.array_equal(out.data[b], project_at(vs[b], thetas[b]))


# ---------------------------------------------------------------------------
# carving

def test_carve_single_view_identity_roundtrip():
    sil = random_binary_grid(9, seed=3)[:, :, 4]  # any binary image
    hull = carve_hull(sil[None], [0.0])
    assert np.array_equal(project_at(hull, 0.0), sil)


def test_carve_containment_no_commission():
    # hull projection may never claim object where a silhouette saw background
    for seed in range(5):
        local = np.random.default_rng(seed)
        d = 9
        sils = (local.random((3, d, d)) > 0.4).astype(np.float64)
        angles = local.uniform(0, 360, size=3)
        hull = carve_hull(sils, angles)
        for m in range(3):
            proj = project_at(hull, angles[m])
            assert np.all(proj[sils[m] == 1.0] == 1.0)


def test_carve_hull_of_consistent_object_contains_it():
    d = 15
    v = np.ones((d, d, d))
    v[5:10, 6:9, 4:12] = 0.0  # a box
    angles = [0.0, 30.0, 60.0, 90.0, 120.0]
    sils = np.stack([project_at(v, a) for a in angles])
    hull = carve_hull(sils, angles)
    assert np.all(hull[v == 0.0] == 0.0)


def test_carve_hull_rejects_bad_input():
    with pytest.raises(ValueError):
        carve_hull(np.zeros((2, 5, 5)), [0.0])  # count mismatch
    with pytest.raises(ValueError):
        carve_hull(np.zeros((1, 5, 4)), [0.0])  # non-square


# ---------------------------------------------------------------------------
# VOX serialization

def test_vox_roundtrip_exact(tmp_path):
    grid = rng.random((6, 6, 6))
    grid[0, 0, 0] = 1e-300
    grid[0, 0, 1] = 0.1 + 0.2  # 0.30000000000000004
    path = tmp_path / "g.vox"
    save_vox(path, grid)
    assert np.array_equal(load_vox(path), grid)


def test_vox_rejects_garbage(tmp_path):
    path = tmp_path / "bad.vox"
    path.write_text("NOTVOX 3\n0 0 0\n")
    with pytest.raises(ValueError):
        load_vox(path)


def test_vox_rejects_truncated(tmp_path):
    path = tmp_path / "short.vox"
    path.write_text("VOX 3\n0.0 1.0\n")
    with pytest.raises(ValueError):
        load_vox(path)
