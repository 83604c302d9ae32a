import itertools

import numpy as np
import pytest

from silcarve import model
from silcarve.autodiff import Tensor, backward, bce_loss
from silcarve.blobs import View
from silcarve.training import init_params

from .oracles import fd_check_masked, max_rel_err

rng = np.random.default_rng(8)


def tiny_params(h=8, d=9, f=16, pooling="max", seed=0):
    hp = model.Hyperparams(
        image_size=h, feature_dim=f, voxel_size=d, pooling=pooling,
        enc_channels=model.default_enc_channels(h),
    )
    return init_params(hp, np.random.default_rng(seed))


def random_views(n, h, seed=0):
    local = np.random.default_rng(seed)
    return [View(image=local.random((h, h)), theta=float(local.uniform(0, 120)))
            for _ in range(n)]


# ---------------------------------------------------------------------------
# shapes and wiring

def test_param_specs_default_architecture():
    hp = model.Hyperparams()
    specs = {name: shape for name, shape, _ in model.param_specs(hp)}
    assert specs["enc.conv1.w"] == (8, 1, 4, 4)
    assert specs["enc.conv3.w"] == (32, 16 + 16, 4, 4)  # angle joins after conv 2
    assert specs["enc.fc.w"] == (64 * 2 * 2, 128)
    assert specs["dec2d.fc.w"] == (128 + 2, 64 * 4 * 4)
    assert specs["dec2d.out.w"] == (1, 8, 3, 3)  # channels 64->32->16->8 over 3 ups
    assert specs["dec3d.fc.w"] == (128, 32 * 27)
    assert specs["dec3d.up3.w"] == (8, 1, 3, 3, 3)


def test_param_count_independent_of_views():
    # towers share weights, so the parameter list never depends on view count
    hp = model.Hyperparams()
    n = sum(int(np.prod(s)) for _, s, _ in model.param_specs(hp))
    assert n == sum(
        int(np.prod(t.data.shape)) for t in init_params(hp, rng).tensors.values()
    )


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        model.Hyperparams(pooling="sum")
    with pytest.raises(ValueError):
        model.Hyperparams(image_size=30)  # 30 -> 15, cannot halve to a small map
    with pytest.raises(ValueError):
        model.Hyperparams(image_size=32, enc_channels=(8, 16))


def test_encode_is_deterministic_and_angle_sensitive():
    params = tiny_params()
    img = rng.random((8, 8))
    a = model.encode_view(params, View(image=img, theta=0.0))
    b = model.encode_view(params, View(image=img, theta=0.0))
    assert np.array_equal(a.data, b.data)
    c = model.encode_view(params, View(image=img, theta=90.0))
    assert np.max(np.abs(a.data - c.data)) > 0


def test_zero_params_give_zero_feature():
    params = tiny_params()
    for t in params.tensors.values():
        t.data = np.zeros_like(t.data)
    out = model.encode_view(params, View(image=np.zeros((8, 8)), theta=33.0))
    assert np.array_equal(out.data, np.zeros(16))


def test_fuse_contracts():
    params = tiny_params()
    f = Tensor(rng.random(16))
    assert np.array_equal(model.fuse(params, [f]).data, f.data)
    assert np.array_equal(model.fuse(params, [f, f]).data, f.data)  # idempotent max
    with pytest.raises(ValueError):
        model.fuse(params, [])


def test_fuse_all_permutations_bit_identical():
    params = tiny_params()
    feats = [Tensor(rng.random(16)) for _ in range(3)]
    base = model.fuse(params, feats).data
    for perm in itertools.permutations(feats):
        assert np.array_equal(model.fuse(params, list(perm)).data, base)


def test_decode2d_range_and_determinism():
    params = tiny_params()
    t = Tensor(rng.random(16))
    out = model.decode2d(params, t, 45.0)
    assert out.shape == (8, 8)
    assert np.all((out.data > 0) & (out.data < 1))
    again = model.decode2d(params, t, 45.0)
    assert np.array_equal(out.data, again.data)


def test_decode3d_range_and_projection_identity():
    params = tiny_params()
    t = Tensor(rng.random(16))
    grid = model.decode3d(params, t)
    assert grid.shape == (9, 9, 9)
    assert np.all((grid.data > 0) & (grid.data < 1))
    from silcarve.voxel import project_at, project_min

    assert np.array_equal(project_at(grid.data, 0.0), project_min(grid.data))


# ---------------------------------------------------------------------------
# predict contracts

def test_predict_permutation_bit_identical():
    params = tiny_params()
    views = random_views(3, 8, seed=1)
    base = model.predict(params, views, 70.0, "2d").data
    for perm in itertools.permutations(views):
        assert np.array_equal(model.predict(params, list(perm), 70.0, "2d").data, base)


def test_predict_duplication_invariant_under_max():
    params = tiny_params()
    views = random_views(2, 8, seed=2)
    base = model.predict(params, views, 10.0, "2d").data
    assert np.array_equal(model.predict(params, views + [views[0]], 10.0, "2d").data, base)


def test_predict_view_count_is_structural_free():
    params = tiny_params()
    for n in (1, 2, 3, 4):
        out = model.predict(params, random_views(n, 8, seed=n), 30.0, "2d")
        assert out.shape == (8, 8)


def test_predict_rejects_empty_and_bad_mode():
    params = tiny_params()
    with pytest.raises(ValueError):
        model.predict(params, [], 0.0, "2d")
    with pytest.raises(ValueError):
        model.predict(params, random_views(1, 8), 0.0, "flat")


def test_predict_3d_mode_resizes_to_image():
    params = tiny_params(h=8, d=9)
    out = model.predict(params, random_views(2, 8, seed=3), 50.0, "3D")
    assert out.shape == (8, 8)


def test_predict_batch_matches_per_sample():
    params = tiny_params()
    views = random_views(2, 8, seed=4)
    imgs = np.stack([v.image for v in views])[None, :, None]
    thetas = np.array([[v.theta for v in views]])
    batched = model.predict_batch(params, imgs, thetas, [25.0], "2d").data[0]
    single = model.predict(params, views, 25.0, "2d").data
    assert max_rel_err(batched, single) < 1e-12


# ---------------------------------------------------------------------------
# decoder gradients w.r.t. the fused feature (single precision contract)

def _f32_params(params):
    for t in params.tensors.values():
        t.data = t.data.astype(np.float32)
    return params


def test_decode2d_gradient_wrt_feature():
    params = _f32_params(tiny_params())
    t0 = rng.random(16).astype(np.float32)
    target = (rng.random((8, 8)) > 0.5).astype(np.float32)

    def f(x):
        return bce_loss(model.decode2d(params, Tensor(x.astype(np.float32)), 30.0), target).item()

    t = Tensor(t0.copy(), requires_grad=True)
    backward(bce_loss(model.decode2d(params, t, 30.0), target))
    worst, checked, excluded = fd_check_masked(f, t0.astype(np.float64), t.grad, eps=1e-3)
    assert checked >= 12  # a few relu kinks may be excluded
    assert worst < 1e-3


def test_decode3d_projection_gradient_wrt_feature():
    params = _f32_params(tiny_params())
    t0 = rng.random(16).astype(np.float32)
    target = (rng.random((8, 8)) > 0.5).astype(np.float32)
    from silcarve.voxel import project_at
    from silcarve.autodiff import resize_nn

    def head(x):
        grid = model.decode3d_batch(params, reshape_feature(x))
        img = project_at(grid, np.array([40.0]))
        return resize_nn(img, (8, 8))

    def reshape_feature(x):
        from silcarve.autodiff import reshape

        return reshape(x, (1, 16))

    def f(x):
        return bce_loss(head(Tensor(x.astype(np.float32))), target[None]).item()

    t = Tensor(t0.copy(), requires_grad=True)
    backward(bce_loss(head(t), target[None]))
    worst, checked, excluded = fd_check_masked(f, t0.astype(np.float64), t.grad, eps=1e-3)
    assert checked >= 10  # min-projection ties and relu kinks may be excluded
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = tiny_params(seed=5)
    mean = rng.random((8, 8))
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    model.save_checkpoint(p1, params, mean, {"mode": "2d", "n_views": 2})
    ck = model.load_checkpoint(p1)
    model.save_checkpoint(p2, ck.params, ck.mean_image, ck.meta)
    assert p1.read_bytes() == p2.read_bytes()
    assert ck.meta == {"mode": "2d", "n_views": 2}
    assert ck.params.hp == params.hp


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        model.load_checkpoint(path)


def test_checkpoint_loaded_params_predict_identically(tmp_path):
    params = tiny_params(seed=6)
    views = random_views(2, 8, seed=7)
    path = tmp_path / "m.ckpt"
    model.save_checkpoint(path, params, np.zeros((8, 8)), {})
    loaded = model.load_checkpoint(path).params
    # float32 storage quantizes, so predictions agree to f32 resolution
    a = model.predict(params, views, 15.0, "2d").data
    b = model.predict(loaded, views, 15.0, "2d").data
    assert max_rel_err(a, b) < 1e-6


# ---------------------------------------------------------------------------
# angle encoding

def test_angle_encoding_unit_norm():
    for theta in np.linspace(-400, 400, 37):
        enc = model.angle_encoding(theta)
        assert abs(enc @ enc - 1.0) < 1e-9


def test_angle_encoding_wraparound_distance():
    d_wrap = np.linalg.norm(model.angle_encoding(359.0) - model.angle_encoding(0.0))
    d_far = np.linalg.norm(model.angle_encoding(359.0) - model.angle_encoding(180.0))
    assert d_wrap < d_far
