import numpy as np
import pytest

from tafe import afe
from tafe.autodiff import Graph, ParamScope
from tafe.errors import ConfigError
from tafe.pyramid import FeaturePyramid
from tafe.tensor import conv2d_raw


def layer_params(rng, d, std=0.2, **kwargs):
    return {name: std * rng.standard_normal(shape) for name, shape in afe.layer_shapes(d, **kwargs)}


def bind(params, *inputs):
    graph = Graph()
    scope = ParamScope(graph.bind(params))
    return scope, [graph.constant(x) for x in inputs]


def delta(d, k):
    w = np.zeros((d, d, k, k))
    for c in range(d):
        w[c, c, k // 2, k // 2] = 1.0
    return w


def anisotropy_params():
    """d=1: delta aggregation, all-ones strips, identity fuse, zero biases."""
    params = {}
    for name, shape in afe.layer_shapes(1):
        if name == "aggregate.weight":
            params[name] = delta(1, shape[-1])
        elif name.endswith(".fuse.weight") or ".branch" in name:
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def block_response(image, topology):
    scope, (x,) = bind(anisotropy_params(), image)
    return afe.enhance_block(x, scope, topology).value


def test_zero_input_and_biases_give_zero_attention(rng):
    params = layer_params(rng, 3)
    params = {k: (np.zeros_like(v) if k.endswith(".bias") else v) for k, v in params.items()}
    scope, (x,) = bind(params, np.zeros((2, 3, 6, 5)))
    for topology in afe.TOPOLOGIES:
        assert not afe.enhance_block(x, scope, topology).value.any()
    assert not afe.enhance_layer(x, scope).value.any()


def test_delta_aggregation_is_relu(rng):
    params = {"aggregate.weight": delta(2, 5), "aggregate.bias": np.zeros(2)}
    data = rng.standard_normal((1, 2, 7, 7))
    scope, (x,) = bind(params, data)
    np.testing.assert_array_equal(afe.aggregate(x, scope).value, np.maximum(data, 0.0))


def test_delta_strips_reproduce_the_input(rng):
    data = rng.standard_normal((1, 2, 6, 6))
    params = {
        "branch0.row.weight": delta(2, 3)[:, :, 1:2, :],
        "branch0.col.weight": delta(2, 3)[:, :, :, 1:2],
    }
    scope, (x,) = bind(params, data)
    np.testing.assert_array_equal(afe.anatomy_branch(x, scope, 0).value, data)
    np.testing.assert_array_equal(afe.instrument_branch(x, scope, 0).value, 2.0 * data)


def test_cascaded_pair_is_the_outer_product_kernel(rng):
    u = np.array([1.0, 2.0, 1.0])
    v = np.array([1.0, 0.0, -1.0])
    data = rng.standard_normal((1, 1, 9, 8))
    params = {"branch0.row.weight": v.reshape(1, 1, 1, 3), "branch0.col.weight": u.reshape(1, 1, 3, 1)}
    scope, (x,) = bind(params, data)
    dense = conv2d_raw(data, np.outer(u, v).reshape(1, 1, 3, 3))
    assert np.max(np.abs(afe.anatomy_branch(x, scope, 0).value - dense)) < 1e-10


def test_zero_column_kernel_leaves_the_row_conv(rng):
    data = rng.standard_normal((1, 2, 6, 7))
    row = rng.standard_normal((2, 2, 1, 5))
    params = {"branch1.row.weight": row, "branch1.col.weight": np.zeros((2, 2, 5, 1))}
    scope, (x,) = bind(params, data)
    np.testing.assert_array_equal(afe.instrument_branch(x, scope, 1).value, conv2d_raw(data, row))


def test_parallel_pair_is_linear(rng):
    a = rng.standard_normal((1, 3, 8, 8))
    b = rng.standard_normal((1, 3, 8, 8))
    params = {"branch2.row.weight": rng.standard_normal((3, 3, 1, 7)),
              "branch2.col.weight": rng.standard_normal((3, 3, 7, 1))}
    scope, (xa, xb, xab) = bind(params, a, b, a + b)
    lhs = afe.instrument_branch(xab, scope, 2).value
    rhs = afe.instrument_branch(xa, scope, 2).value + afe.instrument_branch(xb, scope, 2).value
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_horizontal_bar_beats_blob_under_row_strip():
    bar = np.zeros((1, 1, 16, 16))
    bar[0, 0, 8, 4:13] = 1.0
    blob = np.zeros((1, 1, 16, 16))
    blob[0, 0, 7:10, 7:10] = 1.0
    assert bar.sum() == blob.sum()

    params = {"branch2.row.weight": np.ones((1, 1, 1, 7)), "branch2.col.weight": np.zeros((1, 1, 7, 1))}
    scope, (xbar, xblob) = bind(params, bar, blob)
    bar_peak = afe.instrument_branch(xbar, scope, 2).value.max()
    blob_peak = afe.instrument_branch(xblob, scope, 2).value.max()
    assert bar_peak == 7.0
    assert blob_peak == 3.0


def test_zero_strips_reduce_attention_to_squared_aggregate(rng):
    d = 3
    params = layer_params(rng, d)
    for name in params:
        if ".branch" in name:
            params[name] = np.zeros_like(params[name])
        elif name.endswith(".fuse.weight"):
            params[name] = delta(d, 1)
        elif name.endswith(".fuse.bias"):
            params[name] = np.zeros(d)
    scope, (x,) = bind(params, rng.standard_normal((2, d, 8, 6)))
    c_agg = afe.aggregate(x, scope).value
    for topology in afe.TOPOLOGIES:
        e = afe.enhance_block(x, scope, topology).value
        assert np.max(np.abs(e - c_agg * c_agg)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_instrument_block_prefers_thin_bars(seed):
    rng = np.random.default_rng(seed)
    image = np.zeros((1, 1, 32, 32))
    row = int(rng.integers(4, 28))
    start = int(rng.integers(2, 8))
    image[0, 0, row, start:start + int(rng.integers(16, 22))] = 1.0

    anatomy = block_response(image, afe.ANATOMY)
    instrument = block_response(image, afe.INSTRUMENT)
    on_bar = image[0, 0] > 0
    # every bar pixel gains exactly one extra tap per branch
    np.testing.assert_allclose((instrument - anatomy)[0, 0][on_bar], 3.0, atol=1e-12)
    assert instrument.mean() > anatomy.mean()


@pytest.mark.parametrize("seed", range(5))
def test_anatomy_block_prefers_filled_disks(seed):
    rng = np.random.default_rng(seed)
    cy, cx = rng.integers(13, 19, size=2)
    radius = float(rng.uniform(6.0, 9.0))
    ys, xs = np.mgrid[0:32, 0:32]
    image = ((ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2).astype(np.float64)[np.newaxis, np.newaxis]

    anatomy = block_response(image, afe.ANATOMY)
    instrument = block_response(image, afe.INSTRUMENT)
    assert anatomy.mean() - instrument.mean() > 0.0


def test_afe_forward_preserves_layer_shapes(rng):
    d = 4
    sizes = [(8, 8), (4, 4), (2, 2), (1, 1)]
    params = {}
    for l in range(1, 5):
        params.update({f"layer{l}.{k}": v for k, v in layer_params(rng, d).items()})
    graph = Graph()
    scope = ParamScope(graph.bind(params))
    pyramid = FeaturePyramid([graph.constant(rng.standard_normal((2, d, h, w))) for h, w in sizes])
    out = afe.afe_forward(pyramid, scope)
    assert out.shapes == pyramid.shapes


def test_zeroed_instrument_block_leaves_the_anatomy_block(rng):
    d = 2
    params = layer_params(rng, d)
    params["instrument.fuse.weight"] = np.zeros_like(params["instrument.fuse.weight"])
    params["instrument.fuse.bias"] = np.zeros(d)
    scope, (x,) = bind(params, rng.standard_normal((1, d, 6, 6)))
    both = afe.enhance_layer(x, scope, afe.resolve_blocks("both"))
    anatomy_only = afe.enhance_layer(x, scope, afe.resolve_blocks("anatomy"))
    np.testing.assert_array_equal(both.value, anatomy_only.value)


def test_unshared_aggregation_with_equal_weights_matches_shared(rng):
    d = 2
    shared = layer_params(rng, d)
    unshared = {k: v for k, v in shared.items() if not k.startswith("aggregate.")}
    for block in afe.TOPOLOGIES:
        unshared[f"{block}.aggregate.weight"] = shared["aggregate.weight"]
        unshared[f"{block}.aggregate.bias"] = shared["aggregate.bias"]
    assert sorted(unshared) == sorted(n for n, _ in afe.layer_shapes(d, share_aggregation=False))

    data = rng.standard_normal((1, d, 7, 5))
    s1, (x1,) = bind(shared, data)
    s2, (x2,) = bind(unshared, data)
    np.testing.assert_array_equal(afe.enhance_layer(x1, s1).value, afe.enhance_layer(x2, s2).value)


def test_branch_kernels_follow_branch_index():
    names = dict(afe.layer_shapes(4))
    assert names["anatomy.branch0.row.weight"] == (4, 4, 1, 3)
    assert names["anatomy.branch1.col.weight"] == (4, 4, 5, 1)
    assert names["instrument.branch2.row.weight"] == (4, 4, 1, 7)
    assert "anatomy.branch2.row.bias" not in names


def test_block_selection_validation():
    assert afe.resolve_blocks("instrument") == (afe.INSTRUMENT,)
    with pytest.raises(ConfigError):
        afe.resolve_blocks("neither")
