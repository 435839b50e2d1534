"""
Asymmetric feature enhancement.

Per pyramid layer C_l, a 5x5 aggregation conv (+ReLU) produces C^E. Two
enhancement blocks then build attention maps from three strip-conv branches
with kernel sizes 3, 5 and 7:

    anatomy     S_m = Conv_{k x 1}(Conv_{1 x k}(C^E))         cascaded pair
    instrument  S_m = Conv_{k x 1}(C^E) + Conv_{1 x k}(C^E)   parallel pair

    E = Conv_{1x1}(sum_m S_m + C^E) * C^E

and the layer output is the sum of the enabled blocks' maps.

Parameter names under a layer scope:
    aggregate.{weight,bias}                 shared aggregation
    <block>.aggregate.{weight,bias}         per-block aggregation (unshared)
    <block>.branch<m>.row.weight            (d, d, 1, k_m), bias-free
    <block>.branch<m>.col.weight            (d, d, k_m, 1), bias-free
    <block>.fuse.{weight,bias}              1x1 conv
"""
from typing import List, Sequence, Tuple

from config.settings import AGGREGATE_KERNEL, STRIP_KERNELS
from tafe import autodiff as ad
from tafe.autodiff import ParamScope, Var
from tafe.errors import ConfigError
from tafe.pyramid import FeaturePyramid

ANATOMY = "anatomy"
INSTRUMENT = "instrument"
TOPOLOGIES = (ANATOMY, INSTRUMENT)
BLOCK_CHOICES = {"both": TOPOLOGIES, ANATOMY: (ANATOMY,), INSTRUMENT: (INSTRUMENT,)}


def resolve_blocks(afe_blocks: str) -> Tuple[str, ...]:
    if afe_blocks not in BLOCK_CHOICES:
        raise ConfigError(f"afe_blocks must be one of {sorted(BLOCK_CHOICES)}, got {afe_blocks!r}")
    return BLOCK_CHOICES[afe_blocks]


def layer_shapes(
    d: int,
    kernels: Sequence[int] = STRIP_KERNELS,
    share_aggregation: bool = True,
    blocks: Sequence[str] = TOPOLOGIES
) -> List[Tuple[str, Tuple[int, ...]]]:
    agg = ("weight", (d, d, AGGREGATE_KERNEL, AGGREGATE_KERNEL)), ("bias", (d,))
    shapes = []
    if share_aggregation:
        shapes += [(f"aggregate.{n}", s) for n, s in agg]
    for block in blocks:
        if not share_aggregation:
            shapes += [(f"{block}.aggregate.{n}", s) for n, s in agg]
        for m, k in enumerate(kernels):
            shapes.append((f"{block}.branch{m}.row.weight", (d, d, 1, k)))
            shapes.append((f"{block}.branch{m}.col.weight", (d, d, k, 1)))
        shapes += [(f"{block}.fuse.weight", (d, d, 1, 1)), (f"{block}.fuse.bias", (d,))]
    return shapes


def aggregate(c_l: Var, params: ParamScope) -> Var:
    """Structural aggregation: same-padded 5x5 conv followed by ReLU."""
    return ad.relu(ad.conv2d(c_l, params["aggregate.weight"], params["aggregate.bias"]))


def anatomy_branch(c_agg: Var, params: ParamScope, m: int) -> Var:
    branch = params.child(f"branch{m}")
    row = ad.conv2d(c_agg, branch["row.weight"])
    return ad.conv2d(row, branch["col.weight"])


def instrument_branch(c_agg: Var, params: ParamScope, m: int) -> Var:
    branch = params.child(f"branch{m}")
    return ad.add(
        ad.conv2d(c_agg, branch["col.weight"]),
        ad.conv2d(c_agg, branch["row.weight"]),
    )


_BRANCHES = {ANATOMY: anatomy_branch, INSTRUMENT: instrument_branch}


def branch_count(params: ParamScope) -> int:
    m = 0
    while f"branch{m}.row.weight" in params:
        m += 1
    if m == 0:
        raise ConfigError(f"no strip branches under {params.prefix!r}")
    return m


def attention_map(c_agg: Var, params: ParamScope, topology: str) -> Var:
    """E = Conv1x1(sum of branches + shortcut), gated elementwise by the aggregated map."""
    if topology not in _BRANCHES:
        raise ConfigError(f"unknown enhancement topology {topology!r}")
    branch = _BRANCHES[topology]
    acc = c_agg
    for m in range(branch_count(params)):
        acc = ad.add(acc, branch(c_agg, params, m))
    fused = ad.conv2d(acc, params["fuse.weight"], params["fuse.bias"])
    return ad.mul(fused, c_agg)


def _aggregation_scope(layer: ParamScope, topology: str) -> ParamScope:
    block = layer.child(topology)
    return block if "aggregate.weight" in block else layer


def enhance_block(c_l: Var, layer: ParamScope, topology: str) -> Var:
    c_agg = aggregate(c_l, _aggregation_scope(layer, topology))
    return attention_map(c_agg, layer.child(topology), topology)


def enhance_layer(c_l: Var, layer: ParamScope, blocks: Sequence[str] = TOPOLOGIES) -> Var:
    if not blocks:
        raise ConfigError("at least one enhancement block is required")
    shared = aggregate(c_l, layer) if "aggregate.weight" in layer else None
    out = None
    for topology in blocks:
        if shared is None:
            e = enhance_block(c_l, layer, topology)
        else:
            e = attention_map(shared, layer.child(topology), topology)
        out = e if out is None else ad.add(out, e)
    return out


def afe_forward(pyramid: FeaturePyramid, params: ParamScope, blocks: Sequence[str] = TOPOLOGIES) -> FeaturePyramid:
    return FeaturePyramid([
        enhance_layer(c_l, params.child(f"layer{l}"), blocks)
        for l, c_l in enumerate(pyramid.layers, start=1)
    ])
