"""
Finite-difference gradient suites run by ``run_tafe.py gradcheck``.

ops     every differentiable operation on small random inputs
blocks  AFE, encoder, stage and head compositions
model   the full network (32x32, d=8, M=1) on sampled coordinates
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from config.settings import FD_STEP, GRADCHECK_COORDS, GRADCHECK_TOL
from models.grad_report import GradReport
from models.tafe_config import TafeConfig
from tafe import afe
from tafe import autodiff as ad
from tafe.autodiff import ForwardFn, Graph, ParamScope, Var
from tafe.encoder import block_shapes, encoder_block, mhsa
from tafe.errors import UsageError
from tafe.mia import TafeModel, forward, loss_ce, param_shapes, segmentation_head, stage_interact
from tafe.pyramid import (
    FeaturePyramid, TokenSequence, flatten_pyramid, image_geometry, make_geometry, unflatten_tokens
)
from utils.logger import RunLogger

SCOPES = ("ops", "blocks", "model")


@dataclass
class GradCase:
    name: str
    forward: ForwardFn
    params: Dict[str, np.ndarray]
    coords_per_param: Optional[int] = None


def _projected(out: Var, seed: int) -> Var:
    """sum(out * R) for a fixed random R, so every output element carries weight."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.total(ad.mul(out, out.graph.constant(r)))


def _case(name: str, params: Dict[str, np.ndarray], body: Callable, coords: Optional[int] = None) -> GradCase:
    seed = len(name)

    def run(graph: Graph, p: Dict[str, Var]) -> Var:
        return _projected(body(graph, p), seed)

    return GradCase(name, run, params, coords)


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with |x| >= 0.1, keeping ReLU kinks outside the difference step."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _faulty_square(x: Var) -> Var:
    # backward drops the factor 2
    xv = x.value
    return x.graph.record("faulty_square", (x,), xv * xv, lambda g: (g * xv,))


def _pyramid_arrays(rng: np.random.Generator, n: int, d: int, sizes) -> List[np.ndarray]:
    return [rng.standard_normal((n, d, h, w)) for h, w in sizes]


def _named(prefix: str, shapes, rng: np.random.Generator, std: float = 0.3) -> Dict[str, np.ndarray]:
    params = {}
    for name, shape in shapes:
        if name.endswith(".gamma"):
            params[f"{prefix}.{name}"] = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            params[f"{prefix}.{name}"] = std * rng.standard_normal(shape)
    return params


def op_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    normal = rng.standard_normal
    geometry_sizes = [(4, 3), (2, 2), (1, 2), (1, 1)]
    geometry = make_geometry(geometry_sizes)
    tokens_t = sum(h * w for h, w in geometry_sizes)

    cases = [
        _case("add", {"a": normal((2, 3, 4, 4)), "b": normal((2, 3, 4, 4))},
              lambda g, p: ad.add(p["a"], p["b"])),
        _case("add_broadcast", {"x": normal((2, 3, 4, 4)), "y": normal((1, 3, 1, 1))},
              lambda g, p: ad.add_broadcast(p["x"], p["y"])),
        _case("mul", {"a": normal((2, 3, 4, 4)), "b": normal((2, 3, 4, 4))},
              lambda g, p: ad.mul(p["a"], p["b"])),
        _case("scale", {"x": normal((1, 2, 3, 3))},
              lambda g, p: ad.scale(p["x"], 0.37)),
        _case("relu", {"x": _away_from_zero(rng, (2, 3, 4, 4))},
              lambda g, p: ad.relu(p["x"])),
        _case("gelu", {"x": 2.0 * normal((2, 3, 4, 4))},
              lambda g, p: ad.gelu(p["x"])),
        _case("conv2d_3x3", {"x": normal((2, 3, 6, 6)), "w": normal((4, 3, 3, 3)), "b": normal((4,))},
              lambda g, p: ad.conv2d(p["x"], p["w"], p["b"])),
        _case("conv2d_row_strip", {"x": normal((1, 2, 5, 7)), "w": normal((3, 2, 1, 5))},
              lambda g, p: ad.conv2d(p["x"], p["w"])),
        _case("conv2d_col_strip", {"x": normal((1, 2, 7, 5)), "w": normal((3, 2, 7, 1))},
              lambda g, p: ad.conv2d(p["x"], p["w"])),
        _case("conv2d_stride2", {"x": normal((2, 2, 8, 8)), "w": normal((3, 2, 3, 3)), "b": normal((3,))},
              lambda g, p: ad.conv2d(p["x"], p["w"], p["b"], stride=2)),
        _case("conv2d_valid", {"x": normal((1, 2, 6, 5)), "w": normal((2, 2, 3, 3))},
              lambda g, p: ad.conv2d(p["x"], p["w"], padding="valid")),
        _case("einsum_linear", {"x": normal((2, 5, 4)), "w": normal((4, 6))},
              lambda g, p: ad.einsum("ntd,de->nte", p["x"], p["w"])),
        _case("einsum_scores", {"q": normal((1, 5, 2, 3)), "k": normal((1, 5, 2, 3))},
              lambda g, p: ad.einsum("nqhc,nkhc->nhqk", p["q"], p["k"])),
        _case("reshape_transpose", {"x": normal((2, 3, 4, 1))},
              lambda g, p: ad.reshape(ad.transpose(p["x"], (0, 2, 1, 3)), (2, 4, 3))),
        _case("softmax_rows", {"x": normal((2, 3, 5))},
              lambda g, p: ad.softmax_rows(p["x"])),
        _case("layernorm", {"x": normal((2, 5, 6)), "gamma": 1.0 + 0.1 * normal(6), "beta": normal(6)},
              lambda g, p: ad.layernorm(p["x"], p["gamma"], p["beta"], 1e-6)),
        _case("upsample_bilinear", {"x": normal((1, 2, 3, 4))},
              lambda g, p: ad.upsample_bilinear(p["x"], 6, 8)),
        _case("flatten",
              {f"c{l}": x for l, x in enumerate(_pyramid_arrays(rng, 2, 3, geometry_sizes), start=1)},
              lambda g, p: flatten_pyramid(FeaturePyramid([p[f"c{l}"] for l in range(1, 5)])).tokens),
        _case("unflatten", {"tokens": normal((2, 3, tokens_t, 1))},
              lambda g, p: flatten_pyramid(unflatten_tokens(TokenSequence(p["tokens"], geometry))).tokens),
    ]

    mask = rng.integers(0, 4, size=(2, 1, 3, 3))
    cases.append(GradCase(
        "cross_entropy",
        lambda g, p: loss_ce(p["logits"], mask),
        {"logits": normal((2, 4, 3, 3))},
    ))
    return cases


def block_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    cases = []

    d, kernels = 3, (3, 5, 7)
    c_l = rng.standard_normal((1, d, 7, 6))
    layer = _named("layer", afe.layer_shapes(d, kernels, True), rng)
    layer_split = _named("layer", afe.layer_shapes(d, kernels, False), rng)

    def with_input(params):
        return {"c": c_l, **params}

    cases.append(_case(
        "afe_aggregate",
        with_input({k: v for k, v in layer.items() if k.startswith("layer.aggregate.")}),
        lambda g, p: afe.aggregate(p["c"], ParamScope(p, "layer")),
    ))
    for topology in afe.TOPOLOGIES:
        cases.append(_case(
            f"afe_{topology}_block",
            with_input(layer),
            lambda g, p, t=topology: afe.enhance_block(p["c"], ParamScope(p, "layer"), t),
        ))
    cases.append(_case(
        "afe_layer_unshared",
        with_input(layer_split),
        lambda g, p: afe.enhance_layer(p["c"], ParamScope(p, "layer")),
    ))

    sizes = [(4, 4), (2, 2), (1, 1), (1, 1)]
    pyramid = {f"c{l}": x for l, x in enumerate(_pyramid_arrays(rng, 1, 2, sizes), start=1)}
    afe_params = {}
    for l in range(1, 5):
        afe_params.update(_named(f"afe.layer{l}", afe.layer_shapes(2, kernels, True), rng))
    cases.append(_case(
        "afe_forward",
        {**pyramid, **afe_params},
        lambda g, p: flatten_pyramid(
            afe.afe_forward(FeaturePyramid([p[f"c{l}"] for l in range(1, 5)]), ParamScope(p, "afe"))
        ).tokens,
    ))

    d, heads = 4, 2
    geometry = make_geometry([(2, 2), (1, 2), (1, 1), (1, 1)])
    tokens = rng.standard_normal((2, d, 8, 1))
    block = _named("enc", block_shapes(d), rng)
    attn_only = {k: v for k, v in block.items() if k.startswith(("enc.ln1", "enc.attn"))}
    cases.append(_case(
        "mhsa",
        {"tokens": tokens, **attn_only},
        lambda g, p: mhsa(TokenSequence(p["tokens"], geometry), ParamScope(p, "enc"), heads).tokens,
    ))
    cases.append(_case(
        "encoder_block",
        {"tokens": tokens, **block},
        lambda g, p: encoder_block(TokenSequence(p["tokens"], geometry), ParamScope(p, "enc"), heads).tokens,
    ))

    config = TafeConfig(d=4, heads=2, stages=1, height=32, width=32, strip_kernels=(3, 5))
    stage_geometry = image_geometry(32, 32)
    f_in = rng.standard_normal((1, 4, sum(g.area for g in stage_geometry), 1))
    p_in = [rng.standard_normal((1, 4, g.h, g.w)) for g in stage_geometry]
    stage = {
        name: (1.0 + 0.1 * rng.standard_normal(shape) if name.endswith(".gamma") else 0.3 * rng.standard_normal(shape))
        for name, shape in param_shapes(config) if name.startswith("stage0.")
    }

    def stage_body(g, p):
        f_out, p_out = stage_interact(
            TokenSequence(g.constant(f_in), stage_geometry),
            FeaturePyramid([g.constant(x) for x in p_in]),
            ParamScope(p, "stage0"),
            config,
        )
        return ad.add(f_out.tokens, flatten_pyramid(p_out).tokens)

    cases.append(_case("stage_interact", stage, stage_body, coords=GRADCHECK_COORDS))

    head = {"head.weight": rng.standard_normal((4, 2, 1, 1)), "head.bias": rng.standard_normal(4)}
    head_pyramid = [rng.standard_normal((1, 2, h, w)) for h, w in [(4, 4), (2, 2), (1, 1), (1, 1)]]
    cases.append(_case(
        "segmentation_head",
        head,
        lambda g, p: segmentation_head(
            FeaturePyramid([g.constant(x) for x in head_pyramid]), ParamScope(p, "head"), 16, 16
        ),
    ))
    return cases


def model_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    config = TafeConfig(
        d=8, stages=1, heads=2, height=32, width=32, seed=seed, init_std=0.1, init_scheme="normal"
    )
    model = TafeModel.initialize(config)
    image = rng.uniform(0.0, 1.0, size=(1, 3, 32, 32))
    mask = rng.integers(0, config.classes, size=(1, 1, 32, 32))

    def run(graph: Graph, p: Dict[str, Var]) -> Var:
        return loss_ce(forward(graph.constant(image), ParamScope(p), config), mask)

    return [GradCase("model_32x32_d8_m1", run, model.params, GRADCHECK_COORDS)]


def fault_case(seed: int = 0) -> GradCase:
    x = np.random.default_rng(seed).uniform(0.5, 1.5, size=(1, 2, 3, 3))
    return _case("injected_fault", {"x": x}, lambda g, p: _faulty_square(p["x"]))


class GradCheckSuite:

    def __init__(self, logger: RunLogger, tol: float = GRADCHECK_TOL, h: float = FD_STEP, seed: int = 0):
        self.logger = logger
        self.tol = tol
        self.h = h
        self.seed = seed

    def cases(self, scope: str, inject_fault: bool = False) -> List[GradCase]:
        builders = {"ops": op_cases, "blocks": block_cases, "model": model_cases}
        if scope not in builders:
            raise UsageError(f"scope must be one of {SCOPES}, got {scope!r}")
        cases = builders[scope](self.seed)
        if inject_fault:
            cases.append(fault_case(self.seed))
        return cases

    def check(self, case: GradCase) -> GradReport:
        report = ad.grad_check(
            case.forward, case.params,
            tol=self.tol, h=self.h, name=case.name,
            coords_per_param=case.coords_per_param, seed=self.seed,
        )
        status = "ok" if report.passed else "FAIL"
        self.logger.info(f"{case.name}: max rel err {report.max_rel_err:.3e} [{status}]")
        return report

    def run(self, scope: str, inject_fault: bool = False) -> dict:
        cases = self.cases(scope, inject_fault)
        self.logger.info(f"Running {len(cases)} gradient checks (scope={scope}, h={self.h}, tol={self.tol})")
        reports = [self.check(case) for case in cases]
        failed = [r.name for r in reports if not r.passed]
        if failed:
            self.logger.error(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return {
            "scope": scope,
            "h": self.h,
            "tol": self.tol,
            "checks": [r.to_dict() for r in reports],
            "pass": not failed,
        }
