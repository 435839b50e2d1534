"""
Plain pre-norm transformer encoder blocks over the multi-scale token sequence.
"""
from typing import List, Tuple

import numpy as np

from config.settings import LN_EPS
from tafe import autodiff as ad
from tafe.autodiff import ParamScope, Var
from tafe.errors import ConfigError, ShapeError
from tafe.pyramid import TokenSequence

FFN_EXPANSION = 4


def block_shapes(d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    hidden = FFN_EXPANSION * d
    shapes = [("ln1.gamma", (d,)), ("ln1.beta", (d,))]
    for proj in ("q", "k", "v", "o"):
        shapes += [(f"attn.{proj}.weight", (d, d)), (f"attn.{proj}.bias", (d,))]
    shapes += [
        ("ln2.gamma", (d,)), ("ln2.beta", (d,)),
        ("ffn.fc1.weight", (d, hidden)), ("ffn.fc1.bias", (hidden,)),
        ("ffn.fc2.weight", (hidden, d)), ("ffn.fc2.bias", (d,)),
    ]
    return shapes


def to_rows(tokens: Var) -> Var:
    """(n, d, T, 1) -> (n, T, d)"""
    n, d, t, _ = tokens.shape
    return ad.reshape(ad.transpose(tokens, (0, 2, 1, 3)), (n, t, d))


def from_rows(rows: Var) -> Var:
    """(n, T, d) -> (n, d, T, 1)"""
    n, t, d = rows.shape
    return ad.transpose(ad.reshape(rows, (n, t, d, 1)), (0, 2, 1, 3))


def linear(x: Var, params: ParamScope) -> Var:
    return ad.add_broadcast(ad.einsum("ntd,de->nte", x, params["weight"]), params["bias"])


def _attention(x: Var, params: ParamScope, heads: int) -> Var:
    n, t, d = x.shape
    if d % heads:
        raise ConfigError(f"embed width {d} is not divisible by {heads} heads")
    width = d // heads

    def split(v):
        return ad.reshape(v, (n, t, heads, width))

    q = split(linear(x, params.child("q")))
    k = split(linear(x, params.child("k")))
    v = split(linear(x, params.child("v")))
    scores = ad.scale(ad.einsum("nqhc,nkhc->nhqk", q, k), 1.0 / np.sqrt(width))
    weights = ad.softmax_rows(scores)
    context = ad.reshape(ad.einsum("nhqk,nkhc->nqhc", weights, v), (n, t, d))
    return linear(context, params.child("o"))


def _check_width(seq: TokenSequence, params: ParamScope):
    d = seq.shape[1]
    expected = params["ln1.gamma"].shape[0]
    if d != expected:
        raise ShapeError(f"token width {d} does not match encoder width {expected}")


def _rows_mhsa(x: Var, params: ParamScope, heads: int, eps: float) -> Var:
    normed = ad.layernorm(x, params["ln1.gamma"], params["ln1.beta"], eps)
    return ad.add(x, _attention(normed, params.child("attn"), heads))


def mhsa(seq: TokenSequence, params: ParamScope, heads: int, eps: float = LN_EPS) -> TokenSequence:
    """Pre-norm residual multi-head self-attention: F + Attn(LN(F))."""
    _check_width(seq, params)
    rows = _rows_mhsa(to_rows(seq.tokens), params, heads, eps)
    return TokenSequence(from_rows(rows), seq.geometry)


def encoder_block(seq: TokenSequence, params: ParamScope, heads: int, eps: float = LN_EPS) -> TokenSequence:
    _check_width(seq, params)
    x = _rows_mhsa(to_rows(seq.tokens), params, heads, eps)
    normed = ad.layernorm(x, params["ln2.gamma"], params["ln2.beta"], eps)
    hidden = ad.gelu(linear(normed, params.child("ffn.fc1")))
    x = ad.add(x, linear(hidden, params.child("ffn.fc2")))
    return TokenSequence(from_rows(x), seq.geometry)


def encoder_stack(seq: TokenSequence, params: ParamScope, heads: int, depth: int, eps: float = LN_EPS) -> TokenSequence:
    for b in range(depth):
        seq = encoder_block(seq, params.child(f"block{b}"), heads, eps)
    return seq
