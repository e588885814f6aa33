"""Finite-difference gradient suite over primitives, losses and the full objective."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses
from . import tensor as T
from .data import generate_pairs
from .model import ModelConfig, embed_batch, forward_logits_batch, init_model
from .prompting import build_embedding_instruction, build_language_instruction, instruction_vocab
from .tensor import Tensor, grad_check
from .trainer import lm_targets

DIMS = {
    "tiny": dict(d_model=8, n_layers=2, n_heads=2),
    "small": dict(d_model=16, n_layers=2, n_heads=2),
}
TOLERANCE = 1e-4
EPS = 1e-5


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(a, requires_grad=True)


def _projected(out_fn: Callable[..., Tensor], arrays, rng) -> tuple[Callable[[], Tensor], list[Tensor]]:
    params = [_leaf(np.array(a, dtype=np.float64)) for a in arrays]
    proj = Tensor(rng.normal(size=out_fn(*params).shape))
    return (lambda: (out_fn(*params) * proj).sum()), params


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    x = rng.normal(size=(3, 4))
    x3 = rng.normal(size=(2, 3, 4))
    pos = np.abs(x) + 0.5
    mask = rng.random((3, 4)) < 0.3
    idx = np.array([[0, 2], [1, 1], [2, 0]])
    tgt = rng.integers(0, 4, size=3)
    specs = {
        "add": (lambda a, b: a + b, [x, rng.normal(size=4)]),
        "sub": (lambda a, b: a - b, [x, rng.normal(size=(3, 4))]),
        "mul": (lambda a, b: a * b, [x, rng.normal(size=(3, 4))]),
        "div": (lambda a, b: a / b, [x, pos]),
        "neg": (lambda a: -a, [x]),
        "scale": (lambda a: T.scale(a, -1.7), [x]),
        "reciprocal": (T.reciprocal, [pos]),
        "exp": (T.exp, [0.5 * x]),
        "log": (T.log, [pos]),
        "matmul": (lambda a, b: a @ b, [x, rng.normal(size=(4, 2))]),
        "batched_matmul": (lambda a, b: a @ b, [x3, rng.normal(size=(2, 4, 3))]),
        "folded_matmul": (lambda a, b: a @ b, [x3, rng.normal(size=(4, 5))]),
        "sum": (lambda a: a.sum(axis=0), [x]),
        "mean": (lambda a: a.mean(axis=-1), [x]),
        "reshape": (lambda a: a.reshape(4, 3), [x]),
        "transpose": (lambda a: a.transpose((1, 0)), [x]),
        "getitem": (lambda a: a[1:, ::2], [x]),
        "concat": (lambda a, b: T.concat([a, b], axis=0), [x, rng.normal(size=(2, 4))]),
        "take_rows": (lambda a: T.take_rows(a, idx), [x]),
        "masked_fill": (lambda a: T.masked_fill(a, mask, -2.0), [x]),
        "softmax": (lambda a: T.softmax(a, axis=-1), [x]),
        "log_softmax": (lambda a: T.log_softmax(a, axis=-1), [x]),
        "gelu": (T.gelu, [x]),
        "layer_norm": (T.layer_norm, [x, rng.normal(size=4), rng.normal(size=4)]),
        "l2_normalize": (lambda a: T.l2_normalize(a, axis=-1), [x]),
        "cross_entropy": (lambda a: T.cross_entropy(a, tgt), [x]),
    }
    return {name: _projected(fn, arrays, rng) for name, (fn, arrays) in specs.items()}


def loss_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    hv, ht = _leaf(rng.normal(size=(4, 6))), _leaf(rng.normal(size=(4, 6)))
    logits = _leaf(rng.normal(size=(2, 5, 7)))
    targets = rng.integers(0, 7, size=(2, 5))
    mask = np.array([[0, 1, 1, 0, 0], [0, 0, 1, 1, 1]], dtype=bool)
    a, b = _leaf(np.array(1.3)), _leaf(np.array(0.4))
    w = losses.LossWeights()
    return {
        "info_nce": (lambda: losses.info_nce(T.l2_normalize(hv), T.l2_normalize(ht), 0.07), [hv, ht]),
        "lm_nll": (lambda: losses.lm_nll(logits, targets, mask), [logits]),
        "combined": (lambda: losses.combined(a, b, w), [a, b]),
    }


def full_model_case(dims: str = "tiny", seed: int = 0, batch: int = 2):
    """The joint objective of one batch, as a closure over the model parameters."""
    if dims not in DIMS:
        raise KeyError(dims)
    vocab = instruction_vocab()
    m = init_model(ModelConfig(vocab_size=len(vocab), seed=seed, **DIMS[dims]), vocab)
    pairs = generate_pairs(batch, seed=seed)
    img = [build_embedding_instruction(vocab, image=p.patches) for p in pairs]
    txt = [build_embedding_instruction(vocab, text=p.caption) for p in pairs]
    lang = [build_language_instruction(vocab, p) for p in pairs]
    targets, mask = lm_targets(lang)
    w = losses.LossWeights()

    def f() -> Tensor:
        l_con = losses.info_nce(embed_batch(m, img), embed_batch(m, txt), w.tau)
        l_lm = losses.lm_nll(forward_logits_batch(m, lang), targets, mask)
        return losses.combined(l_lm, l_con, w)

    return f, m.parameters()


def gradcheck_suite(dims: str = "tiny", seed: int = 0) -> dict[str, float]:
    """Max relative error of every check, keyed ``primitive/...``, ``loss/...`` and ``model/<dims>``."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (f, params) in primitive_cases(rng).items():
        out[f"primitive/{name}"] = grad_check(f, params, eps=EPS)
    for name, (f, params) in loss_cases(rng).items():
        out[f"loss/{name}"] = grad_check(f, params, eps=EPS)
    f, params = full_model_case(dims, seed)
    out[f"model/{dims}"] = grad_check(f, params, eps=EPS)
    return out
