"""Joint contrastive + autoregressive training loop with Adam."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import losses
from .data import MultimodalPair, load_split
from .errors import ArgumentError, ConfigError, DataError, DivergenceError
from .losses import LossWeights
from .model import Model, ModelConfig, embed_batch, forward_logits_batch, init_model, param_group, save_checkpoint
from .prompting import Instruction, build_embedding_instruction, build_language_instruction, instruction_vocab
from .tokenizer import PAD

METRICS_HEADER = "step,loss_total,loss_lm,loss_con,ms_per_step"
CHECKPOINT_FILE = "model.ckpt"
METRICS_FILE = "metrics.csv"


@dataclass
class TrainConfig:
    # model
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq: int = 64
    model_seed: int | None = None
    # optimisation
    batch_size: int = 32
    steps: int = 3000
    lr: float = 1e-3
    lr_projector: float | None = None
    lr_llm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    schedule: str = "constant"
    warmup_steps: int = 0
    # objective
    alpha_lm: float = 1.0
    alpha_con: float = 10.0
    tau: float = 0.07
    # run
    seed: int = 0
    data: str | None = None
    train_split: str = "train"
    out: str | None = None
    deterministic: bool = True

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_lm, self.alpha_con, self.tau)

    def validate(self) -> None:
        self.weights  # noqa: B018 - validates
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.alpha_con > 0 and self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2 for in-batch negatives")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        for name in ("lr", "eps", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def model_config(self, vocab_size: int) -> ModelConfig:
        seed = self.seed if self.model_seed is None else self.model_seed
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_seq=self.max_seq,
            seed=seed,
        )

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainMetrics:
    step: int
    loss_total: float
    loss_lm: float
    loss_con: float
    ms_per_step: float

    def csv_row(self, deterministic: bool) -> str:
        ms = 0.0 if deterministic else self.ms_per_step
        return f"{self.step},{self.loss_total!r},{self.loss_lm!r},{self.loss_con!r},{ms:.3f}"


# -- optimizer --------------------------------------------------------------
@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState | None, hyper: AdamHyper):
    """One bias-corrected Adam step; returns ``(new_param, new_state)``."""
    if grad.shape != param.shape:
        raise ArgumentError(f"grad shape {grad.shape} != param shape {param.shape}")
    if state is None:
        state = AdamState(np.zeros_like(param), np.zeros_like(param))
    t = state.t + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    new = param - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, AdamState(m, v, t)


class Adam:
    """Adam over a named parameter dict with per-group learning rates."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict[str, AdamState] = {}
        self.t = 0

    def group_lr(self, name: str) -> float:
        override = self.cfg.lr_projector if param_group(name) == "projector" else self.cfg.lr_llm
        return self.cfg.lr if override is None else override

    def schedule_factor(self, t: int) -> float:
        c = self.cfg
        f = min(1.0, t / c.warmup_steps) if c.warmup_steps > 0 else 1.0
        if c.schedule == "cosine":
            f *= 0.5 * (1.0 + math.cos(math.pi * min(t, c.steps) / c.steps))
        return f

    def step(self, params: dict) -> None:
        c = self.cfg
        self.t += 1
        factor = self.schedule_factor(self.t)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        if c.grad_clip > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > c.grad_clip:
                grads = {k: g * (c.grad_clip / norm) for k, g in grads.items()}
        for name, p in params.items():
            g = grads[name]
            if c.weight_decay > 0:
                g = g + c.weight_decay * p.data
            hyper = AdamHyper(self.group_lr(name) * factor, c.beta1, c.beta2, c.eps)
            p.data, self.state[name] = adam_update(p.data, g, self.state.get(name), hyper)


# -- batching ---------------------------------------------------------------
def make_batches(pairs: Sequence[MultimodalPair], n: int, seed: int, epoch: int = 0) -> list[list[MultimodalPair]]:
    """One epoch: a seeded permutation cut into ``n``-sized batches, remainder dropped."""
    if n < 1:
        raise ArgumentError("batch size must be positive")
    if len(pairs) < n:
        raise ArgumentError(f"dataset of {len(pairs)} pairs is smaller than the batch size {n}")
    if len({p.scene for p in pairs}) != len(pairs):
        raise DataError("dataset contains repeated scenes; in-batch negatives would not be true negatives")
    perm = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    return [[pairs[i] for i in perm[k * n : (k + 1) * n]] for k in range(len(pairs) // n)]


def iterate_batches(pairs: Sequence[MultimodalPair], n: int, seed: int) -> Iterator[list[MultimodalPair]]:
    epoch = 0
    while True:
        yield from make_batches(pairs, n, seed, epoch)
        epoch += 1


class InstructionCache:
    """Memoized per-pair instructions (image embed, text embed, language)."""

    def __init__(self, vocab):
        self.vocab = vocab
        self._cache: dict[MultimodalPair, tuple[Instruction, Instruction, Instruction]] = {}

    def get(self, pair: MultimodalPair) -> tuple[Instruction, Instruction, Instruction]:
        hit = self._cache.get(pair)
        if hit is None:
            hit = self._cache[pair] = (
                build_embedding_instruction(self.vocab, image=pair.patches),
                build_embedding_instruction(self.vocab, text=pair.caption),
                build_language_instruction(self.vocab, pair),
            )
        return hit


def lm_targets(insts: Sequence[Instruction]) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded target ids and loss masks for a batch of language instructions."""
    L = max(inst.length for inst in insts)
    targets = np.full((len(insts), L), PAD, dtype=np.intp)
    mask = np.zeros((len(insts), L), dtype=bool)
    for b, inst in enumerate(insts):
        targets[b, : inst.length] = inst.spliced_ids()
        mask[b, : inst.length] = inst.loss_mask
    return targets, mask


def batch_losses(m: Model, img: Sequence[Instruction], txt: Sequence[Instruction],
                 lang: Sequence[Instruction], w: LossWeights):
    """Contrastive and LM losses for one batch of pairs."""
    hv = embed_batch(m, img)
    ht = embed_batch(m, txt)
    l_con = losses.info_nce(hv, ht, w.tau)
    logits = forward_logits_batch(m, lang)
    targets, mask = lm_targets(lang)
    l_lm = losses.lm_nll(logits, targets, mask)
    return l_lm, l_con


def train_step(m: Model, batch: Sequence[MultimodalPair], w: LossWeights, opt: Adam,
               step: int = 0, cache: InstructionCache | None = None) -> TrainMetrics:
    start = time.perf_counter()
    cache = cache or InstructionCache(m.vocab)
    img, txt, lang = zip(*(cache.get(p) for p in batch))
    l_lm, l_con = batch_losses(m, img, txt, lang, w)
    for value in (l_lm.item(), l_con.item()):
        if not math.isfinite(value):
            raise DivergenceError(step, value)
    total = losses.combined(l_lm, l_con, w)
    if not math.isfinite(total.item()):
        raise DivergenceError(step, total.item())
    m.zero_grad()
    total.backward()
    opt.step(m.params)
    ms = (time.perf_counter() - start) * 1e3
    return TrainMetrics(step, total.item(), l_lm.item(), l_con.item(), ms)


def train(cfg: TrainConfig, pairs: Sequence[MultimodalPair] | None = None, model: Model | None = None,
          log=None) -> tuple[Model, list[TrainMetrics]]:
    """Run ``cfg.steps`` joint steps; writes metrics CSV and checkpoint when ``cfg.out`` is set."""
    cfg.validate()
    if pairs is None:
        if cfg.data is None:
            raise ConfigError("no dataset given (data = ...)")
        pairs = load_split(cfg.data, cfg.train_split)
    if model is None:
        vocab = instruction_vocab()
        model = init_model(cfg.model_config(len(vocab)), vocab)
    w = cfg.weights
    opt = Adam(cfg)
    cache = InstructionCache(model.vocab)
    batches = iterate_batches(pairs, cfg.batch_size, cfg.seed)
    out = Path(cfg.out) if cfg.out else None
    history = []
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / METRICS_FILE, "w", encoding="utf-8", newline="\n")
        fh.write(METRICS_HEADER + "\n")
    try:
        for step in range(1, cfg.steps + 1):
            metrics = train_step(model, next(batches), w, opt, step, cache)
            history.append(metrics)
            if fh is not None:
                fh.write(metrics.csv_row(cfg.deterministic) + "\n")
                fh.flush()
            if log is not None:
                log(metrics)
    finally:
        if fh is not None:
            fh.close()
    model.metadata = {
        "step": cfg.steps,
        "alpha_lm": w.alpha_lm,
        "alpha_con": w.alpha_con,
        "tau": w.tau,
        "seed": cfg.seed,
    }
    if out is not None:
        save_checkpoint(model, out / CHECKPOINT_FILE)
    return model, history
