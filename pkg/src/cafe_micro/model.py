"""Toy multimodal decoder: affine patch projector + pre-LN causal transformer."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ArgumentError, CheckpointError, ConfigError, SequenceLengthError
from .prompting import EMBED_KINDS, Instruction
from .tensor import Tensor
from .tokenizer import PAD, Vocab

MAGIC = b"CAFE"
FORMAT_VERSION = 1
MASK_VALUE = -1e9
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_patch: int = 7
    max_seq: int = 64
    mlp_ratio: int = 4
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{f.name} must be an integer")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_patch, self.max_seq) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq, d),
        "proj.w": (cfg.d_patch, d),
        "proj.b": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wqkv": (d, 3 * d), p + "attn.bqkv": (3 * d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, h), p + "mlp.b1": (h,),
            p + "mlp.w2": (h, d), p + "mlp.b2": (d,),
        })  # fmt: skip
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, cfg.vocab_size), "head.b": (cfg.vocab_size,)})
    return shapes


def param_group(name: str) -> str:
    return "projector" if name.startswith("proj.") else "llm"


@dataclass
class Model:
    config: ModelConfig
    vocab: Vocab
    params: dict[str, Tensor]
    metadata: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def init_model(cfg: ModelConfig, vocab: Vocab) -> Model:
    """Seeded init: uniform(+-1/sqrt(fan_in)) weights, unit LN gains, zero biases."""
    cfg.validate()
    if cfg.vocab_size != len(vocab):
        raise ConfigError(f"vocab_size={cfg.vocab_size} but vocabulary has {len(vocab)} words")
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in = cfg.d_model if name in ("tok_emb", "pos_emb") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(cfg, vocab, params)


# -- forward ---------------------------------------------------------------
def _assemble_inputs(m: Model, insts: Sequence[Instruction]) -> Tensor:
    """Token embeddings with projected patches spliced in, plus positions: (B, L, d)."""
    cfg = m.config
    lengths = [inst.length for inst in insts]
    L = max(lengths)
    if L > cfg.max_seq:
        raise SequenceLengthError(f"sequence length {L} exceeds max_seq={cfg.max_seq}")
    B = len(insts)
    ids = np.full((B, L), PAD, dtype=np.intp)
    source = np.arange(B * L, dtype=np.intp).reshape(B, L)
    patch_blocks = []
    n_patch = 0
    for b, inst in enumerate(insts):
        ids[b, : lengths[b]] = inst.spliced_ids()
        if inst.image_slot is not None:
            k = inst.n_patches
            if inst.patches.shape[1] != cfg.d_patch:
                raise ArgumentError(f"patch width {inst.patches.shape[1]} != d_patch={cfg.d_patch}")
            s = inst.image_slot
            source[b, s : s + k] = B * L + n_patch + np.arange(k)
            patch_blocks.append(inst.patches)
            n_patch += k
    tok = T.take_rows(m["tok_emb"], ids.reshape(-1))
    if patch_blocks:
        projected = T.matmul(Tensor(np.concatenate(patch_blocks)), m["proj.w"]) + m["proj.b"]
        x = T.take_rows(T.concat([tok, projected], axis=0), source)
    else:
        x = tok.reshape(B, L, cfg.d_model)
    return x + m["pos_emb"][:L]


def _causal_mask(L: int) -> np.ndarray:
    return np.triu(np.ones((L, L), dtype=bool), k=1)


def _block(m: Model, i: int, x: Tensor, mask: np.ndarray) -> Tensor:
    cfg = m.config
    p = f"blocks.{i}."
    B, L, d = x.shape
    H = cfg.n_heads
    dh = d // H
    h = T.layer_norm(x, m[p + "ln1.g"], m[p + "ln1.b"], LN_EPS)
    qkv = (h @ m[p + "attn.wqkv"] + m[p + "attn.bqkv"]).reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
    att = T.softmax(T.masked_fill(scores, mask, MASK_VALUE), axis=-1)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    x = x + (o @ m[p + "attn.wo"] + m[p + "attn.bo"])
    h = T.layer_norm(x, m[p + "ln2.g"], m[p + "ln2.b"], LN_EPS)
    h = T.gelu(h @ m[p + "mlp.w1"] + m[p + "mlp.b1"])
    return x + (h @ m[p + "mlp.w2"] + m[p + "mlp.b2"])


def forward_hidden_batch(m: Model, insts: Sequence[Instruction]) -> Tensor:
    """Final-layer hidden states for right-padded instructions: (B, L_max, d).

    Right padding never leaks into real positions because attention is causal.
    """
    if not insts:
        raise ArgumentError("empty instruction batch")
    x = _assemble_inputs(m, insts)
    mask = _causal_mask(x.shape[1])
    for i in range(m.config.n_layers):
        x = _block(m, i, x, mask)
    return T.layer_norm(x, m["ln_f.g"], m["ln_f.b"], LN_EPS)


def forward_logits_batch(m: Model, insts: Sequence[Instruction]) -> Tensor:
    return forward_hidden_batch(m, insts) @ m["head.w"] + m["head.b"]


def forward_hidden(m: Model, inst: Instruction) -> Tensor:
    return forward_hidden_batch(m, [inst])[0]


def forward_logits(m: Model, inst: Instruction) -> Tensor:
    return forward_logits_batch(m, [inst])[0]


def embed_batch(m: Model, insts: Sequence[Instruction]) -> Tensor:
    """L2-normalized hidden state at each instruction's last index: (B, d)."""
    for inst in insts:
        if inst.kind not in EMBED_KINDS:
            raise ArgumentError(f"cannot embed an instruction of kind {inst.kind!r}")
    hidden = forward_hidden_batch(m, insts)
    B, L, d = hidden.shape
    rows = np.array([b * L + inst.last_index for b, inst in enumerate(insts)])
    return T.l2_normalize(T.take_rows(hidden.reshape(B * L, d), rows), axis=-1)


def embed(m: Model, inst: Instruction) -> Tensor:
    return embed_batch(m, [inst])[0]


# -- checkpoint container ----------------------------------------------------
def write_container(path: str | Path, metadata: dict, tensors: dict[str, np.ndarray]) -> None:
    """magic, u32 version, u64-prefixed JSON metadata, then named float64 tensor records."""
    meta = dict(metadata, tensors=list(tensors))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc.strerror}") from None
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated container {path}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a container (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    (meta_len,) = struct.unpack("<Q", take(8))
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt metadata block") from None
    tensors = {}
    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt tensor name") from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    expected = meta.get("tensors")
    if expected is not None and list(tensors) != expected:
        raise CheckpointError("tensor records do not match the metadata listing (truncated?)")
    return meta, tensors


def save_checkpoint(m: Model, path: str | Path) -> None:
    meta = {
        "kind": "checkpoint",
        "config": asdict(m.config),
        "vocab": m.vocab.to_list(),
        "training": m.metadata,
    }
    write_container(path, meta, {k: v.data for k, v in m.params.items()})


def load_checkpoint(path: str | Path) -> Model:
    meta, tensors = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} holds {meta.get('kind')!r}, not a checkpoint")
    try:
        cfg = ModelConfig.from_dict(meta["config"])
        cfg.validate()
        vocab = Vocab.from_list(meta["vocab"])
    except (KeyError, TypeError, ArgumentError) as exc:
        raise CheckpointError(f"invalid checkpoint metadata: {exc}") from None
    shapes = param_shapes(cfg)
    if set(shapes) != set(tensors):
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    params = {}
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True)
    return Model(cfg, vocab, params, dict(meta.get("training", {})))
