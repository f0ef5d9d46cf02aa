"""Pre-norm encoder-decoder transformer with named, individually addressable
weight matrices.

Every weight lives in a flat name -> Tensor map (`enc.0.attn.q`,
`dec.2.cross.v`, `dec.1.ff.w1`, ...) so low-rank deltas can be injected per
matrix. forward() accepts an override map whose values are either a full
replacement matrix or a LowRankPatch; the patch route computes
x@W + c*((x@X)@Y^T) without ever materializing W', which keeps it an
independent code path from merged weights.
"""

from __future__ import annotations

import fnmatch
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Union

import numpy as np

from . import binio
from .data import BOS, EOS, PAD
from .errors import CompatibilityError, ConfigError, InputError
from .tensor import (
    Tensor, cross_entropy, embedding, layer_norm, matmul, no_grad, relu,
    reshape, softmax, transpose,
)

CHECKPOINT_MAGIC = b"NMTCKPT1"
MASK = -1e9  # additive attention mask constant; large but float32-safe


@dataclass
class ModelConfig:
    layers: int = 3
    heads: int = 8
    d_model: int = 256
    d_ff: int = 512
    vocab_size: int = 8000
    max_len: int = 128
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "heads", "d_model", "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class LowRankPatch:
    """Weight override as base plus unmaterialized low-rank terms.

    terms are (X [p, r], Y [q, r], coefficient); the effective matrix is
    base + sum(c * X @ Y^T) but matmuls against it are factored through the
    rank-r bottleneck instead.
    """

    base: Tensor
    terms: list[tuple[Tensor, Tensor, float]] = field(default_factory=list)

    def materialize(self) -> Tensor:
        out = self.base
        for x, y, c in self.terms:
            out = out + matmul(x, transpose(y)) * c
        return out


Override = Union[Tensor, LowRankPatch]


@dataclass(frozen=True)
class TargetSelector:
    """Glob predicate over parameter names, e.g. ``dec.*.attn.*`` or
    ``*.q|*.k|*.v|*.o`` (``|`` separates alternatives). Only 2-D parameters
    are ever selected."""

    pattern: str

    def matches(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p)
                   for p in self.pattern.split("|"))

    def select(self, model: "Model") -> list[str]:
        return [n for n, t in model.params.items()
                if t.data.ndim == 2 and self.matches(n)]


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, cfg: ModelConfig) -> "Model":
        rng = np.random.default_rng(cfg.seed)
        p: dict[str, Tensor] = {}

        def emb(name, rows, cols):
            p[name] = Tensor(rng.normal(0.0, 0.02, (rows, cols)),
                             requires_grad=True, dtype=np.float32)

        def lin(name, fan_in, fan_out):
            std = (2.0 / (fan_in + fan_out)) ** 0.5
            p[name] = Tensor(rng.normal(0.0, std, (fan_in, fan_out)),
                             requires_grad=True, dtype=np.float32)

        def ln(name, dim):
            p[f"{name}.g"] = Tensor(np.ones(dim, np.float32), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)

        d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        emb("src_embed", v, d)
        emb("tgt_embed", v, d)
        emb("pos_enc", cfg.max_len, d)
        emb("pos_dec", cfg.max_len, d)
        for i in range(cfg.layers):
            ln(f"enc.{i}.ln1", d)
            for proj in "qkvo":
                lin(f"enc.{i}.attn.{proj}", d, d)
            ln(f"enc.{i}.ln2", d)
            lin(f"enc.{i}.ff.w1", d, f)
            lin(f"enc.{i}.ff.w2", f, d)
        ln("enc.norm", d)
        for i in range(cfg.layers):
            ln(f"dec.{i}.ln1", d)
            for proj in "qkvo":
                lin(f"dec.{i}.attn.{proj}", d, d)
            ln(f"dec.{i}.ln2", d)
            for proj in "qkvo":
                lin(f"dec.{i}.cross.{proj}", d, d)
            ln(f"dec.{i}.ln3", d)
            lin(f"dec.{i}.ff.w1", d, f)
            lin(f"dec.{i}.ff.w2", f, d)
        ln("dec.norm", d)
        lin("out_proj", d, v)
        return cls(cfg, p)

    # -- weight resolution --------------------------------------------------

    def _weight(self, name: str, overrides) -> Override:
        if overrides is not None and name in overrides:
            return overrides[name]
        return self.params[name]

    def _linear(self, x: Tensor, name: str, overrides) -> Tensor:
        w = self._weight(name, overrides)
        if isinstance(w, LowRankPatch):
            out = matmul(x, w.base)
            for xf, yf, c in w.terms:
                out = out + matmul(matmul(x, xf), transpose(yf)) * c
            return out
        return matmul(x, w)

    def _embed(self, name: str, ids: np.ndarray, overrides) -> Tensor:
        w = self._weight(name, overrides)
        if isinstance(w, LowRankPatch):
            w = w.materialize()
        return embedding(w, ids)

    def _norm(self, x: Tensor, name: str, overrides) -> Tensor:
        return layer_norm(x, self._weight(f"{name}.g", overrides),
                          self._weight(f"{name}.b", overrides))

    # -- forward ------------------------------------------------------------

    def _dropout(self, x: Tensor, rng) -> Tensor:
        if rng is None or self.cfg.dropout == 0.0:
            return x
        keep = 1.0 - self.cfg.dropout
        mask = (rng.random(x.shape) < keep).astype(np.float32) / keep
        return x * Tensor(mask)

    def _attention(self, x_q: Tensor, x_kv: Tensor, prefix: str,
                   mask: np.ndarray, overrides, rng) -> Tensor:
        b, t_q, d = x_q.shape
        t_k = x_kv.shape[1]
        h = self.cfg.heads
        hd = d // h

        def heads(x, name, t):
            y = self._linear(x, f"{prefix}.{name}", overrides)
            return transpose(reshape(y, (b, t, h, hd)), (0, 2, 1, 3))

        q = heads(x_q, "q", t_q)
        k = heads(x_kv, "k", t_k)
        v = heads(x_kv, "v", t_k)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / hd ** 0.5)
        scores = scores + Tensor(np.broadcast_to(mask, (b, h, t_q, t_k)))
        attn = self._dropout(softmax(scores, axis=-1), rng)
        mixed = transpose(matmul(attn, v), (0, 2, 1, 3))
        return self._linear(reshape(mixed, (b, t_q, d)), f"{prefix}.o", overrides)

    def _feed_forward(self, x: Tensor, prefix: str, overrides) -> Tensor:
        hidden = relu(self._linear(x, f"{prefix}.w1", overrides))
        return self._linear(hidden, f"{prefix}.w2", overrides)

    def _positions(self, name: str, b: int, t: int, overrides) -> Tensor:
        ids = np.broadcast_to(np.arange(t, dtype=np.int64), (b, t))
        return self._embed(name, ids, overrides)

    def _check_len(self, ids: np.ndarray, side: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise InputError(f"{side} ids must be 1-D or 2-D, got {ids.ndim}-D")
        if ids.shape[1] > self.cfg.max_len:
            raise InputError(
                f"{side} length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        return ids

    def _encode(self, src: np.ndarray, overrides, rng) -> Tensor:
        b, s = src.shape
        key_pad = np.where(src == PAD, MASK, 0.0).astype(np.float32)
        mask = key_pad[:, None, None, :]
        x = self._embed("src_embed", src, overrides)
        x = self._dropout(x + self._positions("pos_enc", b, s, overrides), rng)
        for i in range(self.cfg.layers):
            prefix = f"enc.{i}"
            normed = self._norm(x, f"{prefix}.ln1", overrides)
            x = x + self._dropout(
                self._attention(normed, normed, f"{prefix}.attn", mask,
                                overrides, rng), rng)
            normed = self._norm(x, f"{prefix}.ln2", overrides)
            x = x + self._dropout(
                self._feed_forward(normed, f"{prefix}.ff", overrides), rng)
        return self._norm(x, "enc.norm", overrides)

    def _decode(self, src: np.ndarray, enc_out: Tensor, tgt: np.ndarray,
                overrides, rng) -> Tensor:
        b, t = tgt.shape
        causal = np.triu(np.full((t, t), MASK, dtype=np.float32), k=1)
        tgt_pad = np.where(tgt == PAD, MASK, 0.0).astype(np.float32)
        self_mask = causal[None, None] + tgt_pad[:, None, None, :]
        cross_mask = np.where(src == PAD, MASK, 0.0).astype(
            np.float32)[:, None, None, :]
        x = self._embed("tgt_embed", tgt, overrides)
        x = self._dropout(x + self._positions("pos_dec", b, t, overrides), rng)
        for i in range(self.cfg.layers):
            prefix = f"dec.{i}"
            normed = self._norm(x, f"{prefix}.ln1", overrides)
            x = x + self._dropout(
                self._attention(normed, normed, f"{prefix}.attn", self_mask,
                                overrides, rng), rng)
            normed = self._norm(x, f"{prefix}.ln2", overrides)
            x = x + self._dropout(
                self._attention(normed, enc_out, f"{prefix}.cross", cross_mask,
                                overrides, rng), rng)
            normed = self._norm(x, f"{prefix}.ln3", overrides)
            x = x + self._dropout(
                self._feed_forward(normed, f"{prefix}.ff", overrides), rng)
        x = self._norm(x, "dec.norm", overrides)
        return self._linear(x, "out_proj", overrides)

    def forward(self, src_ids, tgt_ids, overrides: Mapping[str, Override] | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced logits [batch, tgt_len, vocab]. Dropout fires only
        when an rng is supplied (training mode)."""
        src = self._check_len(src_ids, "source")
        tgt = self._check_len(tgt_ids, "target")
        enc_out = self._encode(src, overrides, rng)
        return self._decode(src, enc_out, tgt, overrides, rng)

    def loss(self, src_ids, tgt_ids, overrides=None, rng=None) -> Tensor:
        """Mean cross-entropy of next-token prediction, pad positions excluded."""
        tgt = self._check_len(tgt_ids, "target")
        logits = self.forward(src_ids, tgt[:, :-1], overrides, rng)
        return cross_entropy(logits, tgt[:, 1:], pad_id=PAD)

    def greedy_decode(self, src_ids, max_len: int,
                      overrides: Mapping[str, Override] | None = None) -> np.ndarray:
        """Argmax decoding until eos or max_len generated tokens.

        Returns generated ids [batch, steps] (bos excluded); rows are padded
        past their eos. A 1-D input returns a 1-D output.
        """
        src = np.asarray(src_ids, dtype=np.int64)
        single = src.ndim == 1
        src = self._check_len(src, "source")
        steps = min(max_len, self.cfg.max_len - 1)
        with no_grad():
            enc_out = self._encode(src, overrides, None)
            b = src.shape[0]
            out = np.full((b, 1), BOS, dtype=np.int64)
            alive = np.ones(b, dtype=bool)
            for _ in range(steps):
                logits = self._decode(src, enc_out, out, overrides, None)
                nxt = np.argmax(logits.data[:, -1, :], axis=-1).astype(np.int64)
                nxt[~alive] = PAD
                out = np.concatenate([out, nxt[:, None]], axis=1)
                alive &= nxt != EOS
                if not alive.any():
                    break
        gen = out[:, 1:]
        return gen[0] if single else gen

    # -- accounting & persistence -------------------------------------------

    def count_params(self, sel: TargetSelector | None = None) -> int:
        names = sel.select(self) if sel else self.params
        return int(sum(self.params[n].size for n in names))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def save(self, path) -> str:
        meta = {"kind": "checkpoint", "config": asdict(self.cfg)}
        arrays = {n: t.data for n, t in self.params.items()}
        return binio.write_record(path, CHECKPOINT_MAGIC, meta, arrays)

    @classmethod
    def load(cls, path) -> "Model":
        meta, arrays = binio.read_record(path, CHECKPOINT_MAGIC)
        cfg = ModelConfig(**meta["config"])
        model = cls.build(cfg)
        if set(arrays) != set(model.params):
            missing = set(model.params) ^ set(arrays)
            raise CompatibilityError(
                f"checkpoint parameter names do not match config: {sorted(missing)}")
        for name, arr in arrays.items():
            expect = model.params[name].data.shape
            if arr.shape != expect:
                raise CompatibilityError(
                    f"parameter {name} has shape {arr.shape}, expected {expect}")
            model.params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        return model


def build_model(cfg: ModelConfig) -> Model:
    return Model.build(cfg)
