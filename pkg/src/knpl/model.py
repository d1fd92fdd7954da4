"""Decoder-only transformer with hooks on the FFN intermediate activations.

The FFN is the non-gated form ``silu(H @ W1) @ W2``; the post-SiLU vector is
what hooks observe, scale, zero or clamp.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, LengthError, ShapeError

MAGIC = b"KNPL"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    max_seq_len: int = 128

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "d_model", "d_ff", "n_heads", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class HookSpec:
    """Observe, scale or zero a set of ``(layer, neuron)`` activations at every position."""

    targets: frozenset
    mode: str = "observe"  # observe | scale | zero
    factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset((int(l), int(i)) for l, i in self.targets))
        if self.mode not in ("observe", "scale", "zero"):
            raise ConfigError(f"unknown hook mode {self.mode!r}")

    @classmethod
    def observe(cls, targets=()) -> "HookSpec":
        return cls(frozenset(targets), "observe")

    @classmethod
    def scale(cls, targets, factor: float) -> "HookSpec":
        return cls(frozenset(targets), "scale", float(factor))

    @classmethod
    def zero(cls, targets) -> "HookSpec":
        return cls(frozenset(targets), "zero")


@dataclass
class ForwardTrace:
    """Post-SiLU FFN activations per layer, shape ``(seq, d_ff)`` each.

    ``raw`` holds the values before hooks were applied; ``activations`` the
    values actually consumed by ``W2``.
    """

    activations: list[np.ndarray]
    raw: list[np.ndarray]
    top_tokens: np.ndarray
    nodes: list = field(default_factory=list, repr=False)

    def value(self, layer: int, neuron: int, position: int = -1) -> float:
        return float(self.activations[layer][position, neuron])


def ffn_forward(H, layer_weights: Mapping[str, np.ndarray]) -> ad.Tensor:
    """``silu(H @ W1) @ W2`` for ``H`` of shape ``(seq, d_model)``."""
    H = ad.constant(H)
    w1, w2 = layer_weights["w1"], layer_weights["w2"]
    if H.value.ndim != 2 or H.shape[1] != np.shape(w1)[0] or np.shape(w1)[1] != np.shape(w2)[0]:
        raise ShapeError(f"ffn_forward: H {H.shape}, W1 {np.shape(w1)}, W2 {np.shape(w2)}")
    return ad.matmul(ad.silu(ad.matmul(H, w1)), w2)


def init_weights(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    std = 0.02
    proj = std / np.sqrt(2 * config.n_layers)
    w = {
        "tok_emb": rng.normal(0, std, (v, d)),
        "pos_emb": rng.normal(0, std, (config.max_seq_len, d)),
        "ln_f": np.ones(d),
        "w_out": rng.normal(0, std, (d, v)),
    }
    for l in range(config.n_layers):
        w[f"l{l}.ln1"] = np.ones(d)
        w[f"l{l}.wq"] = rng.normal(0, std, (d, d))
        w[f"l{l}.wk"] = rng.normal(0, std, (d, d))
        w[f"l{l}.wv"] = rng.normal(0, std, (d, d))
        w[f"l{l}.wo"] = rng.normal(0, proj, (d, d))
        w[f"l{l}.ln2"] = np.ones(d)
        w[f"l{l}.w1"] = rng.normal(0, std, (d, f))
        w[f"l{l}.w2"] = rng.normal(0, proj, (f, d))
    return w


class TailCache:
    """Unhooked per-layer state needed to recompute only the final position."""

    def __init__(self, tokens, resid_mid, keys, values, acts):
        self.tokens = tokens
        self.resid_mid = resid_mid  # per layer: (d_model,) residual after attention, final pos
        self.keys = keys  # per layer: (heads, d_head, seq-1) earlier positions
        self.values = values  # per layer: (heads, seq-1, d_head)
        self.acts = acts  # per layer: (d_ff,) post-SiLU activation, final pos


class TinyTransformer:
    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray]):
        self.config = config
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        for v in self.weights.values():
            v.flags.writeable = False
        self._mask_cache: dict[int, np.ndarray] = {}

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0) -> "TinyTransformer":
        return cls(config, init_weights(config, seed))

    # --- hooks ------------------------------------------------------------
    def _multipliers(self, hooks) -> list[np.ndarray | None]:
        cfg = self.config
        mults: list[np.ndarray | None] = [None] * cfg.n_layers
        for h in _as_hook_list(hooks):
            for l, i in h.targets:
                if not (0 <= l < cfg.n_layers and 0 <= i < cfg.d_ff):
                    raise ConfigError(f"hook target ({l}, {i}) out of range")
            if h.mode == "observe" or (h.mode == "scale" and h.factor == 1.0):
                continue
            for l, i in h.targets:
                if mults[l] is None:
                    mults[l] = np.ones(cfg.d_ff)
                mults[l][i] = 0.0 if h.mode == "zero" else mults[l][i] * h.factor
        return mults

    def _causal(self, t: int) -> np.ndarray:
        m = self._mask_cache.get(t)
        if m is None:
            m = np.tril(np.ones((t, t), dtype=bool))
            self._mask_cache[t] = m
        return m

    # --- forward ------------------------------------------------------------
    def forward(
        self,
        tokens,
        hooks=None,
        capture: bool = False,
        *,
        params: Mapping[str, ad.Tensor] | None = None,
        clamps: Mapping[tuple[int, int, int], "float | ad.Tensor"] | None = None,
    ) -> tuple[ad.Tensor, ForwardTrace | None]:
        """Logits of shape ``(seq, vocab)`` (or ``(batch, seq, vocab)``).

        ``clamps`` maps ``(layer, neuron, position)`` to a replacement value for
        an unbatched input; it is applied after the hooks.
        """
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        B, T = ids.shape
        if T > cfg.max_seq_len:
            raise LengthError(f"sequence of {T} tokens exceeds max_seq_len={cfg.max_seq_len}")
        if T == 0:
            raise LengthError("empty token sequence")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ConfigError("token id out of vocabulary range")
        p = params if params is not None else self.weights
        mults = self._multipliers(hooks)
        clamp_by_layer: dict[int, list] = {}
        for (l, i, pos), val in (clamps or {}).items():
            if not (0 <= l < cfg.n_layers and 0 <= i < cfg.d_ff):
                raise ConfigError(f"clamp target ({l}, {i}) out of range")
            if not single:
                raise ConfigError("clamps need an unbatched input")
            clamp_by_layer.setdefault(l, []).append((i, pos % T, val))

        H, dh = cfg.n_heads, cfg.d_head
        x = ad.add(ad.embedding(p["tok_emb"], ids), ad.take(p["pos_emb"], slice(0, T)))
        acts, raws, nodes = [], [], []
        mask = self._causal(T)
        for l in range(cfg.n_layers):
            h = ad.rms_norm(x, p[f"l{l}.ln1"])
            q = ad.transpose(ad.reshape(ad.matmul(h, p[f"l{l}.wq"]), (B, T, H, dh)), (0, 2, 1, 3))
            kt = ad.transpose(ad.reshape(ad.matmul(h, p[f"l{l}.wk"]), (B, T, H, dh)), (0, 2, 3, 1))
            v = ad.transpose(ad.reshape(ad.matmul(h, p[f"l{l}.wv"]), (B, T, H, dh)), (0, 2, 1, 3))
            scores = ad.scale(ad.matmul(q, kt), 1.0 / np.sqrt(dh))
            attn = ad.softmax(scores, mask)
            o = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = ad.add(x, ad.matmul(o, p[f"l{l}.wo"]))
            h2 = ad.rms_norm(x, p[f"l{l}.ln2"])
            a = ad.silu(ad.matmul(h2, p[f"l{l}.w1"]))
            raw = a
            if mults[l] is not None:
                a = ad.mul(a, mults[l])
            if l in clamp_by_layer:
                keep = np.ones((B, T, cfg.d_ff))
                for i, pos, val in clamp_by_layer[l]:
                    keep[0, pos, i] = 0.0
                a = ad.mul(a, keep)
                for i, pos, val in clamp_by_layer[l]:
                    onehot = np.zeros((B, T, cfg.d_ff))
                    onehot[0, pos, i] = 1.0
                    a = ad.add(a, ad.mul(onehot, val))
            if capture:
                acts.append(a.value[0] if single else a.value)
                raws.append(raw.value[0] if single else raw.value)
                nodes.append(a)
            x = ad.add(x, ad.matmul(a, p[f"l{l}.w2"]))
        logits = ad.matmul(ad.rms_norm(x, p["ln_f"]), p["w_out"])
        if single:
            logits = ad.reshape(logits, (T, cfg.vocab_size))
        trace = None
        if capture:
            top = np.argmax(logits.value, axis=-1)
            trace = ForwardTrace(acts, raws, top, nodes)
        return logits, trace

    def forward_with_hooks(self, tokens, hooks=None, capture: bool = True):
        return self.forward(tokens, hooks, capture)

    def generate_greedy(
        self,
        prompt: Sequence[int],
        max_new: int,
        hooks=None,
        *,
        eoa: int | None = None,
        capture: bool = True,
    ) -> tuple[list[int], list[ForwardTrace]]:
        """Argmax decoding (ties to the lowest id) until ``eoa`` or ``max_new`` tokens."""
        if max_new < 1:
            raise ConfigError("max_new must be at least 1")
        seq = list(int(t) for t in prompt)
        if len(seq) > self.config.max_seq_len:
            raise LengthError(f"prompt of {len(seq)} tokens exceeds max_seq_len={self.config.max_seq_len}")
        out, traces = [], []
        for _ in range(max_new):
            if len(seq) > self.config.max_seq_len:
                break
            logits, trace = self.forward(seq, hooks, capture)
            nxt = int(np.argmax(logits.value[-1]))
            out.append(nxt)
            if trace is not None:
                trace.nodes = []
                traces.append(trace)
            seq.append(nxt)
            if eoa is not None and nxt == eoa:
                break
        return out, traces

    # --- final-position recomputation for attribution ---------------------------
    def tail_cache(self, tokens: Sequence[int]) -> TailCache:
        """Run once unhooked and keep what a final-position-only recompute needs."""
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        T = ids.shape[0]
        if T > cfg.max_seq_len:
            raise LengthError(f"sequence of {T} tokens exceeds max_seq_len={cfg.max_seq_len}")
        p = self.weights
        H, dh = cfg.n_heads, cfg.d_head
        x = p["tok_emb"][ids] + p["pos_emb"][:T]
        resid_mid, keys, values, acts = [], [], [], []
        mask = self._causal(T)
        for l in range(cfg.n_layers):
            h = ad.rms_norm(x, p[f"l{l}.ln1"]).value
            q = (h @ p[f"l{l}.wq"]).reshape(T, H, dh)
            k = (h @ p[f"l{l}.wk"]).reshape(T, H, dh)
            v = (h @ p[f"l{l}.wv"]).reshape(T, H, dh)
            s = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(dh)
            att = ad.softmax(s, mask).value
            o = np.einsum("hqk,khd->qhd", att, v).reshape(T, cfg.d_model)
            x = x + o @ p[f"l{l}.wo"]
            a = ad.silu(ad.rms_norm(x, p[f"l{l}.ln2"]).value @ p[f"l{l}.w1"]).value
            resid_mid.append(x[-1].copy())
            keys.append(np.ascontiguousarray(k[:-1].transpose(1, 2, 0)))
            values.append(np.ascontiguousarray(v[:-1].transpose(1, 0, 2)))
            acts.append(a[-1].copy())
            x = x + a @ p[f"l{l}.w2"]
        return TailCache(ids, resid_mid, keys, values, acts)

    def tail_logits(self, cache: TailCache, layer: int, acts: ad.Tensor) -> ad.Tensor:
        """Final-position logits ``(rows, vocab)`` when the layer's final-position
        FFN activation is replaced row-wise by ``acts`` ``(rows, d_ff)``.

        Earlier positions never attend to the final one, so their state is
        reused from ``cache`` unchanged.
        """
        cfg = self.config
        p = self.weights
        rows = acts.shape[0]
        H, dh = cfg.n_heads, cfg.d_head
        x = ad.add(ad.matmul(acts, p[f"l{layer}.w2"]), cache.resid_mid[layer])
        for l in range(layer + 1, cfg.n_layers):
            h = ad.rms_norm(x, p[f"l{l}.ln1"])
            q = ad.transpose(ad.reshape(ad.matmul(h, p[f"l{l}.wq"]), (rows, H, dh)), (1, 0, 2))
            k = ad.transpose(ad.reshape(ad.matmul(h, p[f"l{l}.wk"]), (rows, H, dh)), (1, 0, 2))
            v = ad.transpose(ad.reshape(ad.matmul(h, p[f"l{l}.wv"]), (rows, H, dh)), (1, 0, 2))
            n_prev = cache.keys[l].shape[2]
            s_prev = ad.matmul(q, cache.keys[l])  # (heads, rows, n_prev)
            s_self = ad.reshape(ad.einsum("hbd,hbd->hb", q, k), (H, rows, 1))
            att = ad.softmax(ad.scale(ad.concat([s_prev, s_self], axis=2), 1.0 / np.sqrt(dh)))
            a_prev = ad.take(att, (slice(None), slice(None), slice(0, n_prev)))
            a_self = ad.reshape(ad.take(att, (slice(None), slice(None), slice(n_prev, n_prev + 1))), (H, rows))
            o = ad.add(ad.matmul(a_prev, cache.values[l]), ad.einsum("hb,hbd->hbd", a_self, v))
            o = ad.transpose(o, (1, 0, 2))
            x = ad.add(x, ad.matmul(ad.reshape(o, (rows, cfg.d_model)), p[f"l{l}.wo"]))
            f = ad.silu(ad.matmul(ad.rms_norm(x, p[f"l{l}.ln2"]), p[f"l{l}.w1"]))
            x = ad.add(x, ad.matmul(f, p[f"l{l}.w2"]))
        return ad.matmul(ad.rms_norm(x, p["ln_f"]), p["w_out"])

    # --- persistence ----------------------------------------------------------------
    def to_bytes(self) -> bytes:
        return dump_checkpoint(self.config, self.weights)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TinyTransformer":
        with open(path, "rb") as fh:
            cfg, w = load_checkpoint(fh.read())
        return cls(cfg, w)


def _as_hook_list(hooks) -> list[HookSpec]:
    if hooks is None:
        return []
    if isinstance(hooks, HookSpec):
        return [hooks]
    return list(hooks)


def dump_checkpoint(config: ModelConfig, weights: Mapping[str, np.ndarray]) -> bytes:
    """``KNPL`` | u32 version | u32 len + JSON config | u32 count | tensors.

    Each tensor: u16 name length, UTF-8 name, u8 rank, u32 dims, float64 LE data.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(asdict(config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    names = sorted(weights)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(weights[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise ConfigError("not a KNPL checkpoint")
    view = memoryview(blob)
    off = 4
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", view, off)
    off += 4
    config = ModelConfig(**json.loads(bytes(view[off:off + n])))
    off += n
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    weights = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + nl]).decode()
        off += nl
        (rank,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", view, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        weights[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return config, weights
