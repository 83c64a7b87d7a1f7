"""Small decoder-only transformer with explicit forward and backward passes.

Pre-norm blocks, learned positional embeddings, arbitrary boolean
attention masks, and two heads: a language-model head over the full
vocabulary and a 3-way classification head read off the final EOS hidden
state. Gradients are computed analytically in numpy so they can be checked
against finite differences exactly at float64.

Positions are segment-local by default: a token's position index is the
number of earlier positions it may attend to, which the mask encodes
directly. Under that choice a packed segment computes bit-for-bit the same
rows as the same example run alone.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from finsent.tokenizer import IGNORE_LABEL, Vocabulary

LN_EPS = 1e-5
INIT_STD = 0.02
N_CLASSES = 3

CHECKPOINT_MAGIC = b"FSNT"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    head_type: str = "lm"  # "lm" | "classification"
    float_width: int = 32  # 32 | 64
    init_seed: int = 0
    positions: str = "segment"  # "segment" | "absolute"
    tied_lm_head: bool = False

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers,
               self.n_heads, self.d_ff, self.max_seq_len) < 1:
            raise ModelError("all size fields must be positive")
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.head_type not in ("lm", "classification"):
            raise ModelError(f"unknown head_type {self.head_type!r}")
        if self.float_width not in (32, 64):
            raise ModelError(f"float_width must be 32 or 64")
        if self.positions not in ("segment", "absolute"):
            raise ModelError(f"unknown positions mode {self.positions!r}")
        if self.tied_lm_head and self.head_type != "lm":
            raise ModelError("tied_lm_head requires the lm head")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.float_width == 32 else np.float64)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    opt_t: int = 0
    step: int = 0

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            opt_state={k: v.copy() for k, v in self.opt_state.items()},
            opt_t=self.opt_t,
            step=self.step,
        )


def init(config: ModelConfig) -> Checkpoint:
    """Seeded init: scaled normal for weight matrices, zeros for biases
    and norm offsets, ones for norm gains."""
    rng = np.random.default_rng(config.init_seed)
    dt = config.dtype

    def normal(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(dt)

    d, dff = config.d_model, config.d_ff
    params: dict[str, np.ndarray] = {
        "tok_emb": normal(config.vocab_size, d),
        "pos_emb": normal(config.max_seq_len, d),
        "ln_f.g": np.ones(d, dtype=dt),
        "ln_f.b": np.zeros(d, dtype=dt),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        params[p + "ln1.g"] = np.ones(d, dtype=dt)
        params[p + "ln1.b"] = np.zeros(d, dtype=dt)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + name] = normal(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[p + "attn." + name] = np.zeros(d, dtype=dt)
        params[p + "ln2.g"] = np.ones(d, dtype=dt)
        params[p + "ln2.b"] = np.zeros(d, dtype=dt)
        params[p + "ff.w1"] = normal(d, dff)
        params[p + "ff.b1"] = np.zeros(dff, dtype=dt)
        params[p + "ff.w2"] = normal(dff, d)
        params[p + "ff.b2"] = np.zeros(d, dtype=dt)
    if config.head_type == "lm":
        if not config.tied_lm_head:
            params["lm_head.w"] = normal(d, config.vocab_size)
        params["lm_head.b"] = np.zeros(config.vocab_size, dtype=dt)
    else:
        params["cls_head.w"] = normal(d, N_CLASSES)
        params["cls_head.b"] = np.zeros(N_CLASSES, dtype=dt)
    return Checkpoint(config=config, params=params)


# ---------------------------------------------------------------------------
# primitive forward/backward pieces


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def _softmax(scores):
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def _positions(config: ModelConfig, mask: np.ndarray) -> np.ndarray:
    if config.positions == "segment":
        return mask.sum(axis=1) - 1
    return np.arange(mask.shape[0])


def _forward_hidden(ckpt: Checkpoint, tokens: np.ndarray, mask: np.ndarray):
    cfg, params = ckpt.config, ckpt.params
    T = len(tokens)
    if T > cfg.max_seq_len:
        raise ModelError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if mask.shape != (T, T):
        raise ModelError(f"mask shape {mask.shape} does not match length {T}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise ModelError("token id out of vocabulary range")

    pos = _positions(cfg, mask)
    x = params["tok_emb"][tokens] + params["pos_emb"][pos]
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    neg = np.finfo(cfg.dtype).min
    layer_caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h1, ln1c = _layernorm_fwd(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = h1 @ params[p + "attn.wq"] + params[p + "attn.bq"]
        k = h1 @ params[p + "attn.wk"] + params[p + "attn.bk"]
        v = h1 @ params[p + "attn.wv"] + params[p + "attn.bv"]
        qh = q.reshape(T, H, dh).transpose(1, 0, 2)
        kh = k.reshape(T, H, dh).transpose(1, 0, 2)
        vh = v.reshape(T, H, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
        scores = np.where(mask[None, :, :], scores, neg)
        attn = _softmax(scores)
        ctx = (attn @ vh).transpose(1, 0, 2).reshape(T, cfg.d_model)
        attn_out = ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        x_mid = x + attn_out
        h2, ln2c = _layernorm_fwd(x_mid, params[p + "ln2.g"], params[p + "ln2.b"])
        pre = h2 @ params[p + "ff.w1"] + params[p + "ff.b1"]
        act, geluc = _gelu_fwd(pre)
        ff_out = act @ params[p + "ff.w2"] + params[p + "ff.b2"]
        x_new = x_mid + ff_out
        layer_caches.append((ln1c, h1, qh, kh, vh, attn, ctx, ln2c, h2, geluc, act))
        x = x_new
    hf, lnfc = _layernorm_fwd(x, params["ln_f.g"], params["ln_f.b"])
    return hf, (tokens, pos, layer_caches, lnfc)


def _zero_grads(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in ckpt.params.items()}


def _backward_hidden(ckpt: Checkpoint, d_hf: np.ndarray, cache,
                     grads: dict[str, np.ndarray]) -> None:
    cfg, params = ckpt.config, ckpt.params
    tokens, pos, layer_caches, lnfc = cache
    T = len(tokens)
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

    dx, dg, db = _layernorm_bwd(d_hf, lnfc)
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        ln1c, h1, qh, kh, vh, attn, ctx, ln2c, h2, geluc, act = layer_caches[i]

        # feed-forward branch
        d_ff_out = dx
        grads[p + "ff.w2"] += act.T @ d_ff_out
        grads[p + "ff.b2"] += d_ff_out.sum(axis=0)
        d_act = d_ff_out @ params[p + "ff.w2"].T
        d_pre = _gelu_bwd(d_act, geluc)
        grads[p + "ff.w1"] += h2.T @ d_pre
        grads[p + "ff.b1"] += d_pre.sum(axis=0)
        d_h2 = d_pre @ params[p + "ff.w1"].T
        d_x_mid, dg, db = _layernorm_bwd(d_h2, ln2c)
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        d_x_mid = d_x_mid + dx  # residual

        # attention branch
        d_attn_out = d_x_mid
        grads[p + "attn.wo"] += ctx.T @ d_attn_out
        grads[p + "attn.bo"] += d_attn_out.sum(axis=0)
        d_ctx = (d_attn_out @ params[p + "attn.wo"].T).reshape(T, H, dh).transpose(1, 0, 2)
        d_attn = d_ctx @ vh.transpose(0, 2, 1)
        d_vh = attn.transpose(0, 2, 1) @ d_ctx
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_scores /= np.sqrt(dh)
        d_qh = d_scores @ kh
        d_kh = d_scores.transpose(0, 2, 1) @ qh
        dq = d_qh.transpose(1, 0, 2).reshape(T, cfg.d_model)
        dk = d_kh.transpose(1, 0, 2).reshape(T, cfg.d_model)
        dv = d_vh.transpose(1, 0, 2).reshape(T, cfg.d_model)
        grads[p + "attn.wq"] += h1.T @ dq
        grads[p + "attn.bq"] += dq.sum(axis=0)
        grads[p + "attn.wk"] += h1.T @ dk
        grads[p + "attn.bk"] += dk.sum(axis=0)
        grads[p + "attn.wv"] += h1.T @ dv
        grads[p + "attn.bv"] += dv.sum(axis=0)
        d_h1 = (
            dq @ params[p + "attn.wq"].T
            + dk @ params[p + "attn.wk"].T
            + dv @ params[p + "attn.wv"].T
        )
        d_x, dg, db = _layernorm_bwd(d_h1, ln1c)
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = d_x + d_x_mid  # residual

    np.add.at(grads["tok_emb"], tokens, dx)
    np.add.at(grads["pos_emb"], pos, dx)


# ---------------------------------------------------------------------------
# public forward / loss / backward


def forward_lm(ckpt: Checkpoint, tokens, mask: np.ndarray) -> np.ndarray:
    """Logits (T, V). Row t depends only on positions the mask allows."""
    if ckpt.config.head_type != "lm":
        raise ModelError("forward_lm requires head_type=lm")
    tokens = np.asarray(tokens, dtype=np.int64)
    hf, _ = _forward_hidden(ckpt, tokens, mask)
    return hf @ _lm_weight(ckpt) + ckpt.params["lm_head.b"]


def _lm_weight(ckpt: Checkpoint) -> np.ndarray:
    if ckpt.config.tied_lm_head:
        return ckpt.params["tok_emb"].T
    return ckpt.params["lm_head.w"]


def forward_cls(ckpt: Checkpoint, tokens) -> np.ndarray:
    """Classification logits (3,) from the final EOS hidden state.

    Input layout must be BOS, question tokens, EOS; one sample per call.
    """
    if ckpt.config.head_type != "classification":
        raise ModelError("forward_cls requires head_type=classification")
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_cls_frame(ckpt, tokens)
    from finsent.packing import causal_mask

    hf, _ = _forward_hidden(ckpt, tokens, causal_mask(len(tokens)))
    return hf[-1] @ ckpt.params["cls_head.w"] + ckpt.params["cls_head.b"]


def _check_cls_frame(ckpt: Checkpoint, tokens: np.ndarray) -> None:
    from finsent.tokenizer import BOS_ID, EOS_ID

    if len(tokens) < 2 or tokens[0] != BOS_ID or tokens[-1] != EOS_ID:
        raise ModelError("classification input must be BOS, question, EOS")


def loss_lm(logits: np.ndarray, labels, ignore_label: int = IGNORE_LABEL
            ) -> tuple[float, int]:
    """Mean cross-entropy over non-ignored positions; (loss, n_counted)."""
    labels = np.asarray(labels, dtype=np.int64)
    counted = labels != ignore_label
    n = int(counted.sum())
    if n == 0:
        return 0.0, 0
    if labels[counted].min() < 0 or labels[counted].max() >= logits.shape[1]:
        raise ModelError("label id out of vocabulary range")
    rows = logits[counted]
    logp = rows - _logsumexp(rows)
    return float(-logp[np.arange(n), labels[counted]].mean()), n


def loss_cls(logits: np.ndarray, class_id: int) -> float:
    if not 0 <= class_id < N_CLASSES:
        raise ModelError(f"class id {class_id} out of range")
    logp = logits - _logsumexp(logits[None, :])[0]
    return float(-logp[class_id])


def _logsumexp(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(rows - m).sum(axis=-1, keepdims=True))


def backward(ckpt: Checkpoint, tokens, mask: np.ndarray, labels,
             ignore_label: int = IGNORE_LABEL
             ) -> tuple[float, int, dict[str, np.ndarray]]:
    """Loss and exact parameter gradients for the masked LM objective."""
    if ckpt.config.head_type != "lm":
        raise ModelError("backward requires head_type=lm")
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    hf, cache = _forward_hidden(ckpt, tokens, mask)
    w = _lm_weight(ckpt)
    logits = hf @ w + ckpt.params["lm_head.b"]
    loss, n = loss_lm(logits, labels, ignore_label)
    if not np.isfinite(loss):
        raise ModelError("non-finite loss")
    grads = _zero_grads(ckpt)
    if n == 0:
        return loss, 0, grads

    counted = labels != ignore_label
    d_logits = np.zeros_like(logits)
    probs = np.exp(logits[counted] - _logsumexp(logits[counted]))
    probs[np.arange(n), labels[counted]] -= 1.0
    d_logits[counted] = probs / n

    grads["lm_head.b"] += d_logits.sum(axis=0)
    if ckpt.config.tied_lm_head:
        grads["tok_emb"] += (hf.T @ d_logits).T
    else:
        grads["lm_head.w"] += hf.T @ d_logits
    d_hf = d_logits @ w.T
    _backward_hidden(ckpt, d_hf, cache, grads)
    return loss, n, grads


def backward_cls(ckpt: Checkpoint, tokens, class_id: int
                 ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact parameter gradients for the classification head."""
    if ckpt.config.head_type != "classification":
        raise ModelError("backward_cls requires head_type=classification")
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_cls_frame(ckpt, tokens)
    from finsent.packing import causal_mask

    hf, cache = _forward_hidden(ckpt, tokens, causal_mask(len(tokens)))
    logits = hf[-1] @ ckpt.params["cls_head.w"] + ckpt.params["cls_head.b"]
    loss = loss_cls(logits, class_id)
    if not np.isfinite(loss):
        raise ModelError("non-finite loss")

    d_logits = np.exp(logits - _logsumexp(logits[None, :])[0])
    d_logits[class_id] -= 1.0
    grads = _zero_grads(ckpt)
    grads["cls_head.w"] += np.outer(hf[-1], d_logits)
    grads["cls_head.b"] += d_logits
    d_hf = np.zeros_like(hf)
    d_hf[-1] = ckpt.params["cls_head.w"] @ d_logits
    _backward_hidden(ckpt, d_hf, cache, grads)
    return loss, grads


def generate_answer(ckpt: Checkpoint, prompt_tokens, vocab: Vocabulary) -> int:
    """Constrained greedy decode: argmax over the three answer-letter ids
    at the position after EOS; ties go to the lowest token id."""
    tokens = [vocab.bos_id, *prompt_tokens, vocab.eos_id]
    from finsent.packing import causal_mask

    logits = forward_lm(ckpt, tokens, causal_mask(len(tokens)))[-1]
    answer_ids = sorted(vocab.answer_ids)
    best = answer_ids[0]
    for tid in answer_ids[1:]:
        if logits[tid] > logits[best]:
            best = tid
    return best


# ---------------------------------------------------------------------------
# checkpoint serialization


_CONFIG_FIELDS = (
    "vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len",
    "head_type", "float_width", "init_seed", "positions", "tied_lm_head",
)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Versioned binary container; round-trips bit-exactly."""
    cfg = ckpt.config
    header_lines = [f"{name}={getattr(cfg, name)}" for name in _CONFIG_FIELDS]
    header_lines.append(f"step={ckpt.step}")
    header_lines.append(f"opt_t={ckpt.opt_t}")
    header = "\n".join(header_lines).encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    tensors = [(k, v) for k, v in sorted(ckpt.params.items())]
    tensors += [("opt." + k, v) for k, v in sorted(ckpt.opt_state.items())]
    buf.write(struct.pack("<I", len(tensors)))
    wire_dtype = np.dtype("<f4" if cfg.float_width == 32 else "<f8")
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(arr, dtype=wire_dtype).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ModelError(f"not a checkpoint file: {path}")
    version, header_len = struct.unpack("<II", buf.read(8))
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    header = dict(
        line.split("=", 1) for line in buf.read(header_len).decode("utf-8").split("\n")
    )
    cfg = ModelConfig(
        vocab_size=int(header["vocab_size"]),
        d_model=int(header["d_model"]),
        n_layers=int(header["n_layers"]),
        n_heads=int(header["n_heads"]),
        d_ff=int(header["d_ff"]),
        max_seq_len=int(header["max_seq_len"]),
        head_type=header["head_type"],
        float_width=int(header["float_width"]),
        init_seed=int(header["init_seed"]),
        positions=header["positions"],
        tied_lm_head=header["tied_lm_head"] == "True",
    )
    wire_dtype = np.dtype("<f4" if cfg.float_width == 32 else "<f8")
    (n_tensors,) = struct.unpack("<I", buf.read(4))
    params: dict[str, np.ndarray] = {}
    opt_state: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", buf.read(4))
        name = buf.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", buf.read(4))
        dims = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(buf.read(count * wire_dtype.itemsize), dtype=wire_dtype)
        arr = arr.reshape(dims).astype(cfg.dtype)
        if name.startswith("opt."):
            opt_state[name[4:]] = arr.copy()
        else:
            params[name] = arr.copy()
    ckpt = Checkpoint(
        config=cfg, params=params, opt_state=opt_state,
        opt_t=int(header["opt_t"]), step=int(header["step"]),
    )
    for k, v in ckpt.params.items():
        if not np.all(np.isfinite(v)):
            raise ModelError(f"non-finite parameter {k} in {path}")
    return ckpt
