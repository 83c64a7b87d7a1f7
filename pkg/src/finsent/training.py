"""Training loops: packed-sequence SFT and classification-head fitting.

Both loops share the same recipe: cosine-annealed learning rate, global
gradient-norm clipping, AdamW (or plain SGD), micro-batched updates, and
best-checkpoint selection by validation accuracy. Everything is
deterministic given the seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from finsent.dataset import shuffled_indices
from finsent.model import (
    Checkpoint,
    ModelConfig,
    ModelError,
    backward,
    backward_cls,
    forward_cls,
    generate_answer,
    init,
)
from finsent.packing import PackedSequence, TokenizedExample, build_attention_mask
from finsent.tokenizer import Vocabulary


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, step: int, lr: float):
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e})")
        self.step = step
        self.lr = lr


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr_start: float = 3e-5
    lr_end: float = 3e-6
    schedule: str = "cosine"
    grad_clip_norm: float = 1.0
    micro_batch: int = 4
    max_seq_len: int = 1024
    optimizer: str = "adamw"  # "adamw" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if self.lr_end > self.lr_start:
            raise TrainingError("lr_end must not exceed lr_start")
        if self.grad_clip_norm <= 0:
            raise TrainingError("grad_clip_norm must be positive")
        if self.micro_batch < 1:
            raise TrainingError("micro_batch must be >= 1")
        if self.schedule != "cosine":
            raise TrainingError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise TrainingError("eval_every must be >= 1")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    @property
    def best_val(self) -> tuple[float, int] | None:
        evals = [(r["val_accuracy"], r["step"]) for r in self.records
                 if "val_accuracy" in r]
        if not evals:
            return None
        best = max(e[0] for e in evals)
        step = min(s for a, s in evals if a == best)
        return best, step


def lr_at_step(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr_start (step 0) to lr_end (step total_steps)."""
    if total_steps < 1:
        raise TrainingError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps}]")
    if step == 0:  # keep the endpoints exact despite float rounding
        return cfg.lr_start
    if step == total_steps:
        return cfg.lr_end
    span = cfg.lr_start - cfg.lr_end
    return cfg.lr_end + 0.5 * span * (1.0 + math.cos(math.pi * step / total_steps))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                         for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by a common factor so the global L2 norm is at
    most max_norm; identity when already within the bound."""
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise TrainingError("non-finite gradients")
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def _apply_update(ckpt: Checkpoint, grads: dict[str, np.ndarray],
                  lr: float, cfg: TrainConfig) -> None:
    dt = ckpt.config.dtype
    if cfg.optimizer == "sgd":
        for name, p in ckpt.params.items():
            p -= dt.type(lr) * grads[name].astype(dt)
        return
    ckpt.opt_t += 1
    t = ckpt.opt_t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in ckpt.params.items():
        g = grads[name].astype(dt)
        m = ckpt.opt_state.setdefault("m." + name, np.zeros_like(p))
        v = ckpt.opt_state.setdefault("v." + name, np.zeros_like(p))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if p.ndim >= 2:  # decay weight matrices only, not biases/norm gains
            update = update + cfg.weight_decay * p
        p -= dt.type(lr) * update.astype(dt)


def _average_grads(grad_list: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    out = {k: v.copy() for k, v in grad_list[0].items()}
    for grads in grad_list[1:]:
        for k in out:
            out[k] += grads[k]
    for k in out:
        out[k] /= len(grad_list)
    return out


def sft_accuracy(ckpt: Checkpoint, examples: list[TokenizedExample],
                 vocab: Vocabulary) -> float:
    if not examples:
        return 0.0
    correct = sum(
        generate_answer(ckpt, ex.prompt_tokens, vocab) == ex.answer_token
        for ex in examples
    )
    return correct / len(examples)


def cls_sequence(ex: TokenizedExample, vocab: Vocabulary) -> tuple[list[int], int]:
    """BOS|question|EOS input and the 0/1/2 class id for one example."""
    class_id = sorted(vocab.answer_ids).index(ex.answer_token)
    return [vocab.bos_id, *ex.prompt_tokens, vocab.eos_id], class_id


def cls_accuracy(ckpt: Checkpoint, examples: list[TokenizedExample],
                 vocab: Vocabulary) -> float:
    if not examples:
        return 0.0
    correct = 0
    for ex in examples:
        tokens, class_id = cls_sequence(ex, vocab)
        logits = forward_cls(ckpt, tokens)
        correct += int(np.argmax(logits)) == class_id
    return correct / len(examples)


def _train_loop(items, step_grads_fn, accuracy_fn, model_config: ModelConfig,
                cfg: TrainConfig, log: TrainLog) -> Checkpoint:
    ckpt = init(model_config)
    if cfg.epochs == 0 or not items:
        return ckpt
    n = len(items)
    steps_per_epoch = math.ceil(n / cfg.micro_batch)
    total_steps = cfg.epochs * steps_per_epoch
    best: Checkpoint | None = None
    best_acc = -1.0
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffled_indices(n, cfg.seed + epoch)
        for start in range(0, n, cfg.micro_batch):
            batch = [items[i] for i in order[start : start + cfg.micro_batch]]
            lr = lr_at_step(step, total_steps, cfg)
            try:
                losses, grad_list = step_grads_fn(ckpt, batch)
            except ModelError as exc:
                if "non-finite" in str(exc):
                    raise TrainingDiverged(step, lr) from exc
                raise
            loss = float(np.mean(losses))
            if not math.isfinite(loss):
                raise TrainingDiverged(step, lr)
            grads, _ = clip_gradients(_average_grads(grad_list), cfg.grad_clip_norm)
            _apply_update(ckpt, grads, lr, cfg)
            step += 1
            ckpt.step = step
            log.append({"step": step, "lr": lr, "loss": loss})
            if accuracy_fn is not None and step % cfg.eval_every == 0:
                acc = accuracy_fn(ckpt)
                log.append({"step": step, "val_accuracy": acc})
                if acc > best_acc:
                    best_acc, best = acc, ckpt.copy()
    if accuracy_fn is not None and step % cfg.eval_every != 0:
        acc = accuracy_fn(ckpt)
        log.append({"step": step, "val_accuracy": acc})
        if acc > best_acc:
            best_acc, best = acc, ckpt.copy()
    return best if best is not None else ckpt


def train_sft(train_seqs: list[PackedSequence], val_set: list[TokenizedExample],
              model_config: ModelConfig, cfg: TrainConfig, vocab: Vocabulary,
              log_path: str | Path | None = None) -> tuple[Checkpoint, TrainLog]:
    """Packed-sequence SFT; micro_batch counts packed sequences."""
    if model_config.head_type != "lm":
        raise TrainingError("train_sft requires head_type=lm")
    if cfg.epochs > 0 and not train_seqs:
        raise TrainingError("train set is empty")
    log = TrainLog(path=Path(log_path) if log_path else None)
    masks = {id(s): build_attention_mask(s) for s in train_seqs}

    def step_grads(ckpt, batch):
        losses, grad_list = [], []
        for seq in batch:
            loss, _, grads = backward(ckpt, seq.tokens, masks[id(seq)], seq.labels)
            losses.append(loss)
            grad_list.append(grads)
        return losses, grad_list

    accuracy_fn = (lambda c: sft_accuracy(c, val_set, vocab)) if val_set else None
    ckpt = _train_loop(train_seqs, step_grads, accuracy_fn, model_config, cfg, log)
    return ckpt, log


def train_classhead(train_set: list[TokenizedExample],
                    val_set: list[TokenizedExample],
                    model_config: ModelConfig, cfg: TrainConfig,
                    vocab: Vocabulary,
                    log_path: str | Path | None = None
                    ) -> tuple[Checkpoint, TrainLog]:
    """Classification-head training; one sample per forward, gradients
    accumulated across the micro-batch before each update."""
    if model_config.head_type != "classification":
        raise TrainingError("train_classhead requires head_type=classification")
    if cfg.epochs > 0 and not train_set:
        raise TrainingError("train set is empty")
    log = TrainLog(path=Path(log_path) if log_path else None)
    samples = [cls_sequence(ex, vocab) for ex in train_set]

    def step_grads(ckpt, batch):
        losses, grad_list = [], []
        for tokens, class_id in batch:
            loss, grads = backward_cls(ckpt, tokens, class_id)
            losses.append(loss)
            grad_list.append(grads)
        return losses, grad_list

    accuracy_fn = (lambda c: cls_accuracy(c, val_set, vocab)) if val_set else None
    ckpt = _train_loop(samples, step_grads, accuracy_fn, model_config, cfg, log)
    return ckpt, log
