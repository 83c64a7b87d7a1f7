"""scikit-learn style classifier wrapping the full pipeline.

`FinSentClassifier` trains the tokenizer and the toy transformer from a
list of sentences, so it drops into sklearn tooling (cross_val_score,
Pipeline, grid search over get_params)."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from finsent.dataset import LABELS, LabeledExample, id_to_label
from finsent.model import ModelConfig, forward_cls, generate_answer
from finsent.packing import pack, tokenize_pair
from finsent.prompting import PromptTemplate
from finsent.tokenizer import train_bpe
from finsent.training import TrainConfig, train_classhead, train_sft


def _as_sentences(X) -> list[str]:
    sentences = [str(x) for x in np.asarray(X, dtype=object).ravel()]
    if not sentences:
        raise ValueError("X must contain at least one sentence")
    return sentences


class FinSentClassifier(ClassifierMixin, BaseEstimator):
    """Financial-news sentiment classifier (positive/negative/neutral).

    Parameters mirror the underlying model and trainer configs; `mode`
    picks generation-style SFT ("sft") or the 3-way head ("classhead").
    """

    def __init__(self, mode="classhead", vocab_size=512, d_model=32,
                 n_layers=2, n_heads=2, d_ff=64, max_seq_len=512,
                 epochs=5, lr_start=3e-5, lr_end=3e-6, micro_batch=4,
                 grad_clip_norm=1.0, float_width=32, seed=0,
                 template=None):
        self.mode = mode
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.epochs = epochs
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.micro_batch = micro_batch
        self.grad_clip_norm = grad_clip_norm
        self.float_width = float_width
        self.seed = seed
        self.template = template

    def _validate(self, X, y):
        if self.mode not in ("sft", "classhead"):
            raise ValueError(f"mode must be 'sft' or 'classhead', got {self.mode!r}")
        sentences = _as_sentences(X)
        labels = [str(v) for v in np.asarray(y, dtype=object).ravel()]
        if len(labels) != len(sentences):
            raise ValueError("X and y length mismatch")
        for label in labels:
            if label not in LABELS:
                raise ValueError(f"unknown label {label!r}; expected one of {LABELS}")
        return sentences, labels

    def fit(self, X, y):
        sentences, labels = self._validate(X, y)
        template = self.template or PromptTemplate.default()
        self.template_ = template
        self.classes_ = np.array(LABELS)
        self.vocab_ = train_bpe(
            [template.build_sft_prompt(s) for s in sentences], self.vocab_size
        )
        examples = [LabeledExample(sentence=s, label=l)
                    for s, l in zip(sentences, labels)]
        tokenized = [
            tokenize_pair(ex, self.vocab_, template, self.max_seq_len, i)
            for i, ex in enumerate(examples)
        ]
        model_cfg = ModelConfig(
            vocab_size=self.vocab_.size, d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff,
            max_seq_len=self.max_seq_len,
            head_type="lm" if self.mode == "sft" else "classification",
            float_width=self.float_width, init_seed=self.seed,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs, lr_start=self.lr_start, lr_end=self.lr_end,
            grad_clip_norm=self.grad_clip_norm, micro_batch=self.micro_batch,
            max_seq_len=self.max_seq_len, seed=self.seed,
        )
        if self.mode == "sft":
            packed = pack(tokenized, self.max_seq_len, self.vocab_)
            self.checkpoint_, self.log_ = train_sft(
                packed, [], model_cfg, train_cfg, self.vocab_
            )
        else:
            self.checkpoint_, self.log_ = train_classhead(
                tokenized, [], model_cfg, train_cfg, self.vocab_
            )
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise ValueError("FinSentClassifier is not fitted yet; call fit first")

    def predict(self, X):
        self._check_fitted()
        preds = []
        for sentence in _as_sentences(X):
            prompt = self.template_.build_sft_prompt(sentence)
            if self.mode == "sft":
                answer_id = generate_answer(
                    self.checkpoint_, self.vocab_.encode(prompt), self.vocab_
                )
                class_id = sorted(self.vocab_.answer_ids).index(answer_id)
            else:
                tokens = [self.vocab_.bos_id, *self.vocab_.encode(prompt),
                          self.vocab_.eos_id]
                class_id = int(np.argmax(forward_cls(self.checkpoint_, tokens)))
            preds.append(id_to_label(class_id))
        return np.array(preds)

    def predict_proba(self, X):
        self._check_fitted()
        if self.mode != "classhead":
            raise ValueError("predict_proba requires mode='classhead'")
        rows = []
        for sentence in _as_sentences(X):
            prompt = self.template_.build_sft_prompt(sentence)
            tokens = [self.vocab_.bos_id, *self.vocab_.encode(prompt),
                      self.vocab_.eos_id]
            logits = forward_cls(self.checkpoint_, tokens)
            probs = np.exp(logits - logits.max())
            rows.append(probs / probs.sum())
        return np.vstack(rows)

    def score(self, X, y, sample_weight=None):
        # accuracy against string labels
        preds = self.predict(X)
        gold = np.asarray([str(v) for v in np.asarray(y, dtype=object).ravel()])
        return float(np.average(preds == gold, weights=sample_weight))
