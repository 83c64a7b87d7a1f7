"""Acceptance suite: ten product-level criteria, one pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from finsent.cli import main
from finsent.dataset import LabeledExample, SplitSpec, load_phrasebank, \
    save_split_manifest, shuffled_indices, split_indices
from finsent.model import ModelConfig, backward, backward_cls, \
    forward_lm, init, loss_cls, loss_lm
from finsent.packing import PackedSequence, build_attention_mask, \
    causal_mask, pack, tokenize_pair
from finsent.tokenizer import train_bpe
from finsent.training import TrainConfig, _apply_update, _average_grads, \
    clip_gradients, cls_accuracy, lr_at_step, sft_accuracy, train_classhead, \
    train_sft

from conftest import TOY_TEMPLATE, toy_corpus
from test_model import TINY_CLS, TINY_LM, _finite_difference_worst, \
    _spread_params, random_examples

GOLDEN = Path(__file__).parent / "golden"


def report(number, name, ok, elapsed, detail=""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"criterion {number:2d} [{name}]: {status} in {elapsed:.1f}s{suffix}")
    assert ok, f"criterion {number} ({name}) failed: {detail}"


@pytest.fixture(scope="module")
def toy_vocab64():
    corpus = [TOY_TEMPLATE.build_sft_prompt(e.sentence) for e in toy_corpus(64)]
    return train_bpe(corpus, 300)


def small_model(vocab, head="lm", float_width=32, seed=0):
    return ModelConfig(vocab_size=vocab.size, d_model=32, n_layers=2,
                       n_heads=2, d_ff=64, max_seq_len=64,
                       head_type="classification" if head == "cls" else "lm",
                       float_width=float_width, init_seed=seed)


def test_criterion_1_packing_equivalence(toy_vocab64):
    t0 = time.time()
    rng = np.random.default_rng(0)
    examples = random_examples(toy_vocab64, 120, rng, max_prompt=12)
    worst = {32: 0.0, 64: 0.0}
    multi_segment = 0
    for width in (32, 64):
        ckpt = init(small_model(toy_vocab64, float_width=width, seed=3))
        for seq in pack(examples, 64, toy_vocab64):
            multi_segment += seq.pair_count > 1
            packed = forward_lm(ckpt, seq.tokens, build_attention_mask(seq))
            start = 0
            for k in range(seq.pair_count):
                length = seq.segment_ids.count(k)
                iso = forward_lm(ckpt, seq.tokens[start : start + length],
                                 causal_mask(length))
                answer_pos = length - 2  # the EOS position predicts the answer
                diff = np.abs(packed[start + answer_pos] - iso[answer_pos]).max()
                worst[width] = max(worst[width], float(diff))
                start += length
    elapsed = time.time() - t0
    ok = worst[32] < 1e-5 and worst[64] < 1e-10 and multi_segment > 0 \
        and elapsed < 60
    report(1, "packing equivalence", ok, elapsed,
           f"max diff f32={worst[32]:.2e} f64={worst[64]:.2e}")


def test_criterion_2_mask_oracle():
    t0 = time.time()
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(1000):
        T = int(rng.integers(2, 40))
        cuts = np.sort(rng.integers(0, 2, size=T - 1))
        seg_ids = np.concatenate([[0], np.cumsum(rng.integers(0, 2, size=T - 1))])
        seg = [int(s) for s in seg_ids]
        seq = PackedSequence(tokens=tuple([0] * T), labels=tuple([-1] * T),
                             segment_ids=tuple(seg), pair_count=seg[-1] + 1,
                             source_indices=tuple(range(seg[-1] + 1)))
        mask = build_attention_mask(seq)
        brute = np.array([[seg[i] == seg[j] and j <= i for j in range(T)]
                          for i in range(T)])
        if not (mask == brute).all():
            ok = False
            break
    elapsed = time.time() - t0
    report(2, "mask oracle", ok and elapsed < 10, elapsed,
           "1000 random segmentations")


def test_criterion_3_gradient_check():
    t0 = time.time()
    ckpt = init(TINY_LM)
    _spread_params(ckpt)
    tokens, labels = [0, 3, 4, 5, 1, 2], [-1, -1, 6, -1, 7, -1]
    mask = causal_mask(6)
    _, _, grads = backward(ckpt, tokens, mask, labels)
    worst_lm = _finite_difference_worst(
        ckpt, lambda: loss_lm(forward_lm(ckpt, tokens, mask), labels)[0], grads
    )
    from finsent.model import forward_cls

    ckpt_c = init(TINY_CLS)
    _spread_params(ckpt_c)
    cls_tokens = [256, 65, 70, 80, 257]
    _, grads_c = backward_cls(ckpt_c, cls_tokens, 2)
    worst_cls = _finite_difference_worst(
        ckpt_c, lambda: loss_cls(forward_cls(ckpt_c, cls_tokens), 2), grads_c
    )
    elapsed = time.time() - t0
    ok = worst_lm < 1e-4 and worst_cls < 1e-4 and elapsed < 120
    report(3, "gradient check", ok, elapsed,
           f"rel err lm={worst_lm:.2e} cls={worst_cls:.2e}")


def test_criterion_4_loss_masking(toy_vocab64):
    t0 = time.time()
    examples = toy_corpus(24)
    toks = [tokenize_pair(e, toy_vocab64, TOY_TEMPLATE, 64, i)
            for i, e in enumerate(examples)]
    seqs = pack(toks, 64, toy_vocab64)
    ckpt = init(small_model(toy_vocab64, float_width=64))
    rng = np.random.default_rng(2)
    counted_total = 0
    exact = True
    for seq in seqs:
        logits = forward_lm(ckpt, seq.tokens, build_attention_mask(seq))
        labels = np.array(seq.labels)
        base, counted = loss_lm(logits, labels)
        counted_total += counted
        noisy = logits.copy()
        noisy[labels == -1] += rng.standard_normal((int((labels == -1).sum()),
                                                    logits.shape[1])) * 10.0
        perturbed, _ = loss_lm(noisy, labels)
        exact = exact and perturbed == base
    elapsed = time.time() - t0
    ok = exact and counted_total == len(examples) and elapsed < 10
    report(4, "loss masking", ok, elapsed,
           f"{counted_total} supervised positions for {len(examples)} examples")


def test_criterion_5_overfit_and_control(toy_vocab64):
    t0 = time.time()
    train = toy_corpus(64)
    toks = [tokenize_pair(e, toy_vocab64, TOY_TEMPLATE, 64, i)
            for i, e in enumerate(train)]
    # 64 examples / micro-batch 4 = 16 steps per epoch; 31 epochs = 496 steps
    cfg = TrainConfig(epochs=31, lr_start=3e-3, lr_end=3e-4, micro_batch=4,
                      max_seq_len=64, seed=0, eval_every=10**6)
    ckpt_sft, _ = train_sft(pack(toks, 64, toy_vocab64), [],
                            small_model(toy_vocab64), cfg, toy_vocab64)
    sft_acc = sft_accuracy(ckpt_sft, toks, toy_vocab64)
    ckpt_cls, _ = train_classhead(toks, [], small_model(toy_vocab64, "cls"),
                                  cfg, toy_vocab64)
    cls_acc = cls_accuracy(ckpt_cls, toks, toy_vocab64)

    # control: labels shuffled across the whole set, so the 90 held-out
    # examples carry no learnable signal and accuracy must sit near chance
    full = toy_corpus(64 + 90)
    perm = shuffled_indices(len(full), 1234)
    shuffled = [LabeledExample(full[i].sentence, full[perm[i]].label)
                for i in range(len(full))]
    tok_tr = [tokenize_pair(e, toy_vocab64, TOY_TEMPLATE, 64, i)
              for i, e in enumerate(shuffled[:64])]
    tok_val = [tokenize_pair(e, toy_vocab64, TOY_TEMPLATE, 64, i)
               for i, e in enumerate(shuffled[64:])]
    ckpt_ctrl, _ = train_classhead(tok_tr, [], small_model(toy_vocab64, "cls"),
                                   cfg, toy_vocab64)
    control = cls_accuracy(ckpt_ctrl, tok_val, toy_vocab64)
    elapsed = time.time() - t0
    ok = sft_acc == 1.0 and cls_acc == 1.0 and abs(control - 1 / 3) <= 0.10 \
        and elapsed < 300
    report(5, "overfit oracle", ok, elapsed,
           f"sft={sft_acc:.2f} cls={cls_acc:.2f} control={control:.3f}")


def test_criterion_6_schedule_and_clip():
    t0 = time.time()
    cfg = TrainConfig()
    endpoints = lr_at_step(0, 1000, cfg) == 3e-5 \
        and lr_at_step(1000, 1000, cfg) == 3e-6
    rng = np.random.default_rng(3)
    clip_ok = True
    for _ in range(50):
        grads = {f"p{i}": rng.standard_normal(rng.integers(1, 40)) * 10
                 for i in range(5)}
        clipped, _ = clip_gradients(grads, 1.0)
        norm = np.sqrt(sum(float((g ** 2).sum()) for g in clipped.values()))
        clip_ok = clip_ok and norm <= 1.0 + 1e-9
    elapsed = time.time() - t0
    report(6, "schedule/clip exactness", endpoints and clip_ok, elapsed,
           "endpoints 3e-5/3e-6, 50 random clips")


def test_criterion_7_data_protocol(tmp_path):
    # the published corpus is 4845 agreed-upon sentences; a synthetic file in
    # the same sentence@label format checks the counts and determinism
    t0 = time.time()
    labels = ("positive", "negative", "neutral")
    lines = [f"Synthetic filler sentence number {i} .@{labels[i % 3]}"
             for i in range(4845)]
    path = tmp_path / "Sentences_50Agree.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    examples = load_phrasebank(path)
    spec = SplitSpec(seed=0)
    manifests = []
    for run in range(2):
        tr, va, te = split_indices(len(examples), spec)
        mpath = tmp_path / f"splits{run}.json"
        save_split_manifest(mpath, len(examples), spec, tr, va, te)
        manifests.append(mpath.read_bytes())
    n_test = len(split_indices(len(examples), spec)[2])
    elapsed = time.time() - t0
    ok = len(examples) == 4845 and n_test == 969 \
        and manifests[0] == manifests[1] and elapsed < 10
    report(7, "data protocol", ok, elapsed,
           f"{len(examples)} examples, {n_test} test, reruns bit-identical")


def test_criterion_8_prompt_fidelity(capsys):
    t0 = time.time()
    main(["prompt", "--title", "Testco shares rose."])
    sft_out = capsys.readouterr().out.encode()
    main(["prompt", "--title", "Testco shares rose.", "--fewshot"])
    few_out = capsys.readouterr().out.encode()
    ok = sft_out == (GOLDEN / "sft_prompt.txt").read_bytes() \
        and few_out == (GOLDEN / "fewshot_prompt.txt").read_bytes()
    elapsed = time.time() - t0
    with capsys.disabled():
        report(8, "prompt fidelity", ok, elapsed, "golden bytes match")


def test_criterion_9_end_to_end_determinism(tmp_path):
    t0 = time.time()
    data = tmp_path / "data.txt"
    data.write_text("\n".join(f"{e.sentence}@{e.label}"
                              for e in toy_corpus(48)) + "\n", encoding="utf-8")
    template = tmp_path / "template.txt"
    TOY_TEMPLATE.to_file(template)
    config = tmp_path / "config.txt"
    config.write_text(
        "tokenizer.vocab_size = 300\nmodel.d_model = 32\nmodel.n_layers = 2\n"
        "model.n_heads = 2\nmodel.d_ff = 64\nmodel.max_seq_len = 64\n"
        "train.epochs = 3\ntrain.lr_start = 1e-3\ntrain.lr_end = 1e-4\n"
        "train.eval_every = 10\n", encoding="utf-8")
    reports = []
    for run in ("a", "b"):
        base = tmp_path / run
        assert main(["prepare", "--data", str(data), "--out", str(base / "prep"),
                     "--template", str(template), "--config", str(config)]) == 0
        assert main(["train", "--mode", "sft", "--prep", str(base / "prep"),
                     "--out", str(base / "run"), "--config", str(config)]) == 0
        assert main(["eval", "--mode", "sft",
                     "--ckpt", str(base / "run" / "checkpoint.fsnt"),
                     "--prep", str(base / "prep"),
                     "--out", str(base / "eval")]) == 0
        reports.append((base / "eval" / "report.json").read_bytes())
    elapsed = time.time() - t0
    report(9, "end-to-end determinism", reports[0] == reports[1], elapsed,
           "two runs, identical report.json")


def test_criterion_10_accumulation_equivalence(toy_vocab64):
    t0 = time.time()
    toks = [tokenize_pair(e, toy_vocab64, TOY_TEMPLATE, 64, i)
            for i, e in enumerate(toy_corpus(4))]
    from finsent.training import cls_sequence

    samples = [cls_sequence(ex, toy_vocab64) for ex in toks]
    mcfg = ModelConfig(vocab_size=toy_vocab64.size, d_model=16, n_layers=1,
                       n_heads=2, d_ff=32, max_seq_len=64,
                       head_type="classification", float_width=64, init_seed=1)
    cfg = TrainConfig(epochs=1, lr_start=1e-3, lr_end=1e-3, micro_batch=4,
                      max_seq_len=64)

    ck_a = init(mcfg)
    acc = None
    for tokens, class_id in samples:
        _, grads = backward_cls(ck_a, tokens, class_id)
        if acc is None:
            acc = {k: g.copy() for k, g in grads.items()}
        else:
            for k in acc:
                acc[k] += grads[k]
    for k in acc:
        acc[k] /= len(samples)
    acc, _ = clip_gradients(acc, cfg.grad_clip_norm)
    _apply_update(ck_a, acc, 1e-3, cfg)

    ck_b = init(mcfg)
    grad_list = [backward_cls(ck_b, t, c)[1] for t, c in samples]
    avg, _ = clip_gradients(_average_grads(grad_list), cfg.grad_clip_norm)
    _apply_update(ck_b, avg, 1e-3, cfg)

    worst = max(float(np.abs(ck_a.params[n] - ck_b.params[n]).max())
                for n in ck_a.params)
    elapsed = time.time() - t0
    report(10, "accumulation equivalence", worst < 1e-6, elapsed,
           f"max param diff {worst:.2e}")
