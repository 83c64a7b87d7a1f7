"""Command-line entry point: prepare / train / eval / prompt.

All artifacts of a command land under its --out directory: splits.json,
vocab.txt, *.pack caches, checkpoint.fsnt, trainlog.jsonl, report.json,
report.txt, and a resolved runconfig.txt for provenance. Exit codes:
0 success, 2 config error, 3 data error, 4 divergence, 5 accuracy gate
failed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from finsent import dataset, evaluation, packing, prompting, tokenizer
from finsent.model import (
    ModelConfig,
    ModelError,
    load_checkpoint,
    save_checkpoint,
)
from finsent.training import (
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    train_classhead,
    train_sft,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_GATE = 5


class ConfigError(ValueError):
    pass


# resolved key=value defaults; config file and flags override in that order
PRESETS = {
    "toy": {
        "data.path": "",
        "data.test_fraction": "0.2",
        "data.val_fraction": "0.1",
        "data.seed": "0",
        "tokenizer.vocab_size": "2048",
        "model.d_model": "128",
        "model.n_layers": "4",
        "model.n_heads": "4",
        "model.d_ff": "256",
        "model.max_seq_len": "256",
        "model.float_width": "32",
        "model.positions": "segment",
        "model.tied_lm_head": "false",
        "model.init_seed": "0",
        "train.epochs": "5",
        "train.lr_start": "3e-5",
        "train.lr_end": "3e-6",
        "train.grad_clip_norm": "1.0",
        "train.micro_batch": "4",
        "train.optimizer": "adamw",
        "train.seed": "0",
        "train.eval_every": "50",
    },
}
# documentation preset: the published optimization recipe at full sequence
# length; the 7B model itself is out of scope, so model dims stay small
PRESETS["paper"] = dict(
    PRESETS["toy"],
    **{"model.max_seq_len": "1024", "train.epochs": "5",
       "train.micro_batch": "4"},
)


def parse_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def resolve_config(preset: str, config_path: str | None,
                   overrides: dict[str, str]) -> dict[str, str]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    values = dict(PRESETS[preset])
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        file_values = parse_config_file(path)
        unknown = set(file_values) - set(values)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    values.update(overrides)
    return values


def write_runconfig(out: Path, values: dict[str, str]) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(values.items())]
    (out / "runconfig.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _bool(value: str) -> bool:
    return value.lower() in ("1", "true", "yes")


def model_config_from(values: dict[str, str], vocab_size: int,
                      head_type: str) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=int(values["model.d_model"]),
        n_layers=int(values["model.n_layers"]),
        n_heads=int(values["model.n_heads"]),
        d_ff=int(values["model.d_ff"]),
        max_seq_len=int(values["model.max_seq_len"]),
        head_type=head_type,
        float_width=int(values["model.float_width"]),
        init_seed=int(values["model.init_seed"]),
        positions=values["model.positions"],
        tied_lm_head=_bool(values["model.tied_lm_head"]),
    )


def train_config_from(values: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        epochs=int(values["train.epochs"]),
        lr_start=float(values["train.lr_start"]),
        lr_end=float(values["train.lr_end"]),
        grad_clip_norm=float(values["train.grad_clip_norm"]),
        micro_batch=int(values["train.micro_batch"]),
        max_seq_len=int(values["model.max_seq_len"]),
        optimizer=values["train.optimizer"],
        seed=int(values["train.seed"]),
        eval_every=int(values["train.eval_every"]),
    )


class OutputLock:
    def __init__(self, out: Path):
        self.lock = out / ".lock"

    def __enter__(self):
        if self.lock.exists():
            raise ConfigError(f"output directory is locked: {self.lock}")
        self.lock.touch()
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)


def _load_template(path: str | None) -> prompting.PromptTemplate:
    if path is None:
        return prompting.PromptTemplate.default()
    return prompting.PromptTemplate.from_file(path)


def _load_prepared(prep: Path):
    """(examples, splits, vocab, template, values) from a prepare dir."""
    values = parse_config_file(prep / "runconfig.txt")
    examples = dataset.load_phrasebank(values["data.path"])
    splits = dataset.load_split_manifest(prep / "splits.json")
    vocab = tokenizer.Vocabulary.load(prep / "vocab.txt")
    template = prompting.PromptTemplate.from_file(prep / "template.txt")
    return examples, splits, vocab, template, values


def _tokenized_split(examples, indices, vocab, template, max_seq_len):
    return [
        packing.tokenize_pair(examples[i], vocab, template, max_seq_len, i)
        for i in indices
    ]


def cmd_prepare(args) -> int:
    values = resolve_config(args.preset, args.config, {
        "data.path": str(Path(args.data).resolve()),
        **({"data.seed": str(args.seed)} if args.seed is not None else {}),
        **({"data.test_fraction": str(args.test_frac)} if args.test_frac is not None else {}),
        **({"data.val_fraction": str(args.val_frac)} if args.val_frac is not None else {}),
        **({"tokenizer.vocab_size": str(args.vocab_size)} if args.vocab_size is not None else {}),
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with OutputLock(out):
        examples = dataset.load_phrasebank(values["data.path"])
        spec = dataset.SplitSpec(
            test_fraction=float(values["data.test_fraction"]),
            val_fraction_of_rest=float(values["data.val_fraction"]),
            seed=int(values["data.seed"]),
        )
        train_idx, val_idx, test_idx = dataset.split_indices(len(examples), spec)
        dataset.save_split_manifest(out / "splits.json", len(examples), spec,
                                    train_idx, val_idx, test_idx)
        template = _load_template(args.template)
        template.to_file(out / "template.txt")
        corpus = [template.build_sft_prompt(examples[i].sentence)
                  for i in train_idx]
        vocab = tokenizer.train_bpe(corpus, int(values["tokenizer.vocab_size"]))
        vocab.save(out / "vocab.txt")

        max_seq_len = int(values["model.max_seq_len"])
        for name, idx in (("train", train_idx), ("val", val_idx), ("test", test_idx)):
            tokenized = _tokenized_split(examples, idx, vocab, template, max_seq_len)
            seqs = packing.pack(tokenized, max_seq_len, vocab) if tokenized else []
            packing.save_pack_file(out / f"{name}.pack", seqs)
        write_runconfig(out, values)
    print(f"prepared {len(examples)} examples: "
          f"{len(train_idx)} train / {len(val_idx)} val / {len(test_idx)} test")
    return EXIT_OK


def cmd_train(args) -> int:
    prep = Path(args.prep)
    examples, splits, vocab, template, prep_values = _load_prepared(prep)
    values = resolve_config(args.preset, args.config, {})
    for key in ("model.max_seq_len",):
        values[key] = prep_values[key]  # packs were built at this length
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with OutputLock(out):
        write_runconfig(out, {**values, "mode": args.mode,
                              "data.path": prep_values["data.path"]})
        train_cfg = train_config_from(values)
        max_seq_len = int(values["model.max_seq_len"])
        val_set = _tokenized_split(examples, splits["val"], vocab, template,
                                   max_seq_len)
        if args.mode == "sft":
            model_cfg = model_config_from(values, vocab.size, "lm")
            train_seqs = packing.load_pack_file(prep / "train.pack")
            ckpt, log = train_sft(train_seqs, val_set, model_cfg, train_cfg,
                                  vocab, log_path=out / "trainlog.jsonl")
        elif args.mode == "classhead":
            model_cfg = model_config_from(values, vocab.size, "classification")
            train_set = _tokenized_split(examples, splits["train"], vocab,
                                         template, max_seq_len)
            ckpt, log = train_classhead(train_set, val_set, model_cfg,
                                        train_cfg, vocab,
                                        log_path=out / "trainlog.jsonl")
        else:
            raise ConfigError(f"unknown train mode {args.mode!r}")
        save_checkpoint(ckpt, out / "checkpoint.fsnt")
    best = log.best_val
    if best is not None:
        print(f"best_val_accuracy={best[0]:.4f} at_step={best[1]}")
    else:
        print(f"trained {ckpt.step} steps (no validation set)")
    return EXIT_OK


def cmd_eval(args) -> int:
    prep = Path(args.prep)
    examples, splits, vocab, template, _ = _load_prepared(prep)
    ckpt = load_checkpoint(args.ckpt)
    expected_head = "classification" if args.mode == "classhead" else "lm"
    if ckpt.config.head_type != expected_head:
        raise ConfigError(
            f"checkpoint head {ckpt.config.head_type!r} does not match "
            f"eval mode {args.mode!r}"
        )
    testset = [examples[i] for i in splits[args.split]]
    if args.mode == "classhead":
        report = evaluation.evaluate_classhead(ckpt, template, testset, vocab)
    else:
        report = evaluation.evaluate_generation(ckpt, template, testset,
                                                vocab, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with OutputLock(out):
        report.save_json(out / "report.json")
        table = evaluation.compare_report([report],
                                          include_baselines=args.baselines)
        (out / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    if args.min_accuracy is not None and report.accuracy < args.min_accuracy:
        print(f"accuracy {report.accuracy:.4f} below gate {args.min_accuracy}",
              file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_prompt(args) -> int:
    template = _load_template(args.template)
    if args.fewshot:
        print(template.build_fewshot_prompt(args.title))
    else:
        print(template.build_sft_prompt(args.title))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="finsent",
        description="Financial news sentiment classification at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split data, train tokenizer, pack caches")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--test-frac", type=float)
    p.add_argument("--val-frac", type=float)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--template")
    p.add_argument("--config")
    p.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train an SFT or classification-head model")
    p.add_argument("--mode", required=True, choices=("sft", "classhead"))
    p.add_argument("--prep", required=True, help="prepare output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--mode", required=True, choices=evaluation.MODES)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prep", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--min-accuracy", type=float)
    p.add_argument("--baselines", action="store_true",
                   help="append paper-reported baseline rows to the table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prompt", help="render a prompt for a title")
    p.add_argument("--title", required=True)
    p.add_argument("--fewshot", action="store_true")
    p.add_argument("--template")
    p.set_defaults(func=cmd_prompt)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, TrainingError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataset.DatasetError, tokenizer.TokenizerError,
            packing.PackingError, prompting.PromptError,
            evaluation.EvaluationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
