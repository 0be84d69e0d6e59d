"""Command-line entry point: ``multisource <subcommand> [options]``.

Every subcommand reads an optional ``key=value`` config file (``--config``)
plus ``--set key=value`` overrides, prints the resolved configuration, and
exits 0 on success, 1 on usage errors, 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .decoding import batch_sources, beam_search, decode_examples, greedy_decode
from .model import ModelConfig, MultiSourceTransformer, Vocabulary, load_checkpoint, save_checkpoint
from .tasks import (
    Scores,
    TaskSpec,
    adversarial_eval,
    generate,
    read_dataset,
    token_accuracy,
    write_dataset,
)
from .training import TrainConfig, train
from .viz import HeatmapSpec, export_attention_csv, export_context_csv, export_context_pgm, export_heatmap_pgm

DEFAULTS = {
    "model.d": "64",
    "model.heads": "4",
    "model.d_ff": "128",
    "model.enc_layers": "2",
    "model.dec_layers": "2",
    "model.strategy": "serial",
    "model.max_len": "32",
    "model.seed": "0",
    "model.shared_vocab_embeddings": "false",
    "train.factor": "1.0",
    "train.warmup": "400",
    "train.batch_size": "32",
    "train.max_steps": "3000",
    "train.eval_interval": "250",
    "train.seed": "0",
    "train.dropout": "0.1",
    "train.clip_norm": "0",
    "train.label_smoothing": "0",
    "train.weight_decay": "0",
    "task.kind": "complementary_copy",
    "task.vocab_size": "32",
    "task.min_len": "8",
    "task.max_len": "12",
    "task.n_train": "2000",
    "task.n_dev": "200",
    "task.seed": "0",
    "task.redundant": "0",
    "task.redundant_noise": "0.0",
    "task.classes": "4",
    "task.feature_dim": "8",
    "task.feature_rows": "1",
    "task.noise": "0.1",
    "decode.beam_width": "10",
    "decode.alpha": "1.0",
    "decode.max_len": "30",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(path=None, overrides=()) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    given = {}
    if path is not None:
        given.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        given[key.strip()] = value.strip()
    unknown = sorted(set(given) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config key(s) {unknown}; valid keys: {', '.join(sorted(DEFAULTS))}")
    cfg.update(given)
    return cfg


def _section(cfg: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def task_spec(cfg: dict[str, str], n_examples: int) -> TaskSpec:
    t = _section(cfg, "task")
    return TaskSpec(kind=t["kind"], vocab_size=int(t["vocab_size"]), min_len=int(t["min_len"]),
                    max_len=int(t["max_len"]), n_examples=n_examples, seed=int(t["seed"]),
                    redundant=int(t["redundant"]), redundant_noise=float(t["redundant_noise"]),
                    classes=int(t["classes"]), feature_dim=int(t["feature_dim"]),
                    feature_rows=int(t["feature_rows"]), noise=float(t["noise"]))


def train_config(cfg: dict[str, str]) -> TrainConfig:
    t = _section(cfg, "train")
    return TrainConfig(factor=float(t["factor"]), warmup=int(t["warmup"]),
                       batch_size=int(t["batch_size"]), max_steps=int(t["max_steps"]),
                       eval_interval=int(t["eval_interval"]), seed=int(t["seed"]),
                       dropout=float(t["dropout"]), clip_norm=float(t["clip_norm"]),
                       label_smoothing=float(t["label_smoothing"]),
                       weight_decay=float(t["weight_decay"]))


def model_config(cfg: dict[str, str], spec: TaskSpec) -> ModelConfig:
    m = _section(cfg, "model")
    return ModelConfig(
        d=int(m["d"]), heads=int(m["heads"]), d_ff=int(m["d_ff"]), enc_layers=int(m["enc_layers"]),
        dec_layers=int(m["dec_layers"]), n_sources=spec.n_sources, strategy=m["strategy"],
        vocab_size=spec.vocab_size, max_len=int(m["max_len"]), seed=int(m["seed"]),
        source_kinds=spec.source_kinds,
        feature_dim=spec.feature_dim if spec.kind == "feature_disambiguation" else 0,
        shared_vocab_embeddings=m["shared_vocab_embeddings"].lower() in ("1", "true", "yes"),
    )


def _load_vocab(data_dir: Path) -> Vocabulary:
    tokens = (data_dir / "vocab.txt").read_text(encoding="utf-8").split("\n")
    return Vocabulary([t for t in tokens if t][4:])


def _print_config(cfg: dict[str, str], seed_key: str, out) -> None:
    print(f"seed={cfg[seed_key]}", file=out)
    for key in sorted(cfg):
        print(f"{key}={cfg[key]}", file=out)


def _decode(model, examples, cfg: dict[str, str]):
    d = _section(cfg, "decode")
    width, alpha, max_len = int(d["beam_width"]), float(d["alpha"]), int(d["max_len"])
    if width == 1:
        return decode_examples(model, examples, max_len=max_len)
    return [beam_search(model, batch_sources(model, [ex]), width, alpha, max_len)[0]
            for ex in examples]


# ----------------------------------------------------------------- commands

def cmd_gen_data(args, cfg, out):
    n_train, n_dev = int(cfg["task.n_train"]), int(cfg["task.n_dev"])
    spec = task_spec(cfg, n_train + n_dev)
    examples = generate(spec)
    vocab = spec.vocabulary()
    target = Path(args.out)
    target.mkdir(parents=True, exist_ok=True)
    write_dataset(target / "train.txt", examples[:n_train], vocab)
    write_dataset(target / "dev.txt", examples[n_train:], vocab)
    (target / "vocab.txt").write_text("\n".join(vocab.itos) + "\n", encoding="utf-8")
    (target / "task.cfg").write_text(
        "".join(f"{k}={v}\n" for k, v in sorted(cfg.items()) if k.startswith("task.")), encoding="utf-8")
    print(f"wrote {n_train} train / {n_dev} dev examples to {target}", file=out)


def _dataset(data_dir: Path, name, cfg, with_target=True):
    spec = task_spec(cfg, 1)
    vocab = _load_vocab(data_dir)
    path = Path(name) if name else data_dir / "dev.txt"
    return read_dataset(path, vocab, spec.source_kinds, spec.feature_dim, with_target), vocab


def cmd_train(args, cfg, out):
    data_dir = Path(args.data)
    spec = task_spec(cfg, 1)
    vocab = _load_vocab(data_dir)
    train_set = read_dataset(data_dir / "train.txt", vocab, spec.source_kinds, spec.feature_dim)
    dev_set = read_dataset(data_dir / "dev.txt", vocab, spec.source_kinds, spec.feature_dim)
    model = MultiSourceTransformer(model_config(cfg, spec))

    def evaluate(m):
        return token_accuracy(decode_examples(m, dev_set), [ex.target for ex in dev_set])

    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    with open(log_path, "w", encoding="utf-8") as log_file:
        log_file.write("step\tloss\tlr\ttoken_accuracy\tseconds\n")
        train(model, train_set, train_config(cfg), evaluate=evaluate, log_file=log_file)
    save_checkpoint(model, args.out)
    print(f"saved {args.out}; log {log_path}", file=out)


def cmd_translate(args, cfg, out):
    model = load_checkpoint(args.checkpoint)
    examples, vocab = _dataset(Path(args.data), args.input, cfg, with_target=False)
    hyps = _decode(model, examples, cfg)
    text = "".join(" ".join(vocab.decode(h)) + "\n" for h in hyps)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        out.write(text)


def _scores_line(label, s: Scores) -> str:
    line = f"{label}\tbleu={s.bleu:.2f}\ttoken_accuracy={s.token_accuracy:.2f}\tsequence_accuracy={s.sequence_accuracy:.2f}"
    if s.focus_accuracy is not None:
        line += f"\tfocus_accuracy={s.focus_accuracy:.2f}"
    return line


def cmd_eval(args, cfg, out):
    model = load_checkpoint(args.checkpoint)
    examples, _ = _dataset(Path(args.data), args.input, cfg)
    print(_scores_line("clean", Scores.compute(_decode(model, examples, cfg), examples)), file=out)


def cmd_eval_adversarial(args, cfg, out):
    model = load_checkpoint(args.checkpoint)
    examples, _ = _dataset(Path(args.data), args.input, cfg)
    report = adversarial_eval(model, examples, args.source, seed=args.seed,
                              decode=lambda m, exs: _decode(m, exs, cfg))
    print(_scores_line("clean", report.clean), file=out)
    print(_scores_line(f"adversarial[src{args.source}]", report.adversarial), file=out)
    print("delta\t" + "\t".join(f"{k}={v:.2f}" for k, v in report.deltas.items()), file=out)


def cmd_viz(args, cfg, out):
    model = load_checkpoint(args.checkpoint)
    examples, vocab = _dataset(Path(args.data), args.input, cfg, with_target=False)
    if not 0 <= args.index < len(examples):
        raise UsageError(f"--index {args.index} out of range for {len(examples)} examples")
    ex = examples[args.index]
    sources = batch_sources(model, [ex])
    tokens, records = greedy_decode(model, sources, int(cfg["decode.max_len"]))
    spec = HeatmapSpec(layer=args.layer, head=args.head, encoder=args.encoder)
    src_labels = []
    for kind, src in zip(model.config.source_kinds, ex.sources):
        src_labels.append([f"f{r}" for r in range(len(src))] if kind == "features" else vocab.decode(src))
    tgt_labels = ["<s>"] + vocab.decode(tokens)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = [f"{prefix}.csv", f"{prefix}.pgm"]
    export_attention_csv(records, spec, written[0], src_labels, tgt_labels)
    export_heatmap_pgm(records, spec, written[1])
    if records[0].cross.context_weights is not None:
        written += [f"{prefix}.contexts.csv", f"{prefix}.contexts.pgm"]
        export_context_csv(records, spec, written[2], tgt_labels)
        export_context_pgm(records, spec, written[3])
    print("wrote " + " ".join(written), file=out)


COMMANDS = {
    "gen-data": (cmd_gen_data, "task.seed"),
    "train": (cmd_train, "train.seed"),
    "translate": (cmd_translate, "model.seed"),
    "eval": (cmd_eval, "model.seed"),
    "eval-adversarial": (cmd_eval_adversarial, "task.seed"),
    "viz": (cmd_viz, "model.seed"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multisource", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a gen-data directory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log")

    for name in ("translate", "eval", "eval-adversarial", "viz"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="gen-data directory (vocabulary)")
        p.add_argument("--input", help="dataset file (default: <data>/dev.txt)")
        if name == "translate":
            p.add_argument("--output")
        if name == "eval-adversarial":
            p.add_argument("--source", type=int, required=True)
            p.add_argument("--seed", type=int, default=0)
        if name == "viz":
            p.add_argument("--index", type=int, default=0)
            p.add_argument("--layer", type=int, default=-1)
            p.add_argument("--head", type=int, default=None)
            p.add_argument("--encoder", type=int, default=None)
            p.add_argument("--out", required=True, help="output path prefix")
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.set)
        if args.command != "gen-data" and getattr(args, "data", None):
            data_cfg = Path(args.data) / "task.cfg"
            if data_cfg.exists():
                cfg.update(parse_config_text(data_cfg.read_text(encoding="utf-8")))
        handler, seed_key = COMMANDS[args.command]
        _print_config(cfg, seed_key, out)
        handler(args, cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - mapped to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
