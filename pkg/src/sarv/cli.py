"""Command-line entry point wiring the pipeline end to end.

One binary with subcommands: ``preprocess`` (normalize/tokenize/encode
plus a length histogram), ``shard`` (split + write train/test shards),
``train``, ``eval``, ``predict`` (raw text through the full pipeline),
and ``stats`` (per-category label counts).  Configuration comes from an
INI file plus overriding flags; the fully resolved config is written
next to every run's outputs.  Exit codes: 0 success, 1 usage or config
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from sarv.corpus import (
    LabelScheme,
    encode_sentence,
    preprocess_records,
    read_corpus,
)
from sarv.embed import (
    build_char_vocab,
    build_token_vocab,
    embedding_matrix,
    load_embeddings,
    parse_char_vocab,
    parse_token_vocab,
    serialize_char_vocab,
    serialize_token_vocab,
)
from sarv.errors import ConfigError, DataError, NumericsError, SarvError
from sarv.metrics import category_stats, confusion, metrics
from sarv.models import CHAR_PRESETS, PRESETS, ModelSpec, load_model
from sarv.textproc import (
    MAX_LEN,
    NormConfig,
    length_histogram,
    load_stopwords,
    normalize,
    tokenize,
    unify_length,
)
from sarv.train import (
    ShardManifest,
    TrainConfig,
    load_shards,
    random_undersample,
    split_train_test,
    train_loop,
    write_shards,
)

SEED_ENV_VAR = "SARV_SEED"

# Training hyperparameters each preset starts from; a config file or
# flag overrides any of them.
PRESET_TRAIN_DEFAULTS: dict[str, dict] = {
    "W2V_SOFTMAX": {"optimizer": "sgd", "lr": 0.003, "lr_schedule": "constant"},
    "W2V_MLP_SIGMOID": {"optimizer": "adam", "lr": 0.001, "lr_schedule": "plateau"},
    "W2V_MLP_RELU_LRDECAY": {"optimizer": "adam", "lr": 0.001, "lr_schedule": "exp"},
    "W2V_MLP_RELU_LRDECAY_DROPOUT": {
        "optimizer": "adam", "lr": 0.001, "lr_schedule": "exp", "dropout": 0.25,
    },
    "W2V_LSTM": {"optimizer": "adam", "lr": 0.001, "lr_schedule": "plateau"},
    "CHAR_W2V_LSTM_RUS": {
        "optimizer": "adam", "lr": 0.001, "lr_schedule": "plateau", "rus": True,
    },
    "CHAR_W2V_LSTM": {"optimizer": "adam", "lr": 0.001, "lr_schedule": "plateau"},
}


@dataclass
class RunConfig:
    """Union of pipeline settings; round-trips losslessly through INI."""

    seed: int = 0
    preset: str = "W2V_SOFTMAX"
    classes: int = 2
    precision: str = "single"

    corpus: str = ""
    embeddings: str = ""
    stopwords: str = ""
    shard_dir: str = ""
    checkpoint: str = ""
    manifest: str = ""
    input_path: str = ""
    out_dir: str = ""

    fmt: str = ""
    text_col: str = "text"
    label_col: str = "label"
    category_col: str = "category"
    max_bad_rows: int = 100

    split: float = 0.8
    shard_size: int = 200000
    rus: bool = False

    optimizer: str = "adam"
    lr: float = 0.001
    lr_schedule: str = "constant"
    epochs: int = 1
    batch_size: int = 512
    dropout: float = 0.0
    plateau_factor: float = 0.9
    plateau_patience: int = 27
    exp_step_unit: str = "epoch"
    stop_at_train_accuracy: float | None = None


# (section, field) pairs define both the INI layout and its canonical
# emission order.
_INI_SCHEMA: tuple[tuple[str, str], ...] = (
    ("run", "seed"),
    ("run", "preset"),
    ("run", "classes"),
    ("run", "precision"),
    ("paths", "corpus"),
    ("paths", "embeddings"),
    ("paths", "stopwords"),
    ("paths", "shard_dir"),
    ("paths", "checkpoint"),
    ("paths", "manifest"),
    ("paths", "input_path"),
    ("paths", "out_dir"),
    ("preprocess", "fmt"),
    ("preprocess", "text_col"),
    ("preprocess", "label_col"),
    ("preprocess", "category_col"),
    ("preprocess", "max_bad_rows"),
    ("shard", "split"),
    ("shard", "shard_size"),
    ("shard", "rus"),
    ("train", "optimizer"),
    ("train", "lr"),
    ("train", "lr_schedule"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "dropout"),
    ("train", "plateau_factor"),
    ("train", "plateau_patience"),
    ("train", "exp_step_unit"),
    ("train", "stop_at_train_accuracy"),
)

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    ftype = _FIELD_TYPES[name]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no", ""):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == "float | None":
            return float(raw) if raw else None
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad config value {name} = {raw!r}: {exc}") from exc


def config_to_ini(cfg: RunConfig) -> str:
    """Canonical INI text; emitting, parsing, and re-emitting is a fixed point."""
    lines: list[str] = []
    current = None
    for section, name in _INI_SCHEMA:
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def config_from_ini(path) -> dict:
    """Read an INI file into {field: value}, validating names strictly."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    known = {(s, n) for s, n in _INI_SCHEMA}
    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if (section, key) not in known:
                raise ConfigError(f"unknown config entry [{section}] {key}")
            values[key] = _parse_value(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < preset defaults < config file < env seed < flags."""
    flag_values = {
        name: getattr(args, name)
        for _, name in _INI_SCHEMA
        if getattr(args, name, None) is not None
    }
    file_values = config_from_ini(args.config) if getattr(args, "config", None) else {}
    merged = {f.name: getattr(RunConfig(), f.name) for f in fields(RunConfig)}
    preset = flag_values.get("preset", file_values.get("preset", merged["preset"]))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    merged.update(PRESET_TRAIN_DEFAULTS[preset])
    merged["preset"] = preset
    merged.update(file_values)
    if "seed" not in flag_values and "seed" not in file_values:
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            try:
                merged["seed"] = int(env_seed)
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
    merged.update(flag_values)
    return RunConfig(**merged)


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            flag = "--" + name.replace("_", "-").replace("-path", "")
            raise ConfigError(f"{name} is required (pass {flag} or set it in the config file)")


def _norm_config(cfg: RunConfig) -> NormConfig:
    if cfg.stopwords:
        return NormConfig(stopwords=load_stopwords(cfg.stopwords))
    return NormConfig.default()


def _write_resolved(cfg: RunConfig) -> None:
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.ini").write_text(config_to_ini(cfg), encoding="utf-8")


def _col(value: str) -> str | int:
    stripped = value.strip()
    return int(stripped) if stripped.lstrip("-").isdigit() else stripped


def _read_raw(cfg: RunConfig):
    return read_corpus(
        cfg.corpus,
        fmt=cfg.fmt or None,
        text_col=_col(cfg.text_col),
        label_col=_col(cfg.label_col),
        category_col=_col(cfg.category_col) if cfg.category_col else None,
        max_bad_rows=cfg.max_bad_rows,
    )


def _encode_corpus(cfg: RunConfig):
    """Corpus file -> (encoded records, vocabs, norm config, histogram, skipped)."""
    norm = _norm_config(cfg)
    raw, skipped = _read_raw(cfg)
    triples = preprocess_records(raw, norm, MAX_LEN)
    seqs = [seq for seq, _, _ in triples]
    token_vocab = build_token_vocab(seqs)
    char_vocab = build_char_vocab(seqs)
    scheme = LabelScheme.for_num_classes(cfg.classes)
    encoded = [
        encode_sentence(fixed, token_vocab, char_vocab, scheme.label_index(rec.label))
        for _, fixed, rec in triples
    ]
    return encoded, token_vocab, char_vocab, norm, length_histogram(seqs), skipped


def _report_skipped(skipped) -> None:
    for row in skipped:
        print(f"warning: skipped line {row.line_no}: {row.reason}", file=sys.stderr)


def _histogram_text(hist) -> str:
    lines = [f"{n}\t{c}" for n, c in hist.counts.items()]
    lines.append(f"#total\t{hist.total}")
    return "\n".join(lines) + "\n"


def cmd_preprocess(cfg: RunConfig) -> int:
    _require(cfg, "corpus", "out_dir")
    encoded, token_vocab, char_vocab, _, hist, skipped = _encode_corpus(cfg)
    _report_skipped(skipped)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "encoded.jsonl").write_text(
        "".join(rec.to_json_line() + "\n" for rec in encoded), encoding="utf-8"
    )
    (out / "vocab.tsv").write_text(serialize_token_vocab(token_vocab), encoding="utf-8")
    (out / "chars.tsv").write_text(serialize_char_vocab(char_vocab), encoding="utf-8")
    (out / "histogram.txt").write_text(_histogram_text(hist), encoding="utf-8")
    _write_resolved(cfg)
    if not encoded:
        print("warning: empty corpus, wrote 0 records", file=sys.stderr)
    print(f"records {len(encoded)}")
    print(f"fraction with <= {MAX_LEN} tokens: {hist.cumulative_fraction(MAX_LEN):.4f}")
    return 0


def cmd_shard(cfg: RunConfig) -> int:
    _require(cfg, "corpus", "out_dir")
    encoded, token_vocab, char_vocab, norm, _, skipped = _encode_corpus(cfg)
    _report_skipped(skipped)
    train, test = split_train_test(encoded, cfg.split, cfg.seed)
    if cfg.rus:
        train = random_undersample(train, seed=cfg.seed, num_classes=cfg.classes)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.tsv").write_text(serialize_token_vocab(token_vocab), encoding="utf-8")
    (out / "chars.tsv").write_text(serialize_char_vocab(char_vocab), encoding="utf-8")
    hashes = {
        "vocab_hash": token_vocab.vocab_hash(),
        "char_vocab_hash": char_vocab.vocab_hash(),
        "norm_config_hash": norm.config_hash(),
    }
    for name, records in (("train", train), ("test", test)):
        manifest = write_shards(
            records,
            cfg.shard_size,
            out,
            name=name,
            max_word_chars=char_vocab.max_word_chars,
            split_seed=cfg.seed,
            **hashes,
        )
        print(f"{name}: {manifest.total} records in {len(manifest.shards)} shard(s)")
    _write_resolved(cfg)
    return 0


def _load_vocabs(shard_dir: Path):
    try:
        token_vocab = parse_token_vocab((shard_dir / "vocab.tsv").read_text("utf-8"))
        char_vocab = parse_char_vocab((shard_dir / "chars.tsv").read_text("utf-8"))
    except OSError as exc:
        raise DataError(f"missing vocabulary files in {shard_dir}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"corrupt vocabulary file in {shard_dir}: {exc}") from exc
    return token_vocab, char_vocab


def _embedding_matrix_for(cfg: RunConfig, token_vocab, dtype):
    table = load_embeddings(cfg.embeddings)
    if table.skipped_lines:
        print(f"warning: skipped {table.skipped_lines} malformed embedding line(s)",
              file=sys.stderr)
    return embedding_matrix(table, token_vocab, dtype=dtype)


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "embeddings", "out_dir")
    shard_dir = Path(cfg.shard_dir or cfg.out_dir)
    train_manifest = ShardManifest.load(shard_dir / "train.manifest.json")
    test_path = shard_dir / "test.manifest.json"
    eval_manifest = ShardManifest.load(test_path) if test_path.exists() else None
    token_vocab, char_vocab = _load_vocabs(shard_dir)

    train_cfg = TrainConfig(
        optimizer=cfg.optimizer,
        base_lr=cfg.lr,
        lr_schedule=cfg.lr_schedule,
        plateau_factor=cfg.plateau_factor,
        plateau_patience=cfg.plateau_patience,
        exp_step_unit=cfg.exp_step_unit,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        dropout_rate=cfg.dropout,
        shard_size=cfg.shard_size,
        seed=cfg.seed,
        precision=cfg.precision,
        stop_at_train_accuracy=cfg.stop_at_train_accuracy,
    )
    spec = ModelSpec(
        preset=cfg.preset,
        num_classes=cfg.classes,
        dropout_rate=cfg.dropout,
        max_word_chars=train_manifest.max_word_chars,
        char_vocab_size=len(char_vocab) if cfg.preset in CHAR_PRESETS else 0,
    )
    emb = _embedding_matrix_for(cfg, token_vocab, train_cfg.dtype)
    report, _ = train_loop(spec, train_cfg, train_manifest, emb, cfg.out_dir, eval_manifest)
    _write_resolved(cfg)
    sys.stdout.write(report.to_text())
    print(f"wall_time_s {report.wall_time_s:.3f}")
    return 0


def _checkpoint_vocab_guard(meta: dict, manifest: ShardManifest) -> None:
    for key in ("vocab_hash", "char_vocab_hash"):
        recorded, found = meta.get(key, ""), getattr(manifest, key, "")
        if recorded and found and recorded != found:
            raise DataError(
                f"checkpoint/manifest mismatch: {key} {recorded[:12]}… vs {found[:12]}…"
            )


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "embeddings")
    shard_dir = Path(cfg.shard_dir or cfg.out_dir or ".")
    manifest_path = Path(cfg.manifest) if cfg.manifest else shard_dir / "test.manifest.json"
    manifest = ShardManifest.load(manifest_path)
    model, meta = load_model(cfg.checkpoint)
    _checkpoint_vocab_guard(meta, manifest)
    token_vocab, _ = _load_vocabs(shard_dir)
    emb = _embedding_matrix_for(
        cfg, token_vocab, np.float64 if meta.get("precision") == "double" else np.float32
    )
    scheme = LabelScheme.for_num_classes(model.spec.num_classes)
    cm = None
    for chunk in _batched(load_shards(manifest), cfg.batch_size):
        preds, _ = model.predict(chunk, emb)
        part = confusion(
            preds, [r.label for r in chunk],
            num_classes=model.spec.num_classes, class_names=scheme.classes,
        )
        cm = part if cm is None else cm.merged(part)
    if cm is None:
        raise DataError("evaluation manifest holds no records")
    report = metrics(cm)
    sys.stdout.write(report.to_text())
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
        (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
        _write_resolved(cfg)
    return 0


def _batched(records, size):
    buf = []
    for rec in records:
        buf.append(rec)
        if len(buf) == size:
            yield buf
            buf = []
    if buf:
        yield buf


def cmd_predict(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "embeddings", "shard_dir")
    model, _ = load_model(cfg.checkpoint)
    token_vocab, char_vocab = _load_vocabs(Path(cfg.shard_dir))
    norm = _norm_config(cfg)
    emb = _embedding_matrix_for(cfg, token_vocab, np.float32)
    scheme = LabelScheme.for_num_classes(model.spec.num_classes)
    if cfg.input_path:
        try:
            lines = Path(cfg.input_path).read_text("utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read input {cfg.input_path}: {exc}") from exc
    else:
        lines = sys.stdin.read().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    out_lines = []
    if lines:
        encoded = [
            encode_sentence(
                unify_length(tokenize(normalize(ln, norm)), MAX_LEN),
                token_vocab, char_vocab, label=0,
            )
            for ln in lines
        ]
        labels, probs = model.predict(encoded, emb)
        for k, ln in enumerate(lines):
            cols = [scheme.classes[labels[k]]] + [f"{p:.6f}" for p in probs[k]]
            out_lines.append("\t".join(cols))
    text = "".join(line + "\n" for line in out_lines)
    sys.stdout.write(text)
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "predictions.tsv").write_text(text, encoding="utf-8")
        _write_resolved(cfg)
    return 0


def cmd_stats(cfg: RunConfig) -> int:
    _require(cfg, "corpus")
    raw, skipped = _read_raw(cfg)
    _report_skipped(skipped)
    stats = category_stats(raw, LabelScheme.for_num_classes(cfg.classes))
    sys.stdout.write(stats.to_text())
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.tsv").write_text(stats.to_text(), encoding="utf-8")
        _write_resolved(cfg)
    return 0


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "shard": cmd_shard,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "stats": cmd_stats,
}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this toolkit reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_flags(p: _Parser, *names: str) -> None:
    specs = {
        "corpus": (["--corpus"], {"help": "corpus file (csv/tsv/jsonl)"}),
        "embeddings": (["--embeddings"], {"help": "GloVe-format word vector file"}),
        "stopwords": (["--stopwords"], {"help": "stopword file, one per line"}),
        "preset": (["--preset"], {"choices": PRESETS, "help": "model preset"}),
        "classes": (["--classes"], {"type": int, "choices": (2, 3)}),
        "epochs": (["--epochs"], {"type": int}),
        "batch_size": (["--batch-size"], {"type": int}),
        "lr": (["--lr"], {"type": float, "help": "base learning rate"}),
        "lr_schedule": (["--lr-schedule"], {"choices": ("constant", "exp", "plateau")}),
        "dropout": (["--dropout"], {"type": float}),
        "shard_size": (["--shard-size"], {"type": int}),
        "split": (["--split"], {"type": float, "help": "train fraction (default 0.8)"}),
        "seed": (["--seed"], {"type": int, "help": f"rng seed (falls back to ${SEED_ENV_VAR})"}),
        "rus": (["--rus"], {"action": "store_true", "default": None,
                            "help": "random-undersample the train split"}),
        "precision": (["--precision"], {"choices": ("single", "double")}),
        "out_dir": (["--out-dir"], {"help": "output directory"}),
        "shard_dir": (["--shard-dir"], {"help": "directory holding shards + vocabs"}),
        "checkpoint": (["--checkpoint"], {"help": "model checkpoint file"}),
        "manifest": (["--manifest"], {"help": "shard manifest to evaluate"}),
        "input_path": (["--input"], {"dest": "input_path", "help": "text file, one record per line"}),
        "fmt": (["--format"], {"dest": "fmt", "choices": ("csv", "tsv", "jsonl")}),
        "text_col": (["--text-col"], {}),
        "label_col": (["--label-col"], {}),
        "category_col": (["--category-col"], {}),
        "max_bad_rows": (["--max-bad-rows"], {"type": int}),
        "optimizer": (["--optimizer"], {"choices": ("sgd", "adam")}),
        "exp_step_unit": (["--exp-step-unit"], {"choices": ("epoch", "batch")}),
        "plateau_factor": (["--plateau-factor"], {"type": float}),
        "plateau_patience": (["--plateau-patience"], {"type": int}),
        "stop_at_train_accuracy": (["--stop-at-train-accuracy"], {"type": float}),
    }
    p.add_argument("--config", help="INI config file; flags override its values")
    for name in names:
        flags, kwargs = specs[name]
        p.add_argument(*flags, **kwargs)


_CORPUS_FLAGS = ("corpus", "fmt", "text_col", "label_col", "category_col", "max_bad_rows")


def build_parser() -> _Parser:
    parser = _Parser(prog="sarv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="normalize, tokenize, and encode a corpus")
    _add_flags(p, *_CORPUS_FLAGS, "stopwords", "classes", "out_dir", "seed")

    p = sub.add_parser("shard", help="split a corpus and write train/test shards")
    _add_flags(p, *_CORPUS_FLAGS, "stopwords", "classes", "split", "shard_size",
               "rus", "seed", "out_dir", "preset")

    p = sub.add_parser("train", help="train a preset on prepared shards")
    _add_flags(p, "embeddings", "shard_dir", "out_dir", "preset", "classes", "epochs",
               "batch_size", "lr", "lr_schedule", "dropout", "optimizer", "seed",
               "precision", "shard_size", "exp_step_unit", "plateau_factor",
               "plateau_patience", "stop_at_train_accuracy")

    p = sub.add_parser("eval", help="score a checkpoint against a shard manifest")
    _add_flags(p, "checkpoint", "manifest", "shard_dir", "embeddings", "batch_size",
               "out_dir", "seed")

    p = sub.add_parser("predict", help="classify raw text lines")
    _add_flags(p, "checkpoint", "shard_dir", "embeddings", "stopwords", "input_path",
               "out_dir", "seed")

    p = sub.add_parser("stats", help="per-category label counts for a corpus")
    _add_flags(p, *_CORPUS_FLAGS, "classes", "out_dir", "seed")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"sarv: config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"sarv: data error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"sarv: numeric failure: {exc}", file=sys.stderr)
        return 3
    except SarvError as exc:  # base-class fallback
        print(f"sarv: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
