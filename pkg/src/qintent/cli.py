"""Command-line entry point: ``qintent <subcommand> [--config FILE] [flags]``.

Every subcommand accepts ``--config`` pointing at a JSON object whose keys
match the long flag names (dashes or underscores). Explicit flags win over the
config file, which wins over built-in defaults. Exit status: 0 success,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .evaluation import EvalReport, LatencyReport, compare_models, evaluate, measure_latency
from .models import ARCHITECTURES, MULTILINGUAL, ModelConfig, param_count, predict
from .serving import Edit, TypeaheadSession, load_bundle, save_bundle, serve, typeahead_stream
from .synth import complete_preset, mlm_corpus, multilingual_preset, synth_click_log, typeahead_preset
from .text import (
    DEFAULT_INTENTS,
    FeatureSpec,
    IntentLabelSet,
    LocaleRegistry,
    Query,
    UserContext,
    Vocabulary,
    build_vocab,
    ingest_click_log,
    prefix_expand,
    read_click_log,
    read_dataset,
    split_dataset,
    write_click_log,
    write_dataset,
)
from .training import TrainHyper, pretrain_mlm, train_classifier

PRESETS = {"typeahead": typeahead_preset, "complete": complete_preset, "multilingual": multilingual_preset}
BACKSPACE = ("\x7f", "\b")
CLEAR = "\x15"  # ctrl-U


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


class Settings:
    """Flag value if given, else config value, else default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = _load_config(getattr(args, "config", None))

    def get(self, key: str, default: Any = None, required: bool = False) -> Any:
        val = getattr(self.args, key, None)
        if val is None:
            val = self.config.get(key)
        if val is None:
            val = default
        if val is None and required:
            raise UsageError(f"--{key.replace('_', '-')} is required (flag or config key)")
        return val


def _labels(s: Settings) -> IntentLabelSet:
    names = s.get("labels", list(DEFAULT_INTENTS))
    return IntentLabelSet(tuple(names.split(",") if isinstance(names, str) else names))


def _locales(s: Settings) -> LocaleRegistry:
    codes = s.get("locales", ["en"])
    return LocaleRegistry(tuple(codes.split(",") if isinstance(codes, str) else codes))


def _read_texts(path: str) -> list[str]:
    """Queries from a click log (JSON lines with a ``query`` field) or plain text lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                obj = None
            if isinstance(obj, dict) and isinstance(obj.get("query"), str):
                out.append(obj["query"])
            elif isinstance(obj, dict) and isinstance(obj.get("text"), str):
                out.append(obj["text"])
            elif not (isinstance(obj, dict) and "format" in obj):
                out.append(line)
    return out


def _model_config(s: Settings, vocab: Vocabulary, n_labels: int, n_locales: int, feature_width: int) -> ModelConfig:
    arch = s.get("arch", "BILSTM").upper()
    gran = s.get("granularity", "char")
    base = {"char": ModelConfig.char, "word": ModelConfig.word}
    if arch == "TRANSFORMER":
        maker: Callable[..., ModelConfig] = lambda a, **kw: ModelConfig.transformer(**kw)
    else:
        maker = base.get(gran)
        if maker is None:
            raise UsageError(f"granularity must be char or word, got {gran!r}")
    kw: dict[str, Any] = {"vocab_size": len(vocab), "n_labels": n_labels, "feature_width": feature_width}
    for key in ("emb_dim", "max_len", "filters", "filter_height", "hidden", "layers", "heads", "ffn_mult",
                "max_positions", "locale_dim", "fusion_width", "hash_buckets"):
        val = s.get(key)
        if val is not None:
            kw[key] = int(val)
    multi = s.get("multilingual", "none")
    if multi != "none":
        kw.update(multilingual=multi, n_locales=n_locales)
    return maker(arch, **kw)


def _hyper(s: Settings, **defaults) -> TrainHyper:
    kw = dict(defaults)
    for key, cast in (("optimizer", str), ("lr", float), ("batch_size", int), ("epochs", int), ("seed", int),
                      ("clip_norm", float), ("patience", int), ("mask_rate", float)):
        val = s.get(key)
        if val is not None:
            kw[key] = cast(val)
    return TrainHyper(**kw)


def _emit(obj: Any, out) -> None:
    out.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_build_vocab(s: Settings, out) -> int:
    texts = _read_texts(s.get("input", required=True))
    vocab = build_vocab(texts, s.get("granularity", "char"), int(s.get("max_size", 500)))
    vocab.save(s.get("out", required=True))
    _emit({"size": len(vocab), "digest": vocab.digest, "granularity": vocab.granularity}, out)
    return 0


def cmd_synth_data(s: Settings, out) -> int:
    preset = s.get("preset", "typeahead")
    if preset not in PRESETS:
        raise UsageError(f"preset must be one of {sorted(PRESETS)}")
    cfg = PRESETS[preset](float(s.get("noise", 0.05)))
    n = write_click_log(s.get("out", required=True), synth_click_log(cfg, int(s.get("n", 10000)), int(s.get("seed", 0))))
    _emit({"records": n, "preset": preset}, out)
    return 0


def cmd_ingest(s: Settings, out) -> int:
    labels, locales = _labels(s), _locales(s)
    vocab_path = s.get("vocab")
    vocab = Vocabulary.load(vocab_path) if vocab_path else None
    fspec = FeatureSpec(len(labels), int(s.get("feature_width", 16)), int(s.get("locale_slots", 8)))
    ds, report = ingest_click_log(read_click_log(s.get("log", required=True)), labels, vocab, locales, fspec,
                                  max_len=int(s.get("max_len", 32)))
    write_dataset(s.get("out", required=True), ds, labels, vocab, fspec, locales)
    _emit(report.to_dict(), out)
    return 0


def cmd_split(s: Settings, out) -> int:
    header, ds = read_dataset(s.get("dataset", required=True))
    ratios = s.get("ratios", "0.8,0.1,0.1")
    ratios = tuple(float(x) for x in (ratios.split(",") if isinstance(ratios, str) else ratios))
    parts = split_dataset(ds, ratios, int(s.get("seed", 0)))
    vocab_path = s.get("vocab")
    vocab = Vocabulary.load(vocab_path) if vocab_path else None
    if s.get("prefix_expand", False):
        parts = tuple(prefix_expand(p, vocab, int(s.get("max_len", 32))) for p in parts)
    out_dir = Path(s.get("out_dir", required=True))
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = IntentLabelSet(tuple(header["labels"]))
    locales = LocaleRegistry(tuple(header["locales"]))
    fspec = FeatureSpec(**header["features"])
    counts = {}
    for name, part in zip(("train", "dev", "test"), parts):
        write_dataset(out_dir / f"{name}.jsonl", part, labels, vocab, fspec, locales)
        counts[name] = len(part)
    _emit(counts, out)
    return 0


def cmd_train(s: Settings, out) -> int:
    header, train = read_dataset(s.get("train", required=True))
    dev = read_dataset(s.get("dev"))[1] if s.get("dev") else None
    vocab = Vocabulary.load(s.get("vocab", required=True))
    labels = IntentLabelSet(tuple(header["labels"]))
    locales = LocaleRegistry(tuple(header["locales"]))
    fspec = FeatureSpec(**header["features"])
    if not s.get("traditional_features", True):
        fspec = None
    cfg = _model_config(s, vocab, len(labels), len(locales), fspec.width if fspec else 0)
    hyper = _hyper(s)
    init = load_bundle(s.get("init")) if s.get("init") else None
    if fspec is None:
        train = [e.__class__(e.text, e.token_ids, e.locale, (), e.label) for e in train]
        dev = [e.__class__(e.text, e.token_ids, e.locale, (), e.label) for e in dev] if dev else None
    bundle, history = train_classifier(cfg, train, dev, hyper, vocab, labels, locales, fspec, init=init,
                                       metrics_path=s.get("metrics"))
    save_bundle(bundle, s.get("out", required=True))
    _emit({"version": bundle.version, "best_epoch": history.best_epoch, "stop_reason": history.stop_reason,
           "epochs": len(history.epochs)}, out)
    return 0


def cmd_pretrain_mlm(s: Settings, out) -> int:
    vocab = Vocabulary.load(s.get("vocab", required=True))
    corpus_path = s.get("corpus")
    corpus = _read_texts(corpus_path) if corpus_path else mlm_corpus(int(s.get("n", 20000)), int(s.get("seed", 0)))
    if s.get("arch", "TRANSFORMER").upper() != "TRANSFORMER":
        raise UsageError("pretrain-mlm only supports --arch TRANSFORMER")
    s.config.setdefault("arch", "TRANSFORMER")
    cfg = _model_config(s, vocab, len(_labels(s)), 1, 0)
    bundle, history = pretrain_mlm(cfg, corpus, vocab, _hyper(s), _labels(s), metrics_path=s.get("metrics"))
    save_bundle(bundle, s.get("out", required=True))
    _emit({"version": bundle.version, "epochs": len(history.epochs),
           "final_loss": history.epochs[-1].train_loss if history.epochs else None}, out)
    return 0


def cmd_evaluate(s: Settings, out) -> int:
    bundle = load_bundle(s.get("bundle", required=True))
    _, ds = read_dataset(s.get("dataset", required=True))
    report = evaluate(bundle, ds)
    if s.get("out"):
        report.save(s.get("out"))
    _emit(report.to_dict(), out)
    return 0


def _pairs(items: Sequence[str] | dict, what: str) -> dict[str, str]:
    if isinstance(items, dict):
        return dict(items)
    pairs = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        pairs[name] = path
    if not pairs:
        raise UsageError(f"no {what} given")
    return pairs


def cmd_compare(s: Settings, out) -> int:
    reports = {name: EvalReport.load(path) for name, path in _pairs(s.get("reports", required=True), "reports").items()}
    table = compare_models(reports, s.get("baseline", required=True))
    out.write(table.render() + "\n")
    return 0


def cmd_bench_latency(s: Settings, out) -> int:
    bundles = {name: load_bundle(p) for name, p in _pairs(s.get("bundles", required=True), "bundles").items()}
    texts = _read_texts(s.get("queries", required=True))
    if not texts:
        raise ValueError("latency workload is empty")
    report = LatencyReport()
    for name, b in bundles.items():
        complete = b.config.granularity != "char"
        queries = [Query(t, 0, complete) for t in texts]
        r = measure_latency(b, queries, int(s.get("n_warmup", 100)), int(s.get("n_measured", 1000)), name)
        report.models.update(r.models)
    out.write(report.render() + "\n")
    if s.get("out"):
        Path(s.get("out")).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return 0


def cmd_param_count(s: Settings, out) -> int:
    if s.get("bundle"):
        target = load_bundle(s.get("bundle"))
    else:
        vocab_size = int(s.get("vocab_size", 500))
        fake = Vocabulary(s.get("granularity", "char"),
                          ("<pad>", "<unk>", "<cls>", "<mask>") + tuple(f"t{i}" for i in range(vocab_size - 4)))
        target = _model_config(s, fake, len(_labels(s)), 1, int(s.get("feature_width", 16)))
    _emit(param_count(target).to_dict(), out)
    return 0


def _user_from(s: Settings, bundle, locale: int) -> UserContext | None:
    feats = s.get("features")
    if feats is not None:
        vals = feats.split(",") if isinstance(feats, str) else feats
        return UserContext("", tuple(float(x) for x in vals))
    hist = s.get("history")
    if hist is not None and bundle.features is not None:
        names = hist.split(",") if isinstance(hist, str) else hist
        ids = [bundle.labels.id(h) for h in names if h]
        return UserContext("", tuple(bundle.features.build(ids, locale).tolist()))
    return None


def _locale_id(bundle, code: str | None) -> int:
    if code is None or bundle.locales is None:
        return 0
    return bundle.locales.id(code)


def cmd_predict(s: Settings, out) -> int:
    bundle = load_bundle(s.get("bundle", required=True))
    locale = _locale_id(bundle, s.get("locale"))
    complete = s.get("mode", "complete") == "complete"
    dist = predict(bundle, Query(s.get("query", required=True), locale, complete), _user_from(s, bundle, locale))
    _emit({"probabilities": dist.by_label(), "argmax": dist.argmax_label, "model_version": bundle.version}, out)
    return 0


def cmd_typeahead(s: Settings, out, instream=None) -> int:
    """One JSON line per keystroke. Backspace deletes, ctrl-U resets, newline starts a fresh query silently."""
    bundle = load_bundle(s.get("bundle", required=True))
    locale = _locale_id(bundle, s.get("locale"))
    session = TypeaheadSession(bundle, locale, _user_from(s, bundle, locale))
    instream = instream or sys.stdin
    while True:
        ch = instream.read(1)
        if not ch:
            break
        if ch in "\r\n":
            session.buffer = ""
            continue
        if ch in BACKSPACE:
            edit = Edit("delete")
        elif ch == CLEAR:
            edit = Edit("reset")
        else:
            edit = Edit("append", ch)
        dist = typeahead_stream(session, edit)
        rec = {"buffer": session.buffer, "probabilities": dist.by_label(), "argmax": dist.argmax_label}
        if session.warning:
            rec["warning"] = session.warning
        _emit(rec, out)
        out.flush()
    return 0


def cmd_serve(s: Settings, out, instream=None) -> int:
    bundles = {}
    for mode in ("incomplete", "complete"):
        path = s.get(mode)
        if path:
            bundles[mode] = load_bundle(path)
    if not bundles:
        raise UsageError("mount at least one of --incomplete / --complete")
    endpoint = s.get("endpoint", "stdio")
    result = serve(endpoint, bundles, instream=instream, outstream=out, workers=int(s.get("workers", 4)))
    if endpoint != "stdio":
        host, port = result.server_address[:2]
        sys.stderr.write(f"serving on tcp://{host}:{port}\n")
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            result.shutdown()
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=[a for a in ARCHITECTURES] + [a.lower() for a in ARCHITECTURES])
    p.add_argument("--granularity", choices=("char", "word"))
    p.add_argument("--multilingual", choices=MULTILINGUAL)
    for key in ("emb-dim", "max-len", "filters", "filter-height", "hidden", "layers", "heads", "ffn-mult",
                "max-positions", "locale-dim", "fusion-width", "hash-buckets"):
        p.add_argument(f"--{key}", type=int)


def _hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--metrics", help="write per-epoch JSON lines here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qintent", description="Query intent classification toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of defaults keyed by flag name")
        return p

    p = add("build-vocab", "build a frequency-truncated vocabulary")
    p.add_argument("--input", help="click log or one query per line")
    p.add_argument("--granularity", choices=("char", "word", "triletter"))
    p.add_argument("--max-size", type=int)
    p.add_argument("--out")

    p = add("synth-data", "write a seeded synthetic click log")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--n", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("ingest", "turn a click log into a labelled dataset")
    p.add_argument("--log")
    p.add_argument("--vocab")
    p.add_argument("--labels", help="comma-separated intent names")
    p.add_argument("--locales", help="comma-separated locale codes")
    p.add_argument("--feature-width", type=int)
    p.add_argument("--locale-slots", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out")

    p = add("split", "seeded train/dev/test split, optionally prefix-expanded")
    p.add_argument("--dataset")
    p.add_argument("--ratios", help="e.g. 0.8,0.1,0.1")
    p.add_argument("--seed", type=int)
    p.add_argument("--prefix-expand", action="store_true", default=None)
    p.add_argument("--vocab", help="re-encode token ids with this vocabulary")
    p.add_argument("--max-len", type=int)
    p.add_argument("--out-dir")

    p = add("train", "train a classifier and save its bundle")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--vocab")
    p.add_argument("--init", help="bundle whose matching tensors seed the model")
    p.add_argument("--no-traditional-features", dest="traditional_features", action="store_false", default=None)
    p.add_argument("--out")
    _model_flags(p)
    _hyper_flags(p)

    p = add("pretrain-mlm", "masked-LM pre-training of the transformer encoder")
    p.add_argument("--corpus", help="text or click log; a synthetic corpus when omitted")
    p.add_argument("--n", type=int)
    p.add_argument("--vocab")
    p.add_argument("--labels")
    p.add_argument("--mask-rate", type=float)
    p.add_argument("--out")
    _model_flags(p)
    _hyper_flags(p)

    p = add("evaluate", "accuracy and per-class F1 of a bundle on a dataset")
    p.add_argument("--bundle")
    p.add_argument("--dataset")
    p.add_argument("--out")

    p = add("compare", "relative-delta table against a baseline report")
    p.add_argument("--baseline")
    p.add_argument("--reports", nargs="+", help="name=report.json ...")

    p = add("bench-latency", "batch-1 p50/p90/p99 latency of one or more bundles")
    p.add_argument("--bundles", nargs="+", help="name=bundle.bin ...")
    p.add_argument("--queries", help="click log or one query per line")
    p.add_argument("--n-warmup", type=int)
    p.add_argument("--n-measured", type=int)
    p.add_argument("--out")

    p = add("param-count", "named parameter breakdown and total")
    p.add_argument("--bundle")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--feature-width", type=int)
    _model_flags(p)

    p = add("predict", "one-shot prediction")
    p.add_argument("--bundle")
    p.add_argument("--query")
    p.add_argument("--locale")
    p.add_argument("--mode", choices=("incomplete", "complete"))
    p.add_argument("--features", help="comma-separated traditional feature vector")
    p.add_argument("--history", help="comma-separated past intents")

    p = add("typeahead", "per-keystroke predictions for characters read from stdin")
    p.add_argument("--bundle")
    p.add_argument("--locale")
    p.add_argument("--features")
    p.add_argument("--history")

    p = add("serve", "JSON-lines intent service on stdio or tcp://host:port")
    p.add_argument("--incomplete", help="bundle for typeahead requests")
    p.add_argument("--complete", help="bundle for complete-query requests")
    p.add_argument("--endpoint")
    p.add_argument("--workers", type=int)
    return parser


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "synth-data": cmd_synth_data,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "train": cmd_train,
    "pretrain-mlm": cmd_pretrain_mlm,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "bench-latency": cmd_bench_latency,
    "param-count": cmd_param_count,
    "predict": cmd_predict,
    "typeahead": cmd_typeahead,
    "serve": cmd_serve,
}


def main(argv: Sequence[str] | None = None, stdin=None, stdout=None) -> int:
    out = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        settings = Settings(args)
        fn = COMMANDS[args.command]
        if args.command in ("typeahead", "serve"):
            return fn(settings, out, instream=stdin)
        return fn(settings, out)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
