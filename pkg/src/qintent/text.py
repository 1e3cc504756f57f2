"""Vocabularies, tokenization, click-log ingestion and dataset plumbing."""

from __future__ import annotations

import hashlib
import json
import math
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

PAD, UNK, CLS, MASK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<cls>", "<mask>")
GRANULARITIES = ("char", "word", "triletter")

DEFAULT_INTENTS = ("PEOPLE", "JOB", "COMPANY", "GROUP", "CONTENT")

# clicked document type -> intent name
DEFAULT_TYPE_MAP = {
    "profile": "PEOPLE",
    "job_posting": "JOB",
    "company_page": "COMPANY",
    "group_page": "GROUP",
    "article": "CONTENT",
    "post": "CONTENT",
}


class UnmappedTypeError(KeyError):
    """A clicked document type has no intent mapping."""


class UnknownLocaleError(KeyError):
    """A locale code or id is not in the registry."""


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


def _strip_punct(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def char_tokens(text: str) -> list[str]:
    return list(text.lower())


def word_tokens(text: str) -> list[str]:
    return _strip_punct(text.lower()).split()


def triletter_tokens(text: str) -> list[str]:
    """Overlapping character 3-grams of ``#text#`` (lowercased)."""
    if not text:
        return []
    s = "#" + text.lower() + "#"
    return [s[i : i + 3] for i in range(len(s) - 2)]


_TOKENIZERS = {"char": char_tokens, "word": word_tokens, "triletter": triletter_tokens}


def tokenize(text: str, granularity: str) -> list[str]:
    try:
        return _TOKENIZERS[granularity](text)
    except KeyError:
        raise ValueError(f"unknown granularity {granularity!r}") from None


# ---------------------------------------------------------------------------
# vocabularies and registries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Token/id mapping with reserved ids PAD=0, UNK=1, CLS=2, MASK=3."""

    granularity: str
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if tuple(self.tokens[:4]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index and self._index[token] >= len(RESERVED_TOKENS)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK) if token not in RESERVED_TOKENS else UNK

    def token(self, i: int) -> str:
        return self.tokens[i]

    def ids(self, tokens: Iterable[str]) -> list[int]:
        get = self._index.get
        return [get(t, UNK) if t not in RESERVED_TOKENS else UNK for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i != PAD]

    @property
    def digest(self) -> str:
        payload = json.dumps([self.granularity, list(self.tokens)], ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"granularity": self.granularity, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: Mapping) -> Vocabulary:
        return cls(d["granularity"], tuple(d["tokens"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus: Iterable[str], granularity: str, max_size: int) -> Vocabulary:
    """Most frequent tokens first (ties by first occurrence), capped at ``max_size`` ids."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    for text in corpus:
        for tok in tokenize(text, granularity):
            if tok not in first_seen:
                first_seen[tok] = len(first_seen)
            counts[tok] += 1
    for r in RESERVED_TOKENS:
        counts.pop(r, None)
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    keep = ranked[: max(0, max_size - len(RESERVED_TOKENS))]
    return Vocabulary(granularity, RESERVED_TOKENS + tuple(keep))


@dataclass(frozen=True)
class LocaleRegistry:
    codes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            raise ValueError("duplicate locale codes")

    def __len__(self) -> int:
        return len(self.codes)

    def id(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise UnknownLocaleError(code) from None

    def code(self, i: int) -> str:
        if not 0 <= i < len(self.codes):
            raise UnknownLocaleError(i)
        return self.codes[i]


@dataclass(frozen=True)
class IntentLabelSet:
    names: tuple[str, ...] = DEFAULT_INTENTS

    def __post_init__(self):
        if len(set(self.names)) != len(self.names) or not self.names:
            raise ValueError("intent names must be unique and non-empty")

    def __len__(self) -> int:
        return len(self.names)

    def id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown intent {name!r}") from None


# ---------------------------------------------------------------------------
# queries and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    text: str
    locale: int = 0
    complete: bool = True


@dataclass(frozen=True)
class ClickRecord:
    query: str
    locale: str
    user_id: str
    clicked_type: str
    ts: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> ClickRecord:
        return cls(
            query=str(d["query"]),
            locale=str(d["locale"]),
            user_id=str(d["user_id"]),
            clicked_type=str(d["clicked_type"]),
            ts=int(d.get("ts", 0)),
        )


@dataclass(frozen=True)
class UserContext:
    user_id: str
    features: tuple[float, ...]


@dataclass(frozen=True)
class LabeledExample:
    """A supervised example. ``text`` is kept so other granularities can re-encode it."""

    text: str
    token_ids: tuple[int, ...]
    locale: int
    features: tuple[float, ...]
    label: int

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "token_ids": list(self.token_ids),
            "locale": self.locale,
            "features": list(self.features),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> LabeledExample:
        return cls(d["text"], tuple(d["token_ids"]), int(d["locale"]), tuple(d["features"]), int(d["label"]))


def encode_text(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if vocab.granularity not in ("char", "word"):
        raise ValueError(f"cannot sequence-encode with a {vocab.granularity} vocabulary")
    ids = vocab.ids(tokenize(text, vocab.granularity))[:max_len]
    return ids + [PAD] * (max_len - len(ids))


def encode_query(q: Query, vocab: Vocabulary, max_len: int) -> list[int]:
    """Token ids of ``q.text``, truncated to ``max_len`` and PAD-filled."""
    return encode_text(q.text, vocab, max_len)


def generate_prefixes(q: Query) -> list[Query]:
    """Every keystroke prefix of the query, in typing order."""
    return [Query(q.text[:i], q.locale, complete=False) for i in range(1, len(q.text) + 1)]


# ---------------------------------------------------------------------------
# traditional features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    """Layout of the traditional (wide) feature vector.

    ``[per-intent propensities | locale one-hot (slots + other) | zero pad]``.
    ``locale_slots=0`` drops the locale block entirely.
    """

    n_labels: int
    width: int = 16
    locale_slots: int = 8

    @property
    def locale_width(self) -> int:
        return self.locale_slots + 1 if self.locale_slots > 0 else 0

    def __post_init__(self):
        needed = self.n_labels + self.locale_width
        if self.width < needed:
            raise ValueError(f"feature width {self.width} smaller than required blocks ({needed})")

    def build(self, history: Sequence[int], locale_id: int) -> np.ndarray:
        return build_user_features(history, locale_id, self)

    def to_dict(self) -> dict:
        return asdict(self)


def build_user_features(history: Sequence[int], locale_id: int, spec: FeatureSpec) -> np.ndarray:
    """Laplace-smoothed intent propensities plus a capped locale one-hot."""
    vec = np.zeros(spec.width, dtype=np.float64)
    counts = np.bincount(np.asarray(history, dtype=np.int64), minlength=spec.n_labels)[: spec.n_labels]
    vec[: spec.n_labels] = (counts + 1.0) / (len(history) + spec.n_labels)
    if spec.locale_slots > 0:
        slot = locale_id if 0 <= locale_id < spec.locale_slots else spec.locale_slots
        vec[spec.n_labels + slot] = 1.0
    return vec


# ---------------------------------------------------------------------------
# click log ingestion
# ---------------------------------------------------------------------------


def derive_label(r: ClickRecord, labels: IntentLabelSet, type_map: Mapping[str, str] = DEFAULT_TYPE_MAP) -> int:
    """Intent id implied by the clicked document type."""
    try:
        return labels.id(type_map[r.clicked_type])
    except KeyError:
        raise UnmappedTypeError(r.clicked_type) from None


@dataclass
class IngestReport:
    total: int = 0
    accepted: int = 0
    skipped: Counter = field(default_factory=Counter)

    @property
    def skipped_total(self) -> int:
        return sum(self.skipped.values())

    def __add__(self, other: IngestReport) -> IngestReport:
        return IngestReport(self.total + other.total, self.accepted + other.accepted, self.skipped + other.skipped)

    def to_dict(self) -> dict:
        return {"total": self.total, "accepted": self.accepted, "skipped": dict(self.skipped)}


def read_click_log(path: str | Path) -> Iterator[ClickRecord | Exception]:
    """Parse a JSON Lines click log; malformed lines are yielded as the exception."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                yield ClickRecord.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                yield exc


def write_click_log(path: str | Path, records: Iterable[ClickRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
            n += 1
    return n


def ingest_click_log(
    source: Iterable[ClickRecord | Mapping | Exception] | str | Path,
    labels: IntentLabelSet,
    vocab: Vocabulary | None,
    locales: LocaleRegistry,
    features: FeatureSpec,
    max_len: int = 32,
    type_map: Mapping[str, str] = DEFAULT_TYPE_MAP,
) -> tuple[list[LabeledExample], IngestReport]:
    """Turn click records into labeled examples.

    Each user's behavioural features are computed from that user's earlier
    accepted records in the stream, so the result depends only on stream order.
    """
    if isinstance(source, (str, Path)):
        source = read_click_log(source)
    report = IngestReport()
    history: dict[str, list[int]] = {}
    out: list[LabeledExample] = []
    for item in source:
        report.total += 1
        if isinstance(item, Exception):
            report.skipped["malformed"] += 1
            continue
        try:
            r = item if isinstance(item, ClickRecord) else ClickRecord.from_dict(item)
        except (KeyError, ValueError, TypeError):
            report.skipped["malformed"] += 1
            continue
        text = " ".join(r.query.split())
        if not text:
            report.skipped["empty_query"] += 1
            continue
        try:
            label = derive_label(r, labels, type_map)
        except UnmappedTypeError:
            report.skipped["unmapped_type"] += 1
            continue
        try:
            loc = locales.id(r.locale)
        except UnknownLocaleError:
            report.skipped["unknown_locale"] += 1
            continue
        past = history.setdefault(r.user_id, [])
        feats = tuple(features.build(past, loc).tolist())
        ids = tuple(encode_text(text, vocab, max_len)) if vocab is not None else ()
        out.append(LabeledExample(text, ids, loc, feats, label))
        past.append(label)
        report.accepted += 1
    return out, report


# ---------------------------------------------------------------------------
# dataset shaping
# ---------------------------------------------------------------------------


def split_dataset(
    ds: Sequence[LabeledExample], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[list[LabeledExample], list[LabeledExample], list[LabeledExample]]:
    """Seeded shuffle then contiguous train/dev/test cut."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(math.fsum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(ds)
    if n < 3:
        raise ValueError("need at least 3 examples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_dev = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_dev = min(n_dev, n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_dev], order[n_train + n_dev :])
    return tuple([ds[i] for i in part] for part in parts)  # type: ignore[return-value]


def prefix_expand(ds: Iterable[LabeledExample], vocab: Vocabulary | None = None, max_len: int = 32) -> list[LabeledExample]:
    """One example per keystroke prefix, each inheriting the source label."""
    out = []
    for ex in ds:
        for i in range(1, len(ex.text) + 1):
            prefix = ex.text[:i]
            ids = tuple(encode_text(prefix, vocab, max_len)) if vocab is not None else ()
            out.append(LabeledExample(prefix, ids, ex.locale, ex.features, ex.label))
    return out


def reencode(ds: Iterable[LabeledExample], vocab: Vocabulary, max_len: int) -> list[LabeledExample]:
    return [LabeledExample(e.text, tuple(encode_text(e.text, vocab, max_len)), e.locale, e.features, e.label) for e in ds]


DATASET_FORMAT = "qintent.dataset"
DATASET_VERSION = 1


def write_dataset(
    path: str | Path,
    examples: Sequence[LabeledExample],
    labels: IntentLabelSet,
    vocab: Vocabulary | None,
    features: FeatureSpec,
    locales: LocaleRegistry,
) -> None:
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "vocab_hash": vocab.digest if vocab is not None else None,
        "labels": list(labels.names),
        "locales": list(locales.codes),
        "feature_width": features.width,
        "features": features.to_dict(),
        "count": len(examples),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


def read_dataset(path: str | Path) -> tuple[dict, list[LabeledExample]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path} is not a dataset file")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')}")
        examples = [LabeledExample.from_dict(json.loads(line)) for line in fh if line.strip()]
    return header, examples
