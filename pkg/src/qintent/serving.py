"""Bundle files, per-keystroke typeahead sessions and the JSON Lines intent service.

Bundle file layout::

    b"QINTBNDL" | u32 little-endian header length | UTF-8 JSON header | tensor payload

The header carries the format version, config, vocabulary, labels, locales,
feature layout, a tensor manifest (name, shape, dtype, offset, nbytes,
sha256) and the bundle checksum. Tensors are little-endian float64.
"""

from __future__ import annotations

import hashlib
import io
import json
import socketserver
import struct
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

from .autograd import ShapeError
from .models import BUNDLE_FORMAT_VERSION, IntentDistribution, ModelBundle, ModelConfig, param_shapes, predict
from .text import FeatureSpec, IntentLabelSet, LocaleRegistry, Query, UnknownLocaleError, UserContext, Vocabulary

MAGIC = b"QINTBNDL"
_DTYPE = "<f8"


class BundleError(ValueError):
    """Base class for unreadable bundle files."""


class ChecksumError(BundleError):
    pass


class FormatVersionError(BundleError):
    pass


class ManifestError(BundleError):
    pass


def save_bundle(bundle: ModelBundle, path: str | Path) -> str:
    """Write ``bundle`` to ``path`` atomically; returns the bundle checksum."""
    bundle.validate()
    manifest, chunks, offset = [], [], 0
    for name, shape in param_shapes(bundle.config).items():
        raw = np.ascontiguousarray(bundle.params[name], dtype=_DTYPE).tobytes()
        manifest.append({
            "name": name,
            "shape": list(shape),
            "dtype": _DTYPE,
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    checksum = bundle.checksum()
    header = dict(bundle.header(), tensors=manifest, checksum=checksum)
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)
    return checksum


def read_bundle_header(fh: IO[bytes]) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise BundleError("not a bundle file (bad magic)")
    raw_len = fh.read(4)
    if len(raw_len) != 4:
        raise BundleError("truncated bundle header")
    (n,) = struct.unpack("<I", raw_len)
    try:
        header = json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"bundle header is corrupt: {exc}") from None
    version = header.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise FormatVersionError(f"bundle format version {version!r} is not supported (expected {BUNDLE_FORMAT_VERSION})")
    return header


def load_bundle(path: str | Path) -> ModelBundle:
    """Read and fully verify a bundle: version first, then manifest, then checksums."""
    with open(path, "rb") as fh:
        header = read_bundle_header(fh)
        try:
            cfg = ModelConfig.from_dict(header["config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"invalid model config: {exc}") from None
        expected = param_shapes(cfg)
        manifest = header.get("tensors", [])
        got = {t["name"]: tuple(t["shape"]) for t in manifest}
        if got != expected:
            diff = sorted(set(got.items()) ^ set(expected.items()))
            raise ManifestError(f"tensor manifest does not match the architecture: {diff[:6]}")
        payload = fh.read()
    params = {}
    for t in manifest:
        if t.get("dtype") != _DTYPE:
            raise ManifestError(f"unsupported dtype {t.get('dtype')!r} for {t['name']}")
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"] or hashlib.sha256(raw).hexdigest() != t["sha256"]:
            raise ChecksumError(f"checksum mismatch in tensor {t['name']}")
        params[t["name"]] = np.frombuffer(raw, dtype=_DTYPE).reshape(t["shape"]).astype(np.float64)
    try:
        bundle = ModelBundle(
            cfg,
            params,
            Vocabulary.from_dict(header["vocab"]),
            IntentLabelSet(tuple(header["labels"])),
            LocaleRegistry(tuple(header["locales"])) if header.get("locales") else None,
            FeatureSpec(**header["features"]) if header.get("features") else None,
        )
    except (ShapeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(str(exc)) from None
    if bundle.checksum() != header.get("checksum"):
        raise ChecksumError("bundle checksum does not match its contents")
    return bundle


# ---------------------------------------------------------------------------
# typeahead
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Edit:
    kind: str  # "append", "delete" or "reset"
    char: str = ""

    def __post_init__(self):
        if self.kind not in ("append", "delete", "reset"):
            raise ValueError(f"unknown edit {self.kind!r}")
        if self.kind == "append" and len(self.char) != 1:
            raise ValueError("append takes exactly one character")


@dataclass
class TypeaheadSession:
    """Single-owner keystroke session over a char-granularity bundle."""

    bundle: ModelBundle
    locale: int = 0
    user: UserContext | None = None
    buffer: str = ""
    log: list[tuple[str, IntentDistribution]] = field(default_factory=list)
    warning: str | None = None

    def __post_init__(self):
        if self.bundle.config.granularity != "char":
            raise ValueError("typeahead sessions need a char-granularity bundle")


def typeahead_stream(session: TypeaheadSession, edit: Edit | str) -> IntentDistribution:
    """Apply one edit and predict on the whole current buffer.

    A bare string is shorthand for appending that character. Deleting from an
    empty buffer is a no-op that sets ``session.warning``.
    """
    if isinstance(edit, str):
        edit = Edit("append", edit)
    session.warning = None
    if edit.kind == "append":
        session.buffer += edit.char
    elif edit.kind == "delete":
        if session.buffer:
            session.buffer = session.buffer[:-1]
        else:
            session.warning = "delete_on_empty"
    else:
        session.buffer = ""
    dist = predict(session.bundle, Query(session.buffer, session.locale, complete=False), session.user)
    session.log.append((session.buffer, dist))
    return dist


# ---------------------------------------------------------------------------
# service
# ---------------------------------------------------------------------------


class RequestError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class IntentService:
    """Routes JSON requests by mode to mounted bundles. ``handle_line`` is thread-safe."""

    MODES = ("incomplete", "complete")

    def __init__(self, bundles: Mapping[str, ModelBundle], report_latency: bool = True):
        self._bundles: dict[str, ModelBundle] = {}
        self._versions: dict[str, str] = {}
        self._lock = threading.Lock()
        self.report_latency = report_latency
        for mode, b in bundles.items():
            self.mount(mode, b)
        if not self._bundles:
            raise ValueError("at least one bundle must be mounted")

    def mount(self, mode: str, bundle: ModelBundle) -> None:
        """Swap in a bundle; requests already running keep the one they started with."""
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        version = bundle.version
        bundle.tensors()
        with self._lock:
            bundles = dict(self._bundles)
            versions = dict(self._versions)
            bundles[mode], versions[mode] = bundle, version
            self._bundles, self._versions = bundles, versions

    def mounted(self) -> dict[str, str]:
        return dict(self._versions)

    def _user(self, bundle: ModelBundle, req: Mapping, locale: int) -> UserContext | None:
        width = bundle.config.feature_width
        if "features" in req and req["features"] is not None:
            feats = req["features"]
            if not isinstance(feats, list) or len(feats) != width:
                raise RequestError("bad_features", f"features must be a list of {width} numbers")
            try:
                vec = tuple(float(x) for x in feats)
            except (TypeError, ValueError):
                raise RequestError("bad_features", "features must be numeric") from None
            return UserContext(str(req.get("user_id", "")), vec)
        if req.get("history") is not None and width:
            try:
                hist = [bundle.labels.id(h) for h in req["history"]]
            except (KeyError, TypeError):
                raise RequestError("bad_features", "history must list known intent names") from None
            spec = bundle.features or FeatureSpec(len(bundle.labels), width, 0)
            return UserContext(str(req.get("user_id", "")), tuple(spec.build(hist, locale).tolist()))
        return None

    def handle(self, req: Mapping) -> dict:
        if not isinstance(req, Mapping):
            raise RequestError("invalid_request", "request must be a JSON object")
        mode = req.get("mode", "complete")
        bundles, versions = self._bundles, self._versions
        if mode not in bundles:
            raise RequestError("unknown_mode", f"no bundle mounted for mode {mode!r}")
        bundle = bundles[mode]
        text = req.get("query")
        if not isinstance(text, str):
            raise RequestError("invalid_request", "query must be a string")
        loc_code = req.get("locale")
        if bundle.locales is None or loc_code is None:
            locale = 0
        else:
            try:
                locale = bundle.locales.id(str(loc_code))
            except UnknownLocaleError:
                raise RequestError("unknown_locale", f"locale {loc_code!r} is not registered") from None
        user = self._user(bundle, req, locale)
        t0 = time.perf_counter_ns()
        dist = predict(bundle, Query(text, locale, complete=(mode == "complete")), user)
        elapsed = (time.perf_counter_ns() - t0) / 1000.0
        out = {
            "id": req.get("id"),
            "probabilities": dist.by_label(),
            "argmax": dist.argmax_label,
            "model_version": versions[mode],
        }
        if self.report_latency:
            out["latency_us"] = round(elapsed, 1)
        return out

    def handle_line(self, line: str) -> str:
        req_id = None
        try:
            try:
                req = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RequestError("malformed_json", f"could not parse request: {exc.msg}") from None
            if isinstance(req, Mapping):
                req_id = req.get("id")
            resp = self.handle(req)
        except RequestError as exc:
            resp = {"id": req_id, "error": exc.code, "message": str(exc)}
        except Exception as exc:  # keep the service alive on any model error
            resp = {"id": req_id, "error": "internal", "message": f"{type(exc).__name__}: {exc}"}
        return json.dumps(resp, ensure_ascii=False, sort_keys=True)


def serve_stdio(service: IntentService, instream: IO[str] | None = None, outstream: IO[str] | None = None,
                workers: int = 1) -> int:
    """Answer one request per input line until EOF; returns the number of lines served."""
    instream = instream or sys.stdin
    outstream = outstream or sys.stdout
    lock = threading.Lock()
    count = 0

    def answer(line: str) -> None:
        resp = service.handle_line(line)
        with lock:
            outstream.write(resp + "\n")
            outstream.flush()

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for line in instream:
            if not line.strip():
                continue
            count += 1
            if workers <= 1:
                answer(line)
            else:
                pool.submit(answer, line)
    return count


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            resp = self.server.service.handle_line(line)  # type: ignore[attr-defined]
            self.wfile.write((resp + "\n").encode("utf-8"))
            self.wfile.flush()


class IntentTCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: IntentService):
        super().__init__(address, _LineHandler)
        self.service = service


def serve(endpoint: str, bundles: Mapping[str, ModelBundle], instream=None, outstream=None, workers: int = 4):
    """Start serving. ``endpoint`` is ``"stdio"`` or ``"tcp://host:port"``.

    stdio blocks until EOF and returns the line count; tcp returns a started
    server (running on a daemon thread) whose ``shutdown()`` stops it.
    """
    service = IntentService(bundles)
    if endpoint == "stdio":
        return serve_stdio(service, instream, outstream, workers)
    if endpoint.startswith("tcp://"):
        host, _, port = endpoint[len("tcp://") :].rpartition(":")
        server = IntentTCPServer((host or "127.0.0.1", int(port)), service)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server
    raise ValueError(f"unsupported endpoint {endpoint!r}")


def service_overhead(service: IntentService, lines: Iterable[str]) -> list[float]:
    """Per-request time spent outside ``predict`` in microseconds (request latency minus model latency)."""
    out = []
    for line in lines:
        t0 = time.perf_counter_ns()
        resp = json.loads(service.handle_line(line))
        total = (time.perf_counter_ns() - t0) / 1000.0
        if "latency_us" in resp:
            out.append(max(total - resp["latency_us"], 0.0))
    return out


def read_lines(text: str) -> list[str]:
    return [ln for ln in io.StringIO(text) if ln.strip()]
