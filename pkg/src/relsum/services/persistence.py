"""Persistence helpers for corpora, JSON/JSONL artifacts, and report exports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar

from ..config import RunConfig
from ..core.corpus import Corpus, JudgedPair, Product, Query, TokenVocab
from ..errors import ConfigMismatchError, CorpusError, MissingArtifactError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

__all__ = [
    "FORMAT_VERSION",
    "artifact_header",
    "check_header",
    "write_json",
    "read_json",
    "write_jsonl",
    "read_jsonl",
    "save_corpus",
    "load_corpus",
    "file_checksum",
    "export_report_csv",
    "TrainingLog",
]

RecordT = TypeVar("RecordT")


def artifact_header(kind: str, config: RunConfig, **extra: Any) -> dict[str, Any]:
    """Metadata every artifact embeds so later stages can detect stale inputs."""

    header: dict[str, Any] = {
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "root_seed": config.root_seed,
        "config_hash": config.config_hash(),
    }
    header.update(extra)
    return header


def check_header(header: Mapping[str, Any], config: RunConfig, source: str | Path, *, allow_mismatch: bool = False) -> None:
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CorpusError(f"unsupported format version {version!r}", path=str(source))
    if header.get("config_hash") != config.config_hash():
        message = f"{source} was produced with config {header.get('config_hash')}, current is {config.config_hash()}"
        if not allow_mismatch:
            raise ConfigMismatchError(message + " (rerun the stage or pass --allow-mismatch)")
        logger.warning("%s; continuing because --allow-mismatch was given", message)


def _dumps(payload: object) -> str:
    return json.dumps(payload, sort_keys=True, ensure_ascii=False)


def write_json(file_path: str | Path, payload: object) -> None:
    """Canonical (sorted, indented) JSON so reruns are byte-identical."""

    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, ensure_ascii=False)
        handle.write("\n")


def read_json(file_path: str | Path) -> Any:
    path = Path(file_path)
    if not path.exists():
        raise MissingArtifactError(f"Missing artifact: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"malformed JSON: {exc.msg}", line=exc.lineno, path=str(path)) from exc


def write_jsonl(file_path: str | Path, header: Mapping[str, Any], records: Iterable[Mapping[str, Any]]) -> int:
    """Write a header record followed by one record per line; returns the record count."""

    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(_dumps(dict(header)) + "\n")
        for record in records:
            handle.write(_dumps(dict(record)) + "\n")
            count += 1
    return count


def read_jsonl(
    file_path: str | Path,
    parse: Callable[[Mapping[str, Any]], RecordT] = dict,  # type: ignore[assignment]
) -> tuple[dict[str, Any], list[RecordT]]:
    """Read ``(header, records)``; any malformed line raises with its 1-based line number."""

    path = Path(file_path)
    if not path.exists():
        raise MissingArtifactError(f"Missing artifact: {path}")
    header: dict[str, Any] | None = None
    records: list[RecordT] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.endswith("\n"):
                raise CorpusError("truncated record (no trailing newline)", line=line_number, path=str(path))
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON: {exc.msg}", line=line_number, path=str(path)) from exc
            if not isinstance(payload, dict):
                raise CorpusError("record is not a JSON object", line=line_number, path=str(path))
            if header is None:
                if "format_version" not in payload:
                    raise CorpusError("first line must be a header record", line=line_number, path=str(path))
                header = payload
                continue
            try:
                records.append(parse(payload))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"bad record: {exc}", line=line_number, path=str(path)) from exc
    if header is None:
        raise CorpusError("empty file: header record missing", line=1, path=str(path))
    return header, records


def save_corpus(directory: str | Path, corpus: Corpus, header: Mapping[str, Any]) -> list[Path]:
    """Write ``products.jsonl``, ``queries.jsonl`` and ``pairs.jsonl``."""

    root = Path(directory)
    vocab_info = {"n_attributes": corpus.vocab.n_attributes, "n_filler": corpus.vocab.n_filler}
    files = {
        "products": (root / "products.jsonl", (p.to_payload() for p in corpus.products)),
        "queries": (root / "queries.jsonl", (q.to_payload() for q in corpus.queries)),
        "pairs": (root / "pairs.jsonl", (p.to_payload() for p in corpus.pairs)),
    }
    written: list[Path] = []
    for kind, (path, records) in files.items():
        count = write_jsonl(path, {**header, **vocab_info, "kind": kind}, records)
        logger.info("wrote %d %s to %s", count, kind, path)
        written.append(path)
    return written


def load_corpus(directory: str | Path) -> tuple[Corpus, dict[str, Any]]:
    root = Path(directory)
    header, products = read_jsonl(root / "products.jsonl", Product.from_payload)
    _, queries = read_jsonl(root / "queries.jsonl", Query.from_payload)
    _, pairs = read_jsonl(root / "pairs.jsonl", JudgedPair.from_payload)
    try:
        vocab = TokenVocab(int(header["n_attributes"]), int(header["n_filler"]))
    except KeyError as exc:
        raise CorpusError(f"header lacks {exc}", line=1, path=str(root / "products.jsonl")) from exc
    return Corpus(vocab=vocab, products=products, queries=queries, pairs=pairs), header


def file_checksum(file_path: str | Path) -> str:
    hasher = hashlib.sha256()
    with open(file_path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def export_report_csv(file_path: str | Path, rows: Sequence[Sequence[object]], columns: Sequence[str]) -> None:
    """Write report rows (one per candidate and split) to a CSV file."""

    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(columns))
        for row in rows:
            writer.writerow(list(row))


class TrainingLog:
    """Append-only per-step JSONL log; the first line is the artifact header.

    Records are also kept in memory so callers can summarise or plot them.
    """

    def __init__(self, file_path: str | Path | None, header: Mapping[str, Any]) -> None:
        self.path = Path(file_path) if file_path is not None else None
        self.header = dict(header)
        self.records: list[dict[str, Any]] = []
        self._handle = None

    def __enter__(self) -> "TrainingLog":
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.path, "w", encoding="utf-8")
            self._handle.write(_dumps(self.header) + "\n")
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def append(self, record: Mapping[str, Any]) -> None:
        entry = dict(record)
        self.records.append(entry)
        if self._handle is not None:
            self._handle.write(_dumps(entry) + "\n")
            self._handle.flush()
