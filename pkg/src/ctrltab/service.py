"""HTTP service for the annotation verification loop.

Serves pairs with their automatic annotations, records annotator verdicts in
an append-only JSONL log (replayed on startup), reports pairwise agreement,
and exports verified pairs.  Static files for the browser UI are served from
a configurable directory.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .corpus import AgreementReport, compute_agreement
from .data import (
    HighlightSet,
    KnowledgeBase,
    PairRecord,
    pair_to_dict,
    read_pairs,
)
from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Verdict:
    pair_id: str
    annotator_id: str
    kb_decisions: tuple[tuple[str, bool], ...]
    highlight_set: frozenset[tuple[int, int]]
    timestamp: float

    def as_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "annotator_id": self.annotator_id,
            "kb_decisions": [[sid, bool(keep)] for sid, keep in self.kb_decisions],
            "highlight_set": [list(ref) for ref in sorted(self.highlight_set)],
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Verdict":
        try:
            return cls(
                pair_id=obj["pair_id"],
                annotator_id=obj["annotator_id"],
                kb_decisions=tuple((d[0], bool(d[1])) for d in obj["kb_decisions"]),
                highlight_set=frozenset(tuple(ref) for ref in obj["highlight_set"]),
                timestamp=float(obj.get("timestamp") or 0.0),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ValidationError(f"malformed verdict body: {exc}") from exc


class VerdictLog:
    """Append-only JSONL log; a torn final line is tolerated on replay."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def replay(self) -> list[tuple[int, Verdict]]:
        if not self.path.exists():
            return []
        entries = []
        with open(self.path, "r", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        for i, line in enumerate(lines):
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                if i == len(lines) - 1 or (i == len(lines) - 2 and lines[-1] == ""):
                    log.warning("verdict log %s: dropping torn final line", self.path)
                    break
                raise ValidationError(f"verdict log {self.path}: malformed line {i + 1}")
            entries.append((int(obj["seq"]), Verdict.from_dict(obj)))
        return entries

    def append(self, seq: int, verdict: Verdict) -> None:
        record = {"seq": seq, **verdict.as_dict()}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
            fh.flush()


class AnnotationState:
    """Dataset plus the latest verdict per (pair, annotator)."""

    def __init__(self, pairs: list[PairRecord], verdict_log: VerdictLog):
        self.pairs: dict[str, PairRecord] = {p.id: p for p in pairs}
        self.log = verdict_log
        self.verdicts: dict[tuple[str, str], tuple[int, Verdict]] = {}
        self.seq = 0
        self.lock = threading.Lock()
        for seq, verdict in verdict_log.replay():
            self._validate(verdict)
            self.verdicts[(verdict.pair_id, verdict.annotator_id)] = (seq, verdict)
            self.seq = max(self.seq, seq)

    def _validate(self, verdict: Verdict) -> None:
        pair = self.pairs.get(verdict.pair_id)
        if pair is None:
            raise KeyError(verdict.pair_id)
        kb_ids = {s.id for s in pair.kb.sentences}
        for sid, _ in verdict.kb_decisions:
            if sid not in kb_ids:
                raise ValidationError(f"pair {pair.id}: unknown sentence id {sid!r}")
        positions = {(c.row, c.col) for c in pair.table.cells}
        for ref in verdict.highlight_set:
            if ref not in positions:
                raise ValidationError(f"pair {pair.id}: highlight {ref} is not a cell")

    def apply_verdict(self, verdict: Verdict) -> int:
        """Validate, append to the log, then update memory; returns the sequence number."""
        with self.lock:
            self._validate(verdict)
            self.seq += 1
            self.log.append(self.seq, verdict)
            self.verdicts[(verdict.pair_id, verdict.annotator_id)] = (self.seq, verdict)
            return self.seq

    def annotators_for(self, pair_id: str) -> list[str]:
        return sorted(a for (pid, a) in self.verdicts if pid == pair_id)

    def pair_summaries(self, split: str | None = None) -> list[dict]:
        out = []
        for pair in self.pairs.values():
            if split and pair.split != split:
                continue
            annotators = self.annotators_for(pair.id)
            out.append({
                "id": pair.id,
                "split": pair.split,
                "n_cells": len(pair.table.cells),
                "n_kb": len(pair.kb),
                "annotators": annotators,
                "verified": bool(annotators),
            })
        return out

    def pair_detail(self, pair_id: str) -> dict:
        pair = self.pairs[pair_id]
        detail = pair_to_dict(pair)
        detail["verdicts"] = {
            annotator: verdict.as_dict()
            for (pid, annotator), (_, verdict) in sorted(self.verdicts.items())
            if pid == pair_id
        }
        return detail

    def agreement(self, annotator_a: str, annotator_b: str) -> AgreementReport:
        def annotations(annotator: str) -> dict:
            result = {}
            for (pid, a), (_, verdict) in self.verdicts.items():
                if a != annotator:
                    continue
                decided = dict(verdict.kb_decisions)
                kb_full = {s.id: decided.get(s.id, True) for s in self.pairs[pid].kb.sentences}
                result[pid] = (HighlightSet(verdict.highlight_set), kb_full)
            return result

        ann_a = annotations(annotator_a)
        ann_b = annotations(annotator_b)
        common = sorted(set(ann_a) & set(ann_b))
        if not common:
            raise ValidationError(f"annotators {annotator_a!r} and {annotator_b!r} share no pairs")
        tables = {pid: self.pairs[pid].table for pid in common}
        return compute_agreement(
            tables, {p: ann_a[p] for p in common}, {p: ann_b[p] for p in common}
        )

    def export_verified(self) -> list[PairRecord]:
        """Pairs with at least one verdict; the latest verdict adjudicates."""
        out = []
        for pair in self.pairs.values():
            latest: tuple[int, Verdict] | None = None
            for (pid, _), entry in self.verdicts.items():
                if pid == pair.id and (latest is None or entry[0] > latest[0]):
                    latest = entry
            if latest is None:
                continue
            _, verdict = latest
            decided = dict(verdict.kb_decisions)
            sentences = tuple(
                s.with_status("accepted" if decided.get(s.id, True) else "rejected")
                if s.status == "auto" else s
                for s in pair.kb.sentences
            )
            out.append(
                replace(
                    pair,
                    kb=KnowledgeBase(sentences),
                    highlights=HighlightSet(verdict.highlight_set),
                )
            )
        return out


_FALLBACK_INDEX = b"""<!doctype html>
<html><head><meta charset="utf-8"><title>annotation service</title></head>
<body><h1>Annotation service</h1>
<p>No UI build found. API endpoints live under <code>/api/</code>.</p></body></html>
"""

_STATIC_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    state: AnnotationState
    static_dir: Path | None

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send_json(self, obj, status: int = 200) -> None:
        body = json.dumps(obj, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, code: str, message: str) -> None:
        self._send_json({"code": code, "message": message}, status=status)

    def do_GET(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = {k: v[0] for k, v in parse_qs(url.query).items()}
        try:
            if parts[:2] == ["api", "pairs"] and len(parts) == 2:
                self._send_json({"pairs": self.state.pair_summaries(query.get("split"))})
            elif parts[:2] == ["api", "pairs"] and len(parts) == 3:
                pair_id = parts[2]
                if pair_id not in self.state.pairs:
                    self._send_error_json(404, "not_found", f"unknown pair {pair_id!r}")
                    return
                self._send_json(self.state.pair_detail(pair_id))
            elif parts[:2] == ["api", "agreement"]:
                a, b = query.get("a", ""), query.get("b", "")
                if not a or not b:
                    self._send_error_json(400, "validation", "query params a and b are required")
                    return
                report = self.state.agreement(a, b)
                self._send_json({
                    "n_samples": report.n_samples,
                    "cell_agreement": report.cell_agreement,
                    "kb_agreement": report.kb_agreement,
                })
            elif parts[:2] == ["api", "export"]:
                records = self.state.export_verified()
                body = "".join(
                    json.dumps(pair_to_dict(p), ensure_ascii=False, separators=(",", ":")) + "\n"
                    for p in records
                ).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/x-ndjson; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
            elif parts[:1] == ["api"]:
                self._send_error_json(404, "not_found", f"unknown endpoint {url.path}")
            else:
                self._serve_static(url.path)
        except ValidationError as exc:
            self._send_error_json(400, "validation", str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("request failed")
            self._send_error_json(500, "internal", str(exc))

    def do_POST(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        if not (len(parts) == 4 and parts[:2] == ["api", "pairs"] and parts[3] == "verdicts"):
            self._send_error_json(404, "not_found", f"unknown endpoint {url.path}")
            return
        pair_id = parts[2]
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length).decode("utf-8")) if length else {}
            payload.setdefault("pair_id", pair_id)
            payload.setdefault("timestamp", time.time())
            verdict = Verdict.from_dict(payload)
            if verdict.pair_id != pair_id:
                raise ValidationError("verdict pair_id does not match the URL")
            seq = self.state.apply_verdict(verdict)
            self._send_json({"seq": seq, "pair_id": pair_id}, status=200)
        except KeyError as exc:
            self._send_error_json(404, "not_found", f"unknown pair {exc}")
        except (ValidationError, json.JSONDecodeError) as exc:
            self._send_error_json(400, "validation", str(exc))

    def _serve_static(self, path: str) -> None:
        name = path.lstrip("/") or "index.html"
        if self.static_dir is not None:
            target = (self.static_dir / name).resolve()
            if str(target).startswith(str(self.static_dir.resolve())) and target.is_file():
                body = target.read_bytes()
                ctype = _STATIC_TYPES.get(target.suffix, "application/octet-stream")
                self.send_response(200)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
        if name == "index.html":
            self.send_response(200)
            self.send_header("Content-Type", "text/html; charset=utf-8")
            self.send_header("Content-Length", str(len(_FALLBACK_INDEX)))
            self.end_headers()
            self.wfile.write(_FALLBACK_INDEX)
        else:
            self._send_error_json(404, "not_found", f"no static file {name!r}")


def serve(
    dataset_path: str | Path,
    verdict_log_path: str | Path,
    bind_address: tuple[str, int] = ("127.0.0.1", 8040),
    static_dir: str | Path | None = None,
) -> ThreadingHTTPServer:
    """Build the server (bound but not yet running); call serve_forever() on it."""
    try:
        pairs = read_pairs(dataset_path)
    except OSError as exc:
        raise ValidationError(f"cannot read dataset {dataset_path}: {exc}") from exc
    state = AnnotationState(pairs, VerdictLog(verdict_log_path))
    handler = type("BoundHandler", (_Handler,), {
        "state": state,
        "static_dir": Path(static_dir) if static_dir else None,
    })
    server = ThreadingHTTPServer(bind_address, handler)
    server.daemon_threads = True
    return server
