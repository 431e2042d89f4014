"""Newline-delimited JSON scoring service over TCP.

Each request line is ``{"id": ..., "features": [...]}`` holding one raw,
unscaled feature vector. The reply is one line
``{"id", "probability", "label", "latency_micros", "model"}`` or, for a bad
request, ``{"id", "error"}``. The literal line ``{"ping":true}`` is answered
with ``{"pong":true,"model":"<digest>"}``. ``model`` is the classifier
archive digest as printed by ``latentmal inspect``.
"""
from __future__ import annotations

import json
import math
import socketserver
import threading
import time

from .errors import PreconditionError
from .persist import inspect_archive, load_model
from .pipeline import InferencePipeline

__all__ = ["ScoringModel", "load_scoring_model", "ScoreServer", "serve", "handle_line"]


class ScoringModel:
    """An :class:`InferencePipeline` plus the digest reported to clients."""

    def __init__(self, pipeline: InferencePipeline, digest: str):
        self.pipeline = pipeline
        self.digest = digest
        self._lock = threading.Lock()
        self.requests = 0

    def count(self):
        with self._lock:
            self.requests += 1


def load_scoring_model(classifier_path, scaler_path, encoder_path=None) -> ScoringModel:
    """Load the archives and check that their dimensions chain."""
    scaler, kind = load_model(scaler_path)
    if kind != "scaler":
        raise PreconditionError(f"{scaler_path} holds a {kind} archive, not a scaler")
    encoder = None
    if encoder_path is not None:
        encoder, kind = load_model(encoder_path)
        if kind != "vae":
            raise PreconditionError(f"{encoder_path} holds a {kind} archive, not a vae")
    classifier, kind = load_model(classifier_path)
    if kind in ("vae", "scaler"):
        raise PreconditionError(f"{classifier_path} holds a {kind} archive, not a classifier")
    pipeline = InferencePipeline(scaler, classifier, encoder)
    return ScoringModel(pipeline, inspect_archive(classifier_path)["digest"])


def _reply(obj) -> bytes:
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def handle_line(model: ScoringModel, line: bytes) -> bytes:
    """Answer one request line. Never raises for bad input."""
    start = time.perf_counter()
    try:
        req = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return _reply({"id": None, "error": f"malformed JSON: {exc}"})
    if not isinstance(req, dict):
        return _reply({"id": None, "error": "request must be a JSON object"})
    if req.get("ping") is True:
        return _reply({"pong": True, "model": model.digest})
    rid = req.get("id")
    feats = req.get("features")
    d = model.pipeline.input_dim
    if not isinstance(feats, list):
        return _reply({"id": rid, "error": "request needs a 'features' list"})
    if len(feats) != d:
        return _reply({"id": rid, "error": f"expected {d} features, got {len(feats)}"})
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
               for v in feats):
        return _reply({"id": rid, "error": "features must be finite numbers"})
    try:
        p = model.pipeline.score_one(feats)
    except Exception as exc:  # keep the connection usable whatever the model does
        return _reply({"id": rid, "error": f"{type(exc).__name__}: {exc}"})
    model.count()
    micros = int((time.perf_counter() - start) * 1e6)
    return _reply({"id": rid, "probability": p, "label": int(p >= 0.5),
                   "latency_micros": micros, "model": model.digest})


class _Handler(socketserver.StreamRequestHandler):
    # one small reply per request; Nagle batching would only add latency
    disable_nagle_algorithm = True

    def handle(self):
        for line in self.rfile:
            if not line.strip():
                continue
            self.wfile.write(handle_line(self.server.model, line))
            self.wfile.flush()


class ScoreServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128

    def __init__(self, address, model: ScoringModel):
        self.model = model
        super().__init__(address, _Handler)


def serve(model: ScoringModel, host: str = "127.0.0.1", port: int = 8765, ready=None):
    """Block serving requests. ``ready(address)`` is called once bound."""
    with ScoreServer((host, port), model) as srv:
        if ready is not None:
            ready(srv.server_address)
        srv.serve_forever()
