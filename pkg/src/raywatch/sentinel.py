"""In-situ integration layer.

Three ways a running simulation can consult a trained bundle:

* spawn-per-frame: `classify` CLI, exit code 0 (valid) / 1 (anomalous) /
  2 (error), trivially callable from C or Fortran through system().
* persistent daemon: loads the bundle once, then answers newline-delimited
  JSON requests over a stream socket with strict request/reply alternation,
  so the per-frame cost excludes interpreter startup and model loading.
* workflow driver: simulates the step -> render -> classify -> continue or
  rewind loop against either detector form, modeling a blocking simulation.

Frames travel by path, not payload: a request names where the image is.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .errors import BindError, InBandError, RewindLimitExceeded
from .imagery import SynthConfig, load_image, save_image, synth_image
from .pipelines import OfflineBundle, load_bundle
from .seeding import derive_seed

logger = logging.getLogger(__name__)

ENDPOINT_ENV_VAR = "SENTINEL_ENDPOINT"

EXIT_VALID = 0
EXIT_ANOMALOUS = 1
EXIT_ERROR = 2


@dataclass(frozen=True)
class Verdict:
    label: int
    score: float
    model_id: str
    warm_up: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {"label": self.label, "score": self.score, "model_id": self.model_id, "warm_up": self.warm_up},
            sort_keys=True,
            separators=(",", ":"),
        )


def classify_path(bundle: OfflineBundle, image_path) -> Verdict:
    label, score = bundle.classify_image(load_image(image_path))
    return Verdict(label=label, score=score, model_id=bundle.model_id, warm_up=False)


def exit_code_for(verdict: Verdict) -> int:
    return EXIT_VALID if verdict.label == 1 else EXIT_ANOMALOUS


def parse_endpoint(endpoint: str):
    """`host:port` means TCP; anything else is a local socket path."""
    host, sep, port = endpoint.rpartition(":")
    if sep and host and port.isdigit():
        return "tcp", (host, int(port))
    return "unix", endpoint


class SentinelServer:
    """Single-bundle daemon with one-request-one-reply connections.

    The bundle is loaded once at startup and shared read-only; each accepted
    connection is served on its own thread, replies strictly alternating with
    requests. Request errors are answered in-band and never stop the loop.
    """

    def __init__(self, bundle_path, endpoint: str):
        self.bundle = load_bundle(bundle_path)
        kind, address = parse_endpoint(endpoint)
        try:
            if kind == "tcp":
                self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                self._sock.bind(address)
                host, port = self._sock.getsockname()[:2]
                self.endpoint = f"{host}:{port}"
            else:
                self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                self._sock.bind(address)
                self.endpoint = address
        except OSError as exc:
            raise BindError(f"cannot bind {endpoint}: {exc}") from exc
        self._sock.listen(16)
        self._sock.settimeout(0.2)
        self._stop = threading.Event()

    def serve_forever(self) -> None:
        logger.info("sentinel serving bundle %s on %s", self.bundle.model_id, self.endpoint)
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._sock.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                thread = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
                thread.start()
        finally:
            self._sock.close()

    def shutdown(self) -> None:
        self._stop.set()

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rwb") as stream:
            while not self._stop.is_set():
                line = stream.readline()
                if not line:
                    return
                reply = self._handle_line(line)
                stream.write(json.dumps(reply, sort_keys=True, separators=(",", ":")).encode("utf-8"))
                stream.write(b"\n")
                stream.flush()
                if reply.get("bye"):
                    self.shutdown()
                    return

    def _handle_line(self, line: bytes) -> dict:
        try:
            request = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return {"error": f"malformed request: {exc}"}
        if not isinstance(request, dict):
            return {"error": "request must be a JSON object"}

        op = request.get("op")
        if op == "ping":
            return {"pong": True, "model_id": self.bundle.model_id}
        if op == "shutdown":
            return {"ok": True, "bye": True}
        if op == "classify":
            path = request.get("path")
            if not isinstance(path, str):
                return {"error": "classify needs a string 'path'"}
            try:
                verdict = classify_path(self.bundle, path)
            except Exception as exc:
                return {"error": f"{type(exc).__name__}: {exc}"}
            return {
                "label": verdict.label,
                "score": verdict.score,
                "model_id": verdict.model_id,
                "warm_up": verdict.warm_up,
            }
        return {"error": f"unknown op {op!r}"}


def _request(endpoint: str, payload: dict, timeout: float) -> dict:
    kind, address = parse_endpoint(endpoint)
    family = socket.AF_INET if kind == "tcp" else socket.AF_UNIX
    with socket.socket(family, socket.SOCK_STREAM) as sock:
        sock.settimeout(timeout)
        sock.connect(address)
        with sock.makefile("rwb") as stream:
            stream.write(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8"))
            stream.write(b"\n")
            stream.flush()
            line = stream.readline()
    if not line:
        raise InBandError("connection closed before a reply arrived")
    reply = json.loads(line.decode("utf-8"))
    if "error" in reply:
        raise InBandError(reply["error"])
    return reply


def client_classify(endpoint: str, image_path, timeout: float = 30.0) -> Verdict:
    """One classify round-trip; raises InBandError for daemon-side failures."""
    reply = _request(endpoint, {"op": "classify", "path": str(image_path)}, timeout)
    return Verdict(
        label=int(reply["label"]),
        score=float(reply["score"]),
        model_id=str(reply["model_id"]),
        warm_up=bool(reply["warm_up"]),
    )


def client_ping(endpoint: str, timeout: float = 30.0) -> str:
    reply = _request(endpoint, {"op": "ping"}, timeout)
    return str(reply["model_id"])


def client_shutdown(endpoint: str, timeout: float = 30.0) -> None:
    _request(endpoint, {"op": "shutdown"}, timeout)


# ---------------------------------------------------------------------------
# Workflow driver


@dataclass(frozen=True)
class DriveConfig:
    """The simulated step/classify/rewind loop.

    A transient anomaly is injected at `inject_at` on the first pass only:
    regenerating a step after a rewind uses a fresh seed, modeling a fault
    that does not recur after the retry. `policy` decides what to do with
    warm-up verdicts: trust them, or ignore their negatives.
    """

    steps: int
    inject_at: int | None = None
    checkpoint_every: int = 10
    rewind_limit: int = 3
    policy: str = "trust"
    seed: int = 0
    synth: SynthConfig = SynthConfig()
    evolve_texture: bool = True

    def __post_init__(self):
        if self.policy not in ("trust", "ignore-negative"):
            raise ValueError(f"policy must be 'trust' or 'ignore-negative', got {self.policy!r}")
        if self.steps < 1 or self.checkpoint_every < 1 or self.rewind_limit < 1:
            raise ValueError("steps, checkpoint_every, and rewind_limit must be >= 1")


@dataclass(frozen=True)
class DriveLogEntry:
    step: int
    epoch: int
    label: int
    score: float
    warm_up: bool
    action: str  # continue | rewind | abort
    rewind_to: int | None = None


Detector = Callable[[Path], Verdict]


def detector_from_bundle(bundle: OfflineBundle) -> Detector:
    return lambda path: classify_path(bundle, path)


def detector_from_endpoint(endpoint: str, timeout: float = 30.0) -> Detector:
    return lambda path: client_classify(endpoint, path, timeout=timeout)


def workflow_driver(config: DriveConfig, detector: Detector, workdir) -> list[DriveLogEntry]:
    """Run the loop to completion; returns the full log.

    The simulation never advances past a negative verdict: it rewinds to the
    last completed checkpoint and re-runs from there with fresh seeds. If the
    same checkpoint accumulates `rewind_limit` failures the run aborts with
    RewindLimitExceeded (carrying the log so far).
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log: list[DriveLogEntry] = []
    failures: dict[int, int] = {}
    step = 1
    epoch = 0
    while step <= config.steps:
        anomalous = config.inject_at == step and epoch == 0
        frame_cfg = replace(
            config.synth,
            seed=derive_seed(config.seed, step, epoch),
            anomaly=anomalous,
        )
        if config.evolve_texture:
            frame_cfg = replace(frame_cfg, texture_seed=derive_seed(config.seed, step, epoch, 1))
        img, _ = synth_image(frame_cfg)
        frame_path = workdir / f"step_{step:05d}.png"
        save_image(img, frame_path)

        verdict = detector(frame_path)
        label = verdict.label
        if label == -1 and verdict.warm_up and config.policy == "ignore-negative":
            label = 1

        if label == 1:
            log.append(
                DriveLogEntry(step=step, epoch=epoch, label=verdict.label, score=verdict.score,
                              warm_up=verdict.warm_up, action="continue")
            )
            step += 1
            continue

        checkpoint = ((step - 1) // config.checkpoint_every) * config.checkpoint_every
        failures[checkpoint] = failures.get(checkpoint, 0) + 1
        if failures[checkpoint] >= config.rewind_limit:
            log.append(
                DriveLogEntry(step=step, epoch=epoch, label=verdict.label, score=verdict.score,
                              warm_up=verdict.warm_up, action="abort", rewind_to=checkpoint)
            )
            raise RewindLimitExceeded(
                f"checkpoint {checkpoint} re-failed {failures[checkpoint]} times", log=log
            )
        log.append(
            DriveLogEntry(step=step, epoch=epoch, label=verdict.label, score=verdict.score,
                          warm_up=verdict.warm_up, action="rewind", rewind_to=checkpoint)
        )
        logger.info("step %d flagged anomalous; rewinding to checkpoint %d", step, checkpoint)
        epoch += 1
        step = checkpoint + 1
    return log


def drive_log_jsonl(log: list[DriveLogEntry]) -> str:
    lines = []
    for e in log:
        lines.append(
            json.dumps(
                {"step": e.step, "epoch": e.epoch, "label": e.label, "score": e.score,
                 "warm_up": e.warm_up, "action": e.action, "rewind_to": e.rewind_to},
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    return "\n".join(lines) + "\n"
