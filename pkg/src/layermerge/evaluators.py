"""Evaluator backends: built-in toy evaluators and an external line-protocol client.

Wire protocol (newline-delimited JSON over the child's stdin/stdout)::

    -> {"op": "hello"}
    <- {"op": "hello", "tasks": ["TP", "TR"], "capacity": 2}
    -> {"id": 7, "op": "evaluate", "checkpoint": "/tmp/x.ckpt", "tasks": ["TP", "TR"]}
    <- {"id": 7, "acc": {"TP": 0.61, "TR": 0.49}}      or  {"id": 7, "error": "..."}

Responses may arrive out of order; they are matched to requests by id.
Unknown fields are ignored.
"""

from __future__ import annotations

import collections
import itertools
import json
import logging
import os
import queue
import shlex
import subprocess
import tempfile
import threading
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .tensor_store import Checkpoint, read_checkpoint, write_checkpoint
from .toy import PlantedLandscape, ProxyTaskSuite, ToyAttentionModel, landscape_eval, proxy_counts

log = logging.getLogger(__name__)

TMPDIR_ENV = "LAYERMERGE_TMPDIR"
HANDSHAKE_TIMEOUT = 30.0


class EvaluatorError(RuntimeError):
    pass


class EvaluatorTimeout(EvaluatorError):
    pass


class EvaluatorConfigError(EvaluatorError):
    pass


@dataclass(frozen=True)
class Capabilities:
    tasks: frozenset[str]
    capacity: int | None  # None means unbounded


@dataclass(frozen=True)
class EvaluatorSpec:
    kind: str  # builtin-landscape | builtin-toy | external
    command: tuple[str, ...] = ()
    capacity: int = 1
    tasks: tuple[str, ...] = ("TP", "TR")
    options: dict = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        if self.kind not in ("builtin-landscape", "builtin-toy", "external"):
            raise EvaluatorConfigError(f"unknown evaluator kind {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise EvaluatorConfigError("external evaluator needs a command")
        if self.capacity < 1:
            raise EvaluatorConfigError("capacity must be >= 1")

    @classmethod
    def parse(cls, text: str, tasks: Iterable[str] = ("TP", "TR")) -> "EvaluatorSpec":
        """``external:<command line>``, ``builtin-toy``, or ``builtin-landscape[:k=v,...]``."""
        kind, _, rest = text.partition(":")
        kind = kind.strip()
        if kind == "external":
            return cls(kind, tuple(shlex.split(rest)), tasks=tuple(tasks))
        options = {}
        for item in filter(None, (p.strip() for p in rest.split(";"))):
            key, _, value = item.partition("=")
            options[key.strip()] = value.strip()
        return cls(kind, tasks=tuple(tasks), options=options)

    def echo(self) -> dict:
        return {"kind": self.kind, "command": list(self.command), "tasks": list(self.tasks), "options": self.options}


def validate_accuracies(acc: dict, tasks: Iterable[str]) -> dict[str, float]:
    out = {}
    for task in tasks:
        if task not in acc:
            raise EvaluatorError(f"response lacks task {task!r}")
        value = acc[task]
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not 0.0 <= value <= 1.0:
            raise EvaluatorError(f"accuracy for {task!r} out of range [0, 1]: {value!r}")
        out[task] = float(value)
    return out


class Evaluator:
    """Base class. ``evaluate`` accepts an in-memory checkpoint or a file path."""

    def hello(self) -> Capabilities:
        raise NotImplementedError

    def evaluate(self, checkpoint: Checkpoint | str | os.PathLike, tasks: Iterable[str]) -> dict[str, float]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @staticmethod
    def _load(checkpoint) -> Checkpoint:
        return checkpoint if isinstance(checkpoint, Checkpoint) else read_checkpoint(checkpoint)


class LandscapeEvaluator(Evaluator):
    def __init__(self, landscape: PlantedLandscape):
        self.landscape = landscape

    def hello(self) -> Capabilities:
        return Capabilities(frozenset({"TP", "TR"}), None)

    def evaluate(self, checkpoint, tasks):
        acc = landscape_eval(self._load(checkpoint), self.landscape)
        values = {"TP": acc.acc_tp, "TR": acc.acc_tr}
        return validate_accuracies(values, tasks)


class ToyEvaluator(Evaluator):
    """Decodes a toy attention model from the checkpoint and runs the proxy suite."""

    def __init__(self, suite: ProxyTaskSuite):
        self.suite = suite
        self.counts: dict[str, tuple[int, int]] | None = None

    def hello(self) -> Capabilities:
        return Capabilities(frozenset({"TP", "TR"}), None)

    def evaluate(self, checkpoint, tasks):
        model = ToyAttentionModel.from_checkpoint(self._load(checkpoint))
        counts = proxy_counts(model, self.suite)
        self.counts = counts
        return validate_accuracies({t: c / n for t, (c, n) in counts.items()}, tasks)


class _ProcessDied(EvaluatorError):
    pass


class ExternalEvaluator(Evaluator):
    """Client for an evaluator process speaking the line protocol.

    One process serves many requests, at most ``capacity`` in flight. If the
    process dies it is restarted once; a second death is fatal.
    """

    def __init__(
        self,
        command: Iterable[str],
        handshake_timeout: float = HANDSHAKE_TIMEOUT,
        request_timeout: float | None = None,
        tmpdir: str | None = None,
    ):
        self.command = list(command)
        if not self.command:
            raise EvaluatorConfigError("empty evaluator command")
        self.handshake_timeout = handshake_timeout
        self.request_timeout = request_timeout
        self.tmpdir = tmpdir or os.environ.get(TMPDIR_ENV)
        self._ids = itertools.count(1)
        self._write_lock = threading.Lock()
        self._pending: dict[int, Future] = {}
        self._pending_lock = threading.Lock()
        self._restarts = 0
        self._caps: Capabilities | None = None
        self._slots: threading.Semaphore | None = None
        self._proc: subprocess.Popen | None = None
        self._start()

    # -- process management -------------------------------------------------

    def _start(self) -> None:
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise EvaluatorError(f"failed to spawn evaluator {self.command}: {exc}") from exc
        # fresh per-process channels so a dead reader cannot touch the new process's requests
        self._hello_queue: queue.Queue = queue.Queue()
        self._stderr_tail: collections.deque[str] = collections.deque(maxlen=20)
        with self._pending_lock:
            self._pending = {}
        proc = self._proc
        args = (proc, self._pending, self._hello_queue)
        threading.Thread(target=self._read_stdout, args=args, daemon=True).start()
        threading.Thread(target=self._read_stderr, args=(proc,), daemon=True).start()

    def _read_stdout(self, proc: subprocess.Popen, pending: dict, hello_queue: queue.Queue) -> None:
        for line in proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                log.warning("evaluator emitted non-JSON line: %r", line[:200])
                continue
            if not isinstance(msg, dict):
                continue
            if msg.get("op") == "hello":
                hello_queue.put(msg)
                continue
            with self._pending_lock:
                fut = pending.pop(msg.get("id"), None)
            if fut is None:
                log.warning("response for unknown request id %r", msg.get("id"))
            else:
                fut.set_result(msg)
        # EOF: the process is gone; fail everything in flight
        hello_queue.put(None)
        with self._pending_lock:
            dead = list(pending.values())
            pending.clear()
        for fut in dead:
            fut.set_exception(_ProcessDied("evaluator process exited"))

    def _read_stderr(self, proc: subprocess.Popen) -> None:
        for line in proc.stderr:
            self._stderr_tail.append(line.rstrip())

    def diagnostics(self) -> str:
        code = self._proc.poll() if self._proc else None
        tail = "\n".join(self._stderr_tail)
        return f"command={self.command} returncode={code} stderr_tail={tail!r}"

    def _send(self, payload: dict) -> None:
        with self._write_lock:
            try:
                self._proc.stdin.write(json.dumps(payload) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError, ValueError) as exc:
                raise _ProcessDied(f"broken pipe: {exc}") from exc

    # -- protocol ---------------------------------------------------------------

    def hello(self) -> Capabilities:
        self._send({"op": "hello"})
        try:
            msg = self._hello_queue.get(timeout=self.handshake_timeout)
        except queue.Empty:
            raise EvaluatorTimeout(
                f"no hello reply within {self.handshake_timeout}s; {self.diagnostics()}"
            ) from None
        if msg is None:
            raise EvaluatorError(f"evaluator exited during handshake; {self.diagnostics()}")
        try:
            tasks = frozenset(str(t) for t in msg["tasks"])
            capacity = int(msg.get("capacity", 1))
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluatorError(f"malformed hello reply {msg!r}") from exc
        if capacity < 1:
            raise EvaluatorError(f"hello reply declares capacity {capacity}")
        self._caps = Capabilities(tasks, capacity)
        self._slots = threading.Semaphore(capacity)
        return self._caps

    def _restart(self) -> None:
        if self._restarts >= 1:
            raise EvaluatorError(f"evaluator died again after restart; {self.diagnostics()}")
        self._restarts += 1
        log.warning("evaluator process died; restarting once (%s)", self.diagnostics())
        self._terminate()
        self._start()
        self.hello()

    def evaluate(self, checkpoint, tasks):
        tasks = list(tasks)
        if self._caps is None:
            self.hello()
        if isinstance(checkpoint, Checkpoint):
            fd, name = tempfile.mkstemp(suffix=".ckpt", dir=self.tmpdir)
            os.close(fd)
            try:
                write_checkpoint(checkpoint, name)
                return self._evaluate_path(name, tasks)
            finally:
                Path(name).unlink(missing_ok=True)
        return self._evaluate_path(str(checkpoint), tasks)

    def _evaluate_path(self, path: str, tasks: list[str]) -> dict[str, float]:
        try:
            msg = self._roundtrip(path, tasks)
        except _ProcessDied:
            self._restart()
            try:
                msg = self._roundtrip(path, tasks)
            except _ProcessDied as exc:
                raise EvaluatorError(f"evaluator died after restart: {exc}; {self.diagnostics()}") from exc
        if "error" in msg:
            raise EvaluatorError(f"evaluator reported: {msg['error']}")
        acc = msg.get("acc")
        if not isinstance(acc, dict):
            raise EvaluatorError(f"malformed response {msg!r}")
        return validate_accuracies(acc, tasks)

    def _roundtrip(self, path: str, tasks: list[str]) -> dict:
        with self._slots:
            req_id = next(self._ids)
            fut: Future = Future()
            with self._pending_lock:
                self._pending[req_id] = fut
            try:
                self._send({"id": req_id, "op": "evaluate", "checkpoint": path, "tasks": tasks})
            except _ProcessDied:
                with self._pending_lock:
                    self._pending.pop(req_id, None)
                raise
            try:
                return fut.result(timeout=self.request_timeout)
            except FutureTimeout:
                with self._pending_lock:
                    self._pending.pop(req_id, None)
                raise EvaluatorTimeout(f"request {req_id} timed out; {self.diagnostics()}") from None

    @property
    def capacity(self) -> int:
        return self._caps.capacity if self._caps else 1

    def _terminate(self) -> None:
        proc = self._proc
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=2)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def close(self) -> None:
        self._terminate()


# -- construction -------------------------------------------------------------


def build_evaluator(spec: EvaluatorSpec, m: Checkpoint | None = None, n: Checkpoint | None = None, seed: int = 0) -> Evaluator:
    """Instantiate an evaluator. The landscape kind builds its landscape from the parents."""
    opts = spec.options
    if spec.kind == "external":
        return ExternalEvaluator(spec.command, float(opts.get("timeout", HANDSHAKE_TIMEOUT)))
    if spec.kind == "builtin-landscape":
        if m is None or n is None:
            raise EvaluatorConfigError("builtin-landscape needs both parent checkpoints")
        if "planted" not in opts:
            raise EvaluatorConfigError("builtin-landscape needs planted=<layers>")
        planted = [int(v) for v in opts["planted"].split(",") if v]
        land = PlantedLandscape(
            m, n, frozenset(planted), float(opts.get("tau", 1.0)), float(opts.get("alpha_star", 1.0))
        )
        return LandscapeEvaluator(land)
    suite = ProxyTaskSuite.generate(
        int(opts.get("seed", seed)), int(opts.get("n_tp", 55)), int(opts.get("n_tr", 177))
    )
    return ToyEvaluator(suite)


def handshake(evaluator: Evaluator, required: Iterable[str]) -> Capabilities:
    caps = evaluator.hello()
    missing = set(required) - caps.tasks
    if missing:
        raise EvaluatorConfigError(f"evaluator does not support required tasks {sorted(missing)}")
    return caps
