"""Reference external evaluator speaking the line protocol.

Run as ``python -m layermerge.stub_evaluator [options]``. Scores come from one
of two sources:

``--table FILE``
    JSON ``{"by_sha256": {"<hex digest of checkpoint file>": {"TP": .., "TR": ..}},
    "default": {...}}``; replays fixed accuracies.
``--landscape FILE``
    JSON keyword arguments for ``PlantedLandscape.generate``; scores each
    checkpoint against that landscape.

Real harnesses only need to reproduce the hello/evaluate exchange.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from .tensor_store import read_checkpoint
from .toy import PlantedLandscape, landscape_eval


def _reply(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload) + "\n")
    sys.stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="stub_evaluator")
    parser.add_argument("--table", type=Path)
    parser.add_argument("--landscape", type=Path)
    parser.add_argument("--tasks", default="TP,TR")
    parser.add_argument("--capacity", type=int, default=1)
    parser.add_argument("--silent", action="store_true", help="never answer the handshake")
    parser.add_argument("--crash-after", type=int, default=None, help="exit after N evaluate requests")
    parser.add_argument("--reverse-batch", type=int, default=1, help="answer requests in reversed batches of N")
    parser.add_argument("--delay", type=float, default=0.0)
    parser.add_argument("--log", type=Path, help="append one line per evaluate request")
    args = parser.parse_args(argv)

    table = json.loads(args.table.read_text()) if args.table else {"by_sha256": {}, "default": None}
    landscape = PlantedLandscape.generate(**json.loads(args.landscape.read_text())) if args.landscape else None
    tasks = [t for t in args.tasks.split(",") if t]

    def score(request: dict) -> dict:
        path = request.get("checkpoint")
        try:
            blob = Path(path).read_bytes()
        except (OSError, TypeError) as exc:
            return {"id": request.get("id"), "error": f"cannot read checkpoint: {exc}"}
        if landscape is not None:
            acc = landscape_eval(read_checkpoint(path), landscape)
            values = {"TP": acc.acc_tp, "TR": acc.acc_tr}
        else:
            values = table["by_sha256"].get(hashlib.sha256(blob).hexdigest()) or table.get("default")
            if values is None:
                return {"id": request.get("id"), "error": "checkpoint not in replay table"}
        return {"id": request.get("id"), "acc": {t: values[t] for t in request.get("tasks", tasks) if t in values}}

    handled = 0
    batch: list[dict] = []
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        request = json.loads(line)
        if request.get("op") == "hello":
            if not args.silent:
                _reply({"op": "hello", "tasks": tasks, "capacity": args.capacity})
            continue
        if request.get("op") != "evaluate":
            _reply({"id": request.get("id"), "error": f"unknown op {request.get('op')!r}"})
            continue
        handled += 1
        if args.log:
            with args.log.open("a") as fh:
                fh.write(f"{request.get('id')}\t{request.get('checkpoint')}\n")
        if args.crash_after is not None and handled > args.crash_after:
            return 1
        if args.delay:
            time.sleep(args.delay)
        batch.append(score(request))
        if len(batch) >= args.reverse_batch:
            for reply in reversed(batch):
                _reply(reply)
            batch = []
    for reply in reversed(batch):
        _reply(reply)
    return 0


if __name__ == "__main__":
    sys.exit(main())
