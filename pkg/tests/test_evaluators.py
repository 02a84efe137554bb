import hashlib
import json
import sys
import threading

import numpy as np
import pytest

from layermerge.evaluators import (
    TMPDIR_ENV,
    EvaluatorConfigError,
    EvaluatorError,
    EvaluatorSpec,
    EvaluatorTimeout,
    ExternalEvaluator,
    LandscapeEvaluator,
    build_evaluator,
    handshake,
    validate_accuracies,
)
from layermerge.recipe import DiscreteRecipe, apply_recipe
from layermerge.tensor_store import Checkpoint, write_checkpoint
from layermerge.toy import PlantedLandscape


def _tiny(value: float) -> Checkpoint:
    return Checkpoint.from_arrays({"blk.0.attn": np.full(2, value)}, "blk.{i}.attn")


def _table(tmp_path, entries: dict[str, dict], default=None):
    path = tmp_path / "table.json"
    path.write_text(json.dumps({"by_sha256": entries, "default": default}))
    return path


def _sha(ck: Checkpoint) -> str:
    return hashlib.sha256(ck.to_bytes()).hexdigest()


def test_spec_parse():
    spec = EvaluatorSpec.parse("external:python -m my.harness --gpu 0")
    assert spec.kind == "external" and spec.command == ("python", "-m", "my.harness", "--gpu", "0")
    spec = EvaluatorSpec.parse("builtin-landscape:planted=2,5,7,9;tau=0.5")
    assert spec.options == {"planted": "2,5,7,9", "tau": "0.5"}
    assert EvaluatorSpec.parse("builtin-toy").echo()["kind"] == "builtin-toy"
    with pytest.raises(EvaluatorConfigError):
        EvaluatorSpec.parse("external:")
    with pytest.raises(EvaluatorConfigError):
        EvaluatorSpec.parse("gpu-cluster")
    with pytest.raises(EvaluatorConfigError):
        EvaluatorSpec("builtin-toy", capacity=0)


def test_validate_accuracies():
    assert validate_accuracies({"TP": 1, "TR": 0.5, "extra": 9}, ["TP", "TR"]) == {"TP": 1.0, "TR": 0.5}
    with pytest.raises(EvaluatorError, match="out of range"):
        validate_accuracies({"TP": 1.2, "TR": 0.5}, ["TP", "TR"])
    with pytest.raises(EvaluatorError, match="lacks"):
        validate_accuracies({"TP": 0.2}, ["TP", "TR"])


def test_builtin_landscape():
    land = PlantedLandscape.generate(6, (1, 3), seed=0)
    ev = build_evaluator(EvaluatorSpec.parse("builtin-landscape:planted=1,3"), land.m, land.n)
    caps = handshake(ev, ["TP", "TR"])
    assert caps.tasks == {"TP", "TR"} and caps.capacity is None
    identity = apply_recipe(land.m, land.n, DiscreteRecipe((1,) * 6, 1.0))
    assert ev.evaluate(identity, ["TP", "TR"])["TP"] == 1.0
    assert isinstance(ev, LandscapeEvaluator)
    with pytest.raises(EvaluatorConfigError):
        build_evaluator(EvaluatorSpec.parse("builtin-landscape"), land.m, land.n)


def test_builtin_toy_accepts_paths(tmp_path):
    from layermerge.toy import wired_toy_model

    path = tmp_path / "wired.ckpt"
    write_checkpoint(wired_toy_model().to_checkpoint(), path)
    ev = build_evaluator(EvaluatorSpec.parse("builtin-toy"))
    assert ev.evaluate(path, ["TP", "TR"]) == {"TP": 1.0, "TR": 1.0}


def test_stub_replays_table(tmp_path, stub_cmd):
    ck = _tiny(1.0)
    table = _table(tmp_path, {_sha(ck): {"TP": 0.618, "TR": 0.497}})
    with ExternalEvaluator(stub_cmd + ["--table", str(table)]) as ev:
        caps = handshake(ev, ["TP", "TR"])
        assert caps.capacity == 1
        assert ev.evaluate(ck, ["TP", "TR"]) == {"TP": 0.618, "TR": 0.497}


def test_missing_task_is_config_error(tmp_path, stub_cmd):
    with ExternalEvaluator(stub_cmd + ["--table", str(_table(tmp_path, {})), "--tasks", "TP"]) as ev:
        with pytest.raises(EvaluatorConfigError, match="TR"):
            handshake(ev, ["TP", "TR"])


def test_handshake_timeout_reports_diagnostics(stub_cmd):
    with ExternalEvaluator(stub_cmd + ["--silent"], handshake_timeout=0.5) as ev:
        with pytest.raises(EvaluatorTimeout, match="command=.*returncode"):
            ev.hello()


def test_spawn_failure():
    with pytest.raises(EvaluatorError, match="failed to spawn"):
        ExternalEvaluator(["/nonexistent/evaluator-binary"])


def test_malformed_hello():
    script = "import sys; sys.stdin.readline(); print('{\"op\": \"hello\"}', flush=True); sys.stdin.read()"
    with ExternalEvaluator([sys.executable, "-c", script], handshake_timeout=5) as ev:
        with pytest.raises(EvaluatorError, match="malformed hello"):
            ev.hello()


def test_out_of_range_response(tmp_path, stub_cmd):
    ck = _tiny(2.0)
    table = _table(tmp_path, {_sha(ck): {"TP": 1.2, "TR": 0.5}})
    with ExternalEvaluator(stub_cmd + ["--table", str(table)]) as ev:
        with pytest.raises(EvaluatorError, match="out of range"):
            ev.evaluate(ck, ["TP", "TR"])


def test_reported_error(tmp_path, stub_cmd):
    with ExternalEvaluator(stub_cmd + ["--table", str(_table(tmp_path, {}))]) as ev:
        with pytest.raises(EvaluatorError, match="not in replay table"):
            ev.evaluate(_tiny(3.0), ["TP", "TR"])


def test_concurrent_out_of_order_replies_match_ids(tmp_path, stub_cmd):
    cks = [_tiny(float(i)) for i in range(8)]
    table = _table(tmp_path, {_sha(ck): {"TP": i / 10, "TR": 1 - i / 10} for i, ck in enumerate(cks)})
    log = tmp_path / "requests.log"
    cmd = stub_cmd + ["--table", str(table), "--capacity", "4", "--reverse-batch", "4", "--log", str(log)]
    results = {}
    with ExternalEvaluator(cmd, request_timeout=30) as ev:
        assert ev.hello().capacity == 4

        def worker(i):
            results[i] = ev.evaluate(cks[i], ["TP", "TR"])

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert results == {i: {"TP": i / 10, "TR": 1 - i / 10} for i in range(8)}
    assert len(log.read_text().splitlines()) == 8


def test_restart_once_then_fatal(tmp_path, stub_cmd):
    ck = _tiny(1.0)
    table = _table(tmp_path, {}, default={"TP": 0.5, "TR": 0.5})
    with ExternalEvaluator(stub_cmd + ["--table", str(table), "--crash-after", "2"]) as ev:
        for _ in range(2):
            ev.evaluate(ck, ["TP", "TR"])
        # third request kills the first process; the restarted one answers it
        assert ev.evaluate(ck, ["TP", "TR"]) == {"TP": 0.5, "TR": 0.5}
        ev.evaluate(ck, ["TP", "TR"])
        with pytest.raises(EvaluatorError, match="died again after restart"):
            ev.evaluate(ck, ["TP", "TR"])


def test_tmpdir_override(tmp_path, stub_cmd, monkeypatch):
    scratch = tmp_path / "scratch"
    scratch.mkdir()
    monkeypatch.setenv(TMPDIR_ENV, str(scratch))
    log = tmp_path / "requests.log"
    table = _table(tmp_path, {}, default={"TP": 0.5, "TR": 0.5})
    with ExternalEvaluator(stub_cmd + ["--table", str(table), "--log", str(log)]) as ev:
        ev.evaluate(_tiny(1.0), ["TP", "TR"])
    path = log.read_text().split("\t")[1].strip()
    assert path.startswith(str(scratch))
    assert list(scratch.iterdir()) == []  # temp checkpoint removed


def test_stub_landscape_mode(tmp_path, stub_cmd):
    kwargs = {"num_layers": 6, "planted": [1, 4], "seed": 3}
    spec = tmp_path / "land.json"
    spec.write_text(json.dumps(kwargs))
    land = PlantedLandscape.generate(**kwargs)
    optimum = apply_recipe(land.m, land.n, DiscreteRecipe.from_n_dominated([1, 4], 6, 1.0))
    with ExternalEvaluator(stub_cmd + ["--landscape", str(spec)]) as ev:
        assert ev.evaluate(optimum, ["TP", "TR"]) == {"TP": 1.0, "TR": 1.0}
