"""Command-line entry point.

Exit codes: 0 ok, 2 usage or configuration error, 3 evaluator failure,
4 data error (unreadable or incompatible checkpoints, malformed recipes).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from .attribution import GRAD_MODES, ORDERS, AttributionQuery, attribute
from .evaluators import (
    EvaluatorConfigError,
    EvaluatorError,
    EvaluatorSpec,
    build_evaluator,
    handshake,
)
from .intervention import DEFAULT_KAPPAS, mask_checkpoint, mask_sweep, proxy_scorer
from .objective import TASKS, EvaluationError, TaskAccuracies
from .recipe import (
    RecipeError,
    RecipeRecord,
    all_layer_recipe,
    apply_recipe,
    load_recipe,
    modified_layers,
    n_dominated_layers,
    random_k_recipe,
    save_recipe,
)
from .search import DEFAULT_ALPHAS, SearchConfig, SearchError, alpha_tag, open_search, resume, search_all
from .tensor_store import CheckpointError, Checkpoint, check_compatible, read_checkpoint, write_checkpoint
from .toy import (
    PlantedLandscape,
    ProxyTaskSuite,
    ToyAttentionModel,
    make_parent_pair,
    wired_toy_model,
)

EXIT_OK, EXIT_USAGE, EXIT_EVALUATOR, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("layermerge")


class UsageError(Exception):
    """Raised for flag combinations argparse cannot express; maps to exit 2."""


def pct(x: float) -> str:
    return f"{100 * x:.1f}"


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _command_line(argv: list[str]) -> list[str]:
    return ["layermerge", *argv]


def _provenance(args) -> dict:
    return {"command": shlex.join(args.command_line)}


def _stamp(ck: Checkpoint, args) -> Checkpoint:
    meta = dict(ck.extra_metadata)
    meta["command"] = shlex.join(args.command_line)
    return dataclasses.replace(ck, extra_metadata=meta)


def _spec(args, tasks=TASKS) -> EvaluatorSpec:
    try:
        return EvaluatorSpec.parse(args.evaluator, tasks)
    except EvaluatorConfigError as exc:
        raise UsageError(str(exc)) from exc


def _accuracy_line(label: str, acc: dict[str, float]) -> str:
    return f"{label}: " + "  ".join(f"{t} {pct(v)}%" for t, v in acc.items())


# -- parents for demos ---------------------------------------------------------


def _write_demo_parents(kind: str, num_layers: int, planted: list[int], seed: int, out: Path, tau: float = 1.0):
    out.mkdir(parents=True, exist_ok=True)
    if kind == "planted":
        land = PlantedLandscape.generate(num_layers, planted, seed=seed, tau=tau)
        m, n = land.m, land.n
    else:
        m, n = make_parent_pair(seed, num_layers, planted, wired=True)
    write_checkpoint(m, out / "model_m.ckpt")
    write_checkpoint(n, out / "model_n.ckpt")
    return out / "model_m.ckpt", out / "model_n.ckpt"


# -- commands ------------------------------------------------------------------


def cmd_search(args) -> int:
    out = Path(args.out_dir)
    if args.resume:
        result = resume(args.resume)
        _print_search(result, Path(args.resume))
        return EXIT_OK
    try:
        # flags are checked before anything is written
        SearchConfig(alphas=tuple(args.alpha_set), budget=args.budget, lam=args.lam, sigma0=args.sigma0, pop_size=args.pop_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.demo:
        planted = args.planted or [2, 5, 7, 9]
        if any(not 0 <= i < args.L for i in planted):
            raise UsageError(f"--planted layers must lie in [0, {args.L})")
        m_path, n_path = _write_demo_parents(args.demo, args.L, planted, args.seed, out, args.tau)
        if args.demo == "planted":
            evaluator = {"kind": "builtin-landscape", "options": {"planted": ",".join(map(str, planted)), "tau": str(args.tau)}}
        else:
            evaluator = {"kind": "builtin-toy", "options": {}}
    else:
        m_path, n_path = args.model_m, args.model_n
        spec = _spec(args)
        evaluator = {"kind": spec.kind, "command": list(spec.command), "tasks": list(spec.tasks), "options": spec.options}
    try:
        cfg = SearchConfig(
            alphas=tuple(args.alpha_set),
            budget=args.budget,
            lam=args.lam,
            seed=args.seed,
            sigma0=args.sigma0,
            pop_size=args.pop_size,
            parallel_alphas=args.parallel_alphas,
            model_m=str(m_path),
            model_n=str(n_path),
            evaluator=evaluator,
            command_line=args.command_line,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    objective = open_search(cfg, out)
    try:
        handshake(objective.evaluator, TASKS)

        def progress(alpha, state, row):
            log.info("alpha=%s gen=%d best=%.6f sigma=%.4g evals=%d", alpha_tag(alpha), row.generation, row.best, row.sigma, row.evals)

        result = search_all(cfg, objective, out, on_generation=progress)
    finally:
        objective.evaluator.close()
    _print_search(result, out)
    return EXIT_OK


def _print_search(result, out: Path) -> None:
    print(_accuracy_line("base M", {"TP": result.base.acc_tp, "TR": result.base.acc_tr}))
    for alpha, rec in sorted(result.per_alpha.items(), reverse=True):
        print(
            f"alpha={alpha_tag(alpha)}  F={rec.objective:.6f}  TP {pct(rec.acc_tp)}%  TR {pct(rec.acc_tr)}%  "
            f"N-layers={sorted(n_dominated_layers(rec.recipe))}  stop={result.stop_reasons.get(alpha, '')}"
        )
    for alpha, msg in result.failures.items():
        print(f"alpha={alpha_tag(alpha)}  FAILED: {msg}")
    if result.degenerate_alphas:
        print(f"degenerate alphas (gate-independent merge): {[alpha_tag(a) for a in result.degenerate_alphas]}")
    best = result.best
    print(
        f"best: alpha={alpha_tag(best.recipe.alpha)}  N-layers={sorted(result.best_layers)}  "
        f"F={best.objective:.6f}  evaluator calls={result.evaluator_calls}"
    )
    print(f"state written to {out}")


def _load_parents(args) -> tuple[Checkpoint, Checkpoint]:
    m, n = read_checkpoint(args.model_m), read_checkpoint(args.model_n)
    check_compatible(m, n)
    return m, n


def cmd_merge(args) -> int:
    m, n = _load_parents(args)
    record = load_recipe(args.recipe)
    recipe = record.recipe
    if recipe.num_layers != m.layer_count:
        raise CheckpointError(f"recipe has {recipe.num_layers} layers, checkpoints have {m.layer_count}")
    merged = _stamp(apply_recipe(m, n, recipe), args)
    merged.extra_metadata["recipe"] = record.to_json()
    write_checkpoint(merged, args.out)
    print(
        f"merged alpha={alpha_tag(recipe.alpha)}  N-dominated={sorted(n_dominated_layers(recipe))}  "
        f"modified layers={len(modified_layers(recipe))}/{recipe.num_layers} -> {args.out}"
    )
    return EXIT_OK


def cmd_random_k(args) -> int:
    if args.k > args.L:
        raise UsageError(f"--k {args.k} exceeds --L {args.L}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for run in range(args.runs):
        recipe = random_k_recipe(args.L, args.k, args.alpha, args.seed + run)
        path = out / f"random_k_run{run}.json"
        save_recipe(RecipeRecord(recipe, seed=args.seed + run, provenance=_provenance(args)), path)
        print(f"run {run}: N-dominated={sorted(n_dominated_layers(recipe))} -> {path}")
    return EXIT_OK


def cmd_all_layer(args) -> int:
    recipe = all_layer_recipe(args.L, args.alpha)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_recipe(RecipeRecord(recipe, provenance=_provenance(args)), out)
    print(f"all-layer recipe alpha={alpha_tag(args.alpha)} L={args.L} -> {out}")
    return EXIT_OK


def _mask_layers(args, num_layers: int) -> list[int]:
    if args.recipe:
        recipe = load_recipe(args.recipe).recipe
        if recipe.num_layers != num_layers:
            raise CheckpointError(f"recipe has {recipe.num_layers} layers, model has {num_layers}")
        return sorted(n_dominated_layers(recipe))
    return list(args.layers)


def cmd_mask_sweep(args) -> int:
    if args.layers is None and not args.recipe and not args.demo:
        raise UsageError("give --layers, --recipe or --demo")
    if args.demo:
        planted = args.planted or [2, 5, 7, 9]
        model = wired_toy_model(args.L, planted, seed=args.seed)
        ck = model.to_checkpoint()
        layers = _mask_layers(args, ck.layer_count) if (args.layers is not None or args.recipe) else planted
    else:
        if not args.model:
            raise UsageError("--model is required without --demo")
        ck = read_checkpoint(args.model)
        if args.merge_with:
            if not args.recipe:
                raise UsageError("--merge-with needs --recipe")
            n = read_checkpoint(args.merge_with)
            check_compatible(ck, n)
            ck = apply_recipe(ck, n, load_recipe(args.recipe).recipe)
        layers = _mask_layers(args, ck.layer_count)

    if args.evaluator and not args.demo:
        metrics = tuple(args.metrics)
        spec = _spec(args, metrics)
        evaluator = build_evaluator(spec, seed=args.seed)
        try:
            handshake(evaluator, metrics)

            def score_at(kappa: float) -> dict[str, float]:
                return evaluator.evaluate(mask_checkpoint(ck, layers, kappa, args.out_role), metrics)

            curve = mask_sweep(score_at, args.kappas, args.reasoning_metric, layers)
        finally:
            evaluator.close()
    else:
        suite = ProxyTaskSuite.generate(args.suite_seed)
        model = ToyAttentionModel.from_checkpoint(ck)
        reasoning = args.reasoning_metric if args.reasoning_metric != "TR" else "TR-proxy"
        curve = mask_sweep(proxy_scorer(model, suite, layers), args.kappas, reasoning, layers)

    comments = [f"command: {shlex.join(args.command_line)}", f"layers: {' '.join(map(str, layers))}"]
    comments += [f"error at kappa={k}: {msg}" for k, msg in curve.errors.items()]
    text = curve.to_csv(comments)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"curve -> {args.out}")
    for metric, kappa, score, delta in curve.rows():
        print(f"{metric:>12}  kappa={kappa:.1f}  score {pct(score)}%  delta {pct(delta)}%")
    return EXIT_OK


def _attribution_input(args, model: ToyAttentionModel) -> tuple[list[int], np.ndarray]:
    payload = json.loads(Path(args.input).read_text(encoding="utf-8"))
    prefix = [int(t) for t in payload["prefix"]]
    if "frames" in payload:
        frames = np.asarray(payload["frames"], dtype=np.float64)
        if frames.shape[:2] != (args.frames, args.tokens_per_frame):
            raise CheckpointError(
                f"input frames have shape {frames.shape[:2]}, flags say ({args.frames}, {args.tokens_per_frame})"
            )
    else:
        rng = np.random.default_rng(args.seed)
        frames = rng.standard_normal((args.frames, args.tokens_per_frame, model.dim))
    return prefix, frames


def cmd_attribute(args) -> int:
    if args.chosen not in args.options:
        raise UsageError(f"--chosen {args.chosen} is not among --options {args.options}")
    if len(set(args.options)) < 2:
        raise UsageError("--options needs at least two distinct tokens")
    if args.window < 1 or args.window % 2 == 0:
        raise UsageError("--window must be a positive odd integer")
    if args.model:
        model = ToyAttentionModel.from_checkpoint(read_checkpoint(args.model))
    else:
        model = ToyAttentionModel.random(args.seed, num_layers=4)
    prefix, frames = _attribution_input(args, model)
    q = AttributionQuery(model, frames, prefix, args.options, args.chosen)
    result = attribute(q, args.grad_mode, args.window, args.order, args.fd_step)
    result.config = {
        "command": shlex.join(args.command_line),
        "model": args.model or f"random toy model seed={args.seed}",
        "frames": args.frames,
        "tokens_per_frame": args.tokens_per_frame,
        "options": " ".join(map(str, args.options)),
        "chosen": args.chosen,
    }
    text = result.report()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report -> {args.out}")
    print(f"margin {result.margin:.6f}; frames ranked by importance: {result.ranked_frames()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = _spec(args)
    m = n = None
    if spec.kind == "builtin-landscape":
        if not (args.model_m and args.model_n):
            raise UsageError("builtin-landscape needs --model-m and --model-n")
        m, n = _load_parents(args)
    evaluator = build_evaluator(spec, m, n, seed=args.seed)
    try:
        handshake(evaluator, TASKS)
        acc = evaluator.evaluate(read_checkpoint(args.checkpoint), list(TASKS))
    finally:
        evaluator.close()
    TaskAccuracies(acc["TP"], acc["TR"])
    print(_accuracy_line(str(args.checkpoint), acc))
    return EXIT_OK


def cmd_inspect(args) -> int:
    ck = read_checkpoint(args.checkpoint)
    print(f"file: {args.checkpoint}")
    print(f"template: {ck.name_template}")
    print(f"layers: {ck.layer_count}")
    for key, value in sorted(ck.extra_metadata.items()):
        print(f"metadata {key}: {value}")
    print(f"{'name':<40} {'dtype':<5} {'shape':<16} offsets")
    for name in ck.names():
        meta = ck.metas[name]
        print(f"{name:<40} {meta.dtype:<5} {str(list(meta.shape)):<16} {meta.data_offsets[0]}-{meta.data_offsets[1]}")
    attention = ck.attention_names()
    for i in range(ck.layer_count):
        print(f"layer {i}: {len(ck.layer_names(i))} tensors")
    others = [name for name in ck.names() if name not in attention]
    print(f"unmatched by template: {len(others)} ({', '.join(others) if others else '-'})")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    planted = args.planted or [2, 5, 7, 9]
    if any(not 0 <= i < args.L for i in planted):
        raise UsageError(f"--planted layers must lie in [0, {args.L})")
    m_path, n_path = _write_demo_parents(args.kind, args.L, planted, args.seed, Path(args.out_dir), args.tau)
    print(f"wrote {m_path} and {n_path}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layermerge", description="Layer-selective merging of a model with its text backbone.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--out-dir", default="layermerge_out", help="output directory (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="per-alpha CMA-ES search over layer gates")
    p.add_argument("--model-m")
    p.add_argument("--model-n")
    p.add_argument("--evaluator", default=None, help="external:<cmd> | builtin-toy | builtin-landscape:planted=2,5;tau=1")
    p.add_argument("--alpha-set", type=_float_list, default=list(DEFAULT_ALPHAS))
    p.add_argument("--budget", type=int, default=1600)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--sigma0", type=float, default=0.3)
    p.add_argument("--pop-size", type=int, default=None)
    p.add_argument("--parallel-alphas", action="store_true")
    p.add_argument("--demo", choices=("planted", "toy"))
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--planted", type=_int_list)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--resume", metavar="STATE_DIR")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("merge", help="apply a recipe to two parent checkpoints")
    p.add_argument("--model-m", required=True)
    p.add_argument("--model-n", required=True)
    p.add_argument("--recipe", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("random-k", help="baseline recipes with k random N-dominated layers")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--runs", type=int, default=5)
    p.set_defaults(func=cmd_random_k)

    p = sub.add_parser("all-layer", help="baseline recipe interpolating every layer")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_all_layer)

    p = sub.add_parser("mask-sweep", help="scale attention outputs of chosen layers by kappa")
    p.add_argument("--model", help="checkpoint to mask (the unmerged base by default)")
    p.add_argument("--merge-with", metavar="MODEL_N", help="mask the merge of --model and this checkpoint under --recipe")
    p.add_argument("--layers", type=_int_list)
    p.add_argument("--recipe", help="mask the recipe's N-dominated layers")
    p.add_argument("--kappas", type=_float_list, default=list(DEFAULT_KAPPAS))
    p.add_argument("--evaluator", help="external evaluator; default scores toy models on the proxy suite")
    p.add_argument("--metrics", type=lambda s: [m for m in s.split(",") if m], default=list(TASKS))
    p.add_argument("--reasoning-metric", default="TR")
    p.add_argument("--out-role", default="o_proj", help="tensor role scaled for external evaluation")
    p.add_argument("--suite-seed", type=int, default=0)
    p.add_argument("--demo", action="store_true", help="sweep the hand-wired toy model")
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--planted", type=_int_list)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask_sweep)

    p = sub.add_parser("attribute", help="frame importance at the answer step")
    p.add_argument("--model", help="toy model checkpoint (default: seeded random toy model)")
    p.add_argument("--input", required=True, help='JSON {"prefix": [...], "frames": T x K x d (optional)}')
    p.add_argument("--options", type=_int_list, required=True)
    p.add_argument("--chosen", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--tokens-per-frame", type=int, required=True)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--grad-mode", choices=GRAD_MODES, default="reverse")
    p.add_argument("--order", choices=ORDERS, default="smooth-then-normalize")
    p.add_argument("--fd-step", type=float, default=1e-3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("eval", help="score one checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--evaluator", required=True)
    p.add_argument("--model-m")
    p.add_argument("--model-n")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-toy", help="write demo parent checkpoints")
    p.add_argument("--kind", choices=("planted", "toy"), default="planted")
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--planted", type=_int_list)
    p.add_argument("--tau", type=float, default=1.0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def _validate(parser: argparse.ArgumentParser, args) -> None:
    if args.command == "search" and not args.resume and not args.demo:
        missing = [flag for flag, value in (("--model-m", args.model_m), ("--model-n", args.model_n), ("--evaluator", args.evaluator)) if not value]
        if missing:
            parser.error(f"search requires {', '.join(missing)} (or --demo / --resume)")
    if args.command == "random-k" and (args.k < 0 or args.runs < 1):
        parser.error("--k must be >= 0 and --runs >= 1")
    if args.command == "random-k" and args.k > args.L:
        parser.error(f"--k {args.k} exceeds --L {args.L}")
    if args.command == "attribute" and args.chosen not in args.options:
        parser.error(f"--chosen {args.chosen} is not among --options")


def _is_evaluator_failure(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, EvaluatorConfigError):
            return False
        if isinstance(exc, (EvaluatorError, EvaluationError)):
            return True
        exc = exc.__cause__
    return False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.command_line = _command_line(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EvaluatorConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvaluatorError, EvaluationError) as exc:
        print(f"evaluator failure: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except SearchError as exc:
        print(f"search failed: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR if _is_evaluator_failure(exc) else EXIT_DATA
    except (CheckpointError, RecipeError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
