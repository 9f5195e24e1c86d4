"""Command line: ``proofrl {gen,inject,train,run,eval,bench}``.

Exit codes: 0 on success, 2 for usage or validation errors, 3 for runtime
faults. Reports go to stdout, diagnostics to stderr. ``--seed`` falls back
to the ``RLC_SEED`` environment variable, then to 0. Every output directory
receives a JSON manifest recording the argv, resolved configuration, seeds
and versions needed to rerun it.
"""
import argparse
import json
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .core import PatchRef, crop, locator_patch
from .env import AgentKind, CORRECTORS, EnvConfig
from .exceptions import ParameterError, ProofreadError, StageError, VALIDATION_ERRORS
from .io import KIND_EM, KIND_LABELS, read_raster, write_raster
from .metrics import cremi_score, format_report, patch_cremi
from .pipeline import (MODES, PipelineConfig, eval_patch_suite, format_image_table,
                       format_patch_table, run_pipeline)
from .policy import (NetPolicy, load_policy_dir, new_policy_net, oracle_policies,
                     policy_path, save_policy)
from .synth import (ERROR_KINDS, ErrorScript, PatchExample, inject_errors, make_image_set,
                    make_patch_testset)
from .train import (TrainConfig, TrainStage, format_log, image_env_factory,
                    patch_env_factory, train_agent)

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 2, 3
SEED_ENV = "RLC_SEED"
MANIFEST = "manifest.json"


class UsageError(ProofreadError):
    pass


# ------------------------------------------------------------------ helpers

def resolve_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ParameterError(f"{SEED_ENV}={env!r} is not an integer") from None


def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"proofrl": own, "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(directory, args, config, seeds, inputs, outputs, wall_clock, name=MANIFEST):
    """Record what produced ``directory``. Keys are sorted so reruns diff cleanly."""
    manifest = {
        "command": args.command,
        "argv": list(getattr(args, "argv", [])),
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "versions": _versions(),
        "wall_clock": wall_clock,
    }
    path = Path(directory) / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stem(i):
    return f"{i:04d}"


def write_dataset(directory, examples):
    """``em_i.rlc``, ``gt_i.rlc``, ``seg_i.rlc`` and ``script_i.json`` per example."""
    out = _out_dir(directory)
    written = []
    for i, ex in enumerate(examples):
        s = _stem(i)
        write_raster(out / f"em_{s}.rlc", ex.em, KIND_EM)
        write_raster(out / f"gt_{s}.rlc", ex.gt, KIND_LABELS)
        write_raster(out / f"seg_{s}.rlc", ex.seg, KIND_LABELS)
        (out / f"script_{s}.json").write_text(
            json.dumps({"script": ex.script.to_dict(), "source": ex.source},
                       sort_keys=True, default=_json_default) + "\n")
        written += [f"em_{s}.rlc", f"gt_{s}.rlc", f"seg_{s}.rlc", f"script_{s}.json"]
    return written


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def read_dataset(directory):
    d = Path(directory)
    if not d.is_dir():
        raise ParameterError(f"dataset directory {d} does not exist")
    out = []
    for em_path in sorted(d.glob("em_*.rlc")):
        s = em_path.stem[3:]
        em = read_raster(em_path, KIND_EM)
        gt_path = d / f"gt_{s}.rlc"
        gt = read_raster(gt_path, KIND_LABELS) if gt_path.exists() else None
        seg = read_raster(d / f"seg_{s}.rlc", KIND_LABELS)
        script_path = d / f"script_{s}.json"
        script, source = ErrorScript(), {}
        if script_path.exists():
            blob = json.loads(script_path.read_text())
            script, source = ErrorScript.from_dict(blob["script"]), blob.get("source", {})
        out.append(PatchExample(em, gt, seg, script, source))
    if not out:
        raise ParameterError(f"no em_*.rlc rasters in {d}")
    return out


def _env_config(args):
    return EnvConfig.small() if getattr(args, "small", False) else EnvConfig()


def _policies(args, config=None):
    if getattr(args, "oracle", False):
        return oracle_policies(), "oracle"
    if getattr(args, "policies", None):
        pol = load_policy_dir(args.policies)
        if config is not None:
            for kind, p in pol.items():
                if p.net.input_size != config.patch_size:
                    raise ParameterError(f"{kind.value} checkpoint expects {p.net.input_size}px "
                                         f"inputs, geometry uses {config.patch_size}px patches")
        return pol, str(args.policies)
    raise UsageError("choose --oracle or --policies DIR")


def _order(text):
    kinds = tuple(AgentKind(k.strip()) for k in text.split(",") if k.strip())
    if not kinds or any(k not in CORRECTORS for k in kinds):
        raise ParameterError(f"--order takes a comma list of merger/splitter, got {text!r}")
    return kinds


# ----------------------------------------------------------------- commands

def cmd_gen(args):
    seed = resolve_seed(args.seed)
    if args.segments < 2:
        raise ParameterError("--segments must be at least 2")
    if args.count < 1:
        raise ParameterError("--count must be at least 1")
    if args.size < 128 or args.size % 8:
        raise ParameterError("--size must be a multiple of 8 and at least 128")
    kinds = ERROR_KINDS if args.kind == "cycle" else (args.kind,)
    examples = make_image_set(args.count, seed, size=args.size, n_seeds=args.segments,
                              max_errors=args.max_errors, kinds=kinds)
    written = write_dataset(args.out, examples)
    config = {"size": args.size, "segments": args.segments, "count": args.count,
              "kind": args.kind, "max_errors": args.max_errors}
    # no wall clock: reruns must reproduce the directory byte for byte
    write_manifest(args.out, args, config, {"seed": seed}, [], written, None)
    print(f"wrote {args.count} examples to {args.out}")
    return EXIT_OK


def cmd_inject(args):
    seed = resolve_seed(args.seed)
    gt = read_raster(args.gt, KIND_LABELS)
    if args.merges < 0 or args.splits < 0 or args.merges + args.splits == 0:
        raise ParameterError("inject needs a positive number of --merges and/or --splits")
    seg, script = inject_errors(gt, args.merges, args.splits, np.random.default_rng(seed))
    script.seed = seed
    write_raster(args.out, seg, KIND_LABELS)
    if args.script:
        Path(args.script).write_text(json.dumps(script.to_dict(), sort_keys=True) + "\n")
    report = cremi_score(gt, seg)
    sys.stdout.write(format_report(report))
    return EXIT_OK


def _corrector_examples(kind, args, config, seed):
    """Training patches for a corrector or the selector."""
    wanted = {AgentKind.SPLITTER: "merge", AgentKind.MERGER: "split",
              AgentKind.SELECTOR: "combined"}[kind]
    if args.data:
        patches = []
        for ex in read_dataset(args.data):
            if ex.gt is None:
                raise ParameterError("training data needs ground truth rasters")
            for win in _sub_windows(ex.gt.shape, config.sub_size):
                for k in range(config.locator.size):
                    p = locator_patch(config.locator, k, config.patch_size)
                    ref = PatchRef(win[0] + p.origin_x, win[1] + p.origin_y, p.size)
                    gt_p, seg_p = crop(ex.gt, ref), crop(ex.seg, ref)
                    if patch_cremi(gt_p, seg_p) > 0:
                        patches.append(PatchExample(crop(ex.em, ref), gt_p, seg_p,
                                                    ErrorScript(), {}))
        if not patches:
            raise ParameterError(f"no erroneous patches found in {args.data}")
        return patches
    return make_patch_testset(wanted, args.pool, seed, image_size=config.sub_size,
                              n_seeds=args.segments, patch_size=config.patch_size,
                              corrector_n=config.corrector_grid)


def _sub_windows(shape, size):
    h, w = shape
    return [(x, y) for y in range(0, h - size + 1, size) for x in range(0, w - size + 1, size)]


def cmd_train(args):
    seed = resolve_seed(args.seed)
    kind = AgentKind(args.agent)
    config = _env_config(args)
    out = _out_dir(args.out)
    inner_dir = args.policies or args.out
    frozen = {k: p for k, p in load_policy_dir(inner_dir).items() if k is not kind}
    if args.oracle_inner:
        for k, p in oracle_policies().items():
            frozen.setdefault(k, p)
    stage = TrainStage({k: v for k, v in frozen.items() if k is not AgentKind.LOCATOR})
    stage.require(kind)
    tc = TrainConfig(learning_rate=args.lr, episodes=args.episodes, seed=seed,
                     workers=args.workers)
    if kind is AgentKind.LOCATOR:
        if args.data:
            images = [ex for ex in read_dataset(args.data) if ex.gt is not None]
        else:
            images = make_image_set(args.pool, seed, size=config.sub_size,
                                    n_seeds=args.segments, corrector_n=config.corrector_grid)
        factory = image_env_factory(images)
    else:
        factory = patch_env_factory(kind, _corrector_examples(kind, args, config, seed))
    start = time.perf_counter()
    net, log = train_agent(kind, stage, tc, factory, config,
                           net=new_policy_net(kind, config, seed=seed),
                           fault_path=out / f"{kind.value}.fault.rlcw")
    elapsed = time.perf_counter() - start
    ckpt = policy_path(out, kind)
    save_policy(ckpt, net, kind, episodes=args.episodes, train_seed=seed,
                geometry="small" if args.small else "full")
    log_path = out / f"{kind.value}.log.tsv"
    log_path.write_text(format_log(log))
    cfg = {k: getattr(tc, k) for k in ("learning_rate", "gamma", "n_step", "entropy_coef",
                                        "value_coef", "workers", "episodes")}
    cfg.update(agent=kind.value, small=bool(args.small), pool=args.pool,
               inner={k.value: ("oracle" if not isinstance(p, NetPolicy) else "checkpoint")
                      for k, p in stage.frozen.items()})
    write_manifest(out, args, cfg, {"seed": seed}, [args.data] if args.data else [],
                   [os.path.basename(ckpt), log_path.name], round(elapsed, 3),
                   name=f"manifest-{kind.value}.json")
    tail = log[-min(len(log), 50):]
    mean = float(np.mean([r.ret for r in tail])) if tail else float("nan")
    print(f"agent: {kind.value}\nepisodes: {len(log)}\nmean_return_last50: {mean:.6f}\n"
          f"checkpoint: {ckpt}")
    return EXIT_OK


def _load_inputs(args):
    if args.data:
        return read_dataset(args.data), [args.data]
    if not (args.em and args.labels):
        raise UsageError("give --data DIR or both --em and --labels")
    em = read_raster(args.em, KIND_EM)
    seg = read_raster(args.labels, KIND_LABELS)
    gt = read_raster(args.gt, KIND_LABELS) if args.gt else None
    inputs = [args.em, args.labels] + ([args.gt] if args.gt else [])
    return [PatchExample(em, gt, seg, ErrorScript(), {})], inputs


def cmd_run(args):
    config = _env_config(args)
    policies, source = _policies(args, config)
    mode = args.mode.replace("-", "_")
    pc = PipelineConfig(mode=mode, static_order=_order(args.order), policies=policies,
                        env_config=config, stride=args.stride)
    examples, inputs = _load_inputs(args)
    if source == "oracle" and any(ex.gt is None for ex in examples):
        raise ParameterError("--oracle needs ground truth (--gt or gt_*.rlc in --data)")
    out = _out_dir(args.out)
    start = time.perf_counter()
    written, reports, texts = [], [], []
    for i, ex in enumerate(examples):
        fixed, report = run_pipeline(ex.em, ex.seg, pc, ex.gt)
        name = f"fixed_{_stem(i)}.rlc"
        write_raster(out / name, fixed, KIND_LABELS)
        written.append(name)
        reports.append(report)
        texts.append(f"# image {i}\n" + report.to_text())
    text = "".join(texts) + format_image_table(reports)
    (out / "report.txt").write_text(text)
    written.append("report.txt")
    cfg = {"mode": mode, "order": [k.value for k in pc.static_order], "policies": source,
           "stride": args.stride, "small": bool(args.small)}
    write_manifest(out, args, cfg, {}, inputs, written, round(time.perf_counter() - start, 3))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args):
    if args.metrics_only:
        gt_path, seg_path = args.metrics_only
        gt = read_raster(gt_path, KIND_LABELS)
        seg = read_raster(seg_path, KIND_LABELS)
        sys.stdout.write(format_report(cremi_score(gt, seg)))
        return EXIT_OK
    seed = resolve_seed(args.seed)
    config = _env_config(args)
    policies, source = _policies(args, config)
    start = time.perf_counter()
    if args.data:
        examples = read_dataset(args.data)
        reports = []
        for mode in MODES:
            needed = {"locator_selector": AgentKind.LOCATOR,
                      "sliding_selector": AgentKind.SELECTOR}.get(mode)
            if needed is not None and needed not in policies:
                continue
            pc = PipelineConfig(mode=mode, policies=policies, env_config=config)
            for ex in examples:
                reports.append(run_pipeline(ex.em, ex.seg, pc, ex.gt)[1])
        text = format_image_table(reports)
    else:
        if args.count < 1:
            raise ParameterError("--count must be at least 1")
        rows = {}
        for offset, kind in enumerate(_kinds(args.kinds)):
            testset = make_patch_testset(kind, args.count, seed + offset,
                                         image_size=config.sub_size, n_seeds=args.segments,
                                         patch_size=config.patch_size,
                                         corrector_n=config.corrector_grid)
            rows[kind] = {}
            for scheme in ("static", "selector"):
                if scheme == "selector" and AgentKind.SELECTOR not in policies:
                    continue
                rows[kind][scheme] = eval_patch_suite(testset, policies, scheme,
                                                      _order(args.order), config)
        text = format_patch_table(rows)
    if args.out:
        out = _out_dir(args.out)
        (out / "report.txt").write_text(text)
        cfg = {"policies": source, "count": args.count, "kinds": args.kinds,
               "small": bool(args.small), "data": args.data}
        write_manifest(out, args, cfg, {"seed": seed}, [args.data] if args.data else [],
                       ["report.txt"], round(time.perf_counter() - start, 3))
    sys.stdout.write(text)
    return EXIT_OK


def _kinds(text):
    kinds = tuple(k.strip() for k in text.split(",") if k.strip())
    bad = [k for k in kinds if k not in ERROR_KINDS]
    if not kinds or bad:
        raise ParameterError(f"--kinds takes a comma list of {', '.join(ERROR_KINDS)}")
    return kinds


def cmd_bench(args):
    seed = resolve_seed(args.seed)
    config = _env_config(args)
    policies, source = _policies(args, config)
    if args.count < 1:
        raise ParameterError("--count must be at least 1")
    images = make_image_set(args.count, seed, size=args.size, n_seeds=args.segments,
                            max_errors=args.max_errors, corrector_n=config.corrector_grid)
    reports = []
    for mode in MODES:
        pc = PipelineConfig(mode=mode, policies=policies, env_config=config)
        for ex in images:
            reports.append(run_pipeline(ex.em, ex.seg, pc, ex.gt)[1])
    lines = ["mode\tbefore\tafter\tcorrector_episodes\tseconds"]
    for mode in MODES:
        reps = [r for r in reports if r.mode == mode]
        lines.append(f"{mode}\t{np.mean([r.before.cremi for r in reps]):.6f}\t"
                     f"{np.mean([r.after.cremi for r in reps]):.6f}\t"
                     f"{sum(r.corrector_episodes for r in reps)}\t"
                     f"{sum(r.seconds for r in reps):.3f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_dir(args.out)
        (out / "report.txt").write_text(text)
        cfg = {"policies": source, "count": args.count, "size": args.size,
               "segments": args.segments, "max_errors": args.max_errors}
        write_manifest(out, args, cfg, {"seed": seed}, [], ["report.txt"],
                       round(sum(r.seconds for r in reports), 3))
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _add_policy_args(p):
    group = p.add_mutually_exclusive_group()
    group.add_argument("--oracle", action="store_true", help="use ground-truth oracle policies")
    group.add_argument("--policies", help="directory holding <agent>.rlcw checkpoints")
    p.add_argument("--small", action="store_true",
                   help="desk-scale geometry: 32px patches, 3x3 corrector grid")


def build_parser():
    parser = argparse.ArgumentParser(prog="proofrl",
                                     description="Hierarchical RL proofreading of label maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic (em, gt, seg) triples")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--segments", type=int, default=50)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--max-errors", type=int, default=5)
    p.add_argument("--kind", choices=ERROR_KINDS + ("cycle",), default="cycle")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("inject", help="inject merge/split errors into a label map")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--merges", type=int, default=0)
    p.add_argument("--splits", type=int, default=0)
    p.add_argument("--script", help="where to write the error script (JSON)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="train one agent (bottom-up order enforced)")
    p.add_argument("--agent", required=True, choices=[k.value for k in AgentKind])
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--data", help="dataset directory from `gen`")
    p.add_argument("--policies", help="directory with trained inner agents (default: --out)")
    p.add_argument("--oracle-inner", action="store_true",
                   help="substitute oracles for missing inner agents")
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--pool", type=int, default=256, help="generated training examples")
    p.add_argument("--segments", type=int, default=50)
    p.add_argument("--small", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="proofread images with one pipeline mode")
    p.add_argument("--mode", required=True,
                   choices=[m.replace("_", "-") for m in MODES] + list(MODES))
    _add_policy_args(p)
    p.add_argument("--order", default="merger,splitter")
    p.add_argument("--stride", type=int, default=256)
    p.add_argument("--data")
    p.add_argument("--em")
    p.add_argument("--labels")
    p.add_argument("--gt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="per-patch or per-image evaluation tables")
    p.add_argument("--metrics-only", nargs=2, metavar=("GT", "SEG"))
    _add_policy_args(p)
    p.add_argument("--data", help="evaluate pipelines on a dataset directory")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--kinds", default=",".join(ERROR_KINDS))
    p.add_argument("--segments", type=int, default=50)
    p.add_argument("--order", default="merger,splitter")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="compare pipeline modes on generated images")
    _add_policy_args(p)
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--segments", type=int, default=50)
    p.add_argument("--max-errors", type=int, default=2)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    args.argv = argv
    try:
        return args.func(args)
    except (UsageError, StageError) + VALIDATION_ERRORS as exc:
        print(f"proofrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"proofrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime fault
        print(f"proofrl {args.command}: fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
