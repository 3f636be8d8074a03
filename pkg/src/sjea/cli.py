"""Command-line entry point: configs in, artifacts on disk out.

Verbs
-----
pretrain            train per config; writes metrics.csv + checkpoint.bin
linear-eval         probe a checkpointed model's frozen representation
knn-eval            k-nearest-neighbor accuracy of a checkpointed model
export-embeddings   write pooled representations as a labeled CSV
gradcheck           finite-difference verification suites
synth-demo          generate -> pretrain -> probe -> knn -> export, desk scale
param-count         per-stack parameter report for a config
report              render figures from a metrics.csv next to it

Every run writes `run.json` (resolved config, seed, content hash of the
package sources) into the output directory, and evaluations append one JSON
object per line to `results.jsonl` so grids aggregate with text tooling.
Errors print a single JSON line to stderr; exit codes: 0 success, 1 the run
executed but failed its goal (divergence, tolerance breach), 2 usage or
contract errors, 3 filesystem errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from .checkpoint import load_checkpoint, restore_state
from .config import (
    config_strings,
    describe_schema,
    load_config,
    parse_config_text,
    resolve_config,
)
from .errors import ConfigError, SjeaError
from .gradcheck import TOLERANCE, run_all
from .nn import parameter_count
from .report import render_report
from .train import (
    build_from_config,
    export_embeddings,
    knn_eval,
    linear_probe,
    load_dataset,
    pretrain,
    run_rngs,
)

__all__ = ["main", "build_parser", "code_hash"]


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


def _blob_sha1(data: bytes) -> str:
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def code_hash() -> str:
    """Git-style content hash over the package's source files."""
    pkg = os.path.dirname(os.path.abspath(__file__))
    lines = []
    for name in sorted(os.listdir(pkg)):
        if name.endswith(".py"):
            with open(os.path.join(pkg, name), "rb") as fh:
                lines.append(f"{_blob_sha1(fh.read())} {name}\n")
    return hashlib.sha1("".join(lines).encode("ascii")).hexdigest()


def _write_run_json(out_dir: str, verb: str, cfg: dict | None,
                    extra: dict | None = None) -> None:
    record: dict = {"verb": verb, "code_hash": code_hash()}
    if cfg is not None:
        record["seed"] = cfg["seed"]
        record["config"] = config_strings(cfg)
    if extra:
        record.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _append_results(out_dir: str, records: list[dict]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.jsonl"), "a", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _error_line(err: BaseException, **extra) -> None:
    record = {"error": type(err).__name__, "message": str(err)}
    record.update(extra)
    print(json.dumps(record, sort_keys=True, default=repr), file=sys.stderr)


def _restored_model(checkpoint_path: str, overrides: list[str]):
    """Rebuild a checkpointed model; overrides may retune eval keys."""
    ck = load_checkpoint(checkpoint_path)
    cfg = resolve_config(ck.meta["config"],
                         _override_dict(overrides))
    model, optimizer = build_from_config(cfg, run_rngs(cfg["seed"])[0])
    restore_state(model, optimizer, ck.tensors, adam_t=ck.meta["adam_t"])
    return model, cfg


def _override_dict(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def _finish_pretrain(result, out_dir: str) -> int:
    if result.aborted:
        _error_line(SjeaError("training diverged; last good checkpoint kept"),
                    **{k: v for k, v in result.diagnostics.items()})
        return 1
    if result.rows:
        print(f"pretrain: {len(result.rows)} epochs logged, "
              f"final total {result.rows[-1].breakdown.total:.6g}")
    else:
        print("pretrain: checkpoint already covers every configured epoch")
    print(f"artifacts: {os.path.join(out_dir, 'metrics.csv')} "
          f"{result.checkpoint_path}")
    return 0


def cmd_pretrain(args) -> int:
    if args.resume:
        if args.config or args.set or args.table3:
            raise ConfigError(
                "--resume replays the configuration stored in the checkpoint; "
                "it cannot be combined with --config/--set/--table3")
        ck = load_checkpoint(args.resume)
        cfg = resolve_config(ck.meta["config"])
        _write_run_json(args.out, "pretrain", cfg, {"resumed_from": args.resume})
        result = pretrain(cfg, load_dataset(cfg), args.out,
                          resume_from=args.resume)
        return _finish_pretrain(result, args.out)

    cfg = load_config(args.config, args.set)
    if not args.table3:
        _write_run_json(args.out, "pretrain", cfg)
        result = pretrain(cfg, load_dataset(cfg), args.out)
        if result.rows and not result.aborted:
            _append_results(args.out, [{
                "verb": "pretrain",
                "epochs": len(result.rows),
                "final_total": result.rows[-1].breakdown.total,
                "seed": cfg["seed"],
            }])
        return _finish_pretrain(result, args.out)

    # Projector on/off grid: four runs sharing one seed and base config.
    if cfg["model.stacks"] != 2:
        raise ConfigError("--table3 runs a 2-stack projector grid; "
                          "set model.stacks = 2")
    base = config_strings(cfg)
    dims = [base[f"model.projector.{k}"] for k in range(2)]
    dims = [d if d != "none" else "2048,2048,2048" for d in dims]
    _write_run_json(args.out, "pretrain", cfg, {"table3": True})
    for on0 in (True, False):
        for on1 in (True, False):
            name = f"proj{'1' if on0 else '0'}{'1' if on1 else '0'}"
            combo = dict(base)
            combo["model.projector.0"] = dims[0] if on0 else "none"
            combo["model.projector.1"] = dims[1] if on1 else "none"
            sub_cfg = resolve_config(combo)
            sub_dir = os.path.join(args.out, name)
            _write_run_json(sub_dir, "pretrain", sub_cfg, {"table3": name})
            result = pretrain(sub_cfg, load_dataset(sub_cfg), sub_dir)
            if result.aborted:
                return _finish_pretrain(result, sub_dir)
            _append_results(args.out, [{
                "verb": "pretrain",
                "table3": name,
                "projector_0": on0,
                "projector_1": on1,
                "epochs": len(result.rows),
                "final_total": result.rows[-1].breakdown.total,
                "seed": sub_cfg["seed"],
            }])
            print(f"table3 {name}: final total "
                  f"{result.rows[-1].breakdown.total:.6g}")
    return 0


def cmd_linear_eval(args) -> int:
    model, cfg = _restored_model(args.checkpoint, args.set)
    splits = load_dataset(cfg)
    stack = cfg["eval.stack"]
    accuracy = linear_probe(model, stack, splits, cfg)
    _write_run_json(args.out, "linear-eval", cfg,
                    {"checkpoint": args.checkpoint})
    _append_results(args.out, [{
        "verb": "linear-eval", "stack": stack, "accuracy": accuracy,
        "probe_epochs": cfg["eval.probe_epochs"],
    }])
    print(f"linear-eval: stack {stack} top-1 {accuracy:.4f}")
    return 0


def cmd_knn_eval(args) -> int:
    model, cfg = _restored_model(args.checkpoint, args.set)
    splits = load_dataset(cfg)
    stack = cfg["eval.stack"]
    accuracy = knn_eval(model, stack, splits, cfg)
    _write_run_json(args.out, "knn-eval", cfg,
                    {"checkpoint": args.checkpoint})
    _append_results(args.out, [{
        "verb": "knn-eval", "stack": stack, "accuracy": accuracy,
        "k": cfg["eval.knn_k"], "metric": "cosine",
    }])
    print(f"knn-eval: stack {stack} k={cfg['eval.knn_k']} "
          f"top-1 {accuracy:.4f}")
    return 0


def cmd_export_embeddings(args) -> int:
    model, cfg = _restored_model(args.checkpoint, args.set)
    splits = load_dataset(cfg)
    dataset = splits.train if args.split == "train" else splits.test
    stack = cfg["eval.stack"]
    _write_run_json(args.out, "export-embeddings", cfg,
                    {"checkpoint": args.checkpoint, "split": args.split})
    path = os.path.join(args.out, f"embeddings-{args.split}.csv")
    export_embeddings(model, stack, dataset, path,
                      batch_size=cfg["train.batch_size"])
    _append_results(args.out, [{
        "verb": "export-embeddings", "stack": stack, "split": args.split,
        "rows": len(dataset), "path": os.path.basename(path),
    }])
    print(f"export-embeddings: {len(dataset)} rows -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    _write_run_json(args.out, "gradcheck", None,
                    {"seed": args.seed, "tolerance": TOLERANCE})
    checks = run_all(args.seed)
    records = []
    failed = False
    for name, err in checks.items():
        ok = err < TOLERANCE
        failed = failed or not ok
        records.append({"verb": "gradcheck", "check": name,
                        "max_rel_error": err, "tolerance": TOLERANCE,
                        "pass": ok})
        print(f"gradcheck {name}: max relative error {err:.3e} "
              f"{'PASS' if ok else 'FAIL'}")
    _append_results(args.out, records)
    return 1 if failed else 0


# Desk-scale defaults: slim encoders, 2,000/400 synthetic samples.  CLI --set
# overrides win over these, so the demo doubles as a tuning springboard.
SYNTH_DEMO_OVERRIDES: dict[str, str] = {
    "dataset.name": "synthetic",
    "model.stacks": "2",
    "model.widths.0": "16,32,64,128",
    "model.widths.1": "128,128,128,128",
    "model.blocks.0": "1,1,1,1",
    "model.blocks.1": "1,1,1,1",
    "model.projector.0": "256,256,128",
    "model.projector.1": "256,256,128",
    "train.batch_size": "64",
    "train.epochs": "12",
    "optim.lr": "0.002",
}


def cmd_synth_demo(args) -> int:
    overrides = dict(SYNTH_DEMO_OVERRIDES)
    overrides.update(_override_dict(args.set))
    file_values: dict[str, str] = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_values = parse_config_text(fh.read(), source=args.config)
        except OSError as err:
            raise ConfigError(f"cannot read config {args.config!r}: {err}")
    cfg = resolve_config(file_values, overrides)
    _write_run_json(args.out, "synth-demo", cfg)

    splits = load_dataset(cfg)
    print(f"synth-demo: {len(splits.train)} train / {len(splits.test)} test "
          f"samples, {cfg['model.stacks']} stacks, "
          f"{cfg['train.epochs']} epochs")
    result = pretrain(cfg, splits, args.out)
    code = _finish_pretrain(result, args.out)
    if code != 0:
        return code

    stack = cfg["eval.stack"]
    probe = linear_probe(result.model, stack, splits, cfg)
    print(f"synth-demo: stack {stack} linear-probe top-1 {probe:.4f}")
    knn = knn_eval(result.model, stack, splits, cfg)
    print(f"synth-demo: stack {stack} k-NN (k={cfg['eval.knn_k']}) "
          f"top-1 {knn:.4f}")
    path = os.path.join(args.out, "embeddings-test.csv")
    export_embeddings(result.model, stack, splits.test, path,
                      batch_size=cfg["train.batch_size"])
    print(f"synth-demo: embeddings -> {path}")
    _append_results(args.out, [
        {"verb": "synth-demo", "evaluation": "linear-probe", "stack": stack,
         "accuracy": probe},
        {"verb": "synth-demo", "evaluation": "knn", "stack": stack,
         "k": cfg["eval.knn_k"], "accuracy": knn},
    ])
    return 0


def cmd_param_count(args) -> int:
    cfg = load_config(args.config, args.set)
    model, _ = build_from_config(cfg, run_rngs(cfg["seed"])[0])
    encoders, projectors = [], []
    for k in range(model.spec.num_stacks):
        stack = model.stacks[k]
        encoders.append(parameter_count(stack.encoder))
        projectors.append(0 if stack.projector is None
                          else parameter_count(stack.projector))
    total = sum(encoders) + sum(projectors)
    for k, (e, p) in enumerate(zip(encoders, projectors)):
        print(f"stack {k} encoder   {e:>12,}")
        print(f"stack {k} projector {p:>12,}")
    print(f"encoders total    {sum(encoders):>12,}")
    print(f"model total       {total:>12,}")
    _write_run_json(args.out, "param-count", cfg)
    _append_results(args.out, [{
        "verb": "param-count", "encoders": encoders,
        "projectors": projectors, "encoder_total": sum(encoders),
        "total": total,
    }])
    return 0


def cmd_report(args) -> int:
    metrics = args.metrics or os.path.join(args.out, "metrics.csv")
    written = render_report(metrics, args.out)
    _write_run_json(args.out, "report", None, {"metrics": metrics})
    for path in written:
        print(f"report: wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(sp) -> None:
    sp.add_argument("--config", metavar="FILE",
                    help="key = value config file (defaults apply when omitted)")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key; repeatable, applied after "
                         "the file and re-validated")


def _add_out_arg(sp) -> None:
    sp.add_argument("--out", required=True, metavar="DIR",
                    help="output directory for artifacts")


def _add_checkpoint_args(sp) -> None:
    sp.add_argument("--checkpoint", required=True, metavar="FILE",
                    help="checkpoint written by pretrain")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override eval keys of the stored config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sjea",
        description="Stacked joint-embedding pretraining and evaluation.",
        epilog="Config keys:\n" + describe_schema(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    sp = sub.add_parser("pretrain", help="train a model per config")
    _add_config_args(sp)
    _add_out_arg(sp)
    sp.add_argument("--resume", metavar="FILE",
                    help="continue from a mid-run checkpoint")
    sp.add_argument("--table3", action="store_true",
                    help="run the four projector on/off combinations "
                         "with a shared seed")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("linear-eval",
                        help="linear probe on frozen representations")
    _add_checkpoint_args(sp)
    _add_out_arg(sp)
    sp.set_defaults(func=cmd_linear_eval)

    sp = sub.add_parser("knn-eval", help="k-NN accuracy on representations")
    _add_checkpoint_args(sp)
    _add_out_arg(sp)
    sp.set_defaults(func=cmd_knn_eval)

    sp = sub.add_parser("export-embeddings",
                        help="write pooled representations to CSV")
    _add_checkpoint_args(sp)
    _add_out_arg(sp)
    sp.add_argument("--split", choices=("train", "test"), default="test",
                    help="which split to encode (default test)")
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("gradcheck",
                        help="finite-difference gradient verification")
    _add_out_arg(sp)
    sp.add_argument("--seed", type=int, default=0,
                    help="seed for the random loss-term inputs")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth-demo",
                        help="end-to-end desk-scale pipeline on synthetic data")
    _add_config_args(sp)
    _add_out_arg(sp)
    sp.set_defaults(func=cmd_synth_demo)

    sp = sub.add_parser("param-count", help="per-stack parameter report")
    _add_config_args(sp)
    _add_out_arg(sp)
    sp.set_defaults(func=cmd_param_count)

    sp = sub.add_parser("report", help="render figures from a metrics CSV")
    _add_out_arg(sp)
    sp.add_argument("--metrics", metavar="FILE",
                    help="metrics.csv path (default: <out>/metrics.csv)")
    sp.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SjeaError as err:
        _error_line(err)
        return 2
    except OSError as err:
        _error_line(err)
        return 3


if __name__ == "__main__":
    sys.exit(main())
