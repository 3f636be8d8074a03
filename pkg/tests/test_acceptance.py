"""End-to-end acceptance gate, one test per shipped guarantee.

Every test records its verdict through the `acceptance` fixture (the summary
prints one `criterion N: PASS/FAIL` line per entry after the run) and then
asserts it, so a red criterion shows up both ways.  The tests favor the
public entry points: the CLI for user-facing flows, the library API where a
contract is about internals.
"""

import json
import math
import os

import numpy as np
import pytest

from sjea.augment import sample_views
from sjea.checkpoint import load_checkpoint
from sjea.cli import main
from sjea.config import (
    loss_weights_from,
    model_pieces_from,
    resolve_config,
)
from sjea.gradcheck import TOLERANCE, run_all
from sjea.losses import (
    LossWeights,
    covariance_loss,
    invariance_loss,
    sjea_total_loss,
    variance_loss,
    vicreg_loss,
)
from sjea.model import build_sjea
from sjea.nn import Encoder, EncoderConfig, Projector, parameter_count
from sjea.optim import Adam, cosine_lr
from sjea.tensor import Tape, Tensor
from sjea.train import (
    build_from_config,
    encode_dataset,
    export_embeddings,
    load_dataset,
    pretrain,
    read_embeddings,
    run_rngs,
    transform_for,
)


def read_results(out_dir):
    with open(os.path.join(out_dir, "results.jsonl"), "r",
              encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def eval_embedding_std(model, dataset, stack=0, batch_size=256):
    """Mean per-dimension std of the stack's loss embedding, eval mode,
    computed over the whole dataset with train-split normalization."""
    mean, std = dataset.channel_stats
    x = ((dataset.images - mean[None, :, None, None])
         / std[None, :, None, None]).astype(np.float32)
    chunks = []
    for lo in range(0, len(x), batch_size):
        t = Tensor(x[lo:lo + batch_size])
        outs = model.forward((t, t), training=False)
        chunks.append(outs.embeddings[stack][0].numpy())
    z = np.concatenate(chunks)
    return float(np.std(z, axis=0, ddof=1).mean())


class TestCriterion1GradientFidelity:
    def test_analytic_gradients_match_finite_differences(self, acceptance):
        """Each loss term, the weighted combination through both views, and
        a full 2-stack model sweep agree with central differences (float64,
        eps 1e-5) to better than 1e-4 max relative error."""
        checks = run_all(seed=0)
        worst = max(checks, key=checks.get)
        ok = all(err < TOLERANCE for err in checks.values())
        detail = (f"{len(checks)} checks, worst {checks[worst]:.3e} "
                  f"({worst}), tolerance {TOLERANCE:g}")
        acceptance(1, ok, detail)
        assert ok, detail


def naive_invariance(z1, z2):
    n, d = z1.shape
    total = 0.0
    for i in range(n):
        for j in range(d):
            total += (z1[i, j] - z2[i, j]) ** 2
    return total / n


def naive_variance(z, gamma=1.0, eps=1e-4):
    n, d = z.shape
    total = 0.0
    for j in range(d):
        mean = sum(z[i, j] for i in range(n)) / n
        var = sum((z[i, j] - mean) ** 2 for i in range(n)) / (n - 1)
        total += max(0.0, gamma - math.sqrt(var + eps))
    return total / d


def naive_covariance(z):
    n, d = z.shape
    means = [sum(z[i, j] for i in range(n)) / n for j in range(d)]
    total = 0.0
    for a in range(d):
        for b in range(d):
            if a == b:
                continue
            cov = sum((z[i, a] - means[a]) * (z[i, b] - means[b])
                      for i in range(n)) / (n - 1)
            total += cov * cov
    return total / d


def rel_close(got, want, tol=1e-10):
    return abs(got - want) <= tol * max(1.0, abs(want))


class TestCriterion2LossOracles:
    def test_terms_match_naive_loops_and_fixed_vectors(self, acceptance):
        """100 random small inputs agree with nested-loop references within
        1e-10 relative; so do hand-computed fixed vectors, and the weighted
        total recombines exactly from its parts."""
        rng = np.random.default_rng(20240814)
        failures = []
        for trial in range(100):
            n = int(rng.integers(2, 17))
            d = int(rng.integers(1, 9))
            scale = 10.0 ** rng.uniform(-1.0, 1.0)
            z1 = rng.normal(size=(n, d)) * scale
            z2 = rng.normal(size=(n, d)) * scale
            t1, t2 = Tensor(z1), Tensor(z2)
            cases = [
                ("invariance", invariance_loss(t1, t2).item(),
                 naive_invariance(z1, z2)),
                ("variance", variance_loss(t1).item(), naive_variance(z1)),
                ("covariance", covariance_loss(t1).item(),
                 naive_covariance(z1)),
            ]
            total, parts = vicreg_loss(t1, t2)
            want_total = (25.0 * naive_invariance(z1, z2)
                          + 25.0 * (naive_variance(z1) + naive_variance(z2))
                          + 1.0 * (naive_covariance(z1)
                                   + naive_covariance(z2)))
            cases.append(("total", total.item(), want_total))
            recombined = 25.0 * parts.s + 25.0 * parts.v + 1.0 * parts.c
            cases.append(("recombination", total.item(), recombined))
            for name, got, want in cases:
                if not rel_close(got, want):
                    failures.append(f"trial {trial} {name}: "
                                    f"{got!r} vs {want!r}")

        offset = Tensor(np.zeros((3, 4)))
        shifted = Tensor(np.ones((3, 4)))
        fixed = [
            ("unit offset invariance",
             invariance_loss(offset, shifted).item(), 4.0),
            ("sign-column variance",
             variance_loss(Tensor(np.array([[1.0, -1.0],
                                            [-1.0, 1.0]]))).item(), 0.0),
            ("anticorrelated covariance",
             covariance_loss(Tensor(np.array([[1.0, 1.0],
                                              [-1.0, -1.0]]))).item(), 4.0),
        ]
        grid = Tensor(np.array([[1.0, 1.0], [1.0, -1.0],
                                [-1.0, 1.0], [-1.0, -1.0]]))
        fixed.append(("orthogonal grid total",
                      vicreg_loss(grid, grid)[0].item(), 0.0))
        for name, got, want in fixed:
            if not rel_close(got, want):
                failures.append(f"{name}: {got!r} vs {want!r}")

        ok = not failures
        detail = ("100 random inputs + fixed vectors within 1e-10"
                  if ok else f"{len(failures)} mismatches, first: "
                  f"{failures[0]}")
        acceptance(2, ok, detail)
        assert ok, detail


COLLAPSE_BASE = {
    "dataset.per_class": "160", "dataset.test_per_class": "10",
    "dataset.size": "24",
    "model.stacks": "1", "model.widths.0": "8,16,16,32",
    "model.blocks.0": "1,1,1,1", "model.projector.0": "64,64,32",
    "train.batch_size": "64", "train.epochs": "20",
    "train.checkpoint_every": "20",
    "optim.schedule": "constant", "optim.lr": "0.02",
    "augment.crop_min": "0.9", "augment.jitter_prob": "0.0",
    "augment.grayscale_prob": "0.0",
}


class TestCriterion3CollapseDichotomy:
    def test_variance_weight_separates_collapse_from_spread(self, acceptance,
                                                            tmp_path):
        """200 steps with the variance and covariance weights zeroed drive
        the embedding std below 0.1; default weights keep it at or above
        0.5; and the default covariance weight keeps the covariance term
        below a 0.04x-weighted run on at least 90% of the logged rows."""
        runs = {}
        for name, extra in (
                ("inv_only", {"loss.mu": "0.0", "loss.nu": "0.0"}),
                ("default", {}),
                ("nu_down", {"loss.nu": "0.04"})):
            cfg = resolve_config({**COLLAPSE_BASE, **extra})
            splits = load_dataset(cfg)
            result = pretrain(cfg, splits, str(tmp_path / name))
            assert not result.aborted, name
            assert len(result.rows) * (len(splits.train)
                                       // cfg["train.batch_size"]) == 200
            runs[name] = (result, splits)

        collapsed = eval_embedding_std(runs["inv_only"][0].model,
                                       runs["inv_only"][1].train)
        spread = eval_embedding_std(runs["default"][0].model,
                                    runs["default"][1].train)
        c_default = [row.breakdown.c[0] for row in runs["default"][0].rows]
        c_down = [row.breakdown.c[0] for row in runs["nu_down"][0].rows]
        below = sum(a < b for a, b in zip(c_default, c_down))
        ok = (collapsed < 0.1 and spread >= 0.5
              and below >= 0.9 * len(c_default))
        detail = (f"inv-only std {collapsed:.3f} (<0.1), default std "
                  f"{spread:.3f} (>=0.5), covariance below the downweighted "
                  f"run on {below}/{len(c_default)} rows (>=90%)")
        acceptance(3, ok, detail)
        assert ok, detail


class TestCriterion4EndToEndLearning:
    def test_synth_demo_reaches_linear_probe_and_knn_thresholds(
            self, acceptance, tmp_path):
        """The stock synth-demo verb (2,000/400 synthetic samples, 2 stacks,
        at most 30 epochs) reaches stack-0 linear-probe and k-NN accuracy of
        at least 80%, with the two metrics within 5 points of each other."""
        out = str(tmp_path)
        code = main(["synth-demo", "--out", out])
        assert code == 0
        with open(os.path.join(out, "run.json"), encoding="utf-8") as fh:
            stored = json.load(fh)["config"]
        assert int(stored["train.epochs"]) <= 30
        assert (int(stored["dataset.classes"])
                * int(stored["dataset.per_class"])) == 2000
        assert (int(stored["dataset.classes"])
                * int(stored["dataset.test_per_class"])) == 400
        assert int(stored["model.stacks"]) == 2
        assert stored["eval.stack"] == "0"

        records = {r["evaluation"]: r for r in read_results(out)
                   if r.get("verb") == "synth-demo"}
        probe = records["linear-probe"]["accuracy"]
        knn = records["knn"]["accuracy"]
        ok = probe >= 0.80 and knn >= 0.80 and abs(probe - knn) <= 0.05
        detail = (f"linear probe {probe:.3f}, knn {knn:.3f} "
                  f"(thresholds 0.80, gap {abs(probe - knn):.3f} <= 0.05)")
        acceptance(4, ok, detail)
        assert ok, detail


class TestCriterion5ShapeAndParameterContracts:
    def test_stack_handoff_shapes_and_encoder_sizes(self, acceptance,
                                                    tmp_path):
        """The stack-1 input map is 512x4x4 for the 32px config and 512x3x3
        for the 96px config; each encoder lands within 5% of 11.6M
        parameters and the 2-stack encoder total within 5% of 23.2M."""
        shapes = {}
        counts = {}
        for name, size in (("cifar10", 32), ("stl10", 96)):
            cfg = resolve_config({"dataset.name": name,
                                  "dataset.dir": str(tmp_path)})
            spec, enc_cfgs, proj_dims = model_pieces_from(cfg)
            model = build_sjea(spec, enc_cfgs, proj_dims,
                               np.random.default_rng(0))
            x = Tensor(np.zeros((2, 3, size, size), dtype=np.float32))
            prepool, _ = model.stacks[0].encoder.forward(x, training=False)
            shapes[name] = prepool.shape[1:]
            counts[name] = [parameter_count(model.stacks[k].encoder)
                            for k in range(2)]

        single = counts["cifar10"][0]
        total = sum(counts["cifar10"])
        ok = (shapes["cifar10"] == (512, 4, 4)
              and shapes["stl10"] == (512, 3, 3)
              and abs(single - 11.6e6) <= 0.05 * 11.6e6
              and abs(total - 23.2e6) <= 0.05 * 23.2e6)
        detail = (f"32px hand-off {shapes['cifar10']}, 96px hand-off "
                  f"{shapes['stl10']}, encoder {single / 1e6:.2f}M "
                  f"(11.6M +-5%), 2-stack {total / 1e6:.2f}M (23.2M +-5%)")
        acceptance(5, ok, detail)
        assert ok, detail


GRID_BASE = [
    "dataset.classes=4", "dataset.per_class=24", "dataset.test_per_class=6",
    "dataset.size=8", "model.stacks=2", "model.widths.0=4,4,8,8",
    "model.widths.1=4,4,8,8", "model.blocks.0=1,1,1,1",
    "model.blocks.1=1,1,1,1", "model.projector.0=16,16,8",
    "model.projector.1=16,16,8", "train.epochs=2", "train.batch_size=16",
    "optim.schedule=constant", "seed=11",
]


def grid_args(extra=()):
    argv = []
    for pair in GRID_BASE + list(extra):
        argv.extend(["--set", pair])
    return argv


class TestCriterion6ConfigurationGrid:
    def test_projector_grid_and_stack_input_variants_run(self, acceptance,
                                                         tmp_path):
        """All four projector on/off combinations train 2 epochs and emit
        one result record each; the projector-embedding and prepool
        hand-off variants run the same way."""
        grid_dir = str(tmp_path / "grid")
        code = main(["pretrain", "--out", grid_dir, "--table3"]
                    + grid_args())
        grid_records = [r for r in read_results(grid_dir)
                        if "table3" in r]
        variants_ok = True
        for variant in ("projector_embedding", "prepool"):
            var_dir = str(tmp_path / variant)
            var_code = main(
                ["pretrain", "--out", var_dir]
                + grid_args([f"model.stack_input={variant}"]))
            with open(os.path.join(var_dir, "metrics.csv"),
                      encoding="utf-8") as fh:
                rows = fh.read().splitlines()
            variants_ok = (variants_ok and var_code == 0
                           and len(rows) == 1 + 2)

        names = sorted(r["table3"] for r in grid_records)
        ok = (code == 0 and variants_ok
              and names == ["proj00", "proj01", "proj10", "proj11"]
              and all(np.isfinite(r["final_total"]) for r in grid_records))
        detail = (f"grid records {names}, hand-off variants "
                  f"{'ran' if variants_ok else 'failed'}")
        acceptance(6, ok, detail)
        assert ok, detail


class TestCriterion7StopGradientContract:
    @staticmethod
    def _stack0_grads(stop_gradient):
        cfg = resolve_config({
            "dataset.size": "16", "model.stacks": "2",
            "model.widths.0": "4,4,8,8", "model.widths.1": "4,4,8,8",
            "model.blocks.0": "1,1,1,1", "model.blocks.1": "1,1,1,1",
            "model.projector.0": "16,16,8", "model.projector.1": "16,16,8",
            "model.stop_gradient": "true" if stop_gradient else "false",
        })
        model, _ = build_from_config(cfg, run_rngs(3)[0])
        rng = np.random.default_rng(7)
        v1 = Tensor(rng.normal(size=(8, 3, 16, 16)).astype(np.float32))
        v2 = Tensor(rng.normal(size=(8, 3, 16, 16)).astype(np.float32))
        with Tape() as tape:
            outs = model.forward((v1, v2), training=True)
            total, _ = sjea_total_loss(outs.embeddings,
                                       loss_weights_from(cfg),
                                       stack_weights=(0.0, 1.0))
        tape.backward(total)
        return [(name, p.grad)
                for name, p in model.stacks[0].named_parameters()]

    def test_barrier_blocks_and_absence_leaks_gradient(self, acceptance):
        """With the barrier on, the stack-1 objective moves no stack-0
        parameter; with it off, at least one stack-0 gradient is nonzero."""
        blocked = self._stack0_grads(stop_gradient=True)
        leaked = self._stack0_grads(stop_gradient=False)
        all_zero = all(g is None or not np.any(g) for _, g in blocked)
        any_nonzero = any(g is not None and np.any(g) for _, g in leaked)
        ok = all_zero and any_nonzero
        detail = (f"barrier on: {len(blocked)} stack-0 gradients all exactly "
                  f"zero = {all_zero}; barrier off: nonzero gradient present "
                  f"= {any_nonzero}")
        acceptance(7, ok, detail)
        assert ok, detail


class TestCriterion8DeterminismAndPersistence:
    def test_traces_checkpoints_and_exports_are_exact(self, acceptance,
                                                      tmp_path):
        """Identical seeds give bit-identical 10-step loss traces; stopping
        at step 5 and resuming reproduces the uninterrupted run bit for
        bit; embedding export round-trips exactly."""
        cfg = resolve_config({
            "dataset.classes": "4", "dataset.per_class": "16",
            "dataset.test_per_class": "4", "dataset.size": "8",
            "model.stacks": "1", "model.widths.0": "4,4,8,8",
            "model.blocks.0": "1,1,1,1", "model.projector.0": "16,16,8",
            "train.epochs": "10", "train.batch_size": "64",
            "train.checkpoint_every": "5",
        })
        splits = load_dataset(cfg)
        first = pretrain(cfg, splits, str(tmp_path / "a"))
        second = pretrain(cfg, splits, str(tmp_path / "b"))
        trace_a = [(r.breakdown.total, r.breakdown.s, r.breakdown.v,
                    r.breakdown.c) for r in first.rows]
        trace_b = [(r.breakdown.total, r.breakdown.s, r.breakdown.v,
                    r.breakdown.c) for r in second.rows]
        traces_equal = (len(trace_a) == 10 and trace_a == trace_b)

        interrupted = pretrain(cfg, splits, str(tmp_path / "c"),
                               stop_after=5)
        assert load_checkpoint(interrupted.checkpoint_path).meta["epoch"] == 5
        pretrain(cfg, splits, str(tmp_path / "c"),
                 resume_from=interrupted.checkpoint_path)
        with open(str(tmp_path / "a" / "checkpoint.bin"), "rb") as fh:
            full_ck = fh.read()
        with open(str(tmp_path / "c" / "checkpoint.bin"), "rb") as fh:
            resumed_ck = fh.read()
        with open(str(tmp_path / "a" / "metrics.csv"), "rb") as fh:
            full_csv = fh.read()
        with open(str(tmp_path / "c" / "metrics.csv"), "rb") as fh:
            resumed_csv = fh.read()
        resume_equal = (full_ck == resumed_ck and full_csv == resumed_csv)

        export_path = str(tmp_path / "embeddings.csv")
        export_embeddings(first.model, 0, splits.test, export_path)
        labels, features = read_embeddings(export_path)
        direct, direct_labels = encode_dataset(first.model, splits.test, 0)
        export_equal = (np.array_equal(labels, direct_labels)
                        and np.array_equal(features, direct))

        ok = traces_equal and resume_equal and export_equal
        detail = (f"10-step trace identical = {traces_equal}, resumed run "
                  f"bit-identical = {resume_equal}, export round-trip exact "
                  f"= {export_equal}")
        acceptance(8, ok, detail)
        assert ok, detail


class TestCriterion9BaselineEquivalence:
    def test_single_stack_pipeline_matches_direct_wiring(self, acceptance,
                                                         tmp_path):
        """A 1-stack run of the full pipeline is bit-identical, step for
        step and weight for weight, to an encoder+projector trained by a
        hand-written loop that never touches the stacking machinery."""
        cfg = resolve_config({
            "dataset.classes": "4", "dataset.per_class": "24",
            "dataset.test_per_class": "6", "dataset.size": "8",
            "model.stacks": "1", "model.widths.0": "4,4,8,8",
            "model.blocks.0": "1,1,1,1", "model.projector.0": "16,16,8",
            "train.epochs": "2", "train.batch_size": "16",
            "seed": "13",
        })
        splits = load_dataset(cfg)
        piped = pretrain(cfg, splits, str(tmp_path))

        build_rng, rng = run_rngs(cfg["seed"])
        enc = Encoder(EncoderConfig(stem="image_cifar", in_channels=3,
                                    widths=cfg["model.widths.0"],
                                    blocks=cfg["model.blocks.0"]), build_rng)
        proj = Projector(enc.out_channels, cfg["model.projector.0"],
                         build_rng)
        params = ([(f"enc.{n}", p) for n, p in enc.named_parameters()]
                  + [(f"proj.{n}", p) for n, p in proj.named_parameters()])
        opt = Adam(params, lr=cfg["optim.lr"],
                   betas=(cfg["optim.beta1"], cfg["optim.beta2"]),
                   weight_decay=cfg["optim.weight_decay"])
        weights = loss_weights_from(cfg)
        t_cfg = transform_for(cfg, splits.train)
        batch = cfg["train.batch_size"]
        steps = len(splits.train) // batch
        total_steps = cfg["train.epochs"] * steps
        rows = []
        step_i = 0
        for _ in range(cfg["train.epochs"]):
            perm = rng.permutation(len(splits.train))
            sums = None
            for b in range(steps):
                idx = perm[b * batch:(b + 1) * batch]
                views = sample_views(Tensor(splits.train.images[idx]),
                                     t_cfg, rng=rng)
                opt.lr = cosine_lr(cfg["optim.lr"], step_i, total_steps,
                                   min_lr=cfg["optim.min_lr"])
                opt.zero_grad()
                with Tape() as tape:
                    _, y1 = enc.forward(views.v1, training=True)
                    _, y2 = enc.forward(views.v2, training=True)
                    z1 = proj.forward(y1, training=True)
                    z2 = proj.forward(y2, training=True)
                    total, parts = vicreg_loss(z1, z2, weights)
                tape.backward(total)
                opt.step()
                step_i += 1
                vals = np.array([total.item(), parts.s, parts.v, parts.c])
                sums = vals if sums is None else sums + vals
            rows.append(sums / steps)

        trace_equal = all(
            row.breakdown.total == direct[0]
            and row.breakdown.s[0] == direct[1]
            and row.breakdown.v[0] == direct[2]
            and row.breakdown.c[0] == direct[3]
            for row, direct in zip(piped.rows, rows))
        direct_params = dict(params)
        piped_params = {}
        for name, p in piped.model.stacks[0].encoder.named_parameters():
            piped_params[f"enc.{name}"] = p
        for name, p in piped.model.stacks[0].projector.named_parameters():
            piped_params[f"proj.{name}"] = p
        weights_equal = (
            set(direct_params) == set(piped_params)
            and all(np.array_equal(direct_params[n].data,
                                   piped_params[n].data)
                    for n in direct_params))
        ok = trace_equal and weights_equal
        detail = (f"{len(piped.rows)} epoch traces bit-identical = "
                  f"{trace_equal}, {len(direct_params)} parameter tensors "
                  f"bit-identical = {weights_equal}")
        acceptance(9, ok, detail)
        assert ok, detail
