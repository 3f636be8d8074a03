"""Flat dotted-key run configuration: parsing, defaults, validation, builders.

Config files are plain text, one `key = value` per line, `#` starts a comment.
Every key has a typed default, so an empty file is a complete configuration.
CLI overrides use the same `key=value` syntax and are applied after the file,
then the merged result is validated as a whole.  The resolved mapping is
JSON-friendly and is echoed verbatim into each run's run.json.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .errors import ConfigError
from .losses import LossWeights
from .model import StackSpec
from .nn import EncoderConfig

__all__ = ["SCHEMA", "parse_config_text", "resolve_config", "load_config",
           "config_strings", "loss_weights_from", "stack_weights_from",
           "model_pieces_from", "describe_schema"]


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int(raw: str) -> int:
    return int(raw, 10)


def _parse_float(raw: str) -> float:
    return float(raw)


def _parse_str(raw: str) -> str:
    return raw


def _parse_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip(), 10) for part in raw.split(","))


def _parse_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(part.strip()) for part in raw.split(","))


def _parse_dims_or_none(raw: str):
    if raw.lower() == "none":
        return None
    return _parse_ints(raw)


@dataclass(frozen=True)
class ConfigItem:
    parse: Callable
    default: object
    check: Callable[[object], bool] | None = None
    expect: str = ""
    help: str = ""


def _choice(*options):
    return (lambda v: v in options), "one of " + ", ".join(map(str, options))


_nonneg = (lambda v: v >= 0), "a value >= 0"
_positive = (lambda v: v > 0), "a value > 0"
_pos_int = (lambda v: v >= 1), "an integer >= 1"
_prob = (lambda v: 0.0 <= v <= 1.0), "a probability in [0, 1]"


def _item(parse, default, bound=None, help=""):
    check, expect = bound if bound else (None, "")
    return ConfigItem(parse, default, check, expect, help)


SCHEMA: dict[str, ConfigItem] = {
    "dataset.name": _item(_parse_str, "synthetic",
                          _choice("cifar10", "stl10", "synthetic"),
                          help="which dataset to load"),
    "dataset.dir": _item(_parse_str, "",
                         help="directory holding dataset binaries (cifar10/stl10)"),
    "dataset.classes": _item(_parse_int, 4, _pos_int,
                             help="synthetic dataset: number of classes"),
    "dataset.per_class": _item(_parse_int, 500, _pos_int,
                               help="synthetic dataset: training images per class"),
    "dataset.test_per_class": _item(_parse_int, 100, _pos_int,
                                    help="synthetic dataset: test images per class"),
    "dataset.size": _item(_parse_int, 32, (lambda v: v >= 8, "a size >= 8"),
                          help="synthetic dataset: square image size in pixels"),

    "model.stacks": _item(_parse_int, 2, _choice(1, 2),
                          help="number of chained encoder stacks"),
    "model.stack_input": _item(
        _parse_str, "prepool",
        _choice("prepool", "pooled", "projector_embedding"),
        help="which output of stack k-1 feeds stack k"),
    "model.stop_gradient": _item(_parse_bool, False,
                                 help="detach the hand-off between stacks"),
    "model.projector.0": _item(_parse_dims_or_none, (2048, 2048, 2048),
                               help="stack-0 projector dims, or none to disable"),
    "model.projector.1": _item(_parse_dims_or_none, (2048, 2048, 2048),
                               help="stack-1 projector dims, or none to disable"),
    "model.widths.0": _item(_parse_ints, (64, 128, 256, 512),
                            help="stack-0 encoder stage widths (4 entries)"),
    "model.widths.1": _item(_parse_ints, (64, 128, 256, 512),
                            help="stack-1 encoder stage widths (4 entries)"),
    "model.blocks.0": _item(_parse_ints, (2, 2, 2, 2),
                            help="stack-0 residual blocks per stage (4 entries)"),
    "model.blocks.1": _item(_parse_ints, (2, 2, 2, 2),
                            help="stack-1 residual blocks per stage (4 entries)"),

    "loss.lambda": _item(_parse_float, 25.0, _nonneg,
                         help="invariance term weight"),
    "loss.mu": _item(_parse_float, 25.0, _nonneg,
                     help="variance term weight"),
    "loss.nu": _item(_parse_float, 1.0, _nonneg,
                     help="covariance term weight"),
    "loss.gamma": _item(_parse_float, 1.0, _positive,
                        help="variance hinge target"),
    "loss.epsilon": _item(_parse_float, 1e-4, _positive,
                          help="variance numerical floor"),
    "loss.stack_weights": _item(_parse_floats, (1.0, 1.0),
                                (lambda v: all(x >= 0 for x in v),
                                 "non-negative weights"),
                                help="per-stack weights on the summed objective"),

    "optim.lr": _item(_parse_float, 1e-3, _positive,
                      help="base learning rate"),
    "optim.min_lr": _item(_parse_float, 0.0, _nonneg,
                          help="final learning rate of the cosine schedule"),
    "optim.weight_decay": _item(_parse_float, 1e-6, _nonneg,
                                help="decoupled weight decay"),
    "optim.beta1": _item(_parse_float, 0.9, _prob, help="first moment decay"),
    "optim.beta2": _item(_parse_float, 0.999, _prob, help="second moment decay"),
    "optim.schedule": _item(_parse_str, "cosine", _choice("cosine", "constant"),
                            help="learning-rate schedule"),
    "optim.warmup_epochs": _item(_parse_int, 0, _nonneg,
                                 help="linear learning-rate warmup epochs "
                                      "before the schedule"),

    "train.epochs": _item(_parse_int, 30, _pos_int,
                          help="pretraining epochs"),
    "train.batch_size": _item(_parse_int, 256, (lambda v: v >= 2,
                                                "a batch size >= 2"),
                              help="samples per training batch"),
    "train.checkpoint_every": _item(_parse_int, 1, _pos_int,
                                    help="checkpoint cadence in epochs"),
    "train.log_every": _item(_parse_int, 10, _pos_int,
                             help="steps between covariance-trace log points"),

    "augment.crop_min": _item(_parse_float, 0.2,
                              (lambda v: 0.0 < v <= 1.0, "a fraction in (0, 1]"),
                              help="minimum crop area fraction"),
    "augment.jitter_prob": _item(_parse_float, 0.8, _prob,
                                 help="color jitter probability"),
    "augment.grayscale_prob": _item(_parse_float, 0.2, _prob,
                                    help="grayscale probability"),

    "eval.stack": _item(_parse_int, 0, _nonneg,
                        help="stack whose pooled representation is evaluated"),
    "eval.knn_k": _item(_parse_int, 20, _pos_int,
                        help="neighbors for the k-NN evaluation"),
    "eval.probe_epochs": _item(_parse_int, 10, _pos_int,
                               help="linear probe training epochs"),
    "eval.probe_lr": _item(_parse_float, 1e-2, _positive,
                           help="linear probe learning rate"),

    "seed": _item(_parse_int, 0, _nonneg, help="master seed for all randomness"),
    "deterministic": _item(_parse_bool, True,
                           help="single-threaded bit-reproducible mode; blanks "
                                "the wall-clock column in metrics.csv"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Split config text into raw key/value strings, with line diagnostics."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {stripped!r}")
        key, value = stripped.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key before '='")
        if not value:
            raise ConfigError(f"{source}:{lineno}: missing value for {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _typed(key: str, raw: str) -> object:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    item = SCHEMA[key]
    try:
        value = item.parse(raw)
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} ({err})")
    if item.check is not None and not item.check(value):
        raise ConfigError(f"config key {key!r}: {raw!r} is not {item.expect}")
    return value


def resolve_config(file_values: dict[str, str] | None = None,
                   overrides: dict[str, str] | None = None) -> dict[str, object]:
    """Defaults, then file values, then overrides; each assignment validated."""
    cfg = {key: item.default for key, item in SCHEMA.items()}
    for layer in (file_values or {}), (overrides or {}):
        for key, raw in layer.items():
            cfg[key] = _typed(key, raw)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: dict[str, object]) -> None:
    stacks = cfg["model.stacks"]
    if len(cfg["loss.stack_weights"]) < stacks:
        raise ConfigError(
            f"config key 'loss.stack_weights': needs at least {stacks} entries "
            f"for {stacks} stacks, got {len(cfg['loss.stack_weights'])}")
    for k in range(stacks):
        for family in ("model.widths", "model.blocks"):
            key = f"{family}.{k}"
            if len(cfg[key]) != 4:
                raise ConfigError(f"config key {key!r}: needs exactly 4 entries")
            if any(v < 1 for v in cfg[key]):
                raise ConfigError(f"config key {key!r}: entries must be >= 1")
        dims = cfg[f"model.projector.{k}"]
        if dims is not None and (len(dims) != 3 or any(d < 1 for d in dims)):
            raise ConfigError(
                f"config key 'model.projector.{k}': needs 3 positive dims or none")
    if cfg["dataset.name"] in ("cifar10", "stl10") and not cfg["dataset.dir"]:
        raise ConfigError(
            "config key 'dataset.dir': required when dataset.name is "
            f"{cfg['dataset.name']!r}")
    if cfg["optim.min_lr"] > cfg["optim.lr"]:
        raise ConfigError("config key 'optim.min_lr': must not exceed optim.lr")
    if cfg["optim.warmup_epochs"] >= cfg["train.epochs"]:
        raise ConfigError("config key 'optim.warmup_epochs': must be smaller "
                          "than train.epochs")
    if cfg["eval.stack"] >= stacks:
        raise ConfigError(
            f"config key 'eval.stack': stack {cfg['eval.stack']} does not exist "
            f"in a {stacks}-stack model")


def load_config(path: str | None, overrides: list[str] | None = None) -> dict[str, object]:
    """Read an optional config file, apply key=value override strings."""
    file_values: dict[str, str] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_values = parse_config_text(fh.read(), source=path)
        except OSError as err:
            raise ConfigError(f"cannot read config {path!r}: {err}")
    parsed_overrides: dict[str, str] = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        parsed_overrides[key.strip()] = value.strip()
    return resolve_config(file_values, parsed_overrides)


def config_strings(cfg: dict[str, object]) -> dict[str, str]:
    """Render a resolved config back to canonical value strings.

    The strings re-parse to the same typed values through resolve_config, so
    run logs and checkpoint metadata can store configs in one validated
    format.
    """
    out = {}
    for key, value in cfg.items():
        if isinstance(value, bool):
            out[key] = "true" if value else "false"
        elif isinstance(value, tuple):
            out[key] = ",".join(repr(v) for v in value)
        elif value is None:
            out[key] = "none"
        elif isinstance(value, float):
            out[key] = repr(value)
        else:
            out[key] = str(value)
    return out


def loss_weights_from(cfg: dict[str, object]) -> LossWeights:
    return LossWeights(inv=cfg["loss.lambda"], var=cfg["loss.mu"],
                       cov=cfg["loss.nu"], gamma=cfg["loss.gamma"],
                       epsilon=cfg["loss.epsilon"])


def stack_weights_from(cfg: dict[str, object]) -> tuple[float, ...]:
    return tuple(cfg["loss.stack_weights"][:cfg["model.stacks"]])


def _stack0_stem(cfg: dict[str, object]) -> str:
    # 96 px inputs take the downsampling stem; small images keep full extent
    if cfg["dataset.name"] == "stl10":
        return "image"
    return "image_cifar"


def model_pieces_from(cfg: dict[str, object]) -> tuple[StackSpec, list[EncoderConfig], list]:
    """Expand the flat config into the pieces build_sjea consumes."""
    stacks = cfg["model.stacks"]
    proj_dims = [cfg[f"model.projector.{k}"] for k in range(stacks)]
    spec = StackSpec(
        num_stacks=stacks,
        projector_enabled=tuple(d is not None for d in proj_dims),
        stack_input=cfg["model.stack_input"],
        stop_gradient=cfg["model.stop_gradient"],
    )
    enc_cfgs = []
    for k in range(stacks):
        widths = cfg[f"model.widths.{k}"]
        blocks = cfg[f"model.blocks.{k}"]
        if k == 0:
            enc_cfgs.append(EncoderConfig(stem=_stack0_stem(cfg), in_channels=3,
                                          widths=widths, blocks=blocks))
        else:
            prev_widths = cfg[f"model.widths.{k - 1}"]
            feed = (proj_dims[k - 1][2]
                    if cfg["model.stack_input"] == "projector_embedding"
                    else prev_widths[3])
            enc_cfgs.append(EncoderConfig(stem="feature", in_channels=feed,
                                          widths=widths, blocks=blocks))
    return spec, enc_cfgs, proj_dims


def describe_schema() -> str:
    """Human-readable key listing for --help and the docs."""
    lines = []
    for key in sorted(SCHEMA):
        item = SCHEMA[key]
        default = item.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        elif default is None:
            default = "none"
        elif isinstance(default, bool):
            default = str(default).lower()
        lines.append(f"{key} (default: {default}) - {item.help}")
    return "\n".join(lines)
