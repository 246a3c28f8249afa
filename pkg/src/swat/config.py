"""Flat key=value config files mapped onto TrainConfig.

The format is one `key=value` per line, `#` comments, blank lines
ignored. Unknown keys are rejected, bad values are reported with the key
name and line number. An empty file yields the full defaults (the
standard 150-epoch CIFAR schedule with SGD momentum 0.9 and weight decay
5e-4).
"""

from dataclasses import fields

from .engine import TrainConfig

# the canonical 150-epoch step schedule used when epochs stay at default
DEFAULT_SCHEDULE = ((1, 50, 0.1), (51, 100, 0.01), (101, 150, 0.001))


class ConfigError(ValueError):
    pass


def _parse_bool(key, raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"key '{key}': expected a boolean, got {raw!r}")


def parse_schedule(raw):
    """'1-50:0.1,51-100:0.01' -> ((1, 50, 0.1), (51, 100, 0.01))."""
    ranges = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            span, rate = part.split(":")
            start, end = span.split("-")
            ranges.append((int(start), int(end), float(rate)))
        except ValueError:
            raise ConfigError(f"bad lr_schedule segment {part!r} "
                              f"(expected start-end:rate)") from None
    return tuple(ranges)


def format_schedule(schedule):
    return ",".join(f"{s}-{e}:{r!r}" for s, e, r in schedule)


_OPTIONAL_INT = ("freeze_topology_epoch",)
_OPTIONAL_BOOL = ("exempt_first", "exempt_last")


def _coerce(key, raw, kind):
    raw = raw.strip()
    if key in _OPTIONAL_INT or key in _OPTIONAL_BOOL:
        if raw.lower() in ("", "none", "auto"):
            return None
        return int(raw) if key in _OPTIONAL_INT else _parse_bool(key, raw)
    if key == "lr_schedule":
        return parse_schedule(raw)
    if kind is bool:
        return _parse_bool(key, raw)
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"key '{key}': expected {kind.__name__}, got {raw!r}") from None


def load_config(path=None, text=None, overrides=None):
    """Parse a config file (or literal text) into a validated TrainConfig."""
    if text is None:
        text = ""
        if path is not None:
            with open(path) as f:
                text = f.read()
    known = {f.name: f.type for f in fields(TrainConfig)}
    kinds = {"epochs": int, "batch_size": int, "warmup_epochs": int, "seed": int,
             "period": int, "train_samples": int, "test_samples": int,
             "eval_batch_size": int, "freeze_topology_epoch": int,
             "lr": float, "momentum": float, "weight_decay": float,
             "label_smoothing": float, "sparsity": float, "min_density": float,
             "nesterov": bool, "mask_nonactive_gradients": bool, "augment": bool,
             "weight_decay_all": bool, "exempt_first": bool, "exempt_last": bool,
             "strategy": str, "scope": str, "mode": str, "arch": str,
             "dataset": str, "dtype": str, "lr_schedule": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        try:
            values[key] = _coerce(key, raw, kinds[key])
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    if overrides:
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
    if "lr_schedule" not in values and values.get("epochs", 150) == 150:
        values.setdefault("lr_schedule", DEFAULT_SCHEDULE)
    cfg = TrainConfig(**values)
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def dump_config(cfg):
    """Serialize a TrainConfig back to the flat key=value format."""
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "lr_schedule":
            v = format_schedule(cfg.schedule())
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
