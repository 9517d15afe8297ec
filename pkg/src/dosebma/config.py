"""Run configuration: an INI file with a fixed, typed schema.

Every key has a default; an empty file yields the defaults. Unknown sections
or keys are rejected so that typos cannot silently fall back to a default.

    [mcmc]
    n_samples = 40000
    burn_in = 10000

    [benchmark]
    slopes = 3, 12, 20
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ValidationError

__all__ = ["SCHEMA", "defaults", "load_config", "loads_config", "dump_config", "ConfigError"]


class ConfigError(ValidationError):
    pass


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    fmt: Callable[[Any], str] = str
    check: Callable[[Any], bool] = lambda v: True
    help: str = ""


def _float(s: str) -> float:
    return float(s)


def _int(s: str) -> int:
    return int(s)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


def _fmt_floats(v) -> str:
    return ", ".join(repr(float(x)) for x in v)


def _fmt_strs(v) -> str:
    return ", ".join(v)


def _fmt_float(v) -> str:
    return repr(float(v))


def _choice(*options):
    return lambda v: v in options


METHOD_NAMES = ("conv-mean", "conv-median", "bma-original", "bma-cm", "bma-cmd")

SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": Key(_int, 0, check=lambda v: v >= 0),
        "threads": Key(_int, 1, check=lambda v: v >= 1),
    },
    "mcmc": {
        "n_samples": Key(_int, 40000, check=lambda v: v >= 1),
        "burn_in": Key(_int, 10000, check=lambda v: v >= 0),
        "sampler": Key(str, "samc", check=_choice("samc", "plain-mh")),
        "partition": Key(str, "model", check=_choice("model", "energy")),
        "n_regions": Key(_optional_int, None, fmt=lambda v: "none" if v is None else str(v)),
        "t0": Key(_float, 5000.0, fmt=_fmt_float, check=lambda v: v >= 1),
        "p_within": Key(_float, 0.5, fmt=_fmt_float, check=lambda v: 0 <= v < 1),
        "adapt": Key(_bool, True, fmt=lambda v: "true" if v else "false"),
    },
    "priors": {
        "alpha_variance": Key(_float, 1000.0, fmt=_fmt_float, check=lambda v: v > 0),
        "beta_prior_mean": Key(_float, 100.0, fmt=_fmt_float, check=lambda v: v > 0),
    },
    "dose": {
        "scenario": Key(str, "total", check=_choice("external", "total")),
        "n_subjects": Key(_int, 500, check=lambda v: v >= 2),
        "n_vectors": Key(_int, 200, check=lambda v: v >= 1),
        "n_resamples": Key(_int, 100, check=lambda v: v >= 2),
        "male_fraction": Key(_float, 0.45, fmt=_fmt_float, check=lambda v: 0 <= v <= 1),
    },
    "benchmark": {
        "slopes": Key(_floats, (3.0, 12.0, 20.0), fmt=_fmt_floats, check=lambda v: len(v) > 0 and min(v) >= 0),
        "n_groups": Key(_int, 10, check=lambda v: v >= 1),
        "per_group": Key(_int, 1, check=lambda v: v >= 1),
        "methods": Key(_strs, METHOD_NAMES, fmt=_fmt_strs,
                       check=lambda v: len(v) > 0 and all(m in METHOD_NAMES for m in v)),
        "n_samples": Key(_int, 20000, check=lambda v: v >= 1),
        "burn_in": Key(_int, 5000, check=lambda v: v >= 0),
        "baseline_shift": Key(_float, -4.6, fmt=_fmt_float, check=math.isfinite),
        "alpha_age": Key(_float, 2.0, fmt=_fmt_float, check=math.isfinite),
        "alpha_male": Key(_float, 1.5, fmt=_fmt_float, check=math.isfinite),
        "alpha_female": Key(_float, 3.0, fmt=_fmt_float, check=math.isfinite),
    },
    "sweep": {
        "gsd": Key(_floats, (1.0, 1.3, 1.5, 2.0, 3.0), fmt=_fmt_floats, check=lambda v: len(v) > 0 and min(v) >= 1),
        "true_beta": Key(_float, 12.0, fmt=_fmt_float, check=lambda v: v > 0),
        "n_sets": Key(_int, 20, check=lambda v: v >= 1),
        "methods": Key(_strs, ("bma-original", "bma-cm", "bma-cmd"), fmt=_fmt_strs,
                       check=lambda v: len(v) > 0 and all(m in METHOD_NAMES for m in v)),
    },
}

PAPER_SCALE = {
    ("dose", "n_subjects"): 2376,
    ("dose", "n_vectors"): 5000,
    ("benchmark", "per_group"): 3,
    ("benchmark", "n_samples"): 40000,
    ("benchmark", "burn_in"): 10000,
}


def defaults() -> dict[str, dict[str, Any]]:
    return {sec: {k: key.default for k, key in keys.items()} for sec, keys in SCHEMA.items()}


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            if k == key:
                return n
    return None


def loads_config(text: str, source: str = "<config>") -> dict[str, dict[str, Any]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    tree = defaults()
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}:{_line_of(text, sec, None)}: unknown section [{sec}]")
        for k, raw in parser.items(sec):
            line = _line_of(text, sec, k)
            if k not in SCHEMA[sec]:
                raise ConfigError(f"{source}:{line}: unknown key {k!r} in [{sec}]")
            spec = SCHEMA[sec][k]
            try:
                value = spec.parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {k!r}: {exc}") from None
            if not spec.check(value):
                raise ConfigError(f"{source}:{line}: invalid value for {k!r}: {raw!r}")
            tree[sec][k] = value
    return tree


def load_config(path) -> dict[str, dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return loads_config(p.read_text(), str(p))


def apply_paper_scale(tree: dict) -> dict:
    out = {sec: dict(vals) for sec, vals in tree.items()}
    for (sec, k), v in PAPER_SCALE.items():
        out[sec][k] = v
    return out


def dump_config(tree: dict) -> str:
    """INI text that :func:`loads_config` parses back to ``tree``."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for k, spec in keys.items():
            lines.append(f"{k} = {spec.fmt(tree[sec][k])}")
        lines.append("")
    return "\n".join(lines)
