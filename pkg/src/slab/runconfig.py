"""Flat key=value run configuration: built-in defaults < config file < flags.

Every command declares its options once; unknown keys are rejected and the
fully resolved configuration is echoed into the run's output directory so a
run can be replayed from its artifacts alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .util import sha256_file


class ConfigError(ValueError):
    pass


def parse_bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def int_list(s) -> list[int]:
    if isinstance(s, list):
        return s
    return [int(x) for x in str(s).split(",") if x.strip()]


def float_list(s) -> list[float]:
    if isinstance(s, list):
        return s
    return [float(x) for x in str(s).split(",") if x.strip()]


def str_list(s) -> list[str]:
    if isinstance(s, list):
        return s
    return [x.strip() for x in str(s).split(",") if x.strip()]


@dataclass
class Opt:
    key: str                                  # snake_case; flag is --kebab-case
    parse: Callable[[str], Any]
    default: Any = None
    help: str = ""
    required: bool = False
    is_input: bool = False                    # participates in inputs.sha256


def flag_name(key: str) -> str:
    return "--" + key.replace("_", "-")


def load_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve(opts: list[Opt], config_file: str | None, flag_values: dict[str, Any]) -> dict[str, Any]:
    by_key = {o.key: o for o in opts}
    resolved = {o.key: o.default for o in opts}
    if config_file:
        for key, raw in load_config_file(config_file).items():
            if key not in by_key:
                raise ConfigError(f"unknown config key '{key}' "
                                  f"(known: {', '.join(sorted(by_key))})")
            resolved[key] = by_key[key].parse(raw)
    for key, raw in flag_values.items():
        if raw is None:
            continue
        if key not in by_key:
            raise ConfigError(f"unknown option '{key}'")
        resolved[key] = by_key[key].parse(raw)
    for o in opts:
        if o.required and resolved[o.key] is None:
            raise ConfigError(f"missing required option {flag_name(o.key)} "
                              f"(config key '{o.key}')")
    return resolved


def render_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(render_value(x) for x in v)
    return "" if v is None else str(v)


def write_resolved(config: dict[str, Any], opts: list[Opt], out_dir) -> None:
    """Echo the effective configuration and input fingerprints into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={render_value(config[k])}" for k in sorted(config)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")
    fingerprints = []
    for o in opts:
        if not o.is_input or config.get(o.key) in (None, ""):
            continue
        values = config[o.key] if isinstance(config[o.key], list) else [config[o.key]]
        for v in values:
            p = Path(str(v))
            if p.is_file():
                fingerprints.append(f"{o.key} {p} {sha256_file(p)}")
    if fingerprints:
        (out_dir / "inputs.sha256").write_text("\n".join(fingerprints) + "\n", encoding="utf-8")
