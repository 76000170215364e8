"""Typed INI configuration and run manifests.

Sections mirror the package modules.  Every key has a type and a default;
unknown sections or keys are errors so a typo cannot silently fall back to a
default.  Empty values mean "unset" for optional keys.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import platform
from pathlib import Path

import numpy as np

__all__ = ["SCHEMA", "ConfigError", "load_config", "default_config", "config_text",
           "file_sha256", "write_manifest", "RUN_DIR_ENV"]

RUN_DIR_ENV = "CONVMOVE_RUN_DIR"


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text: str):
        return None if text.strip() == "" else conv(text)
    parse.__name__ = f"optional {conv.__name__}"
    return parse


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
        "jobs": (int, 1),
    },
    "kernels": {
        "family": (str, "gaussian-integrated"),
        "m_single": (int, 800),
        "m_group": (int, 260),
        "t_start": (float, 0.0),
        "t_end": (float, 1.0),
    },
    "warp": {
        "n_centers": (int, 100),
        "scale_min": (float, 0.01),
        "scale_max": (float, 0.0625),
        "n_scales": (int, 10),
        "magnitude_min": (float, 0.6),
        "magnitude_max": (float, 0.8),
        "n_magnitudes": (int, 10),
    },
    "mcmc": {
        "phi_min": (float, 0.001),
        "phi_max": (float, 0.02),
        "n_phi": (int, 100),
        "meas_var_shape": (float, 2.0),
        "meas_var_scale": (float, 1.0558e-10),
        "ratio_sd_upper": (float, 20.0),
        "iterations": (int, 20000),
        "burn_in": (int, 5000),
        "thin": (int, 5),
        "proposal_sd": (float, 0.3),
        "top_k": (int, 20),
        "include_unwarped": (_bool, True),
    },
    "bma": {
        "second_stage_iterations": (int, 10000),
    },
    "gp": {
        "n_draws": (int, 1000),
        "n_pred": (int, 200),
        "level": (float, 0.95),
    },
    "network": {
        "latent_m": (int, 15),
        "phi": (float, 0.01),
        "sigma_z": (float, 10.0),
        "phi_z": (float, 0.08),
        "meas_var_shape": (float, 1e-3),
        "meas_var_scale": (float, 1e-3),
        "ratio_shape": (float, 1e-3),
        "ratio_scale": (float, 1e-3),
        "phi_shape": (float, 2.0),
        "phi_rate": (float, 200.0),
        "origin_var_shape": (float, 1.0),
        "origin_var_scale": (float, 10.0),
        "iterations": (int, 2000),
        "burn_in": (_opt(int), None),
        "thin": (int, 1),
        "per_draw": (int, 4),
        "fit_independent": (_bool, True),
        "holdout": (str, ""),
    },
    "simulate": {
        "kind": (str, "single"),
        "n": (int, 200),
        "n_individuals": (int, 3),
        "meas_var": (float, 1e-4),
        "proc_var": (float, 0.04),
        "range": (float, 0.01),
        "m": (int, 800),
        "warp_center": (_opt(float), None),
        "warp_scale": (float, 0.03),
        "warp_magnitude": (float, 0.7),
        "gaps": (_floats, ()),
        "latent_m": (int, 15),
        "phi_z": (float, 0.08),
        "latent_positions": (_floats, ()),
    },
    "cli_io": {
        "xy_km": (_bool, False),
        "center_lon": (_opt(float), None),
        "center_lat": (_opt(float), None),
        "standardize": (_bool, True),
        "rescale_time": (_bool, True),
        "individual": (str, ""),
        "plot_format": (str, "svg"),
    },
}


def default_config() -> dict:
    return {sec: {k: v[1] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Parse ``path`` against the schema; unknown keys raise :class:`ConfigError`."""
    cfg = default_config()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
        unknown = []
        bad = []
        for sec in cp.sections():
            if sec not in SCHEMA:
                unknown.append(f"[{sec}]")
                continue
            for key, text in cp.items(sec):
                if key not in SCHEMA[sec]:
                    unknown.append(f"{sec}.{key}")
                    continue
                try:
                    cfg[sec][key] = SCHEMA[sec][key][0](text)
                except ValueError as exc:
                    bad.append(f"{sec}.{key}: {exc}")
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(unknown))
        if bad:
            raise ConfigError("invalid config values: " + "; ".join(bad))
    for (sec, key), value in (overrides or {}).items():
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown config key {sec}.{key}")
        cfg[sec][key] = value
    return cfg


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_text(cfg: dict) -> str:
    """Canonical INI rendering; parsing it back gives the same config."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {_fmt(cfg[sec][k])}" for k in keys)
        lines.append("")
    return "\n".join(lines)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir, command: str, cfg: dict, seed, outputs, inputs=(), extra=None) -> Path:
    """Write ``manifest_<command>.json`` listing every output with its hash.

    Version strings come from installed packages; no timestamps are recorded
    so repeated runs give identical manifests.
    """
    import matplotlib
    import scipy

    from . import __version__

    run_dir = Path(run_dir)
    text = config_text(cfg)
    doc = {
        "command": command,
        "seed": seed,
        "config": cfg,
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "versions": {"convmove": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "matplotlib": matplotlib.__version__},
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {os.path.relpath(p, run_dir): file_sha256(p) for p in sorted(map(str, outputs))},
    }
    if extra:
        doc.update(extra)
    path = run_dir / f"manifest_{command}.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, tuple):
        return list(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
