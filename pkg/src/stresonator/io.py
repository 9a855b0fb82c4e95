"""Config documents, observation/grid CSV files, NDJSON reports and manifests."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .basis import BasisSet, DomainSpec, eval_basis
from .inference import ObservationBatch
from .model import ModelSpec

__all__ = [
    "ConfigError",
    "DataError",
    "load_config",
    "model_from_config",
    "time_grid",
    "regular_grid",
    "read_observations",
    "write_observations",
    "write_rows",
    "coord_names",
    "read_points",
    "write_grid_csv",
    "write_design_csv",
    "write_ndjson",
    "read_ndjson",
    "dump_config",
    "write_manifest",
    "PLOT_SCRIPT",
]


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def load_config(path) -> dict:
    """Read a YAML or JSON config document.

    A manifest written by a previous run is accepted too; its resolved
    ``config`` block is returned.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        # YAML 1.1 reads JSON numbers such as 1e-06 as strings
        doc = json.loads(text)
    except ValueError:
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"not a valid YAML/JSON document: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, Mapping):
        raise ConfigError("top level must be a mapping")
    if "manifest_version" in doc:
        if not isinstance(doc.get("config"), Mapping):
            raise ConfigError("manifest has no config block", "config")
        doc = doc["config"]
    return _plain(doc)


def _plain(obj):
    """Recursively convert to JSON-compatible builtins."""
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def model_from_config(cfg: Mapping, key: str = "model") -> ModelSpec:
    """Build a ``ModelSpec``; errors name the config entry at fault."""
    if not isinstance(cfg, Mapping):
        raise ConfigError("expected a mapping", key)
    for required in ("domain", "n_basis", "components"):
        if required not in cfg:
            raise ConfigError("missing entry", f"{key}.{required}")
    if "noise_var" not in cfg and "noise_std" not in cfg:
        raise ConfigError("missing entry (noise_var or noise_std)", f"{key}.noise_var")
    try:
        DomainSpec.from_config(cfg["domain"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(_reason(exc), f"{key}.domain") from None
    comps = cfg["components"]
    if not isinstance(comps, list) or not comps:
        raise ConfigError("expected a non-empty list", f"{key}.components")
    from .model import ComponentSpec

    for j, c in enumerate(comps):
        where = f"{key}.components[{j}]"
        if not isinstance(c, Mapping) or "kernel" not in c:
            raise ConfigError("expected a mapping with a kernel block", where)
        try:
            ComponentSpec.from_config(c)
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ConfigError(_reason(exc), where) from None
    try:
        return ModelSpec.from_config(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(_reason(exc), key) from None


def _reason(exc: Exception) -> str:
    if isinstance(exc, KeyError):
        return f"missing entry {exc.args[0]!r}"
    return str(exc)


def time_grid(spec, key: str = "times") -> np.ndarray:
    """Times from a list or a ``{start, stop, count}`` mapping (inclusive)."""
    if isinstance(spec, Mapping):
        try:
            t = np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["count"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(_reason(exc), key) from None
    else:
        try:
            t = np.atleast_1d(np.asarray(spec, dtype=float))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), key) from None
    if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0) or not np.all(np.isfinite(t)):
        raise ConfigError("times must be a non-empty strictly increasing list", key)
    return t


def regular_grid(domain: DomainSpec, resolution: int) -> np.ndarray:
    """Plot-ready evaluation points covering the domain.

    Interval and rectangle grids include the boundary; disk grids are the
    square grid clipped to the closed disk; sphere grids are
    latitude/longitude nodes (``resolution`` latitudes, ``2·resolution``
    longitudes) mapped to Cartesian points.
    """
    resolution = int(resolution)
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    g = domain.geometry
    if domain.kind == "interval":
        return np.linspace(-g[0], g[0], resolution)[:, None]
    if domain.kind in ("rectangle", "disk"):
        hx, hy = (g[0], g[1]) if domain.kind == "rectangle" else (g[0], g[0])
        X, Y = np.meshgrid(np.linspace(-hx, hx, resolution), np.linspace(-hy, hy, resolution), indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        if domain.kind == "disk":
            pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= g[0] * (1 + 1e-12)]
            r = np.hypot(pts[:, 0], pts[:, 1])
            scale = np.where(r > g[0], g[0] / np.maximum(r, 1e-300), 1.0)
            pts = pts * scale[:, None]
        return pts
    lat = np.linspace(-90, 90, resolution + 2)[1:-1]
    lon = np.linspace(-180, 180, 2 * resolution, endpoint=False)
    LA, LO = np.meshgrid(lat, lon, indexing="ij")
    from .basis import lonlat_to_cartesian

    return lonlat_to_cartesian(LO.ravel(), LA.ravel(), g[0])


def coord_names(dim: int) -> list[str]:
    return [f"x{i + 1}" for i in range(dim)]


def read_observations(path, domain: DomainSpec | None = None) -> ObservationBatch:
    """Read a ``t, x1[, x2[, x3]], y`` CSV file into an ``ObservationBatch``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read observations: {exc}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0] != "t" or header[-1] != "y" or header[1:-1] != coord_names(len(header) - 2):
        raise DataError(f"{path}: header must be t, x1[, x2[, x3]], y; got {', '.join(header)}")
    if len(header) - 2 > 3:
        raise DataError(f"{path}: at most three coordinate columns are supported")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if body.shape[0] == 0:
        raise DataError(f"{path}: no observation rows")
    if not np.all(np.isfinite(body)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(body), axis=1))[0]) + 2
        raise DataError(f"{path}: non-finite value on line {bad}")
    X = body[:, 1:-1]
    if domain is not None:
        if X.shape[1] != domain.coord_dim:
            raise DataError(f"{path}: {domain.kind} needs {domain.coord_dim} coordinate columns, got {X.shape[1]}")
        try:
            domain.check_points(X)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
    return ObservationBatch.from_arrays(body[:, 0], X, body[:, -1])


def write_observations(path, batch: ObservationBatch) -> None:
    t, X, y = batch.flat()
    header = ["t"] + coord_names(X.shape[1]) + ["y"]
    write_rows(path, header, np.column_stack([t, X, y]), "%.17g")


def read_points(path, with_time: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Query points ``t, x1..`` (or ``x1..`` alone) from a CSV file."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read points: {exc}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    coords = header[1:] if with_time else header
    if (with_time and header[:1] != ["t"]) or not coords or coords != coord_names(len(coords)):
        expected = "t, x1[, x2[, x3]]" if with_time else "x1[, x2[, x3]]"
        raise DataError(f"{path}: header must be {expected}; got {', '.join(header)}")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(body)):
        raise DataError(f"{path}: non-finite values")
    if with_time:
        return body[:, 0], body[:, 1:]
    return None, body


def _fmt(value: float, fmt: str) -> str:
    return fmt % value if math.isfinite(value) else ("nan" if math.isnan(value) else ("inf" if value > 0 else "-inf"))


def write_rows(path, header: Sequence[str], rows: np.ndarray, fmt: str = "%.10g") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.atleast_2d(rows):
            w.writerow([_fmt(float(v), fmt) for v in row])


def write_grid_csv(path, times, points: np.ndarray, columns: Mapping[str, np.ndarray], fmt: str = "%.10g") -> None:
    """Long-format grid file: one row per (time, point) with the given columns.

    Each column array has shape ``(T, P)``.  With ``times=None`` the arrays
    have shape ``(P,)`` and no ``t`` column is written.
    """
    points = np.asarray(points, dtype=float)
    points = points[:, None] if points.ndim == 1 else points
    P = points.shape[0]
    names = list(columns)
    if times is None:
        data = [points] + [np.asarray(columns[n], dtype=float).reshape(P, 1) for n in names]
        write_rows(path, coord_names(points.shape[1]) + names, np.hstack(data), fmt)
        return
    times = np.asarray(times, dtype=float)
    T = times.size
    t = np.repeat(times, P)[:, None]
    X = np.tile(points, (T, 1))
    data = [t, X] + [np.asarray(columns[n], dtype=float).reshape(T * P, 1) for n in names]
    write_rows(path, ["t"] + coord_names(points.shape[1]) + names, np.hstack(data), fmt)


def write_design_csv(path, basis: BasisSet, points: np.ndarray) -> None:
    """``Φ`` at ``points`` with one column per mode, headed by mode descriptors."""
    points = np.asarray(points, dtype=float)
    points = points[:, None] if points.ndim == 1 else points
    Phi = eval_basis(basis, points)
    header = coord_names(points.shape[1]) + list(basis.descriptors)
    write_rows(path, header, np.hstack([points, Phi]), "%.17g")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Mapping):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def write_ndjson(path, records: Iterable[Mapping]) -> None:
    """One JSON object per line; non-finite floats become ``null``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_finite(_plain(rec)), default=_json_default, sort_keys=True))
            fh.write("\n")


def read_ndjson(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def dump_config(path, cfg: Mapping) -> None:
    """Write a config document that ``load_config`` reads back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(_plain(cfg), sort_keys=True), encoding="utf-8")


def write_manifest(out_dir, command: str, config: Mapping, outputs: Sequence[str], extra: Mapping | None = None) -> Path:
    """``manifest.json`` echoing the resolved config; reloadable as ``--config``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from . import __version__

    doc = {
        "manifest_version": 1,
        "package_version": __version__,
        "command": command,
        "config": _plain(config),
        "outputs": sorted(outputs),
    }
    if extra:
        doc.update(_plain(extra))
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(_finite(doc), indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


PLOT_SCRIPT = '''"""Plot a grid CSV written by the stresonator command line tool.

usage: python plot_grid.py FILE.csv [COLUMN] [--time T]

Needs matplotlib.  One-dimensional grids with a ``t`` column are drawn as
a space-time image; otherwise the chosen column is drawn against the
coordinates (at the requested time, or the first one).
"""
import csv
import sys

import matplotlib.pyplot as plt
import numpy as np


def main(argv):
    if not argv:
        print(__doc__)
        return 2
    path = argv[0]
    time = None
    if "--time" in argv:
        time = float(argv[argv.index("--time") + 1])
        argv = argv[: argv.index("--time")]
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    coords = [i for i, h in enumerate(header) if h.startswith("x")]
    values = [i for i, h in enumerate(header) if h != "t" and not h.startswith("x")]
    col = header.index(argv[1]) if len(argv) > 1 else values[0]
    has_t = header[0] == "t"
    fig, ax = plt.subplots()
    if has_t and len(coords) == 1 and time is None:
        t = np.unique(body[:, 0])
        x = np.unique(body[:, coords[0]])
        img = body[:, col].reshape(t.size, x.size)
        im = ax.imshow(img.T, origin="lower", aspect="auto", extent=[t[0], t[-1], x[0], x[-1]])
        ax.set_xlabel("t")
        ax.set_ylabel("x1")
        fig.colorbar(im, label=header[col])
    else:
        if has_t:
            t = np.unique(body[:, 0])
            pick = t[np.argmin(np.abs(t - (time if time is not None else t[0])))]
            body = body[body[:, 0] == pick]
            ax.set_title(f"t = {pick:g}")
        if len(coords) == 1:
            ax.plot(body[:, coords[0]], body[:, col])
            ax.set_xlabel("x1")
            ax.set_ylabel(header[col])
        else:
            sc = ax.scatter(body[:, coords[0]], body[:, coords[1]], c=body[:, col], s=8)
            ax.set_aspect("equal")
            fig.colorbar(sc, label=header[col])
    plt.show()
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
'''
