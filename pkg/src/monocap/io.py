"""Serialization of spaces, fields, vertex sets and reports; atomic writes and run manifests."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PreconditionError
from .mmspace import RadialField, ScalarField, Space, matched_ball, vertices_in_ball


class ConfigError(Exception):
    """Malformed configuration or missing input files (exit code 1)."""


def _num(x) -> str:
    return format(float(x), ".17g")


def write_atomic(path, data: str | bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    return write_atomic(path, dumps(obj))


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc


def versions() -> dict:
    import pyamg
    import scipy
    return {"monocap": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pyamg": pyamg.__version__, "python": platform.python_version()}


def write_manifest(output, command: str, parameters: dict, started: float, outputs=(),
                   config: dict | None = None) -> Path:
    """Run manifest next to an output: command, parameters, versions and wall time.

    config, when given, is the complete run configuration; together with the
    working directory it is enough to replay the run.
    """
    output = Path(output)
    record = {"command": command, "parameters": parameters, "versions": versions(),
              "wallTime": time.time() - started, "outputs": [str(p) for p in (outputs or [output])]}
    if config is not None:
        record["config"] = config
        record["cwd"] = os.getcwd()
    return write_json(output.with_name(output.name + ".manifest.json"), record)


# -- spaces ---------------------------------------------------------------------

def space_to_dict(space: Space, build: dict | None = None) -> dict:
    out = {"backend": space.backend, "N": space.N, "label": space.label,
           "crossSectionMass": space.cross_section_mass, "metric": space.metric}
    if space.r_min is not None:
        out["rMin"], out["rMax"] = space.r_min, space.r_max
    if build is not None:
        out["build"] = build
    if space.is_radial:
        return out
    pos = space.positions
    out["vertices"] = [{"id": i, "pos": [] if pos is None else pos[i].tolist(), "measure": float(m)}
                       for i, m in enumerate(space.measure)]
    out["edges"] = [{"a": int(a), "b": int(b), "weight": float(w), "length": float(ln)}
                    for (a, b), w, ln in zip(space.edges, space.weight, space.length)]
    out["boundary"] = np.flatnonzero(space.boundary).tolist()
    if space.grid is not None:
        out["grid"] = space.grid
    return out


def space_from_dict(obj: dict) -> Space:
    try:
        backend = obj["backend"]
        N = float(obj["N"])
        if backend == "radial":
            return Space("radial", N, label=obj.get("label", ""), cross_section_mass=obj["crossSectionMass"],
                         r_min=obj["rMin"], r_max=obj["rMax"], metric=obj.get("metric", {"kind": "cone"}))
        verts = sorted(obj["vertices"], key=lambda v: v["id"])
        if [v["id"] for v in verts] != list(range(len(verts))):
            raise ConfigError("vertex ids must be 0..n-1")
        measure = np.array([v["measure"] for v in verts], dtype=float)
        positions = None
        if verts and verts[0].get("pos"):
            positions = np.array([v["pos"] for v in verts], dtype=float)
        edges = np.array([[e["a"], e["b"]] for e in obj["edges"]], dtype=np.int64).reshape(-1, 2)
        weight = np.array([e["weight"] for e in obj["edges"]], dtype=float)
        length = np.array([e.get("length", 1.0) for e in obj["edges"]], dtype=float)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"space file is missing field {exc}") from exc
    boundary = None
    if "boundary" in obj:
        boundary = np.zeros(len(measure), dtype=bool)
        boundary[np.asarray(obj["boundary"], dtype=np.int64)] = True
    return Space(backend, N, label=obj.get("label", ""), measure=measure, edges=edges, weight=weight,
                 length=length, positions=positions, boundary=boundary,
                 metric=obj.get("metric", {"kind": "graph"}), grid=obj.get("grid"),
                 cross_section_mass=obj.get("crossSectionMass"), r_min=obj.get("rMin"), r_max=obj.get("rMax"))


def save_space(path, space: Space, build: dict | None = None) -> Path:
    return write_json(path, space_to_dict(space, build))


def load_space(path) -> Space:
    return space_from_dict(read_json(path))


# -- fields -------------------------------------------------------------------------

def field_to_csv(field: ScalarField) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "value"])
    for i, (v, m) in enumerate(zip(field.values, field.mask)):
        w.writerow([i, _num(v) if m else "nan"])
    return buf.getvalue()


def save_field(path, field) -> Path:
    if isinstance(field, RadialField):
        return write_json(path, {"radial": {"a": field.a, "b": field.b, "p": field.p,
                                            "clamp": list(field.clamp) if field.clamp else None}})
    return write_atomic(path, field_to_csv(field))


def load_field(path, space: Space):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        obj = json.loads(text)["radial"]
        if not space.is_radial:
            raise ConfigError("radial field given for a graph space")
        clamp = tuple(obj["clamp"]) if obj.get("clamp") else None
        return RadialField(space, obj["a"], obj["b"], obj["p"], clamp=clamp)
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or "id" not in rows[0] or "value" not in rows[0]:
        raise ConfigError(f"{path}: field CSV needs columns id,value")
    if space.is_radial:
        raise ConfigError("vertex field given for a radial space")
    vals = np.full(space.n, np.nan)
    for r in rows:
        i = int(r["id"])
        if not 0 <= i < space.n:
            raise ConfigError(f"{path}: vertex id {i} out of range")
        vals[i] = float(r["value"])
    return ScalarField(space, vals)


def write_rows(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(x) if isinstance(x, (float, np.floating)) else x for x in row])
    return write_atomic(path, buf.getvalue())


# -- vertex sets ------------------------------------------------------------------------

def load_vertex_set(path, space: Space) -> np.ndarray:
    """A JSON list of vertex ids, or {"ball": {"center": id-or-point, "radius": r, "matched": bool, "side": ...}}."""
    obj = read_json(path)
    return vertex_set_from_obj(obj, space)


def vertex_set_from_obj(obj, space: Space) -> np.ndarray:
    if isinstance(obj, list):
        idx = np.asarray(obj, dtype=np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= space.n):
            raise ConfigError("vertex set has ids out of range")
        return idx
    if isinstance(obj, dict) and "ball" in obj:
        b = obj["ball"]
        center = b["center"]
        center = int(center) if isinstance(center, int) else np.asarray(center, dtype=float)
        if b.get("matched", True):
            return matched_ball(space, center, float(b["radius"]), b.get("side", "inner"))
        return vertices_in_ball(space, center, float(b["radius"]))
    if isinstance(obj, dict) and "radiusBelow" in obj:
        r = np.linalg.norm(space.positions, axis=1)
        return np.flatnonzero(r <= float(obj["radiusBelow"]) * (1 + 1e-12))
    raise ConfigError("vertex set must be a list of ids, a {ball: ...} or a {radiusBelow: r} object")


def parse_grid(text: str) -> np.ndarray:
    """'a:b:n' -> n evenly spaced points from a to b."""
    try:
        a, b, n = text.split(":")
        return np.linspace(float(a), float(b), int(n))
    except ValueError as exc:
        raise ConfigError(f"grid {text!r} must look like a:b:n") from exc


def parse_list(text: str, cast=float) -> list:
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}") from exc


def check_exists(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    return p


__all__ = ["ConfigError", "write_atomic", "write_json", "read_json", "dumps", "write_manifest", "versions",
           "space_to_dict", "space_from_dict", "save_space", "load_space", "save_field", "load_field",
           "field_to_csv", "write_rows", "load_vertex_set", "vertex_set_from_obj", "parse_grid", "parse_list",
           "check_exists", "PreconditionError"]
