"""File formats, run manifests and atomic writes.

All logs are JSON Lines: one UTF-8 record per line, floats written in
shortest round-trip form. Output files open with a header record
``{"_manifest": {...}}`` that names the command, configuration, seed,
input checksums and software version together with a hash of all of
these. Readers skip any record whose only key starts with an underscore.
Timestamps of the run itself are deliberately not stored, so a rerun with
the same inputs reproduces every file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import jsonschema
import numpy as np

from .errors import SchemaError
from .kinematics import DRIVES, Odometry, SensorModel
from .scanmatch import DisplacementObs, Scan

__all__ = [
    "canonical_json",
    "sha256_file",
    "make_manifest",
    "atomic_write_text",
    "write_jsonl",
    "read_jsonl",
    "write_json",
    "read_json",
    "write_csv",
    "write_odometry",
    "read_odometry",
    "write_scans",
    "read_scans",
    "write_displacements",
    "read_displacements",
    "write_trajectory",
    "read_trajectory",
    "read_model",
    "DEFAULT_TICKS_PER_REV",
]

DEFAULT_TICKS_PER_REV = 2578.33

_UMASK = os.umask(0)
os.umask(_UMASK)

_NUM = {"type": "number"}
_POSE = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}

ODOMETRY_SCHEMA = {
    "type": "object",
    "required": ["t", "ticks"],
    "properties": {"t": _NUM, "ticks": {"type": "array", "items": {"type": "integer"}, "minItems": 1}},
}
SCAN_SCHEMA = {
    "type": "object",
    "required": ["t", "pts"],
    "properties": {
        "t": _NUM,
        "pts": {"type": "array", "minItems": 1,
                "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
    },
}
DISPLACEMENT_SCHEMA = {
    "type": "object",
    "required": ["tj", "tk", "s", "sigma"],
    "properties": {
        "tj": _NUM, "tk": _NUM, "s": _POSE,
        "sigma": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3},
        "flagged": {"type": "boolean"},
    },
}
TRAJECTORY_SCHEMA = {"type": "object", "required": ["t", "pose"], "properties": {"t": _NUM, "pose": _POSE}}
MODEL_SCHEMA = {
    "type": "object",
    "required": ["drive", "params"],
    "properties": {
        "drive": {"enum": sorted(DRIVES)},
        "params": {"type": "object", "additionalProperties": _NUM},
        "extrinsic": {"type": "object", "required": ["x", "y", "theta"],
                      "properties": {"x": _NUM, "y": _NUM, "theta": _NUM}},
    },
}


def canonical_json(obj: Any) -> str:
    """Deterministic compact JSON (sorted keys, no NaN)."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _plain(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_manifest(command: str, config: Mapping[str, Any], seed: int | None, inputs: Sequence[str | Path] = ()) -> dict:
    """Run description plus its SHA-256 ``hash``.

    Inputs are recorded by base name and content checksum, so moving the
    files does not change the manifest.
    """
    from . import __version__

    body = {
        "command": command,
        "config": _plain(dict(config)),
        "seed": seed,
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "version": __version__,
    }
    body["hash"] = hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()
    return body


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write through a temporary file in the same directory and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]], manifest: Mapping | None = None,
                meta: Mapping | None = None) -> None:
    lines = []
    if manifest is not None:
        lines.append(canonical_json({"_manifest": manifest}))
    if meta is not None:
        lines.append(canonical_json({"_meta": meta}))
    lines.extend(canonical_json(r) for r in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def _schema_error(path: Path, line: int | None, err: jsonschema.ValidationError) -> SchemaError:
    where = "/".join(str(p) for p in err.absolute_path) or "<record>"
    loc = f"{path.name}:{line}" if line is not None else path.name
    return SchemaError(f"{loc}: field {where}: {err.message}")


def read_jsonl(path: str | Path, schema: Mapping | None = None) -> tuple[list[dict], dict]:
    """Records of a JSONL file and its metadata records.

    Returns
    -------
    records : list of dict
    meta : dict
        Contents of ``_manifest``/``_meta`` header records keyed by name.

    Raises
    ------
    SchemaError
        On malformed JSON or a record violating ``schema``, naming the
        file, line and field.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc.strerror})") from exc
    validator = jsonschema.Draft7Validator(schema) if schema else None
    records, meta = [], {}
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path.name}:{i}: invalid JSON ({exc.msg})") from exc
        if isinstance(rec, dict) and len(rec) == 1 and next(iter(rec)).startswith("_"):
            meta[next(iter(rec))[1:]] = rec[next(iter(rec))]
            continue
        if validator is not None:
            err = next(iter(sorted(validator.iter_errors(rec), key=lambda e: list(e.absolute_path))), None)
            if err is not None:
                raise _schema_error(path, i, err)
        records.append(rec)
    return records, meta


def write_json(path: str | Path, obj: Mapping[str, Any], manifest: Mapping | None = None) -> None:
    data = dict(obj)
    if manifest is not None:
        data["_manifest"] = manifest
    atomic_write_text(path, json.dumps(_plain(data), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
                      + "\n")


def read_json(path: str | Path, schema: Mapping | None = None) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path.name}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if schema is not None:
        err = next(iter(jsonschema.Draft7Validator(schema).iter_errors(data)), None)
        if err is not None:
            raise _schema_error(path, None, err)
    return data


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]],
              manifest: Mapping | None = None) -> None:
    lines = []
    if manifest is not None:
        lines.append(f"# manifest: {manifest['hash']}")
    lines.append(",".join(header))
    for r in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Typed readers and writers
# ---------------------------------------------------------------------------


def write_odometry(path: str | Path, odo: Odometry, manifest: Mapping | None = None) -> None:
    recs = ({"t": float(t), "ticks": [int(v) for v in row]} for t, row in zip(odo.t, odo.ticks))
    write_jsonl(path, recs, manifest, meta={"ticks_per_rev": float(odo.ticks_per_rev)})


def read_odometry(path: str | Path, ticks_per_rev: float | None = None) -> Odometry:
    recs, meta = read_jsonl(path, ODOMETRY_SCHEMA)
    if len(recs) < 2:
        raise SchemaError(f"{Path(path).name}: odometry needs at least two samples")
    widths = {len(r["ticks"]) for r in recs}
    if len(widths) != 1:
        raise SchemaError(f"{Path(path).name}: records disagree on the number of wheels")
    tpr = ticks_per_rev or meta.get("meta", {}).get("ticks_per_rev", DEFAULT_TICKS_PER_REV)
    try:
        return Odometry([r["t"] for r in recs], [r["ticks"] for r in recs], float(tpr))
    except ValueError as exc:
        raise SchemaError(f"{Path(path).name}: {exc}") from exc


def write_scans(path: str | Path, scans: Sequence[Scan], manifest: Mapping | None = None) -> None:
    write_jsonl(path, ({"t": float(s.t), "pts": s.points.tolist()} for s in scans), manifest)


def read_scans(path: str | Path) -> list[Scan]:
    recs, _ = read_jsonl(path, SCAN_SCHEMA)
    return [Scan(float(r["t"]), np.asarray(r["pts"], float)) for r in recs]


def write_displacements(path: str | Path, obs: Sequence[DisplacementObs], manifest: Mapping | None = None) -> None:
    def rec(o: DisplacementObs) -> dict:
        d = {"tj": float(o.t_j), "tk": float(o.t_k), "s": o.s_hat.tolist(), "sigma": o.sigma.tolist()}
        if o.flagged:
            d["flagged"] = True
        return d

    write_jsonl(path, (rec(o) for o in obs), manifest)


def read_displacements(path: str | Path) -> list[DisplacementObs]:
    recs, _ = read_jsonl(path, DISPLACEMENT_SCHEMA)
    out = []
    for i, r in enumerate(recs, start=1):
        try:
            out.append(DisplacementObs(r["tj"], r["tk"], r["s"], r["sigma"], bool(r.get("flagged", False))))
        except ValueError as exc:
            raise SchemaError(f"{Path(path).name}: record {i}: {exc}") from exc
    return out


def write_trajectory(path: str | Path, t: Sequence[float], poses: np.ndarray, manifest: Mapping | None = None) -> None:
    write_jsonl(path, ({"t": float(a), "pose": [float(v) for v in p]} for a, p in zip(t, poses)), manifest)


def read_trajectory(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    recs, _ = read_jsonl(path, TRAJECTORY_SCHEMA)
    return np.array([r["t"] for r in recs], float), np.array([r["pose"] for r in recs], float).reshape(-1, 3)


def read_model(path: str | Path) -> SensorModel:
    """Parametric model from ``truth.json``, ``result.json`` or an init file.

    A calibration result nests the model under ``"model"``.
    """
    data = read_json(path)
    if "model" in data and isinstance(data["model"], dict):
        data = data["model"]
    err = next(iter(jsonschema.Draft7Validator(MODEL_SCHEMA).iter_errors(data)), None)
    if err is not None:
        raise _schema_error(Path(path), None, err)
    try:
        return SensorModel.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{Path(path).name}: field params: missing or invalid parameter {exc}") from exc
