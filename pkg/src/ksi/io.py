"""Drift-table files, CSV samples and run configuration.

Table file layout (all little-endian)::

    magic   4 bytes  b"KSID"
    version u32
    P, K, d u32 x 3
    sched   u8       0 = linear, 1 = trig
    ridge   f64
    desc    u32 length + UTF-8 JSON {"feature_map": ..., "n_pairs": N}
    grid    (K + 1) f64
    etas    K * P f64, row-major by time node
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from ksi.errors import ConfigError, CorruptTableError
from ksi.fit import DEFAULT_RIDGE, DriftTable

MAGIC = b"KSID"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIBd")
_U32 = struct.Struct("<I")


# ---------------------------------------------------------------------------
# drift tables


def table_bytes(table: DriftTable) -> bytes:
    if table.schedule_id not in (0, 1):
        raise ValueError("only linear/trig schedules can be persisted")
    desc = json.dumps({"feature_map": table.feature_map, "n_pairs": int(table.n_pairs)}, sort_keys=True).encode()
    P, K = table.num_features, table.steps
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, P, K, int(table.dim), table.schedule_id, float(table.ridge)),
        _U32.pack(len(desc)),
        desc,
        np.ascontiguousarray(table.grid, dtype="<f8").tobytes(),
        np.ascontiguousarray(table.etas, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def write_table(table: DriftTable, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = table_bytes(table)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write drift table to {path}: {exc.strerror}") from exc


def parse_table(data: bytes) -> DriftTable:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CorruptTableError("not a drift table (bad magic)")
    if len(data) < _HEADER.size:
        raise CorruptTableError("corrupt table: truncated header")
    _, version, P, K, d, sid, ridge = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise CorruptTableError(f"unsupported table format version {version}")
    off = _HEADER.size
    if len(data) < off + _U32.size:
        raise CorruptTableError("corrupt table: truncated descriptor length")
    (dlen,) = _U32.unpack_from(data, off)
    off += _U32.size
    if len(data) < off + dlen:
        raise CorruptTableError("corrupt table: truncated feature-map descriptor")
    try:
        desc = json.loads(data[off : off + dlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptTableError(f"corrupt table: unreadable descriptor ({exc})") from exc
    off += dlen
    nbytes = 8 * (K + 1)
    if len(data) < off + nbytes:
        raise CorruptTableError("corrupt table: truncated grid section")
    grid = np.frombuffer(data, dtype="<f8", count=K + 1, offset=off).astype(float)
    off += nbytes
    nbytes = 8 * K * P
    if len(data) < off + nbytes:
        raise CorruptTableError("corrupt table: truncated eta matrix")
    etas = np.frombuffer(data, dtype="<f8", count=K * P, offset=off).astype(float).reshape(K, P)
    off += nbytes
    if off != len(data):
        raise CorruptTableError(f"corrupt table: {len(data) - off} trailing bytes")
    try:
        return DriftTable(
            grid=grid,
            etas=etas,
            feature_map=desc["feature_map"],
            schedule_id=sid,
            ridge=ridge,
            n_pairs=int(desc["n_pairs"]),
            dim=d,
        )
    except (KeyError, ValueError) as exc:
        raise CorruptTableError(f"corrupt table: {exc}") from exc


def read_table(path) -> DriftTable:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read drift table {path}: {exc.strerror}") from exc
    return parse_table(data)


# ---------------------------------------------------------------------------
# CSV


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def read_csv_samples(path, expected_dim: int | None = None) -> np.ndarray:
    """Rows are samples, columns dimensions. A non-numeric first row is a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: ragged row {i} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ValueError(f"{path}: row {i}, column {j}: not a number: {cell!r}") from None
            if not np.isfinite(v):
                raise ValueError(f"{path}: row {i}, column {j}: non-finite value {cell!r}")
            out[i, j] = v
    if expected_dim is not None and width != expected_dim:
        raise ValueError(f"{path}: expected {expected_dim} columns, found {width}")
    return out


def write_csv_samples(samples, path, header=None) -> None:
    """Shortest round-trip decimal formatting (``repr``) keeps full float64 precision."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in samples:
            w.writerow([repr(float(v)) for v in row])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# config

_NUM_ARRAY = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_MATRIX = {"type": "array", "items": _NUM_ARRAY, "minItems": 1}

_FIELD = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["affine", "gaussian_drift"]},
        "A0": _MATRIX,
        "A1": _MATRIX,
        "c0": _NUM_ARRAY,
        "c1": _NUM_ARRAY,
        "target": {"$ref": "#/$defs/gaussian"},
        "perturb_A": _MATRIX,
        "perturb_c": _NUM_ARRAY,
    },
    "required": ["kind"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "$defs": {
        "gaussian": {
            "type": "object",
            "properties": {"mean": _NUM_ARRAY, "cov": _MATRIX, "isotropic": {"type": "number", "exclusiveMinimum": 0}},
            "required": ["mean"],
            "additionalProperties": False,
        },
        "features": {
            "oneOf": [
                {"enum": ["linear", "radial_quadratic", "monomials"]},
                {
                    "type": "object",
                    "properties": {
                        "type": {
                            "enum": [
                                "linear",
                                "radial_quadratic",
                                "monomials",
                                "haar_scatter",
                                "rff",
                                "leverage",
                                "marginal",
                                "ensemble",
                                "concat",
                            ]
                        },
                        "levels": {"type": "integer", "minimum": 1},
                        "num_frequencies": {"type": "integer", "minimum": 1},
                        "bandwidth": {"type": "number", "exclusiveMinimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                        "max_lag": {"type": "integer", "minimum": 1},
                        "num_centers": {"type": "integer", "minimum": 2},
                        "span": {"type": "number", "exclusiveMinimum": 0},
                        "fields": {"type": "array", "items": _FIELD, "minItems": 1},
                        "maps": {"type": "array", "items": {"$ref": "#/$defs/features"}, "minItems": 1},
                    },
                    "required": ["type"],
                    "additionalProperties": False,
                },
            ]
        },
    },
    "properties": {
        "target": {
            "type": "object",
            "properties": {
                "csv": {
                    "oneOf": [
                        {"type": "string"},
                        {
                            "type": "object",
                            "properties": {
                                "path": {"type": "string"},
                                "z_path": {"type": "string"},
                                "series": {"type": "boolean"},
                            },
                            "required": ["path"],
                            "additionalProperties": False,
                        },
                    ]
                },
                "gaussian": {"$ref": "#/$defs/gaussian"},
                "mixture": {
                    "type": "object",
                    "properties": {
                        "means": _MATRIX,
                        "weights": _NUM_ARRAY,
                        "std": {"type": "number", "exclusiveMinimum": 0},
                    },
                    "required": ["means", "weights", "std"],
                    "additionalProperties": False,
                },
                "ar1": {
                    "type": "object",
                    "properties": {
                        "length": {"type": "integer", "minimum": 2},
                        "phi": {"type": "number"},
                        "sigma": {"type": "number", "exclusiveMinimum": 0},
                    },
                    "required": ["length", "phi"],
                    "additionalProperties": False,
                },
                "cascade": {
                    "type": "object",
                    "properties": {
                        "length": {"type": "integer", "minimum": 2},
                        "scales": {"type": "integer", "minimum": 1},
                        "vol_of_vol": {"type": "number", "minimum": 0},
                        "leverage": {"type": "number"},
                    },
                    "required": ["length"],
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "features": {"$ref": "#/$defs/features"},
        "schedule": {"enum": ["linear", "trig"]},
        "steps": {"type": "integer", "minimum": 1},
        "n_pairs": {"type": "integer", "minimum": 1},
        "ridge": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "generate": {
            "type": "object",
            "properties": {
                "num_samples": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 1},
                "diffusion": {
                    "oneOf": [
                        {"enum": ["optimal", "zero"]},
                        {
                            "type": "object",
                            "properties": {"constant": {"type": "number", "minimum": 0}},
                            "required": ["constant"],
                            "additionalProperties": False,
                        },
                    ]
                },
            },
            "additionalProperties": False,
        },
        "metrics": {"type": "array", "items": {"enum": ["mmd", "moments", "leverage", "density"]}},
        "max_lag": {"type": "integer", "minimum": 1},
        "mmd_bandwidth": {"type": "number", "exclusiveMinimum": 0},
        "mmd_max_samples": {"type": "integer", "minimum": 2},
    },
    "required": ["target", "features", "schedule", "steps"],
    "additionalProperties": False,
}

TARGET_KINDS = ("csv", "gaussian", "mixture", "ar1", "cascade")
SERIES_KINDS = ("ar1", "cascade")


@dataclass
class GenerateSettings:
    num_samples: int = 1000
    steps: int | None = None
    diffusion: object = "optimal"


@dataclass
class RunConfig:
    target_kind: str
    target: dict
    features: object
    schedule: str
    steps: int
    n_pairs: int = 10_000
    ridge: float = DEFAULT_RIDGE
    seed: int = 0
    generate: GenerateSettings = field(default_factory=GenerateSettings)
    metrics: list = field(default_factory=lambda: ["moments", "mmd"])
    max_lag: int = 10
    mmd_bandwidth: float | None = None
    mmd_max_samples: int = 4000
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def is_series(self) -> bool:
        if self.target_kind in SERIES_KINDS:
            return True
        return self.target_kind == "csv" and isinstance(self.target, dict) and bool(self.target.get("series"))

    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else ""


def validate_config(raw) -> RunConfig:
    """Validate a decoded JSON document and apply defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", "")
    target = raw.get("target")
    if isinstance(target, dict):
        kinds = [k for k in target if k in TARGET_KINDS]
        if len(kinds) != 1 and not (set(target) - set(TARGET_KINDS)):
            raise ConfigError(f"exactly one target required, got {sorted(kinds) or 'none'}", "/target")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(err.message, _pointer(err.absolute_path))
    kind = next(k for k in target if k in TARGET_KINDS)
    gen = raw.get("generate", {})
    cfg = RunConfig(
        target_kind=kind,
        target=target[kind],
        features=raw["features"],
        schedule=raw["schedule"],
        steps=raw["steps"],
        n_pairs=raw.get("n_pairs", 10_000),
        ridge=float(raw.get("ridge", DEFAULT_RIDGE)),
        seed=raw.get("seed", 0),
        generate=GenerateSettings(
            num_samples=gen.get("num_samples", 1000),
            steps=gen.get("steps"),
            diffusion=gen.get("diffusion", "optimal"),
        ),
        metrics=list(raw.get("metrics", ["moments", "mmd"])),
        max_lag=raw.get("max_lag", 10),
        mmd_bandwidth=raw.get("mmd_bandwidth"),
        mmd_max_samples=raw.get("mmd_max_samples", 4000),
        raw=raw,
    )
    if kind == "gaussian":
        from ksi.oracle import GaussianTarget

        GaussianTarget.from_spec(cfg.target, "/target/gaussian")
    return cfg


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "") from exc
    return validate_config(raw)
