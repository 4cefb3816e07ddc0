"""Stress-stretch experiments: validation, CSV persistence, clipping and truncation.

Experiment CSV (UTF-8, ``#`` comments ignored, one header row)::

    # id: h16
    # tendon_type: SDFT
    stretch,stress_mpa[,fidelity]
    1.0,0.0
    ...

A ``strain`` column may replace ``stretch`` (fraction, or percent with
``percent=True``). ``# key: value`` comments carry metadata when present; other
comments are skipped.

Chain CSV: header ``draw,<param names...>``, one row per retained draw, with a
JSON sidecar (same stem, ``.json``) holding seed and sampler settings.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_THRESHOLD = 0.3
# 0.15 is quoted in MPa^2, so read as a variance by default
SIGMA_OBS_QUOTED = 0.15


class DataError(ValueError):
    """Malformed or inconsistent experimental data."""


class TendonType(str, enum.Enum):
    SDFT = "SDFT"
    CDET = "CDET"


def resolve_sigma_obs(value: float = SIGMA_OBS_QUOTED, interpretation: str = "variance") -> float:
    """Observation noise standard deviation from a quoted value.

    ``interpretation="variance"`` treats ``value`` as MPa^2 (sd = sqrt(value));
    ``"sd"`` uses it directly.
    """
    if value <= 0:
        raise ValueError("noise level must be positive")
    if interpretation == "variance":
        return math.sqrt(value)
    if interpretation == "sd":
        return float(value)
    raise ValueError(f"unknown noise interpretation {interpretation!r}")


DEFAULT_SIGMA_OBS = resolve_sigma_obs()


@dataclass(frozen=True, eq=False)
class Experiment:
    id: str
    tendon_type: TendonType
    stretch: np.ndarray
    stress: np.ndarray
    fidelity: Optional[np.ndarray] = None
    truncation_index: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        stretch = np.array(self.stretch, dtype=float)
        stress = np.array(self.stress, dtype=float)
        object.__setattr__(self, "stretch", stretch)
        object.__setattr__(self, "stress", stress)
        object.__setattr__(self, "tendon_type", TendonType(self.tendon_type))
        if stretch.ndim != 1 or stretch.shape != stress.shape:
            raise DataError("stretch and stress must be 1-d and equal length")
        if len(stretch) < 2:
            raise DataError(f"experiment {self.id!r} needs at least 2 observations, has {len(stretch)}")
        if not np.all(np.isfinite(stretch)) or not np.all(np.isfinite(stress)):
            raise DataError(f"experiment {self.id!r} contains non-finite values")
        if np.any(stretch < 1.0):
            raise DataError(f"experiment {self.id!r} has stretch below 1")
        bad = np.nonzero(np.diff(stretch) <= 0)[0]
        if len(bad):
            raise DataError(f"experiment {self.id!r}: stretch not strictly increasing at observation {bad[0] + 1}")
        if self.fidelity is not None:
            fid = np.array(self.fidelity, dtype=float)
            if fid.shape != stretch.shape:
                raise DataError("fidelity must match the number of observations")
            if np.any((fid < 0) | (fid > 1)) or not np.all(np.isfinite(fid)):
                raise DataError("fidelity values must lie in [0, 1]")
            object.__setattr__(self, "fidelity", fid)
        for arr in (self.stretch, self.stress, self.fidelity):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return len(self.stretch)

    @property
    def strain(self):
        return self.stretch - 1.0

    def __eq__(self, other):
        if not isinstance(other, Experiment):
            return NotImplemented

        def same(x, y):
            if x is None or y is None:
                return x is None and y is None
            return x.shape == y.shape and np.array_equal(x, y)

        return (
            self.id == other.id
            and self.tendon_type == other.tendon_type
            and same(self.stretch, other.stretch)
            and same(self.stress, other.stress)
            and same(self.fidelity, other.fidelity)
            and self.truncation_index == other.truncation_index
            and self.meta == other.meta
        )

    __hash__ = None


@dataclass(frozen=True)
class Population:
    experiments: tuple
    sigma_obs: float = DEFAULT_SIGMA_OBS

    def __post_init__(self):
        exps = tuple(self.experiments)
        object.__setattr__(self, "experiments", exps)
        if not exps:
            raise DataError("population needs at least one experiment")
        types = {e.tendon_type for e in exps}
        if len(types) > 1:
            raise DataError(f"experiments mix tendon types {sorted(t.value for t in types)}")
        if not self.sigma_obs > 0:
            raise DataError("sigma_obs must be positive")

    @property
    def tendon_type(self) -> TendonType:
        return self.experiments[0].tendon_type

    def __len__(self):
        return len(self.experiments)


# --- CSV ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def _check_writable(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force=True to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def save_experiment(path, exp: Experiment, force: bool = False) -> None:
    path = Path(path)
    _check_writable(path, force)
    buf = io.StringIO()
    buf.write(f"# id: {exp.id}\n")
    buf.write(f"# tendon_type: {exp.tendon_type.value}\n")
    if exp.truncation_index is not None:
        buf.write(f"# truncation_index: {exp.truncation_index}\n")
    if exp.meta:
        buf.write(f"# meta: {json.dumps(exp.meta, sort_keys=True)}\n")
    cols = ["stretch", "stress_mpa"] + (["fidelity"] if exp.fidelity is not None else [])
    buf.write(",".join(cols) + "\n")
    for j in range(len(exp)):
        row = [_fmt(exp.stretch[j]), _fmt(exp.stress[j])]
        if exp.fidelity is not None:
            row.append(_fmt(exp.fidelity[j]))
        buf.write(",".join(row) + "\n")
    try:
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as err:
        raise OSError(f"could not write experiment to {path}: {err}") from err


def load_experiment(path, percent: bool = False, experiment_id: Optional[str] = None,
                    tendon_type: Optional[str] = None) -> Experiment:
    """Read one experiment CSV.

    Metadata comments in the file are used unless overridden by arguments; the
    id defaults to the file stem and the tendon type to SDFT.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err

    meta = {}
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s[1:].strip()
            if ":" in body:
                key, _, val = body.partition(":")
                meta[key.strip()] = val.strip()
            continue
        rows.append((lineno, s))
    if not rows:
        raise DataError(f"{path}: no header row")

    header_line, header = rows[0]
    cols = [c.strip().lower() for c in next(csv.reader([header]))]
    if "stress_mpa" not in cols:
        raise DataError(f"{path}:{header_line}: missing column 'stress_mpa'")
    if "stretch" in cols:
        xcol, convert = cols.index("stretch"), None
    elif "strain" in cols:
        xcol, convert = cols.index("strain"), (0.01 if percent else 1.0)
    else:
        raise DataError(f"{path}:{header_line}: need a 'stretch' or 'strain' column")
    ycol = cols.index("stress_mpa")
    fcol = cols.index("fidelity") if "fidelity" in cols else None

    xs, ys, fs = [], [], []
    for lineno, s in rows[1:]:
        fields = next(csv.reader([s]))
        if len(fields) != len(cols):
            raise DataError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(fields)}")
        try:
            x = float(fields[xcol])
            y = float(fields[ycol])
            f = float(fields[fcol]) if fcol is not None else None
        except ValueError as err:
            raise DataError(f"{path}:{lineno}: {err}") from err
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        lam = x if convert is None else 1.0 + convert * x
        if xs and lam <= xs[-1]:
            kind = "duplicate" if lam == xs[-1] else "decreasing"
            raise DataError(f"{path}:{lineno}: {kind} stretch value {lam!r}")
        xs.append(lam)
        ys.append(y)
        fs.append(f)

    trunc = meta.get("truncation_index")
    try:
        return Experiment(
            id=experiment_id or meta.get("id") or path.stem,
            tendon_type=tendon_type or meta.get("tendon_type") or TendonType.SDFT,
            stretch=np.array(xs),
            stress=np.array(ys),
            fidelity=np.array(fs) if fcol is not None else None,
            truncation_index=int(trunc) if trunc is not None else None,
            meta=json.loads(meta["meta"]) if "meta" in meta else {},
        )
    except ValueError as err:
        raise DataError(f"{path}: {err}") from err


def load_public_archive(path, **kwargs) -> Experiment:
    """Converter boundary for the public tendon archive.

    The archive's native column layout is undocumented; until a sample file is
    available this accepts only files already in the canonical CSV layout.
    """
    return load_experiment(path, **kwargs)


# --- preprocessing ---------------------------------------------------------------

def clip_to_max_stress(exp: Experiment) -> Experiment:
    """Keep observations up to and including the first global stress maximum."""
    k = int(np.argmax(exp.stress)) + 1
    if k == len(exp):
        return exp
    if k < 2:
        raise DataError(f"experiment {exp.id!r}: stress peaks at the first observation")
    return replace(
        exp,
        stretch=exp.stretch[:k],
        stress=exp.stress[:k],
        fidelity=None if exp.fidelity is None else exp.fidelity[:k],
    )


def truncate(exp: Experiment, fidelity_means, threshold: float = DEFAULT_THRESHOLD) -> Experiment:
    """Drop everything from the first observation whose fidelity mean is below ``threshold``."""
    means = np.asarray(fidelity_means, dtype=float)
    if means.shape != exp.stretch.shape:
        raise DataError("fidelity means must match the number of observations")
    below = np.nonzero(means < threshold)[0]
    k = int(below[0]) if len(below) else len(exp)
    if k == 0:
        raise DataError(f"experiment {exp.id!r}: no data survives selection at threshold {threshold}")
    if k < 2:
        raise DataError(f"experiment {exp.id!r}: only {k} observation survives selection")
    return replace(
        exp,
        stretch=exp.stretch[:k],
        stress=exp.stress[:k],
        fidelity=means[:k],
        truncation_index=k,
    )


# --- chains ------------------------------------------------------------------------

def save_chain(path, draws, names: Sequence[str], metadata: Optional[dict] = None,
               force: bool = False) -> Path:
    """Write a chain CSV plus JSON sidecar; returns the sidecar path."""
    path = Path(path)
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[1] != len(names):
        raise ValueError(f"{len(names)} names for {draws.shape[1]} columns")
    sidecar = path.with_suffix(".json")
    _check_writable(path, force)
    _check_writable(sidecar, force)
    lines = [",".join(["draw", *names])]
    for i, row in enumerate(draws):
        lines.append(",".join([str(i), *(_fmt(v) for v in row)]))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        sidecar.write_text(json.dumps(_jsonable(metadata or {}), indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    except OSError as err:
        raise OSError(f"could not write chain to {path}: {err}") from err
    return sidecar


def load_chain(path):
    """Return ``(draws, names, metadata)`` from a chain CSV and its sidecar."""
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in r[1:]] for r in reader if r]
    except (OSError, StopIteration, ValueError) as err:
        raise DataError(f"cannot read chain {path}: {err}") from err
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return np.array(rows).reshape(len(rows), len(header) - 1), header[1:], meta


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj, force: bool = True) -> None:
    path = Path(path)
    _check_writable(path, force)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_table(path, columns: dict, force: bool = True) -> None:
    """Plain CSV from a dict of equal-length columns."""
    path = Path(path)
    _check_writable(path, force)
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    lines = [",".join(names)]
    for row in zip(*cols):
        lines.append(",".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
