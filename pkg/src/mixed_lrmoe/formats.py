"""File formats: delimited datasets, JSON configurations and model archives.

Datasets are comma-separated text with a header row. Reserved columns:

* ``y`` (one response) or ``y1 .. yD`` (several),
* ``f1 .. fL``: factor ids, read as strings and dictionary-encoded.

Every other column is a numeric covariate; the intercept is prepended
automatically. Factor dictionaries list the known ids of each level in
sorted order (numerically when every id is an integer). Ids missing from a
supplied dictionary are appended after the known ones and flagged as
unseen.

JSON documents carry a ``schema_version`` and store floats with Python's
shortest round-trip representation, so archives reload bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ecm import FitConfig, FitReport
from .errors import DataFormatError, InvalidConfigurationError
from .experts import ExpertFamily
from .model import Dataset, MixedLRMoEModel, RandomEffectDesign
from .simulation import SimSpec, design_one_model, design_two_model, ratemaking_model
from .variational import VariationalPosterior

SCHEMA_VERSION = 1

_FACTOR = re.compile(r"^f(\d+)$")
_RESPONSE = re.compile(r"^y(\d*)$")
_MAX_REPORTED_LINES = 10


# ----------------------------------------------------------------------------
# tabular data
# ----------------------------------------------------------------------------

def _sort_ids(ids):
    ids = sorted(set(ids))
    try:
        return sorted(ids, key=int)
    except ValueError:
        return ids


@dataclass
class Table:
    """A parsed dataset plus the naming needed to write predictions back."""

    X: np.ndarray
    Y: np.ndarray | None
    factor_index: np.ndarray
    covariates: list
    responses: list
    factor_levels: list
    extra: dict = field(default_factory=dict)
    n_unseen: int = 0

    def dataset(self) -> Dataset:
        if self.Y is None:
            raise DataFormatError("dataset has no response column")
        return Dataset(self.X, self.Y, self.factor_index)

    @property
    def design(self) -> RandomEffectDesign:
        return RandomEffectDesign(tuple(len(v) for v in self.factor_levels))


def read_table(path, factor_levels=None, covariates=None, extra_columns=(), require_response=True) -> Table:
    """Read a delimited dataset.

    Parameters
    ----------
    factor_levels : list of list of str, optional
        Known factor ids per level (from an archive). Unknown ids are
        appended and counted in ``Table.n_unseen``.
    covariates : list of str, optional
        Required covariate columns, in order; other non-reserved columns
        are then ignored.
    extra_columns : sequence of str
        Numeric columns to return in ``Table.extra`` instead of treating
        them as covariates.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: file is empty") from None
        rows = list(reader)

    if len(set(header)) != len(header):
        raise DataFormatError(f"{path}: duplicate column names in header")
    factors = sorted((int(_FACTOR.match(h).group(1)), i) for i, h in enumerate(header) if _FACTOR.match(h))
    if [k for k, _ in factors] != list(range(1, len(factors) + 1)):
        raise DataFormatError(f"{path}: factor columns must be f1..fL without gaps")
    responses = sorted(((m.group(1), i) for i, h in enumerate(header) if (m := _RESPONSE.match(h))),
                       key=lambda t: int(t[0] or 0))
    if len(responses) > 1 and any(k == "" for k, _ in responses):
        raise DataFormatError(f"{path}: use either y or y1..yD, not both")
    for name in extra_columns:
        if name not in header:
            raise DataFormatError(f"{path}: missing column {name!r}")
    reserved = {i for _, i in factors} | {i for _, i in responses} | {header.index(c) for c in extra_columns}
    if covariates is None:
        covariates = [h for i, h in enumerate(header) if i not in reserved]
    else:
        missing = [c for c in covariates if c not in header]
        if missing:
            raise DataFormatError(f"{path}: missing covariate column(s) {missing}")
    if require_response and not responses:
        raise DataFormatError(f"{path}: no response column (y or y1..yD)")

    cov_idx = [header.index(c) for c in covariates]
    resp_idx = [i for _, i in responses]
    extra_idx = [header.index(c) for c in extra_columns]
    numeric = cov_idx + resp_idx + extra_idx
    values = np.empty((len(rows), len(numeric)))
    bad = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            bad.append(r + 2)
            continue
        try:
            vals = [float(row[i]) for i in numeric]
        except ValueError:
            bad.append(r + 2)
            continue
        if not all(math.isfinite(v) for v in vals) or any(not row[i].strip() for _, i in factors):
            bad.append(r + 2)
            continue
        values[r] = vals
    if bad:
        shown = bad[:_MAX_REPORTED_LINES]
        raise DataFormatError(f"{path}: {len(bad)} unparseable row(s); first at line(s) {shown}", shown)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")

    n = len(rows)
    raw_ids = [[row[i].strip() for row in rows] for _, i in factors]
    n_unseen_rows = np.zeros(n, dtype=bool)
    if factor_levels is None:
        levels = [_sort_ids(ids) for ids in raw_ids]
    else:
        if len(factor_levels) != len(factors):
            raise DataFormatError(f"{path}: expected {len(factor_levels)} factor column(s), found {len(factors)}")
        levels = []
        for known, ids in zip(factor_levels, raw_ids):
            known = list(known)
            known_set = set(known)
            new = [s for s in _sort_ids(ids) if s not in known_set]
            levels.append(known + new)
    fi = np.empty((n, len(factors)), dtype=np.int64)
    for l, ids in enumerate(raw_ids):
        lookup = {s: k for k, s in enumerate(levels[l])}
        fi[:, l] = [lookup[s] for s in ids]
        if factor_levels is not None:
            n_unseen_rows |= fi[:, l] >= len(factor_levels[l])

    X = np.hstack([np.ones((n, 1)), values[:, : len(cov_idx)]])
    Y = values[:, len(cov_idx): len(cov_idx) + len(resp_idx)] if resp_idx else None
    extra = {c: values[:, len(cov_idx) + len(resp_idx) + k] for k, c in enumerate(extra_columns)}
    return Table(X, Y, fi, list(covariates), [header[i] for i in resp_idx], levels, extra,
                 int(n_unseen_rows.sum()))


def read_dataset(path) -> tuple[Dataset, Table]:
    table = read_table(path)
    return table.dataset(), table


def _fmt(v: float) -> str:
    return repr(float(v))


def write_table(path, header, columns) -> None:
    """Write columns (sequences of str or float) as CSV with repr floats."""
    cols = [[c if isinstance(c, str) else _fmt(c) for c in col] for col in columns]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(zip(*cols))


def write_dataset(path, data: Dataset, factor_ids=None, covariates=None) -> None:
    """Write ``data`` in the tabular format.

    ``factor_ids[l]`` gives the string label of each factor of level l;
    1-based integers are used by default.
    """
    resp = ["y"] if data.D == 1 else [f"y{d + 1}" for d in range(data.D)]
    covariates = covariates or [f"x{p}" for p in range(1, data.P)]
    facs = [f"f{l + 1}" for l in range(data.L)]
    cols = [data.Y[:, d] for d in range(data.D)] + [data.X[:, p] for p in range(1, data.P)]
    for l in range(data.L):
        labels = factor_ids[l] if factor_ids is not None else [str(k + 1) for k in range(data.factor_index[:, l].max() + 1)]
        cols.append([labels[k] for k in data.factor_index[:, l]])
    write_table(path, resp + list(covariates) + facs, cols)


# ----------------------------------------------------------------------------
# JSON documents
# ----------------------------------------------------------------------------

def _load_json(path, kind: str) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfigurationError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise InvalidConfigurationError(f"{path}: top level must be an object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise InvalidConfigurationError(f"{path}: {kind} schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    return doc


def _dump_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise InvalidConfigurationError(f"{where}: unknown field(s) {unknown}")


_CONFIG_FIELDS = set(FitConfig.__dataclass_fields__)


def config_from_dict(doc: dict, where: str = "config") -> FitConfig:
    body = {k: v for k, v in doc.items() if k != "schema_version"}
    _check_keys(body, _CONFIG_FIELDS, where)
    if "g" not in body:
        raise InvalidConfigurationError(f"{where}: field 'g' is required")
    try:
        return FitConfig(**body)
    except InvalidConfigurationError as exc:
        raise InvalidConfigurationError(f"{where}: {exc}") from None


def read_config(path) -> FitConfig:
    return config_from_dict(_load_json(path, "config"), str(path))


def write_config(path, config: FitConfig) -> None:
    _dump_json(path, {"schema_version": SCHEMA_VERSION, **config.to_dict()})


def model_to_dict(model: MixedLRMoEModel) -> dict:
    return {
        "alpha": model.alpha.tolist(),
        "beta": model.beta.tolist(),
        "experts": [[e.to_dict() for e in row] for row in model.experts],
        "S": list(model.design.S),
    }


def model_from_dict(doc: dict, where: str = "model") -> MixedLRMoEModel:
    _check_keys(doc, {"alpha", "beta", "experts", "S"}, where)
    try:
        design = RandomEffectDesign(tuple(doc.get("S", ())))
        experts = tuple(tuple(ExpertFamily.from_dict(e) for e in row) for row in doc["experts"])
        g = len(experts)
        beta = doc.get("beta", [[0.0] * design.L for _ in range(g)])
        return MixedLRMoEModel(np.array(doc["alpha"], dtype=float), np.array(beta, dtype=float), experts, design)
    except KeyError as exc:
        raise InvalidConfigurationError(f"{where}: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InvalidConfigurationError(f"{where}: {exc}") from None


_PRESETS = {
    "simulation_one": lambda a: design_one_model(a.get("S1", 200)),
    "simulation_two": lambda a: design_two_model(a.get("S1", 200), a.get("S2", 2000)),
    "ratemaking": lambda a: ratemaking_model(a.get("S1", 2000)),
}


def simspec_from_dict(doc: dict, where: str = "spec") -> SimSpec:
    """Simulation spec: ``n``, ``seed``, optional ``assignment`` and
    ``bernoulli_p``, and either a ``model`` object or a ``preset`` name
    (``simulation_one``, ``simulation_two``, ``ratemaking``) with optional
    ``S1``/``S2`` counts."""
    body = {k: v for k, v in doc.items() if k != "schema_version"}
    _check_keys(body, {"n", "seed", "assignment", "bernoulli_p", "model", "preset", "S1", "S2"}, where)
    if ("model" in body) == ("preset" in body):
        raise InvalidConfigurationError(f"{where}: give exactly one of 'model' or 'preset'")
    if "n" not in body:
        raise InvalidConfigurationError(f"{where}: field 'n' is required")
    if "model" in body:
        model = model_from_dict(body["model"], f"{where}: model")
    else:
        if body["preset"] not in _PRESETS:
            raise InvalidConfigurationError(f"{where}: unknown preset {body['preset']!r}; choose from {sorted(_PRESETS)}")
        model = _PRESETS[body["preset"]](body)
    for name in ("n", "seed"):
        if name in body and (isinstance(body[name], bool) or not isinstance(body[name], int)):
            raise InvalidConfigurationError(f"{where}: field {name!r} must be an integer")
    try:
        return SimSpec(n=body["n"], model=model, seed=body.get("seed", 0),
                       assignment=body.get("assignment", "uniform"), bernoulli_p=body.get("bernoulli_p", 0.5))
    except ValueError as exc:
        raise InvalidConfigurationError(f"{where}: {exc}") from None


def read_simspec(path) -> SimSpec:
    return simspec_from_dict(_load_json(path, "simulation spec"), str(path))


# ----------------------------------------------------------------------------
# archives
# ----------------------------------------------------------------------------

@dataclass
class ModelArchive:
    model: MixedLRMoEModel
    posterior: VariationalPosterior
    factor_levels: list
    covariates: list
    responses: list
    config: FitConfig | None = None
    report: FitReport | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": model_to_dict(self.model),
            "factor_levels": [list(v) for v in self.factor_levels],
            "covariates": list(self.covariates),
            "responses": list(self.responses),
            "posterior": {
                "mu": [m.tolist() for m in self.posterior.mu],
                "sigma2": [s.tolist() for s in self.posterior.sigma2],
            },
            "config": None if self.config is None else self.config.to_dict(),
            "report": None if self.report is None else _report_dict(self.report),
            "seed": None if self.config is None else self.config.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict, where: str = "archive") -> "ModelArchive":
        model = model_from_dict(doc["model"], f"{where}: model")
        try:
            post = VariationalPosterior(tuple(doc["posterior"]["mu"]), tuple(doc["posterior"]["sigma2"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfigurationError(f"{where}: bad posterior section ({exc})") from None
        if post.design != model.design:
            raise InvalidConfigurationError(f"{where}: posterior does not match the model design")
        levels = doc.get("factor_levels", [])
        if [len(v) for v in levels] != list(model.design.S):
            raise InvalidConfigurationError(f"{where}: factor dictionary does not match the model design")
        config = None if doc.get("config") is None else config_from_dict(doc["config"], f"{where}: config")
        report = None if doc.get("report") is None else FitReport(**doc["report"])
        return cls(model, post, levels, doc.get("covariates", []), doc.get("responses", []), config, report)


def _report_dict(report: FitReport) -> dict:
    # wall-clock time would make otherwise identical archives differ
    d = report.to_dict()
    d.pop("elapsed", None)
    return d


def write_archive(path, archive: ModelArchive) -> None:
    _dump_json(path, archive.to_dict())


def read_archive(path) -> ModelArchive:
    return ModelArchive.from_dict(_load_json(path, "archive"), str(path))
