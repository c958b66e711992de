"""Experiment orchestration: attack evaluation, transfer matrices, sweeps and reports.

Everything here is a thin layer over the attack and metrics modules.  Results are
plain CSV/JSON text written atomically, so re-running with the same inputs gives
byte-identical files.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .attack import AttackConfig, train_uap
from .data import (DatasetItem, ImageSet, Perturbation, SyntheticSpec, apply_perturbation,
                   atomic_write_bytes, select_split)
from .metrics import AttackReport, drop_rate, per_query_scores
from .regularizer import gradient_energy


class ConfigError(ValueError):
    pass


class CellError(RuntimeError):
    """Failure inside one matrix cell or sweep point, tagged with its coordinates."""

    def __init__(self, where, exc):
        super().__init__(f"{where}: {exc}")
        self.where = where
        self.__cause__ = exc


class Splits(NamedTuple):
    train: ImageSet
    query: ImageSet
    gallery: ImageSet

    @classmethod
    def from_items(cls, items: list[DatasetItem]) -> "Splits":
        return cls(*(select_split(items, s) for s in ("train", "query", "gallery")))


def as_splits(dataset) -> Splits:
    return dataset if isinstance(dataset, Splits) else Splits.from_items(list(dataset))


# -- config files ------------------------------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys may be dotted."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(value: str, kind, key: str):
    try:
        if kind is bool:
            return _parse_bool(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _field_types(cls) -> dict:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for f in dataclasses.fields(cls):
        name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        out[f.name] = hints.get(name.split(" ")[0], float)
    return out


# the config file says "lambda"; the dataclass field is "lam"
_ATTACK_ALIASES = {"lambda": "lam"}


def attack_config_from(values: dict[str, str], base: AttackConfig | None = None) -> AttackConfig:
    """Build an :class:`AttackConfig` from ``attack.*`` keys; other keys are rejected."""
    types = _field_types(AttackConfig)
    types["gamma"] = str
    types["mi_scale"] = float
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for key, value in values.items():
        section, _, name = key.partition(".")
        name = _ATTACK_ALIASES.get(name, name)
        if section != "attack" or name not in types:
            raise ConfigError(f"unknown key {key!r}")
        if name == "mi_scale" and value.lower() == "none":
            kwargs[name] = None
        else:
            kwargs[name] = _convert(value, types[name], key)
    try:
        return AttackConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def synthetic_spec_from(values: dict[str, str]) -> SyntheticSpec:
    """Build a :class:`SyntheticSpec`; keys are field names, optionally ``data.``-prefixed."""
    types = _field_types(SyntheticSpec)
    kwargs = {}
    for key, value in values.items():
        name = key[5:] if key.startswith("data.") else key
        if name not in types:
            raise ConfigError(f"unknown key {key!r}")
        kwargs[name] = _convert(value, types[name], key)
    return SyntheticSpec(**kwargs)


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def parse_epsilons(value) -> list[float]:
    eps = [float(v) for v in (_split_list(value) if isinstance(value, str) else value)]
    if not eps:
        raise ConfigError("epsilon list is empty")
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ConfigError("epsilons must be strictly increasing")
    if eps[0] < 0:
        raise ConfigError("epsilons must be non-negative")
    return eps


@dataclass
class ExperimentConfig:
    source_models: list[str]
    target_models: list[str]
    source_dataset: str
    target_dataset: str
    attack: AttackConfig = field(default_factory=AttackConfig)
    sweep_epsilons: list[float] = field(default_factory=lambda: [0.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    output_dir: str = "."

    def __post_init__(self):
        self.sweep_epsilons = parse_epsilons(self.sweep_epsilons)
        for path in [*self.source_models, *self.target_models, self.source_dataset, self.target_dataset]:
            if not os.path.exists(path):
                raise ConfigError(f"referenced file does not exist: {path}")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        values = read_config(path)
        base = os.path.dirname(os.path.abspath(path))

        def resolve(p):
            return p if os.path.isabs(p) else os.path.join(base, p)

        attack = {k: v for k, v in values.items() if k.startswith("attack.")}
        rest = {k: v for k, v in values.items() if not k.startswith("attack.")}
        known = {"source_models", "target_models", "source_dataset", "target_dataset",
                 "sweep_epsilons", "output_dir"}
        for key in rest:
            if key not in known:
                raise ConfigError(f"unknown key {key!r}")
        for key in ("source_models", "source_dataset"):
            if key not in rest:
                raise ConfigError(f"missing key {key!r}")
        sources = [resolve(p) for p in _split_list(rest["source_models"])]
        return cls(
            source_models=sources,
            target_models=[resolve(p) for p in _split_list(rest.get("target_models", ""))] or sources,
            source_dataset=resolve(rest["source_dataset"]),
            target_dataset=resolve(rest.get("target_dataset", rest["source_dataset"])),
            attack=attack_config_from(attack),
            sweep_epsilons=rest.get("sweep_epsilons", "0,2,4,6,8,10"),
            output_dir=resolve(rest.get("output_dir", ".")),
        )


# -- output --------------------------------------------------------------------------

def fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{float(x):.6f}"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- evaluation ----------------------------------------------------------------------

def evaluate_attack(target_model, dataset, u: Perturbation | None, clamp: bool = True) -> AttackReport:
    """mAP / Rank-1 of the query split before and after adding ``u`` to the queries."""
    splits = as_splits(dataset)
    if len(splits.query) == 0:
        raise ValueError("dataset has no query split")
    if u is not None and u.values.shape != splits.query.images.shape[1:]:
        raise ValueError(f"perturbation shape {u.values.shape} does not match images "
                         f"{splits.query.images.shape[1:]}")
    g_emb = target_model.forward(splits.gallery.images)
    ap0, hit0 = per_query_scores(target_model, splits.query, splits.gallery, gallery_emb=g_emb)
    if u is None:
        ap1, hit1 = ap0, hit0
    else:
        ap1, hit1 = per_query_scores(target_model, splits.query, splits.gallery, u, clamp, g_emb)
    m0, m1 = float(np.mean(ap0)), float(np.mean(ap1))
    r0, r1 = float(np.mean(hit0)), float(np.mean(hit1))
    return AttackReport(m0, m1, r0, r1, drop_rate(m0, m1), drop_rate(r0, r1) if r0 > 0 else 0.0,
                        [float(a) for a in ap1])


@dataclass
class MatrixResult:
    sources: list[str]
    targets: list[str]
    mdr: np.ndarray
    rdr: np.ndarray
    uaps: dict = field(default_factory=dict)

    def to_csv(self, which: str = "mdr") -> str:
        values = getattr(self, which)
        rows = [[s, *(fmt(v) for v in row)] for s, row in zip(self.sources, values)]
        return csv_text(["source", *self.targets], rows)

    def off_diagonal_mean(self) -> float:
        mask = np.array([[s != t for t in self.targets] for s in self.sources])
        return float(self.mdr[mask].mean()) if mask.any() else float("nan")

    def diagonal(self) -> np.ndarray:
        return np.array([self.mdr[i, self.targets.index(s)] for i, s in enumerate(self.sources)
                         if s in self.targets])


def _named(models) -> dict:
    if isinstance(models, dict):
        return dict(models)
    return {getattr(m, "arch", str(i)) if not isinstance(m, tuple) else m[0]:
            (m if not isinstance(m, tuple) else m[1]) for i, m in enumerate(models)}


def _unpack(entry):
    # a model may come with its classifier head, needed by the base objective
    if isinstance(entry, tuple):
        return entry
    return entry, None


def _train(name, entry, train: ImageSet, cfg: AttackConfig) -> Perturbation:
    model, head = _unpack(entry)
    try:
        return train_uap(model, train, cfg, head).uap
    except Exception as exc:
        raise CellError(f"source {name}", exc) from exc


def _evaluate_rows(sources, targets, uaps, splits) -> tuple[np.ndarray, np.ndarray]:
    mdr = np.zeros((len(sources), len(targets)))
    rdr = np.zeros_like(mdr)
    for j, (t_name, t_entry) in enumerate(targets.items()):
        model, _ = _unpack(t_entry)
        for i, s_name in enumerate(sources):
            try:
                rep = evaluate_attack(model, splits, uaps[s_name])
            except Exception as exc:
                raise CellError(f"cell ({s_name}, {t_name})", exc) from exc
            mdr[i, j], rdr[i, j] = rep.mdr, rep.rdr
    return mdr, rdr


def cross_matrix(models, dataset, cfg: AttackConfig | None = None, targets=None) -> MatrixResult:
    """Train one perturbation per source model and evaluate it on every target.

    ``models`` is a dict name -> model (or ``(model, head)``) or a list of models.
    Rows are sources, columns targets; the diagonal is the white-box setting.
    """
    cfg = cfg or AttackConfig()
    sources = _named(models)
    targets = _named(targets) if targets is not None else sources
    splits = as_splits(dataset)
    uaps = {name: _train(name, entry, splits.train, cfg) for name, entry in sources.items()}
    mdr, rdr = _evaluate_rows(list(sources), targets, uaps, splits)
    return MatrixResult(list(sources), list(targets), mdr, rdr, uaps)


def cross_dataset_matrix(models, train_dataset, test_datasets: dict, cfg: AttackConfig | None = None,
                         targets=None) -> dict[str, MatrixResult]:
    """Perturbations learnt on ``train_dataset``, evaluated on each test dataset."""
    cfg = cfg or AttackConfig()
    sources = _named(models)
    targets = _named(targets) if targets is not None else sources
    train = as_splits(train_dataset).train
    uaps = {name: _train(name, entry, train, cfg) for name, entry in sources.items()}
    out = {}
    for ds_name, ds in test_datasets.items():
        try:
            mdr, rdr = _evaluate_rows(list(sources), targets, uaps, as_splits(ds))
        except CellError as exc:
            raise CellError(f"dataset {ds_name}", exc) from exc
        out[ds_name] = MatrixResult(list(sources), list(targets), mdr, rdr, uaps)
    return out


def cross_dataset_csv(results: dict[str, MatrixResult]) -> str:
    rows = []
    for ds_name, res in results.items():
        for i, s in enumerate(res.sources):
            for j, t in enumerate(res.targets):
                rows.append([s, t, ds_name, fmt(res.mdr[i, j]), fmt(res.rdr[i, j])])
    return csv_text(["source", "target", "dataset", "mdr", "rdr"], rows)


SWEEP_HEADER = ("epsilon", "mdr_whitebox", "mdr_crossmodel")


def epsilon_sweep(model, dataset, cfg: AttackConfig | None, epsilons, targets=None) -> list[tuple]:
    """One perturbation per budget; rows ``(epsilon, white-box mDR, mean cross-model mDR)``.

    The cross-model column is NaN when no other target model is given.
    """
    cfg = cfg or AttackConfig()
    epsilons = parse_epsilons(epsilons)
    splits = as_splits(dataset)
    src_model, head = _unpack(model)
    others = [_unpack(m)[0] for m in (_named(targets).values() if targets is not None else [])]
    rows = []
    for eps in epsilons:
        point = dataclasses.replace(cfg, epsilon=eps)
        try:
            u = train_uap(src_model, splits.train, point, head).uap
            wb = evaluate_attack(src_model, splits, u).mdr
            cross = [evaluate_attack(m, splits, u).mdr for m in others]
        except Exception as exc:
            raise CellError(f"epsilon {eps:g}", exc) from exc
        rows.append((eps, wb, float(np.mean(cross)) if cross else float("nan")))
    return rows


def sweep_csv(rows) -> str:
    return csv_text(SWEEP_HEADER, [[f"{e:g}", fmt(w), fmt(c)] for e, w, c in rows])


def energy_report(dataset, u_list) -> dict[str, float]:
    """Mean gradient energy of clean queries and of queries carrying each perturbation."""
    queries = as_splits(dataset).query.images if not isinstance(dataset, ImageSet) else dataset.images
    named = u_list if isinstance(u_list, dict) else {f"u{i}": u for i, u in enumerate(u_list)}
    out = {"clean": float(np.mean(gradient_energy(queries)))}
    for name, u in named.items():
        out[name] = float(np.mean(gradient_energy(apply_perturbation(queries, u))))
    return out


def energy_csv(report: dict[str, float]) -> str:
    clean = report["clean"]
    names = list(report)
    ratios = [report[n] / clean if clean > 0 else float("nan") for n in names]
    return csv_text(["stat", *names], [["energy", *(fmt(report[n]) for n in names)],
                                       ["ratio", *(fmt(r) for r in ratios)]])
