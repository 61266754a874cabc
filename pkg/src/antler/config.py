"""Experiment configuration files.

A config is a YAML document with a ``schema_version`` and the sections
``system``, ``kernel``, ``prior_data`` (optional), ``law``, ``cost``, ``saa``
and ``evaluation``.  Every name is resolved against the catalogs in
:mod:`antler.benchmark` and :mod:`antler.control_laws`, and every number
is range-checked when the file is loaded; errors name the offending line.
See ``data/benchmark.yaml`` for an annotated example.

Schema version 1 keys (defaults in brackets)::

    system:      state_dim [1], input_dim [1], prior_model {kind, ...params},
                 process_noise_std, horizon, x0 [zeros]
    prior_data:  path (relative to the config file), targets [increment],
                 world_uses_prior [true]
    kernel:      hyperparameters: "train" | {signal_variance, lengthscale}
                 active_dims [all], n_restarts [5], random_state [0]
    law:         name, param_box, reference {kind, ...params}
    cost:        kind [tracking] (tracking: input_weight [0]; quadratic: Q, R)
    saa:         M, M_list, n_starts [8], seed [0], start_seed [seed],
                 max_iter [100], tol_theta [1e-5], tol_cost [1e-8],
                 method [scaled]
    evaluation:  true_g {kind, ...params}, n_runs [100], seed [0],
                 baseline [frozen], theta_antler, theta_baseline (optional)
"""

from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import yaml

from . import benchmark
from .control_laws import LAW_CATALOG, ControlLaw, data_independent_counterpart, make_law
from .datasets import TARGET_MODES, PriorData, ingest_prior_data
from .evaluation import BASELINES, TrueSystemSpec
from .exceptions import AntlerError, ConfigError
from .gp_core import KernelSpec, train_hyperparameters
from .saa_optimizer import METHODS, QuadraticCost, SaaProblem, TrackingCost, ZeroCost
from .world_model import RolloutDraws, SystemSpec

SCHEMA_VERSION = 1
SECTIONS = ("system", "prior_data", "kernel", "law", "cost", "saa", "evaluation")
COST_KINDS = ("tracking", "quadratic", "zero")


class _Section(dict):
    """A mapping that remembers the source line of each key."""

    line: Optional[int] = None

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.lines: Dict[str, int] = {}


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Section()
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", key_node.start_mark.line + 1)
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _plain(obj):
    """Strip line bookkeeping, giving plain dicts and lists."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    return obj


class _Reader:
    """Typed access to one section with line-precise errors."""

    def __init__(self, section, name):
        if section is None:
            section = _Section()
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping", getattr(section, "line", None))
        self.section = section
        self.name = name
        self.used = set()

    def line(self, key):
        return getattr(self.section, "lines", {}).get(key, getattr(self.section, "line", None))

    def fail(self, key, message):
        raise ConfigError(f"{self.name}.{key}: {message}", self.line(key))

    def has(self, key):
        return key in self.section

    def raw(self, key, default=...):
        self.used.add(key)
        if key not in self.section:
            if default is ...:
                raise ConfigError(f"{self.name}: missing required key {key!r}", getattr(self.section, "line", None))
            return default
        return self.section[key]

    def number(self, key, default=..., *, low=None, high=None, low_open=False, integer=False):
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(key, f"expected a number, got {v!r}")
        if integer and (not float(v).is_integer()):
            self.fail(key, f"expected an integer, got {v!r}")
        v = int(v) if integer else float(v)
        if not np.isfinite(v):
            self.fail(key, "must be finite")
        if low is not None and (v <= low if low_open else v < low):
            self.fail(key, f"must be {'>' if low_open else '>='} {low}, got {v}")
        if high is not None and v > high:
            self.fail(key, f"must be <= {high}, got {v}")
        return v

    def integer(self, key, default=..., *, low=None, high=None):
        return self.number(key, default, low=low, high=high, integer=True)

    def choice(self, key, options, default=...):
        v = self.raw(key, default)
        if v not in options:
            self.fail(key, f"must be one of {list(options)}, got {v!r}")
        return v

    def boolean(self, key, default=...):
        v = self.raw(key, default)
        if not isinstance(v, bool):
            self.fail(key, f"expected true or false, got {v!r}")
        return v

    def vector(self, key, length=None, default=...):
        v = self.raw(key, default)
        if v is None:
            return None
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            v = [v]
        try:
            arr = np.array(v, dtype=float)
        except (TypeError, ValueError):
            self.fail(key, f"expected a list of numbers, got {v!r}")
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            self.fail(key, f"expected a flat list of finite numbers, got {v!r}")
        if length is not None and arr.shape[0] != length:
            self.fail(key, f"expected {length} entries, got {arr.shape[0]}")
        return arr

    def factory(self, key, catalog, what, default=..., **fixed):
        """``{kind: name, ...params}`` resolved against ``catalog``."""
        v = self.raw(key, default)
        if isinstance(v, str):
            v = {"kind": v}
        if not isinstance(v, dict) or "kind" not in v:
            self.fail(key, f"expected a mapping with a 'kind' entry, got {v!r}")
        params = {k: _plain(p) for k, p in v.items() if k != "kind"}
        if v["kind"] not in catalog:
            self.fail(key, f"unknown {what} {v['kind']!r}; known: {sorted(catalog)}")
        try:
            return catalog[v["kind"]](**fixed, **params)
        except (TypeError, ValueError, AntlerError) as exc:
            self.fail(key, f"invalid {what} parameters {params}: {exc}")

    def finish(self):
        extra = [k for k in self.section if k not in self.used]
        if extra:
            k = extra[0]
            self.fail(k, f"unknown key {k!r}")


@dataclass
class SaaSettings:
    M: int = 50
    M_list: tuple = (2, 10, 50, 100, 200)
    n_starts: int = 8
    seed: int = 0
    start_seed: Optional[int] = None
    max_iter: int = 100
    tol_theta: float = 1e-5
    tol_cost: float = 1e-8
    method: str = "scaled"

    def to_dict(self) -> dict:
        return {"M": self.M, "M_list": list(self.M_list), "n_starts": self.n_starts, "seed": self.seed,
                "start_seed": self.start_seed, "max_iter": self.max_iter, "tol_theta": self.tol_theta,
                "tol_cost": self.tol_cost, "method": self.method}


@dataclass
class EvaluationSettings:
    true_g: Any
    n_runs: int = 100
    seed: int = 0
    baseline: str = "frozen"
    theta_antler: Optional[np.ndarray] = None
    theta_baseline: Optional[np.ndarray] = None


@dataclass(eq=False)
class ExperimentConfig:
    """A validated experiment.

    Build one with :func:`load_config` or :func:`parse_config`; ``raw``
    is the document as written and ``config_hash`` the SHA-256 of its
    canonical JSON form together with the prior-data bytes.
    """

    raw: dict
    base_dir: Path
    state_dim: int
    input_dim: int
    prior_model: Any
    process_noise_std: np.ndarray
    horizon: int
    x0: np.ndarray
    prior_data: PriorData
    world_uses_prior: bool
    kernel_setting: Any
    active_dims: Optional[tuple]
    train_restarts: int
    train_seed: int
    law_name: str
    law_kwargs: dict
    reference: Optional[np.ndarray]
    cost_kind: str
    cost_params: dict
    saa: SaaSettings
    evaluation: EvaluationSettings
    config_hash: str = ""
    _trained: Optional[tuple] = field(default=None, repr=False)

    # -- resolution ------------------------------------------------------

    def kernels(self) -> tuple:
        """Kernel per state dimension; trained on the prior data when configured."""
        if self._trained is not None:
            return self._trained
        if self.kernel_setting == "train":
            if len(self.prior_data) < 2:
                raise ConfigError("kernel.hyperparameters: 'train' needs at least two prior measurements")
            noise = np.broadcast_to(self.process_noise_std ** 2, (self.state_dim,))
            kernels = []
            for i in range(self.state_dim):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    kernels.append(train_hyperparameters(
                        self.prior_data.inputs, self.prior_data.targets[:, i], float(noise[i]),
                        KernelSpec(1.0, 1.0, self.active_dims), n_restarts=self.train_restarts,
                        random_state=self.train_seed))
            self._trained = tuple(kernels)
        else:
            s2, l = self.kernel_setting
            self._trained = (KernelSpec(s2, l, self.active_dims),) * self.state_dim
        return self._trained

    def system(self) -> SystemSpec:
        return SystemSpec(self.state_dim, self.input_dim, self.prior_model, self.process_noise_std,
                          self.kernels(), self.horizon, self.prior_data, self.world_uses_prior)

    def law(self) -> ControlLaw:
        return make_law(self.law_name, **self.law_kwargs)

    def counterpart_law(self) -> ControlLaw:
        return data_independent_counterpart(self.law())

    def stage_cost(self):
        if self.cost_kind == "tracking":
            ref = self.reference if self.reference is not None else np.zeros(self.horizon + 1)
            return TrackingCost(ref, self.cost_params.get("input_weight", 0.0))
        if self.cost_kind == "quadratic":
            return QuadraticCost(self.cost_params["Q"], self.cost_params["R"])
        return ZeroCost()

    def problem(self, M=None, seed=None, law: Optional[ControlLaw] = None) -> SaaProblem:
        """SAA problem with ``M`` draws from ``seed`` (defaults from the saa section)."""
        M = self.saa.M if M is None else int(M)
        seed = self.saa.seed if seed is None else int(seed)
        draws = RolloutDraws.generate(M, self.horizon, self.state_dim, seed)
        return SaaProblem(self.system(), law or self.law(), self.stage_cost(), self.x0, draws)

    def true_system(self) -> TrueSystemSpec:
        return TrueSystemSpec.from_system(self.system(), self.evaluation.true_g)

    def resolved(self) -> dict:
        """Plain-data description of the resolved experiment (for run records)."""
        return {
            "schema_version": SCHEMA_VERSION,
            "config": _plain(self.raw),
            "kernels": [k.to_dict() for k in self.kernels()],
            "prior_data_rows": len(self.prior_data),
        }


def _canonical(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), default=str)


def parse_config(text: str, base_dir=".", *, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a YAML config string.

    Raises
    ------
    ConfigError
        With the line of the offending key.
    """
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
        raise ConfigError(f"{source}: YAML syntax error: {exc.problem}", line) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: YAML error: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping", 1)
    base_dir = Path(base_dir)
    top = _Reader(doc, "config")
    version = top.raw("schema_version")
    if version != SCHEMA_VERSION:
        top.fail("schema_version", f"unsupported schema_version {version!r}; this build reads {SCHEMA_VERSION}")
    top.raw("name", None)
    top.raw("description", None)
    for s in SECTIONS:
        top.raw(s, None)
    top.finish()

    # system
    sysr = _Reader(doc.get("system"), "system")
    n = sysr.integer("state_dim", 1, low=1)
    m = sysr.integer("input_dim", 1, low=1)
    prior_model = sysr.factory("prior_model", benchmark.PRIOR_MODELS, "prior model", {"kind": "additive"})
    sw = sysr.vector("process_noise_std")
    if sw.shape[0] not in (1, n) or np.any(sw < 0):
        sysr.fail("process_noise_std", f"expected 1 or {n} nonnegative entries")
    sw = np.broadcast_to(sw, (n,)).copy()
    horizon = sysr.integer("horizon", low=1)
    x0 = sysr.vector("x0", n, np.zeros(n))
    try:
        fx = np.asarray(prior_model(np.zeros((1, n)), np.zeros((1, m))), dtype=float)
    except Exception as exc:
        sysr.fail("prior_model", f"cannot evaluate on (1, {n}) x (1, {m}) arrays: {exc}")
    if fx.shape != (1, n):
        sysr.fail("prior_model", f"returns shape {fx.shape}, expected (1, {n})")
    sysr.finish()

    # prior data
    pr = _Reader(doc.get("prior_data"), "prior_data")
    prior_bytes = b""
    if pr.has("path"):
        rel = pr.raw("path")
        if not isinstance(rel, str):
            pr.fail("path", "expected a file path")
        targets = pr.choice("targets", TARGET_MODES, "increment")
        path = (base_dir / rel) if not Path(rel).is_absolute() else Path(rel)
        if not path.is_file():
            pr.fail("path", f"file not found: {path}")
        prior_bytes = path.read_bytes()
        prior = ingest_prior_data(path, n, m, targets, prior_model)
    else:
        pr.raw("targets", None)
        prior = PriorData.empty(n, m)
    world_uses_prior = pr.boolean("world_uses_prior", True)
    pr.finish()

    # kernel
    kr = _Reader(doc.get("kernel"), "kernel")
    hp = kr.raw("hyperparameters")
    if hp == "train":
        kernel_setting = "train"
    elif isinstance(hp, dict):
        hr = _Reader(hp, "kernel.hyperparameters")
        kernel_setting = (hr.number("signal_variance", low=0.0), hr.number("lengthscale", low=0.0, low_open=True))
        hr.finish()
    else:
        kr.fail("hyperparameters", f"expected 'train' or a mapping, got {hp!r}")
    dims = kr.raw("active_dims", None)
    if dims is not None:
        if not isinstance(dims, list) or not dims or not all(isinstance(d, int) and 0 <= d < n + m for d in dims) \
                or len(set(dims)) != len(dims):
            kr.fail("active_dims", f"expected distinct indices in [0, {n + m}), got {dims!r}")
        dims = tuple(dims)
    restarts = kr.integer("n_restarts", 5, low=0)
    train_seed = kr.integer("random_state", 0, low=0)
    kr.finish()

    # law
    lr = _Reader(doc.get("law"), "law")
    law_name = lr.choice("name", sorted(LAW_CATALOG))
    box = lr.raw("param_box")
    try:
        box_arr = np.array(box, dtype=float)
    except (TypeError, ValueError):
        box_arr = None
    if box_arr is None or box_arr.ndim != 2 or box_arr.shape[1] != 2 or not np.all(np.isfinite(box_arr)) \
            or not np.all(box_arr[:, 0] <= box_arr[:, 1]):
        lr.fail("param_box", f"expected a list of [low, high] pairs, got {box!r}")
    reference = None
    if lr.has("reference"):
        reference = np.asarray(lr.factory("reference", benchmark.REFERENCES, "reference", horizon=horizon),
                               dtype=float)
    if law_name == "gp_tracking":
        if reference is None:
            lr.fail("reference", "gp_tracking needs a reference")
        if m != n:
            lr.fail("name", "gp_tracking needs input_dim == state_dim")
        law_kwargs = {"reference": reference, "param_box": box_arr.tolist()}
    else:
        law_kwargs = {"state_dim": n, "input_dim": m, "param_box": box_arr.tolist()}
    try:
        law = make_law(law_name, **law_kwargs)
    except AntlerError as exc:
        lr.fail("param_box", str(exc))
    lr.finish()

    # cost
    cr = _Reader(doc.get("cost"), "cost")
    cost_kind = cr.choice("kind", COST_KINDS, "tracking")
    cost_params: Dict[str, Any] = {}
    if cost_kind == "tracking":
        cost_params["input_weight"] = cr.number("input_weight", 0.0, low=0.0)
    elif cost_kind == "quadratic":
        for key, size in (("Q", n), ("R", m)):
            try:
                M_ = np.array(cr.raw(key), dtype=float).reshape(size, size)
                QuadraticCost(M_ if key == "Q" else np.eye(n), M_ if key == "R" else np.eye(m))
            except (TypeError, ValueError) as exc:
                cr.fail(key, f"expected a {size}x{size} positive semidefinite matrix ({exc})")
            cost_params[key] = M_
    cr.finish()

    # saa
    sr = _Reader(doc.get("saa"), "saa")
    saa = SaaSettings()
    saa.M = sr.integer("M", saa.M, low=1)
    if sr.has("M_list"):
        ml = sr.raw("M_list")
        if not isinstance(ml, list) or not ml or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1
                                                         for v in ml) or ml != sorted(ml):
            sr.fail("M_list", f"expected a nondecreasing list of positive integers, got {ml!r}")
        saa.M_list = tuple(ml)
    saa.n_starts = sr.integer("n_starts", saa.n_starts, low=1)
    saa.seed = sr.integer("seed", saa.seed, low=0)
    ss = sr.raw("start_seed", None)
    saa.start_seed = None if ss is None else sr.integer("start_seed", low=0)
    saa.max_iter = sr.integer("max_iter", saa.max_iter, low=1)
    saa.tol_theta = sr.number("tol_theta", saa.tol_theta, low=0.0)
    saa.tol_cost = sr.number("tol_cost", saa.tol_cost, low=0.0)
    saa.method = sr.choice("method", METHODS, saa.method)
    sr.finish()

    # evaluation
    er = _Reader(doc.get("evaluation"), "evaluation")
    true_g = er.factory("true_g", benchmark.TRUE_FUNCTIONS, "true function", {"kind": "zero"})
    ev = EvaluationSettings(true_g)
    ev.n_runs = er.integer("n_runs", ev.n_runs, low=1)
    ev.seed = er.integer("seed", ev.seed, low=0)
    ev.baseline = er.choice("baseline", BASELINES, ev.baseline)
    for key in ("theta_antler", "theta_baseline"):
        th = er.vector(key, law.param_dim, None)
        if th is not None and not law.contains(th):
            er.fail(key, f"{th.tolist()} lies outside the parameter box")
        setattr(ev, key, th)
    er.finish()

    cfg = ExperimentConfig(
        raw=_plain(doc), base_dir=base_dir, state_dim=n, input_dim=m, prior_model=prior_model,
        process_noise_std=sw, horizon=horizon, x0=x0, prior_data=prior, world_uses_prior=world_uses_prior,
        kernel_setting=kernel_setting, active_dims=dims, train_restarts=restarts, train_seed=train_seed,
        law_name=law_name, law_kwargs=law_kwargs, reference=reference, cost_kind=cost_kind,
        cost_params=cost_params, saa=saa, evaluation=ev)
    digest = hashlib.sha256(_canonical(cfg.raw).encode())
    digest.update(hashlib.sha256(prior_bytes).digest())
    cfg.config_hash = digest.hexdigest()
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read, parse and validate a config file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent, source=str(path))


def with_overrides(cfg: ExperimentConfig, section: str, **values) -> ExperimentConfig:
    """Re-validate ``cfg`` with some keys of one section replaced."""
    raw = copy.deepcopy(cfg.raw)
    raw.setdefault(section, {}).update(values)
    text = yaml.safe_dump(raw, sort_keys=False)
    return parse_config(text, cfg.base_dir)
