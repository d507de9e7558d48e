"""Replicate studies: simulate, fit, evaluate, aggregate.

A study is configured by a YAML file (see :class:`ExperimentConfig`). Each
replicate's data depend only on (seed, n, K, replicate index), so results are
identical whatever the worker count or execution order.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .basis import BasisSpec, FeatureMap, zeta_reference
from .core import ContractError, LinearPolicy, ReferenceDistribution
from .io import FormatError
from .ope import METHODS, REWARD_MODES, Problem, evaluate_all
from .renewal import CovariateBuilder, fit_renewal
from .simulate import ScenarioSpec, gen_dataset, monte_carlo_truth, scenario

log = logging.getLogger(__name__)

# Policy coefficients used in the simulation study, keyed by scenario
DEFAULT_ALPHA = {
    "scenario1": [0.0, -1.0, 0.0],
    "scenario2": [-1.0, -1.0, 1.0],
    "scenario3": [-1.0, -1.0, 1.0],
    "scenario4": [-1.0, -1.0, 1.0],
}

DEFAULT_REFERENCES = {
    "cumulative": {"kind": "uniform-box", "s_lo": [-1.0], "s_hi": [1.0], "x_lo": 0.0, "x_hi": 2.0},
    "integrated": {"kind": "uniform-box", "s_lo": [-0.2], "s_hi": [0.2], "x_lo": 0.0, "x_hi": 1.0},
}


def reference_from_dict(d: dict) -> ReferenceDistribution:
    if d["kind"] == "uniform-box":
        return ReferenceDistribution.uniform_box(d["s_lo"], d["s_hi"], d["x_lo"], d["x_hi"])
    if d["kind"] == "point-mass":
        return ReferenceDistribution.point_mass(d["s"], d["x"])
    raise ContractError(f"unknown reference kind {d['kind']!r}")


@dataclass
class ExperimentConfig:
    scenario: str = "scenario1"
    scenario_overrides: dict = field(default_factory=dict)
    grid: list = field(default_factory=lambda: [[400, 10]])
    gamma: float = 0.7
    policy: dict = field(default_factory=dict)
    references: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_REFERENCES))
    methods: list = field(default_factory=lambda: list(METHODS))
    reward_modes: list = field(default_factory=lambda: list(REWARD_MODES))
    replicates: int = 200
    seed: int = 2024
    basis: dict = field(default_factory=lambda: {"degree": 3, "q_s": 3, "q_x": 3})
    renewal: dict = field(default_factory=lambda: {"scheme": "scheme1", "tau_quantile": 1.0,
                                                   "min_risk": 5, "bandwidth_const": None})
    truth: dict = field(default_factory=lambda: {"N": 100_000, "tail_tol": 1e-6, "seed": 1,
                                                 "cache_dir": None})
    output: str = "results"
    threads: int = 1

    def __post_init__(self):
        if not self.policy:
            self.policy = {"alpha": DEFAULT_ALPHA.get(self.scenario, [0.0, -1.0, 0.0]),
                           "indicator_action": 0}
        self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        base = cls.__new__(cls)
        defaults = {k: (f.default_factory() if callable(f.default_factory) else f.default)
                    for k, f in cls.__dataclass_fields__.items()}
        for key in ("references", "basis", "renewal", "truth"):
            if key in d:
                merged = dict(defaults[key])
                merged.update(d[key] or {})
                d[key] = merged
        defaults.update(d)
        base.__init__(**defaults)
        return base

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def validate(self):
        if self.replicates < 1:
            raise ContractError("replicates must be at least 1")
        if not 0 < self.gamma < 1:
            raise ContractError("gamma must lie in (0, 1)")
        for m in self.methods:
            if m not in METHODS:
                raise ContractError(f"unknown method {m!r}")
        for r in self.reward_modes:
            if r not in REWARD_MODES:
                raise ContractError(f"unknown reward mode {r!r}")
            if r not in self.references:
                raise ContractError(f"no reference distribution for reward mode {r!r}")
        for nk in self.grid:
            if len(nk) != 2 or nk[0] < 1 or nk[1] < 1:
                raise ContractError(f"bad (n, K) grid entry {nk!r}")
        self.scenario_spec()

    def scenario_spec(self) -> ScenarioSpec:
        return scenario(self.scenario, **self.scenario_overrides)

    def policy_obj(self) -> LinearPolicy:
        return LinearPolicy.from_alpha(self.policy["alpha"], self.policy.get("indicator_action", 0))

    def reference(self, mode: str) -> ReferenceDistribution:
        return reference_from_dict(self.references[mode])

    def needs_fit(self) -> bool:
        return "modulated" in self.methods or "integrated" in self.reward_modes


# -- truth ------------------------------------------------------------------------------


def _truth_key(cfg: ExperimentConfig, mode: str) -> str:
    spec = cfg.scenario_spec()
    payload = {
        "scenario": [spec.state_model, spec.gap_model, spec.baseline, spec.state_noise_sd,
                     spec.reward_noise_sd],
        "policy": [list(map(float, cfg.policy["alpha"])), cfg.policy.get("indicator_action", 0)],
        "reference": cfg.references[mode],
        "gamma": cfg.gamma,
        "N": cfg.truth["N"],
        "tail_tol": cfg.truth["tail_tol"],
        "seed": cfg.truth["seed"],
        "mode": mode,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def run_truth(cfg: ExperimentConfig) -> dict:
    """Monte Carlo truth per reward mode, cached on disk by configuration hash."""
    out = {}
    cache_dir = cfg.truth.get("cache_dir")
    for i, mode in enumerate(cfg.reward_modes):
        key = _truth_key(cfg, mode)
        path = Path(cache_dir) / f"truth-{key}.json" if cache_dir else None
        if path is not None and path.exists():
            out[mode] = json.loads(path.read_text())
            continue
        seed = np.random.SeedSequence(int(cfg.truth["seed"]), spawn_key=(i,))
        est = monte_carlo_truth(cfg.scenario_spec(), cfg.policy_obj(), cfg.reference(mode), cfg.gamma,
                                int(cfg.truth["N"]), float(cfg.truth["tail_tol"]), seed=seed,
                                reward_mode=mode)
        rec = {"value": est.value, "mc_standard_error": est.mc_standard_error, "N": est.N,
               "reward_mode": mode, "key": key}
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(rec, indent=2))
        out[mode] = rec
    return out


# -- replicates -----------------------------------------------------------------------

REPLICATE_FIELDS = ["scenario", "n", "K", "replicate", "method", "reward_mode", "status", "reason",
                    "value", "se", "ci_lo", "ci_hi", "truth", "covered", "n_transitions",
                    "design_cond", "orthogonality", "n_floored", "newton_iterations", "tau"]


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "NA" if math.isnan(v) else repr(float(v))
    return str(v)


def replicate_seed(base_seed: int, n: int, K: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(n), int(K), int(i)))


def _pairs(cfg):
    return [(m, r) for m in cfg.methods for r in cfg.reward_modes]


def _needs_fit(method, mode):
    return method == "modulated" or mode == "integrated"


def run_replicate(cfg: ExperimentConfig, n: int, K: int, i: int, truths: dict, zetas=None) -> list[dict]:
    """One replicate: returns one record per (method, reward mode)."""
    base = {"scenario": cfg.scenario, "n": n, "K": K, "replicate": i}
    pairs = _pairs(cfg)
    recs = {p: dict(base, method=p[0], reward_mode=p[1], status="ok", reason="") for p in pairs}
    try:
        ds = gen_dataset(cfg.scenario_spec(), n, K, seed=replicate_seed(cfg.seed, n, K, i))
        fmap = FeatureMap.from_data(ds, BasisSpec(**cfg.basis))
    except Exception as exc:  # failures are recorded, not fatal
        return [dict(r, status="failed", reason=f"data: {exc}") for r in recs.values()]
    fit = None
    fit_error = None
    if any(_needs_fit(*p) for p in pairs):
        rn = cfg.renewal
        try:
            fit = fit_renewal(ds, CovariateBuilder(rn.get("scheme", "scheme1")),
                              tau_quantile=rn.get("tau_quantile", 1.0), min_risk=rn.get("min_risk", 5),
                              bandwidth_const=rn.get("bandwidth_const"))
        except Exception as exc:
            fit_error = f"renewal: {type(exc).__name__}: {exc}"
    problem = Problem(ds, cfg.policy_obj(), fmap, cfg.gamma, fit)
    targets = {r: cfg.reference(r) for r in cfg.reward_modes}
    if zetas is None:
        zetas = {r: zeta_reference(fmap, problem.policy, targets[r]) for r in cfg.reward_modes}
    ok_pairs = [p for p in pairs if not (_needs_fit(*p) and fit is None)]
    results, models = {}, {}
    try:
        res, mods = evaluate_all(problem, sorted({p[0] for p in ok_pairs}, key=METHODS.index),
                                 sorted({p[1] for p in ok_pairs}, key=REWARD_MODES.index), targets, zetas)
        results.update({k: v for k, v in res.items() if k in ok_pairs})
        models.update(mods)
    except Exception:
        # isolate the failing pair(s)
        for p in ok_pairs:
            try:
                res, mods = evaluate_all(problem, [p[0]], [p[1]], targets, zetas)
                results.update(res)
                models.update(mods)
            except Exception as exc:
                recs[p].update(status="failed", reason=f"{type(exc).__name__}: {exc}")
    for p, rec in recs.items():
        rec["n_transitions"] = problem.n_K
        if fit is not None:
            rec["newton_iterations"] = fit.iterations
            rec["tau"] = fit.tau
        if p not in results:
            if rec["status"] == "ok":
                rec.update(status="failed", reason=fit_error or "not evaluated")
            continue
        est, model = results[p], models[p]
        truth = truths.get(p[1], {}).get("value") if truths else None
        rec.update(value=est.value, se=est.se, ci_lo=est.ci[0], ci_hi=est.ci[1], truth=truth,
                   design_cond=model.cond, orthogonality=model.orthogonality, n_floored=model.n_floored)
        if truth is not None and p[0] != "naive":
            rec["covered"] = bool(est.ci[0] <= truth <= est.ci[1])
    return list(recs.values())


def _worker(args):
    cfg_dict, n, K, i, truths = args
    return run_replicate(ExperimentConfig.from_dict(cfg_dict), n, K, i, truths)


def iter_records(cfg: ExperimentConfig, truths: dict) -> list[dict]:
    jobs = [(cfg.to_dict(), int(n), int(K), i, truths) for n, K in cfg.grid for i in range(cfg.replicates)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
            chunks = list(ex.map(_worker, jobs, chunksize=4))
    else:
        chunks = [_worker(j) for j in jobs]
    return [r for c in chunks for r in c]


# -- aggregation --------------------------------------------------------------------

SUMMARY_FIELDS = ["scenario", "n", "K", "method", "reward_mode", "truth", "n_ok", "n_excluded",
                  "mean", "bias", "sd", "mean_se", "cp"]


def _num(v):
    if v in (None, "", "NA"):
        return None
    return float(v)


def summarize(records: list[dict]) -> list[dict]:
    """Bias, SD, mean SE and coverage per (scenario, n, K, method, reward mode)."""
    groups = {}
    for r in records:
        key = (r["scenario"], int(r["n"]), int(r["K"]), r["method"], r["reward_mode"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], METHODS.index(k[3]), REWARD_MODES.index(k[4]))):
        rs = groups[key]
        ok = [r for r in rs if r["status"] == "ok"]
        vals = np.array([_num(r["value"]) for r in ok], dtype=float)
        truth = _num(ok[0]["truth"]) if ok else None
        row = dict(zip(["scenario", "n", "K", "method", "reward_mode"], key))
        row.update(truth=truth, n_ok=len(ok), n_excluded=len(rs) - len(ok))
        row["mean"] = float(vals.mean()) if len(vals) else None
        row["bias"] = row["mean"] - truth if (truth is not None and len(vals)) else None
        row["sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else None
        ses = [_num(r["se"]) for r in ok]
        row["mean_se"] = float(np.mean(ses)) if ok and key[3] != "naive" and None not in ses else None
        cov = [r.get("covered") for r in ok]
        if ok and key[3] != "naive" and all(c not in (None, "", "NA") for c in cov):
            row["cp"] = float(np.mean([int(c) for c in cov]))
        else:
            row["cp"] = None
        out.append(row)
    return out


def write_csv(path, rows, fields):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f)) for f in fields])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Run the full study and write replicates.csv, summary.csv, table.csv, truth.json, config.yaml."""
    out = Path(out_dir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    truths = run_truth(cfg)
    (out / "truth.json").write_text(json.dumps(truths, indent=2, sort_keys=True))
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    records = iter_records(cfg, truths)
    write_csv(out / "replicates.csv", records, REPLICATE_FIELDS)
    summary = summarize(records)
    write_csv(out / "summary.csv", summary, SUMMARY_FIELDS)
    report([out / "summary.csv"], out)
    log.info("study finished in %.1fs (%d records)", time.time() - t0, len(records))
    return out


# -- report ------------------------------------------------------------------------

TABLE_LETTER = {"naive": "N", "standard": "S", "modulated": "M"}


def report(summary_paths, out_dir) -> Path:
    """Merge summaries into a wide Bias/SD/SE/CP table plus a long-format file."""
    if not summary_paths:
        raise FormatError("no summary files given")
    rows = []
    for p in summary_paths:
        part = read_csv(p)
        if not part or set(SUMMARY_FIELDS) - set(part[0]):
            raise FormatError(f"{p}: not a summary file (missing columns)")
        rows.extend(part)
    seen = {}
    for r in rows:
        seen[(r["scenario"], int(r["n"]), int(r["K"]), r["method"], r["reward_mode"])] = r
    keys = sorted(seen, key=lambda k: (k[0], k[4], k[1], k[2], METHODS.index(k[3])))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    long_rows = [seen[k] for k in keys]
    with open(out / "long.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in long_rows:
            w.writerow([r[f] for f in SUMMARY_FIELDS])
    cols = ["scenario", "reward_mode", "truth", "n", "K"]
    for m in METHODS:
        L = TABLE_LETTER[m]
        cols += [f"Bias_{L}", f"SD_{L}"] + ([f"SE_{L}", f"CP_{L}"] if m != "naive" else [])
    table = {}
    for (sc, n, K, m, mode) in keys:
        r = seen[(sc, n, K, m, mode)]
        row = table.setdefault((sc, mode, n, K), {"scenario": sc, "reward_mode": mode, "truth": r["truth"],
                                                  "n": n, "K": K})
        L = TABLE_LETTER[m]
        row[f"Bias_{L}"], row[f"SD_{L}"] = r["bias"], r["sd"]
        if m != "naive":
            row[f"SE_{L}"], row[f"CP_{L}"] = r["mean_se"], r["cp"]
    with open(out / "table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for key in sorted(table, key=lambda k: (k[0], REWARD_MODES.index(k[1]), -k[3], k[2])):
            w.writerow([table[key].get(c, "NA") for c in cols])
    return out


def _cpu_count() -> int:
    return os.cpu_count() or 1
