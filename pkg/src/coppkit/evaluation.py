"""Coverage and length metrics, and the seeded experiment runner behind the tables."""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, conformal as cf, envs, models, weights
from .core import PredictionSet, SplitSpec, split_dataset
from .nn import MlpSpec, TrainingError, TrainOpts

SCHEMA_VERSION = "coppkit-report-1"

METHODS = ("copp_gt", "copp_est", "copp_regression_weights", "standard_cp", "union_cp", "wis", "sba",
           "class_balanced_copp", "oracle")


# --------------------------------------------------------------------------- metrics


def _batch_or_list(sets):
    if isinstance(sets, (cf.GridSets, cf.LabelSets, cf.IntervalSets)):
        return sets
    return list(sets)


def coverage(sets, truths) -> tuple[float, float]:
    """Hit rate of ``truths`` in ``sets`` with its binomial standard error."""
    sets = _batch_or_list(sets)
    truths = np.asarray(truths)
    if len(sets) != truths.shape[0]:
        raise ValueError(f"got {len(sets)} sets but {truths.shape[0]} truths")
    if len(sets) == 0:
        raise ValueError("need at least one set")
    if isinstance(sets, list):
        hits = np.array([s.contains(t) for s, t in zip(sets, truths.tolist())], dtype=float)
    else:
        hits = sets.contains(truths).astype(float)
    p = float(hits.mean())
    return p, float(np.sqrt(p * (1 - p) / hits.size))


def _lengths(sets, hull=False) -> np.ndarray:
    sets = _batch_or_list(sets)
    if isinstance(sets, list):
        return np.array([s.hull_length() if hull else s.length() for s in sets], dtype=float)
    return sets.hull_lengths() if hull else sets.lengths()


def mean_length(sets, hull: bool = False) -> tuple[float, float]:
    """Mean grid measure (or interval width, or label count) and its standard error.

    ``hull=True`` reports the convex-hull length instead.
    """
    lens = _lengths(sets, hull)
    if lens.size == 0:
        raise ValueError("need at least one set")
    se = float(lens.std(ddof=1) / np.sqrt(lens.size)) if lens.size > 1 else 0.0
    return float(lens.mean()), se


def conditional_coverage_diagnostic(sets, truths, xs, bins: int = 10) -> list[dict]:
    """Coverage within equal-frequency bins of the first covariate."""
    if bins < 1:
        raise ValueError("bins must be at least 1")
    sets = _batch_or_list(sets)
    truths = np.asarray(truths)
    xs = np.asarray(xs, dtype=float)
    x0 = xs[:, 0] if xs.ndim == 2 else xs
    if isinstance(sets, list):
        hits = np.array([s.contains(t) for s, t in zip(sets, truths.tolist())], dtype=float)
    else:
        hits = sets.contains(truths).astype(float)
    order = np.argsort(x0, kind="stable")
    table = []
    for b, idx in enumerate(np.array_split(order, bins)):
        if idx.size == 0:
            continue
        p = float(hits[idx].mean())
        table.append({"bin": b, "x_lo": float(x0[idx].min()), "x_hi": float(x0[idx].max()),
                      "count": int(idx.size), "coverage": p, "se": float(np.sqrt(p * (1 - p) / idx.size))})
    return table


# --------------------------------------------------------------------------- configuration


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["env", "eps_star", "seeds"],
    "properties": {
        "name": {"type": "string"},
        "env": {"enum": ["toy-discrete", "toy-continuous", "synthetic-classification"]},
        "eps_b": {"type": "number"},
        "eps_star": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "m": {"type": "integer", "minimum": 1},
        "n": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {"count": {"type": "integer", "minimum": 2},
                           "margin": {"type": "number", "minimum": 0}},
        },
        "methods": {"type": "array", "minItems": 1, "uniqueItems": True,
                    "items": {"enum": list(METHODS)}},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "h": {"type": "integer", "minimum": 1},
        "ell": {"type": "integer", "minimum": 2},
        "weight_estimator": {"enum": ["exact_sum", "monte_carlo"]},
        "union_score": {"enum": ["shared", "per_action"]},
        "arch": {
            "type": "object", "additionalProperties": False,
            "properties": {k: {"type": "array", "items": {"type": "integer", "minimum": 1}}
                           for k in ("policy", "outcome", "quantile", "weight", "union")},
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {"lr": {"type": "number", "exclusiveMinimum": 0},
                           "epochs": {"type": "integer", "minimum": 1},
                           "batch_size": {"type": "integer", "minimum": 1},
                           "val_frac": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                           "patience": {"type": "integer", "minimum": 1}},
        },
    },
}


class ConfigError(ValueError):
    """Configuration failed validation; ``path`` names the offending key."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_ENV_METHODS = {
    "toy-discrete": {"copp_gt", "copp_est", "copp_regression_weights", "standard_cp", "union_cp", "wis",
                     "sba", "oracle"},
    "toy-continuous": {"copp_gt", "copp_est", "copp_regression_weights", "standard_cp", "wis", "sba",
                       "oracle"},
    "synthetic-classification": {"copp_gt", "copp_est", "copp_regression_weights", "standard_cp",
                                 "class_balanced_copp"},
}
_DEFAULT_ARCH = {"policy": [16, 16], "outcome": [32], "quantile": [32], "weight": [32], "union": [64, 64]}
_DEFAULT_EPS_B = {"toy-discrete": 0.3, "toy-continuous": 0.0, "synthetic-classification": 0.5}


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    eps_star: tuple
    seeds: tuple = tuple(range(1, 11))
    eps_b: Optional[float] = None
    alpha: float = 0.1
    m: int = 1000
    n: int = 5000
    n_test: int = 5000
    grid_count: int = 100
    grid_margin: float = 0.25
    methods: tuple = ("copp_gt", "copp_est", "standard_cp")
    h: int = 500
    ell: int = 1000
    weight_estimator: str = "exact_sum"
    union_score: str = "per_action"
    arch: dict = field(default_factory=lambda: dict(_DEFAULT_ARCH))
    train: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.eps_b is None:
            object.__setattr__(self, "eps_b", _DEFAULT_EPS_B[self.env])
        if not self.seeds:
            raise ConfigError("must list at least one seed", "seeds")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("must lie in (0, 1)", "alpha")
        bad = [mth for mth in self.methods if mth not in _ENV_METHODS[self.env]]
        if bad:
            raise ConfigError(f"{bad[0]} is not available for env {self.env}", "methods")
        if self.env == "toy-discrete":
            for i, e in enumerate((self.eps_b, *self.eps_star)):
                if not 0.0 < e < 1.0 / 3.0:
                    where = "eps_b" if i == 0 else f"eps_star/{i - 1}"
                    raise ConfigError(f"policy parameter {e} must lie in (0, 1/3)", where)
        if self.env == "synthetic-classification":
            for i, e in enumerate((self.eps_b, *self.eps_star)):
                if not 0.0 <= e <= 1.0:
                    where = "eps_b" if i == 0 else f"eps_star/{i - 1}"
                    raise ConfigError(f"policy parameter {e} must lie in [0, 1]", where)
        if self.weight_estimator == "exact_sum" and self.env == "toy-continuous":
            object.__setattr__(self, "weight_estimator", "monte_carlo")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            path = "/".join(str(p) for p in err.absolute_path)
            if err.validator == "additionalProperties":
                extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
                path = "/".join([p for p in [path, extra[0] if extra else ""] if p])
                raise ConfigError("unknown key", path)
            raise ConfigError(err.message, path or "(root)")
        kw = {k: v for k, v in doc.items() if k not in ("grid", "arch", "train")}
        for key in ("eps_star", "seeds", "methods"):
            if key in kw:
                kw[key] = tuple(kw[key])
        grid = doc.get("grid", {})
        if "count" in grid:
            kw["grid_count"] = grid["count"]
        if "margin" in grid:
            kw["grid_margin"] = grid["margin"]
        arch = dict(_DEFAULT_ARCH)
        arch.update(doc.get("arch", {}))
        kw["arch"] = arch
        kw["train"] = dict(doc.get("train", {}))
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps_star"] = list(self.eps_star)
        d["seeds"] = list(self.seeds)
        d["methods"] = list(self.methods)
        return d

    def train_opts(self, seed: int) -> TrainOpts:
        return TrainOpts(seed=seed, **self.train)


# --------------------------------------------------------------------------- runner


def _needs(cfg: ExperimentConfig):
    ms = set(cfg.methods)
    return {
        "score": bool(ms & {"copp_gt", "copp_est", "copp_regression_weights", "standard_cp",
                            "class_balanced_copp"}) or ("union_cp" in ms and cfg.union_score == "shared"),
        "p_hat": bool(ms & {"copp_est", "sba"}),
        "pi_b_hat": bool(ms & {"copp_est", "copp_regression_weights", "wis"}),
    }


@dataclass
class _SeedModels:
    score: Optional[cf.ScoreFn] = None
    cal: Optional[cf.CalibrationSet] = None
    p_hat: object = None
    pi_b_hat: object = None
    union: Optional[dict] = None
    target: object = None
    warnings: list = field(default_factory=list)


def _fit_seed_models(cfg, env, train, cal, seeds):
    need = _needs(cfg)
    spec = lambda key, s: MlpSpec(1, tuple(cfg.arch[key]), 1, seed=s)  # noqa: E731
    out = _SeedModels()
    discrete_y = env.outcome_kind.discrete
    if need["pi_b_hat"] or (need["score"] and discrete_y):
        out.pi_b_hat = models.fit_behavior_policy(train, spec("policy", seeds[0]), cfg.train_opts(seeds[1]))
    if need["p_hat"] or (need["score"] and discrete_y):
        if discrete_y:
            out.p_hat = models.fit_categorical_conditional(train, spec("outcome", seeds[2]),
                                                           cfg.train_opts(seeds[3]))
        else:
            out.p_hat = models.fit_gaussian_conditional(train, spec("outcome", seeds[2]),
                                                        cfg.train_opts(seeds[3]))
    if need["score"]:
        if discrete_y:
            p_hat, pi_b_hat = out.p_hat, out.pi_b_hat

            def pyx(X):
                return np.einsum("nk,nkl->nl", pi_b_hat.probs(X), p_hat.probs_all(X))

            out.score = cf.discrete_cumprob_score_fn(pyx)
        else:
            q = models.fit_quantile_pair(train, cfg.alpha / 2, 1 - cfg.alpha / 2, spec("quantile", seeds[4]),
                                         cfg.train_opts(seeds[5]))
            out.score = cf.cqr_score_fn(q)
        out.cal = cf.CalibrationSet.from_data(cal, out.score)
    if "union_cp" in cfg.methods:
        out.union = {}
        for a in range(env.action_kind.size):
            if cfg.union_score == "shared":
                # one score for every action, calibrated on that action's rows only
                out.union[a] = (out.score, out.cal.subset(np.flatnonzero(cal.A == a)))
                continue
            tr_a, cal_a = train.where_action(a), cal.where_action(a)
            if len(tr_a) < 2:
                out.warnings.append(f"union_cp: action {a} has {len(tr_a)} training samples; skipped")
                out.union[a] = (None, cf.CalibrationSet(np.empty((0, cal.d)), np.empty(0), np.empty(0)))
                continue
            qa = models.fit_quantile_pair(tr_a, cfg.alpha / 2, 1 - cfg.alpha / 2,
                                          spec("union", seeds[6] + a), cfg.train_opts(seeds[7] + a))
            sa = cf.cqr_score_fn(qa)
            out.union[a] = (sa, cf.CalibrationSet.from_data(cal_a, sa))
    return out


def _estimated_weight(cfg, env, mdl, pi_star, rng):
    if cfg.weight_estimator == "monte_carlo" or not env.action_kind.discrete:
        return weights.mc_weight(mdl.p_hat, mdl.pi_b_hat, pi_star, cfg.h, rng)
    return weights.exact_sum_weight(mdl.p_hat, mdl.pi_b_hat, pi_star)


def _method_sets(method, cfg, env, mdl, train, cal, grid, test, pi_star, pi_b, streams):
    """Prediction sets for one method on the test draw, plus the weight function used (if any)."""
    discrete_y = env.outcome_kind.discrete
    L = env.outcome_kind.size
    w = None
    if method in ("copp_gt", "copp_est", "copp_regression_weights", "standard_cp", "class_balanced_copp"):
        if method == "copp_gt" or method == "class_balanced_copp":
            w = weights.exact_weight(env, pi_star, pi_b)
        elif method == "copp_est":
            w = _estimated_weight(cfg, env, mdl, pi_star, streams["mc"])
        elif method == "copp_regression_weights":
            w = weights.fit_direct_weight(train, pi_star, mdl.pi_b_hat,
                                          MlpSpec(1, tuple(cfg.arch["weight"]), 1, seed=streams["wseed"]),
                                          cfg.train_opts(streams["wseed"] + 1))
        else:
            w = weights.unit_weight()
        if method == "class_balanced_copp":
            per_label = cf.split_by_label(mdl.cal, L)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return cf.class_balanced_label_sets(test.X, per_label, w, cfg.alpha, mdl.score), w
        if discrete_y:
            return cf.copp_label_sets(test.X, L, mdl.score, w, mdl.cal, cfg.alpha), w
        return cf.copp_grid_sets(test.X, grid, mdl.score, w, mdl.cal, cfg.alpha), w
    if method == "union_cp":
        per_action = {a: v for a, v in mdl.union.items() if v[0] is not None}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return cf.union_cp_grid_sets(test.X, grid, per_action, cfg.alpha), None
    if method == "wis":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cdf = baselines.wis_cdf(cal, pi_star, mdl.pi_b_hat)
        return baselines.wis_interval_sets(cdf, cfg.alpha, len(test)), None
    if method == "sba":
        return baselines.sba_interval_sets(test.X, pi_star, mdl.p_hat, cfg.ell, cfg.alpha, streams["sba"]), None
    if method == "oracle":
        lo, hi = envs.oracle_intervals(env, pi_star, test.X, cfg.alpha)
        return cf.IntervalSets(lo, hi), None
    raise ValueError(f"unknown method {method}")


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """All (method, eps*) cells for one seed; failures are recorded, not raised."""
    env = envs.make_env(cfg.env)
    ss = np.random.SeedSequence([int(seed), 0xC0FF])
    data_ss, test_ss, mc_ss, sba_ss, model_ss = ss.spawn(5)
    model_seeds = [int(s) for s in model_ss.generate_state(8) % (2 ** 31)]
    pi_b = _policy(env, cfg.eps_b)
    rows, notes = [], []
    try:
        data = envs.gen_synthetic(env, pi_b, cfg.m + cfg.n, np.random.default_rng(data_ss))
        train, cal = split_dataset(data, SplitSpec(cfg.m, cfg.n, int(data_ss.generate_state(1)[0])))
        mdl = _fit_seed_models(cfg, env, train, cal, model_seeds)
        notes.extend(mdl.warnings)
    except (TrainingError, FloatingPointError) as exc:
        return {"seed": seed, "rows": [_failed_row(mth, e, seed, exc) for e in cfg.eps_star
                                       for mth in cfg.methods], "warnings": [f"seed {seed}: {exc}"]}
    grid = None
    if not env.outcome_kind.discrete:
        grid = cf.GridSpec.from_calibration(cal.Y, cfg.grid_count, cfg.grid_margin)
    eps_streams = test_ss.spawn(len(cfg.eps_star))
    mc_streams = [c.spawn(len(cfg.methods)) for c in mc_ss.spawn(len(cfg.eps_star))]
    sba_streams = sba_ss.spawn(len(cfg.eps_star))
    for j, eps in enumerate(cfg.eps_star):
        pi_star = _policy(env, eps)
        test = envs.gen_synthetic(env, pi_star, cfg.n_test, np.random.default_rng(eps_streams[j]))
        for k, method in enumerate(cfg.methods):
            streams = {"mc": np.random.default_rng(mc_streams[j][k]),
                       "sba": np.random.default_rng(sba_streams[j]),
                       "wseed": model_seeds[0] + 1000 * (j + 1)}
            try:
                sets, w = _method_sets(method, cfg, env, mdl, train, cal, grid, test, pi_star, pi_b, streams)
            except (TrainingError, FloatingPointError, weights.IngestionError) as exc:
                rows.append(_failed_row(method, eps, seed, exc))
                notes.append(f"seed {seed} {method} eps*={eps}: {exc}")
                continue
            cov, cov_se = coverage(sets, test.Y)
            length, _ = mean_length(sets)
            hull, _ = mean_length(sets, hull=True)
            n_unb = int(np.count_nonzero(sets.unbounded))
            hits = w.floor_hits if w is not None else 0
            rows.append({"method": method, "eps_star": eps, "seed": seed, "ok": True, "coverage": cov,
                         "coverage_se": cov_se, "length": length, "hull_length": hull,
                         "unbounded": n_unb, "floor_hits": hits})
    return {"seed": seed, "rows": rows, "warnings": notes}


def _policy(env, eps):
    if isinstance(env, envs.SyntheticClassification):
        return env.classifier_policy(eps)
    return env.target_policy(eps)


def _failed_row(method, eps, seed, exc):
    return {"method": method, "eps_star": eps, "seed": seed, "ok": False, "error": str(exc)}


def _run_seed_worker(args):
    cfg_dict, seed = args
    with threadpool_limits(limits=1):
        return run_seed(ExperimentConfig.from_dict(cfg_dict) if isinstance(cfg_dict, dict) else cfg_dict, seed)


def run_experiment(cfg: ExperimentConfig, threads: Optional[int] = None) -> dict:
    """Run every seed (in parallel when ``threads > 1``) and aggregate into a report."""
    threads = threads or 1
    jobs = [(cfg, s) for s in cfg.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_run_seed_worker, jobs))
    else:
        results = [_run_seed_worker(j) for j in jobs]
    results.sort(key=lambda r: r["seed"])
    return build_report(cfg, results)


def _mean_2se(vals):
    vals = np.asarray(vals, dtype=float)
    if vals.size == 0:
        return None, None
    se = vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else 0.0
    return float(vals.mean()), float(2 * se)


def build_report(cfg: ExperimentConfig, results: Sequence[dict]) -> dict:
    rows = [r for res in results for r in res["rows"]]
    notes = [w for res in results for w in res["warnings"]]
    summary = []
    for method in cfg.methods:
        for eps in cfg.eps_star:
            cell = [r for r in rows if r["method"] == method and r["eps_star"] == eps]
            ok = [r for r in cell if r["ok"]]
            cov, cov2 = _mean_2se([r["coverage"] for r in ok])
            ln, ln2 = _mean_2se([r["length"] for r in ok])
            hull, _ = _mean_2se([r["hull_length"] for r in ok])
            unb = sum(r["unbounded"] for r in ok)
            hits = sum(r["floor_hits"] for r in ok)
            summary.append({"method": method, "eps_star": eps, "coverage": cov, "coverage_2se": cov2,
                            "length": ln, "length_2se": ln2, "hull_length": hull,
                            "seeds_ok": len(ok), "complete": len(ok) == len(cell)})
            if unb:
                notes.append(f"{method} eps*={eps}: {unb} unbounded prediction sets")
            if hits:
                notes.append(f"{method} eps*={eps}: weight denominator floored {hits} times")
    return {"schema": SCHEMA_VERSION, "config": cfg.to_dict(), "summary": summary, "rows": rows,
            "warnings": notes, "complete": all(s["complete"] for s in summary)}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "eps_star", "seed", "coverage", "length"])
    for r in report["rows"]:
        if r["ok"]:
            w.writerow([r["method"], repr(float(r["eps_star"])), r["seed"], repr(r["coverage"]),
                        repr(r["length"])])
        else:
            w.writerow([r["method"], repr(float(r["eps_star"])), r["seed"], "", ""])
    return buf.getvalue()


def write_report(report: dict, out: str) -> tuple[str, str]:
    """Write ``<out>.json`` and ``<out>.csv`` (``out`` may already end in .json)."""
    base = out[:-5] if out.endswith(".json") else out
    d = os.path.dirname(base)
    if d:
        os.makedirs(d, exist_ok=True)
    jpath, cpath = base + ".json", base + ".csv"
    with open(jpath, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_json(report))
    with open(cpath, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_csv(report))
    return jpath, cpath


def summary_cell(report: dict, method: str, eps) -> dict:
    for s in report["summary"]:
        if s["method"] == method and abs(s["eps_star"] - eps) < 1e-12:
            return s
    raise KeyError((method, eps))


def format_summary(report: dict) -> str:
    lines = [f"{'method':<24}{'eps*':>7}{'coverage':>16}{'length':>18}"]
    for s in report["summary"]:
        if s["coverage"] is None:
            lines.append(f"{s['method']:<24}{s['eps_star']:>7.2f}{'failed':>16}")
            continue
        lines.append(f"{s['method']:<24}{s['eps_star']:>7.2f}{s['coverage']:>9.3f} ± {s['coverage_2se']:.3f}"
                     f"{s['length']:>11.2f} ± {s['length_2se']:.2f}")
    return "\n".join(lines)


__all__ = ["coverage", "mean_length", "conditional_coverage_diagnostic", "ExperimentConfig", "ConfigError",
           "run_experiment", "run_seed", "build_report", "write_report", "report_json", "report_csv",
           "format_summary", "summary_cell", "PredictionSet"]
