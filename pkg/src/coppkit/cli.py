"""Command-line front end: ``coppkit {generate,train,run,predict}``.

Exit codes: 0 success, 2 usage or validation error, 3 partial experiment failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import conformal as cf, envs, models, weights
from .core import Kind, SplitSpec, policy_from_dict, split_dataset
from .evaluation import ConfigError, ExperimentConfig, format_summary, run_experiment, write_report
from .nn import CheckpointError, MlpSpec, TrainingError, TrainOpts

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 2, 3


class UsageError(Exception):
    pass


def _fail(msg: str) -> int:
    print(f"coppkit: error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def _threads(flag) -> int:
    env = os.environ.get("COPPKIT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"COPPKIT_THREADS must be an integer, got {env!r}") from None
    else:
        n = flag if flag is not None else (os.cpu_count() or 1)
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


# --------------------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    env = envs.make_env(args.env)
    eps_b = args.eps_b
    if args.env == "toy-discrete":
        eps_b = 0.3 if eps_b is None else eps_b
        if not 0.0 < eps_b < 1.0 / 3.0:
            raise UsageError(f"--eps-b must lie in (0, 1/3) for toy-discrete, got {eps_b}")
    else:
        eps_b = 0.0 if eps_b is None else eps_b
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    data = envs.gen_synthetic(env, env.behavior_policy(eps_b), args.n, np.random.default_rng(args.seed))
    try:
        envs.write_dataset_csv(args.out, data)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    print(f"wrote {len(data)} rows to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- train


def _kinds(args):
    if args.env == "toy-discrete":
        return Kind(4), Kind(None)
    if args.env == "toy-continuous":
        return Kind(None), Kind(None)
    a = Kind(args.n_actions) if args.n_actions else Kind(None)
    y = Kind(args.n_labels) if args.n_labels else Kind(None)
    return a, y


def _read_data(path, action_kind, outcome_kind):
    try:
        return envs.read_dataset_csv(path, action_kind, outcome_kind)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    except (envs.IngestionError, envs.SchemaError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    action_kind, outcome_kind = _kinds(args)
    data = _read_data(args.data, action_kind, outcome_kind)
    m = args.m
    n = args.n if args.n is not None else len(data) - m
    try:
        train, cal = split_dataset(data, SplitSpec(m, n, args.seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    opts = TrainOpts(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, patience=args.patience,
                     seed=args.seed)
    files = {}
    os.makedirs(args.model_dir, exist_ok=True)
    fitted = {"policy": models.fit_behavior_policy(train, MlpSpec(1, (16, 16), 1, args.seed), opts)}
    if outcome_kind.discrete:
        fitted["outcome"] = models.fit_categorical_conditional(train, MlpSpec(1, (32,), 1, args.seed + 1), opts)
    else:
        fitted["outcome"] = models.fit_gaussian_conditional(train, MlpSpec(1, (32,), 1, args.seed + 1), opts)
        fitted["quantile"] = models.fit_quantile_pair(train, args.alpha / 2, 1 - args.alpha / 2,
                                                      MlpSpec(1, (32,), 1, args.seed + 2), opts)
    for name, model in fitted.items():
        fname = f"{name}.bin"
        with open(os.path.join(args.model_dir, fname), "wb") as fh:
            fh.write(model.to_bytes())
        files[name] = fname
    envs.write_dataset_csv(os.path.join(args.model_dir, "cal.csv"), cal)
    manifest = {"format": "coppkit-model-dir-1", "d": data.d, "action_kind": str(action_kind),
                "outcome_kind": str(outcome_kind), "alpha": args.alpha, "m": m, "n": n, "seed": args.seed,
                "models": files, "calibration": "cal.csv"}
    with open(os.path.join(args.model_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"trained on {m} rows, calibration {n} rows, models in {args.model_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------- predict


def _load_model_dir(path):
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        loaded = {}
        for name, fname in manifest["models"].items():
            with open(os.path.join(path, fname), "rb") as fh:
                loaded[name] = models.load_model(fh.read())
    except (OSError, KeyError, json.JSONDecodeError, CheckpointError) as exc:
        raise UsageError(f"bad model directory {path}: {exc}") from None
    a_kind, y_kind = Kind.parse(manifest["action_kind"]), Kind.parse(manifest["outcome_kind"])
    cal = _read_data(os.path.join(path, manifest["calibration"]), a_kind, y_kind)
    return manifest, loaded, cal


def _read_features(path, d):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise UsageError(f"{path}: empty file")
            want = [f"x{j}" for j in range(d)]
            if header[:d] != want or (len(header) > d and header[d] not in ("a", "y")):
                raise UsageError(f"{path}: expected leading columns {','.join(want)} for a {d}-feature model")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row[:d]])
                except ValueError:
                    raise UsageError(f"{path}:{lineno}: non-numeric feature") from None
                if len(row) < d:
                    raise UsageError(f"{path}:{lineno}: expected at least {d} fields")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return np.asarray(rows)


def _parse_policy(text):
    if os.path.exists(text):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    try:
        return policy_from_dict(json.loads(text))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad --target-policy: {exc}") from None


def cmd_predict(args) -> int:
    if not 0.0 < args.alpha < 1.0:
        raise UsageError("--alpha must lie in (0, 1)")
    manifest, fitted, cal_data = _load_model_dir(args.model_dir)
    X = _read_features(args.data, manifest["d"])
    pi_star = _parse_policy(args.target_policy)
    a_kind = Kind.parse(manifest["action_kind"])
    if pi_star.action_kind != a_kind:
        raise UsageError(f"target policy acts on {pi_star.action_kind}, models on {a_kind}")
    p_hat, pi_b_hat = fitted["outcome"], fitted["policy"]
    if args.weights == "unit":
        w = weights.unit_weight()
    elif args.weights == "exact_sum" and a_kind.discrete:
        w = weights.exact_sum_weight(p_hat, pi_b_hat, pi_star)
    else:
        w = weights.mc_weight(p_hat, pi_b_hat, pi_star, args.h, np.random.default_rng(args.seed))
    discrete_y = Kind.parse(manifest["outcome_kind"]).discrete
    if discrete_y:
        L = p_hat.n_labels

        def pyx(Xq):
            return np.einsum("nk,nkl->nl", pi_b_hat.probs(Xq), p_hat.probs_all(Xq))

        score = cf.discrete_cumprob_score_fn(pyx)
        cal = cf.CalibrationSet.from_data(cal_data, score)
        sets = cf.copp_label_sets(X, L, score, w, cal, args.alpha)
    else:
        score = cf.cqr_score_fn(fitted["quantile"])
        cal = cf.CalibrationSet.from_data(cal_data, score)
        grid = cf.GridSpec.from_calibration(cal_data.Y, args.grid_count)
        sets = cf.copp_grid_sets(X, grid, score, w, cal, args.alpha)
    try:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            if discrete_y:
                out.writerow(["row", "labels", "unbounded"])
                for i in range(len(sets)):
                    labs = ";".join(str(v) for v in np.flatnonzero(sets.mask[i]))
                    out.writerow([i, labs, int(sets.unbounded[i])])
            else:
                out.writerow(["row", "lo", "hi", "count", "length", "unbounded"])
                for i in range(len(sets)):
                    pts = sets.grid[sets.mask[i]]
                    if pts.size == 0:
                        out.writerow([i, "", "", 0, repr(0.0), int(sets.unbounded[i])])
                        continue
                    if sets.unbounded[i]:
                        lo, hi, length = -np.inf, np.inf, np.inf
                    else:
                        lo, hi, length = pts[0], pts[-1], pts.size * sets.spacing
                    out.writerow([i, repr(float(lo)), repr(float(hi)), pts.size, repr(float(length)),
                                  int(sets.unbounded[i])])
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    n_unb = int(np.count_nonzero(sets.unbounded))
    print(f"wrote {len(sets)} prediction sets to {args.out}" + (f" ({n_unb} unbounded)" if n_unb else ""))
    return EXIT_OK


# --------------------------------------------------------------------------- run


def cmd_run(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {args.config}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON: {exc}") from None
    try:
        cfg = ExperimentConfig.from_dict(doc)
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    report = run_experiment(cfg, threads=_threads(args.threads))
    try:
        jpath, cpath = write_report(report, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write report: {exc.strerror or exc}") from None
    print(format_summary(report))
    for note in report["warnings"]:
        print(f"warning: {note}", file=sys.stderr)
    print(f"report: {jpath} {cpath}")
    return EXIT_OK if report["complete"] else EXIT_PARTIAL


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coppkit", description="Conformal prediction sets under policy shift")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic logged dataset")
    g.add_argument("--env", required=True, choices=["toy-discrete", "toy-continuous"])
    g.add_argument("--eps-b", type=float, default=None, help="behaviour policy parameter")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit outcome, quantile and behaviour models")
    t.add_argument("--data", required=True)
    t.add_argument("--model-dir", required=True)
    t.add_argument("--env", choices=["toy-discrete", "toy-continuous"], default=None,
                   help="sets the action/outcome kinds of the CSV")
    t.add_argument("--n-actions", type=int, default=None, help="discrete action count (default continuous)")
    t.add_argument("--n-labels", type=int, default=None, help="discrete outcome count (default continuous)")
    t.add_argument("--m", type=int, default=1000, help="training rows")
    t.add_argument("--n", type=int, default=None, help="calibration rows (default: the rest)")
    t.add_argument("--alpha", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--patience", type=int, default=10)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run a replicated experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True, help="report path; .json and .csv are written")
    r.add_argument("--threads", type=int, default=None)
    r.set_defaults(func=cmd_run)

    q = sub.add_parser("predict", help="prediction sets for new covariates under a target policy")
    q.add_argument("--model-dir", required=True)
    q.add_argument("--data", required=True, help="CSV whose leading columns are x0..x{d-1}")
    q.add_argument("--target-policy", required=True, help="policy JSON, inline or a file path")
    q.add_argument("--alpha", type=float, default=0.1)
    q.add_argument("--out", required=True)
    q.add_argument("--weights", choices=["exact_sum", "monte_carlo", "unit"], default="exact_sum")
    q.add_argument("--h", type=int, default=500)
    q.add_argument("--grid-count", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(str(exc))
    except TrainingError as exc:
        print(f"coppkit: training failed: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
