"""Command-line front-end: ``lookalike-ope <subcommand> ...``.

Every run writes ``manifest.json`` into its output directory; ``replay``
re-executes a manifest.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import CampaignModels, LiftConfig, fit_models, lift_report
from .datagen import (
    campaign_preset,
    generate_campaign,
    generate_universe,
    true_clusters_for,
    universe_preset,
)
from .errors import DegenerateError, DegenerateLabelError, InputError, QuadratureError
from .estimators import EstimatorKind, WeightMode, WeightPolicy, cvr_ipw
from .propensity import PropensityModel, ratios_for_table
from .records import ImpressionTable, read_impressions, write_impressions
from .resampling import STREAM_BOOTSTRAP, BootstrapConfig, bootstrap_estimate
from .simstudy import PolicyPair, default_grid, run_study, write_size_csv
from .threshold import ThresholdParams, choose_w0, tail_count

log = logging.getLogger("lookalike_ope")

IMPRESSIONS = "impressions.csv"
MODELS = "models.json"
THRESHOLDS = "thresholds.json"
ESTIMATES = "estimates.csv"
LIFT_CSV = "lift.csv"
LIFT_JSON = "lift.json"
MANIFEST = "manifest.json"


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (WeightMode, EstimatorKind)):
        return o.value
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_manifest(args: argparse.Namespace, out_dir: Path) -> None:
    params = {k: v for k, v in vars(args).items() if k not in ("func", "out_dir")}
    _write_json(
        out_dir / MANIFEST,
        {
            "command": args.command,
            "tool_version": __version__,
            "seed": args.seed,
            "out_dir": str(out_dir),
            "inputs": {k: v for k, v in params.items() if k in ("input", "models", "thresholds")},
            "parameters": params,
        },
    )


# ---- gen-data


def cmd_gen_data(args, out: Path) -> dict:
    overrides = {"n_users": args.n_users, "seed": args.seed}
    if args.merge_noise is not None:
        overrides["merge_noise"] = args.merge_noise
    if args.split_noise is not None:
        overrides["split_noise"] = args.split_noise
    universe = generate_universe(universe_preset(args.universe, **overrides))
    tables, truths = [], {}
    for i, name in enumerate(args.campaigns):
        spec = campaign_preset(name, scale=args.scale, **_campaign_overrides(args))
        table, truth = generate_campaign(universe, spec, seed=args.seed, campaign_index=i)
        tables.append(table)
        truths[spec.campaign_id] = truth.to_dict()
        log.info("campaign %s: %d impressions, %d conversions, planted lift %.4f",
                 spec.campaign_id, len(table), int(table.converted.sum()), truth.planted_lift)
    table = ImpressionTable.concat(tables)
    sidecar = {
        "ground_truth": {
            "universe": asdict(universe.config),
            "campaigns": truths,
        }
    }
    if not args.no_true_clusters:
        sidecar["ground_truth"]["true_clusters"] = true_clusters_for(table)
    write_impressions(table, out / IMPRESSIONS, sidecar)
    return {"impressions": len(table), "campaigns": list(truths)}


def _campaign_overrides(args) -> dict:
    out = {}
    if args.n_covariates is not None:
        out["n_covariates"] = args.n_covariates
    if args.base_cvr is not None:
        out["base_cvr"] = args.base_cvr
    if args.planted_lift is not None:
        out["planted_lift"] = args.planted_lift
    return out


# ---- fit-propensity


def cmd_fit_propensity(args, out: Path) -> dict:
    table = read_impressions(args.input)
    models = {}
    for cid in table.campaigns():
        m = fit_models(table.subset(table.campaign_id == cid), args.regularization)
        models[cid] = {"base": m.base.to_dict(), "star": m.star.to_dict()}
    _write_json(out / MODELS, models)
    return {"campaigns": list(models)}


def load_models(path) -> dict[str, CampaignModels]:
    with open(path) as fh:
        raw = json.load(fh)
    return {
        cid: CampaignModels(PropensityModel.from_dict(d["base"]), PropensityModel.from_dict(d["star"]))
        for cid, d in raw.items()
    }


def _campaign_ratios(table, models, cid):
    if cid not in models:
        raise InputError(f"no propensity model for campaign {cid!r}")
    sub = table.subset(table.campaign_id == cid)
    return sub, ratios_for_table(sub, models[cid].base, models[cid].star)


# ---- choose-threshold


def cmd_choose_threshold(args, out: Path) -> dict:
    table = read_impressions(args.input)
    models = load_models(args.models)
    result = {}
    for cid in table.campaigns():
        sub, w = _campaign_ratios(table, models, cid)
        cvr = args.nominal_cvr if args.nominal_cvr is not None else float(sub.converted.mean())
        if not 0 < cvr < 1:
            log.warning("campaign %s: nominal CVR %.3g unusable; threshold undefined", cid, cvr)
            result[cid] = {"w0": None, "nominal_cvr": cvr}
            continue
        w0 = choose_w0(w, ThresholdParams(args.kmax, args.delta, cvr))
        ws = np.sort(w)
        tail = w > w0
        result[cid] = {
            "w0": w0,
            "nominal_cvr": cvr,
            "n_tail_impressions": tail_count(ws, w0),
            "n_tail_conversions": int(np.sum(tail & sub.converted)),
            "max_ratio": float(ws[-1]),
        }
    _write_json(out / THRESHOLDS, result)
    return result


# ---- estimate

ESTIMATE_COLUMNS = [
    "campaign_id", "estimator", "mode", "bid_factor_exponent", "w0", "estimate",
    "n_impressions", "n_conversions", "n_tail_impressions", "n_tail_conversions",
    "bootstrap_median", "bootstrap_variance",
]


def cmd_estimate(args, out: Path) -> dict:
    table = read_impressions(args.input)
    models = load_models(args.models)
    thresholds = {}
    if args.thresholds:
        with open(args.thresholds) as fh:
            thresholds = json.load(fh)
    kind = EstimatorKind(args.kind)
    mode = WeightMode(args.mode)
    cfg = BootstrapConfig(n_bootstrap=args.bootstrap, n_outer=1, seed=args.seed)
    rows = []
    for ci, cid in enumerate(table.campaigns()):
        sub, w = _campaign_ratios(table, models, cid)
        if args.w0 is not None:
            w0 = args.w0
        elif mode is WeightMode.NONE:
            w0 = math.inf
        else:
            w0 = (thresholds.get(cid) or {}).get("w0")
            if w0 is None:
                raise InputError(f"no threshold for campaign {cid!r}; pass --w0 or --thresholds")
        for exponent in args.exponents:
            policy = WeightPolicy(mode, w0, exponent)
            try:
                rep = cvr_ipw(w, sub.converted, policy, kind)
                boot = bootstrap_estimate(
                    w, sub.converted, policy, kind, cfg, (STREAM_BOOTSTRAP, ci, exponent), args.threads
                )
                med, var = boot.median_estimate, boot.variance
            except DegenerateError as exc:
                log.warning("campaign %s: %s", cid, exc)
                rows.append([cid, kind.value, mode.value, exponent, w0] + ["nan"] * 7)
                continue
            rows.append([
                cid, kind.value, mode.value, exponent, w0, rep.estimate, rep.n_impressions,
                rep.n_conversions, rep.n_tail_impressions, rep.n_tail_conversions, med, var,
            ])
    with open(out / ESTIMATES, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ESTIMATE_COLUMNS)
        for r in rows:
            wr.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    return {"rows": len(rows)}


# ---- simstudy


def cmd_simstudy(args, out: Path) -> dict:
    pair = PolicyPair()
    grid = default_grid(args.grid_points, args.grid_min, args.grid_max)
    cfg = BootstrapConfig(n_bootstrap=args.bootstrap, n_outer=args.outer, seed=args.seed)
    report = run_study(
        pair, tuple(args.sizes), grid, cfg, EstimatorKind(args.kind),
        ThresholdParams(args.kmax, args.delta, args.nominal_cvr or 0.01), args.threads,
    )
    summary = {"truth": report.truth, "sizes": {}}
    for res in report.sizes.values():
        write_size_csv(res, out / f"simstudy_n{res.n}.csv")
        h = res.heuristic_index
        te = res.total_error
        summary["sizes"][str(res.n)] = {
            "heuristic_w0_median": float(np.median(res.heuristic_w0)),
            "heuristic_grid_w0": float(res.grid[h]),
            "total_error_at_heuristic": float(te[h]),
            "min_total_error": float(np.min(te)),
            "w0_at_min_total_error": float(res.grid[int(np.argmin(te))]),
        }
    _write_json(out / "simstudy_summary.json", summary)
    return summary


# ---- lift


def _lift_config(args) -> LiftConfig:
    return LiftConfig(
        k_max=args.kmax,
        delta=args.delta,
        mode=WeightMode(args.mode),
        n_bootstrap=args.bootstrap,
        regularization=args.regularization,
        q_cuts=tuple(args.qcuts),
        seed=args.seed,
        threads=args.threads,
    )


def cmd_lift(args, out: Path) -> dict:
    table = read_impressions(args.input)
    models = load_models(args.models) if args.models else None
    report = lift_report(table, _lift_config(args), models)
    report.write_csv(out / LIFT_CSV)
    report.write_json(out / LIFT_JSON)
    return {"rows": len(report.rows)}


# ---- end-to-end


def cmd_end_to_end(args, out: Path) -> dict:
    """gen-data -> fit-propensity -> choose-threshold -> estimate -> lift, with checks."""
    checks = {}
    steps = {}
    for name in ("gen-data", "fit-propensity", "choose-threshold", "estimate", "lift"):
        steps[name] = out / name
        steps[name].mkdir(parents=True, exist_ok=True)
    data = steps["gen-data"] / IMPRESSIONS
    base = dict(seed=args.seed, threads=args.threads, kmax=args.kmax, delta=args.delta,
                nominal_cvr=None, bootstrap=args.bootstrap, regularization=args.regularization)
    sub_args = {
        "gen-data": dict(universe=args.universe, n_users=args.n_users, campaigns=args.campaigns,
                         scale=args.scale, merge_noise=None, split_noise=None, n_covariates=None,
                         base_cvr=None, planted_lift=None, no_true_clusters=False),
        "fit-propensity": dict(input=str(data)),
        "choose-threshold": dict(input=str(data), models=str(steps["fit-propensity"] / MODELS)),
        "estimate": dict(input=str(data), models=str(steps["fit-propensity"] / MODELS),
                         thresholds=str(steps["choose-threshold"] / THRESHOLDS), w0=None,
                         kind=EstimatorKind.SELF_NORMALIZED.value, mode=WeightMode.TRUNCATE.value,
                         exponents=[1, 2]),
        "lift": dict(input=str(data), models=str(steps["fit-propensity"] / MODELS),
                     mode=WeightMode.TRUNCATE.value, qcuts=args.qcuts),
    }
    for name, extra in sub_args.items():
        ns = argparse.Namespace(command=name, **base, **extra)
        run_command(ns, steps[name])

    with open(data.with_suffix(".json")) as fh:
        truth = json.load(fh)["ground_truth"]["campaigns"]
    models = load_models(steps["fit-propensity"] / MODELS)
    with open(steps["choose-threshold"] / THRESHOLDS) as fh:
        thresholds = json.load(fh)
    with open(steps["lift"] / LIFT_JSON) as fh:
        lift_rows = json.load(fh)["rows"]
    for cid, t in truth.items():
        planted = t["planted_lift"]
        row = next(r for r in lift_rows if r["campaign_id"] == cid and r["subset"] == "all")
        est = row["lift_wt"]
        checks[f"{cid}:propensity_converged"] = models[cid].base.converged
        checks[f"{cid}:threshold_finite"] = thresholds[cid]["w0"] is not None
        checks[f"{cid}:lift_defined"] = bool(row["defined"])
        checks[f"{cid}:lift_within_20pct"] = est is not None and abs(est / planted - 1) <= 0.2
    ok = all(checks.values())
    _write_json(out / "checks.json", {"passed": ok, "checks": checks})
    if not ok:
        failed = [k for k, v in checks.items() if not v]
        raise CheckFailed(f"internal checks failed: {failed}")
    return {"passed": ok}


class CheckFailed(RuntimeError):
    pass


# ---- replay


def cmd_replay(args, out: Path) -> dict:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    params = dict(manifest["parameters"])
    params["threads"] = args.threads
    ns = argparse.Namespace(**params)
    return run_command(ns, out)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "fit-propensity": cmd_fit_propensity,
    "choose-threshold": cmd_choose_threshold,
    "estimate": cmd_estimate,
    "simstudy": cmd_simstudy,
    "lift": cmd_lift,
    "end-to-end": cmd_end_to_end,
    "replay": cmd_replay,
}


def run_command(args: argparse.Namespace, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.command != "replay":
        write_manifest(args, out_dir)
    return HANDLERS[args.command](args, out_dir)


def _probability(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("--threads", type=int, default=1)

    heur = argparse.ArgumentParser(add_help=False)
    heur.add_argument("--kmax", type=int, default=5, help="tail conversions tolerated")
    heur.add_argument("--delta", type=_probability, default=0.05)
    heur.add_argument("--nominal-cvr", type=_probability, default=None,
                      help="nominal CVR for the threshold rule (default: the campaign's naive CVR)")

    boot = argparse.ArgumentParser(add_help=False)
    boot.add_argument("--bootstrap", type=int, default=100, help="bootstrap resamples")

    reg = argparse.ArgumentParser(add_help=False)
    reg.add_argument("--regularization", type=float, default=1e-6)

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--universe", default="G1", help="identity preset G1..G8")
    gen.add_argument("--n-users", type=int, default=5000)
    gen.add_argument("--campaigns", nargs="+", default=["lift-1.5"],
                     help="campaign presets: A..H or lift-<value>")
    gen.add_argument("--scale", type=float, default=1.0, help="impression count multiplier")

    p = argparse.ArgumentParser(prog="lookalike-ope", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common, gen], help="synthesize an impressions CSV")
    g.add_argument("--merge-noise", type=float)
    g.add_argument("--split-noise", type=float)
    g.add_argument("--n-covariates", type=int)
    g.add_argument("--base-cvr", type=float)
    g.add_argument("--planted-lift", type=float)
    g.add_argument("--no-true-clusters", action="store_true", help="omit cluster truth from the sidecar")

    f = sub.add_parser("fit-propensity", parents=[common, reg], help="fit whitelist models per campaign")
    f.add_argument("--input", required=True)

    t = sub.add_parser("choose-threshold", parents=[common, heur], help="binomial-tail w0 per campaign")
    t.add_argument("--input", required=True)
    t.add_argument("--models", required=True)

    e = sub.add_parser("estimate", parents=[common, boot], help="IPW CVR estimates per campaign")
    e.add_argument("--input", required=True)
    e.add_argument("--models", required=True)
    e.add_argument("--thresholds")
    e.add_argument("--w0", type=float)
    e.add_argument("--kind", choices=[k.value for k in EstimatorKind], default="sn")
    e.add_argument("--mode", choices=[m.value for m in WeightMode], default="truncate")
    e.add_argument("--exponents", type=int, nargs="+", choices=[1, 2], default=[1, 2])

    s = sub.add_parser("simstudy", parents=[common, heur, boot], help="synthetic Beta-policy study")
    s.add_argument("--outer", type=int, default=100, help="outer replicates per size")
    s.add_argument("--sizes", type=int, nargs="+", default=[50_000, 500_000])
    s.add_argument("--grid-points", type=int, default=40)
    s.add_argument("--grid-min", type=float, default=1.0)
    s.add_argument("--grid-max", type=float, default=1e4)
    s.add_argument("--kind", choices=["ht", "sn"], default="ht")

    lf = sub.add_parser("lift", parents=[common, heur, boot, reg], help="naive and corrected lift report")
    lf.add_argument("--input", required=True)
    lf.add_argument("--models", help="fitted models; fitted on the fly when omitted")
    lf.add_argument("--mode", choices=["truncate", "drop"], default="truncate")
    lf.add_argument("--qcuts", type=float, nargs="*", default=[0.0, 0.3, 0.6, 0.9])

    ee = sub.add_parser("end-to-end", parents=[common, heur, boot, reg, gen], help="full pipeline with checks")
    ee.add_argument("--qcuts", type=float, nargs="*", default=[0.0, 0.3, 0.6, 0.9])

    r = sub.add_parser("replay", parents=[common], help="re-run a manifest")
    r.add_argument("manifest")
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("OPE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        result = run_command(args, args.out_dir)
    except (InputError, DegenerateError, DegenerateLabelError, QuadratureError, CheckFailed,
            FileNotFoundError) as exc:
        report = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(report), file=sys.stderr)
        return 1 if isinstance(exc, CheckFailed) else 2
    print(json.dumps(result, default=_json_default, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
