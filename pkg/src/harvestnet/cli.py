"""``harvestnet`` command line: gen, run, compare, costs, report.

Exit codes: 0 success, 1 invalid input or failed check, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import costs, simulate
from .config import RunConfig, load_config
from .data import ConfigError, DatasetFormatError, gen_synthetic, write_dataset, write_manifest
from .perception import save_model
from .plot import line_chart
from .sampler import POLICIES

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DATASET_NAME = "dataset.hvst"
MANIFEST_NAME = "manifest.json"


class CheckFailed(Exception):
    pass


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else cfg.out
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_gen(args) -> int:
    cfg = _config(args)
    if cfg.dataset_path is not None:
        raise ConfigError("'gen' needs a 'synth' section, not 'dataset'")
    synth = cfg.synth_or_default()
    out = _out_dir(args, cfg)
    header, samples, manifest, seed_ids, test_ids = gen_synthetic(synth)
    by_id = {s.id: s for s in samples}
    write_dataset(header, [by_id[i] for i in sorted(by_id)], out / DATASET_NAME)
    write_manifest(out / MANIFEST_NAME, manifest, seed_ids, test_ids)
    n_target = sum(by_id[i].true_label in header.target_classes for r in manifest.rounds for i in r)
    print(f"wrote {len(samples)} samples (d={header.d}, K={header.K}), {manifest.n_rounds} rounds, "
          f"{n_target} target stream steps, {len(seed_ids)} seed, {len(test_ids)} test -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    scenario = cfg.scenario()
    sim = cfg.sim_for(scenario)
    res = simulate.run_simulation(sim, scenario)
    (out / "metrics.csv").write_text(simulate.metrics_csv(res.rounds, sim.record_timing))
    simulate.write_run_log(out / "run_log.jsonl", res.log)
    save_model(res.final_model, out / "model.json")
    summary = simulate.CompareResult([simulate.seed_result(
        sim.policy, sim.seed, res.rounds, res.initial_auc, sim.n_rounds * sim.steps_per_round)]).summary()
    _write_json(out / "summary.json", summary)
    s = summary[sim.policy]
    print(f"{sim.policy} seed={sim.seed}: final accuracy {s['final_accuracy_mean']:.4f}, "
          f"sampled {s['sampled_fraction_mean']:.2%} of stream -> {out}")
    return EXIT_OK


def _policies(text: str) -> list[str]:
    if text == "all":
        return list(POLICIES)
    names = [p.strip() for p in text.split(",") if p.strip()]
    bad = [p for p in names if p not in POLICIES]
    if bad or not names:
        raise ConfigError(f"unknown policy {bad[0] if bad else text!r}; valid policies: {', '.join(POLICIES)}")
    return names


def _default_jobs() -> int:
    raw = os.environ.get("HARVEST_SIM_THREADS", "1")
    try:
        jobs = int(raw)
    except ValueError:
        raise ConfigError(f"HARVEST_SIM_THREADS must be an integer, got {raw!r}") from None
    return max(jobs, 1)


def cmd_compare(args) -> int:
    policies = _policies(args.policies)
    cfg = _config(args)
    out = _out_dir(args, cfg)
    jobs = args.jobs if args.jobs is not None else _default_jobs()
    if args.seeds < 1 or jobs < 1:
        raise ConfigError("--seeds and --jobs must be at least 1")
    base = cfg.compare_base()
    sim = cfg.sim_for(base) if isinstance(base, simulate.Scenario) else cfg.sim
    res = simulate.compare_policies(base, sim, policies, args.seeds, jobs)
    summary = res.summary()
    _write_json(out / "summary.json", summary)
    (out / "metrics.csv").write_text(simulate.metrics_csv(res.metrics_rows()))
    curves = {p: v["accuracy_curve_mean"] for p, v in summary.items()}
    (out / "accuracy.svg").write_text(line_chart(curves, title=f"mean over {args.seeds} seeds"))
    for p, v in summary.items():
        print(f"{p:18s} final accuracy {v['final_accuracy_mean']:.4f} +/- {v['final_accuracy_std']:.4f}  "
              f"sampled {v['sampled_fraction_mean']:.2%}")
    return EXIT_OK


def cmd_costs(args) -> int:
    if args.table1:
        rows = costs.table1_check()
        for r in rows:
            status = "excluded" if r.ok is None else ("ok" if r.ok else "MISMATCH")
            print(f"{r.scenario:13s} {r.figure:15s} computed {r.computed:14,.4f}  published {r.published:14,.2f}  "
                  f"{status}{'  (' + r.note + ')' if r.note else ''}")
        if not all(r.ok for r in rows if r.ok is not None):
            raise CheckFailed("cost table figures do not all match")
        return EXIT_OK
    if args.scenario:
        pairs = [costs.load_scenario(args.scenario)]
    else:
        pairs = [costs.bundled_scenario(n) for n in costs.BUNDLED]
    print("\n\n".join(costs.cost_report(s, r).render() for s, r in pairs))
    return EXIT_OK


def cmd_report(args) -> int:
    curves: dict[str, dict[int, list[float]]] = {}
    for path in args.metrics:
        try:
            rows = simulate.read_metrics_csv(path)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read metrics CSV {path}: {exc}") from exc
        for r in rows:
            curves.setdefault(r["policy"], {}).setdefault(r["round"], []).append(r["test_accuracy"])
    series = {p: [float(np.mean(by_round[k])) for k in sorted(by_round)] for p, by_round in curves.items()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(line_chart(series, title="test accuracy by round"))
    print(f"plotted {len(series)} series -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="harvestnet", description="Robot-to-cloud continual-learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log threshold-fit warnings")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset and stream manifest")
    g.add_argument("--config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run one simulation")
    r.add_argument("--config")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare policies over seeds")
    c.add_argument("--config")
    c.add_argument("--out")
    c.add_argument("--policies", default="all", help="comma-separated names or 'all'")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--jobs", type=int, default=None, help="parallel workers (default: HARVEST_SIM_THREADS or 1)")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("costs", help="fleet cost report")
    k.add_argument("scenario", nargs="?", help="scenario JSON (default: the bundled scenarios)")
    k.add_argument("--table1", action="store_true", help="check the bundled scenarios against the published table")
    k.set_defaults(func=cmd_costs)

    p_rep = sub.add_parser("report", help="re-render the accuracy plot from metrics CSVs")
    p_rep.add_argument("metrics", nargs="+")
    p_rep.add_argument("--out", default="accuracy.svg")
    p_rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, costs.ScenarioError, CheckFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
