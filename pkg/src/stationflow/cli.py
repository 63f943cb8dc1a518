"""Command-line entry points.

Batch work (synth, train, evaluate, experiment, feature/graph export) runs
in-process; `serve` starts the HTTP API and `predict` evaluates a scenario
file either against a local checkpoint or a running server (--url).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


log = logging.getLogger(__name__)


def _load_run_config(args) -> "TrainRunConfig":
    from .training import TrainRunConfig
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = TrainRunConfig.from_dict(json.load(fh))
    else:
        config = TrainRunConfig(variant=args.variant)
    if getattr(args, "variant", None):
        config.variant = args.variant
        config.model = None
        config.__post_init__()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "runs", None) is not None:
        config.n_runs = args.runs
    return config


def cmd_synth(args) -> int:
    from .synth import SynthConfig, emit_fixtures, generate_city
    # three expansion events scaled to the requested timeline and size
    cohort = max(1, args.stations // 8)
    events = tuple((m, cohort) for m in (args.months // 3, args.months // 2,
                                         (2 * args.months) // 3))
    config = SynthConfig(seed=args.seed, n_stations=args.stations,
                         n_months=args.months,
                         expansion_months=events,
                         spillover_strength=args.spillover)
    city = generate_city(config)
    out = Path(args.out)
    emit_fixtures(city, out)
    print(f"wrote {len(city.stations)} stations, {len(city.samples)} samples to {out}")
    return 0


def _prepared(args, config):
    from .training import load_data_dir, prepare_experiment
    stations, samples, layers = load_data_dir(args.data_dir)
    return prepare_experiment(samples, stations, layers, config)


def cmd_train(args) -> int:
    from .training import save_trained, train, evaluate
    config = _load_run_config(args)
    data = _prepared(args, config)
    trained = train(config, data)
    save_trained(args.out, trained)
    metrics = evaluate(trained, data)
    print(json.dumps({k: v for k, v in metrics.items()}, indent=2))
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .training import evaluate, load_trained
    trained = load_trained(args.checkpoint)
    config = trained.run_config
    data = _prepared(args, config)
    metrics = evaluate(trained, data)
    payload = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    print(payload)
    return 0


def cmd_experiment(args) -> int:
    from .training import run_experiment
    config = _load_run_config(args)
    data = _prepared(args, config)
    report = run_experiment(config, data)
    out = Path(args.out)
    report.write_json(out)
    report.write_runs_csv(out.with_suffix(".runs.csv"))
    print(json.dumps(report.mean, indent=2))
    print(f"report written to {out}")
    return 0


def cmd_features(args) -> int:
    from .geo import write_feature_csv
    from .training import load_data_dir, prepare_experiment, TrainRunConfig
    config = TrainRunConfig(variant="fnn")
    stations, samples, layers = load_data_dir(args.data_dir)
    data = prepare_experiment(samples, stations, layers, config)
    ids, months, rows = [], [], []
    for month, frame in sorted(data.frames.items(), key=lambda kv: kv[0]):
        for i, sid in enumerate(frame.ids):
            ids.append(sid)
            months.append(month)
            rows.append(frame.raw[i])
    import numpy as np
    write_feature_csv(args.out, ids, months, np.array(rows))
    print(f"wrote {len(rows)} feature rows to {args.out}")
    return 0


def cmd_graphs(args) -> int:
    from .graphs import write_graph_csv
    from .training import load_data_dir, prepare_experiment, TrainRunConfig
    config = TrainRunConfig(variant="fnn")
    stations, samples, layers = load_data_dir(args.data_dir)
    data = prepare_experiment(samples, stations, layers, config)
    write_graph_csv(args.out, data.graphs)
    print(f"wrote graphs for {len(data.graphs)} months to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .scenario import ScenarioEngine
    from .service.app import create_app
    from .training import load_trained
    trained = load_trained(args.checkpoint)
    engine = ScenarioEngine.from_data_dir(trained, args.data_dir,
                                          store_path=args.store)
    app = create_app(engine)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_predict(args) -> int:
    with open(args.scenario) as fh:
        body = json.load(fh)
    if args.url:
        import httpx
        created = httpx.post(f"{args.url.rstrip('/')}/scenarios", json=body,
                             timeout=120.0)
        created.raise_for_status()
        sid = created.json()["id"]
        result = httpx.get(f"{args.url.rstrip('/')}/scenarios/{sid}/result",
                           timeout=120.0)
        result.raise_for_status()
        print(json.dumps(result.json(), indent=2))
        return 0
    from .scenario import Scenario, ScenarioEngine
    from .training import load_trained
    trained = load_trained(args.checkpoint)
    engine = ScenarioEngine.from_data_dir(trained, args.data_dir,
                                          store_path=args.store)
    result = engine.predict_scenario(Scenario.from_dict(body))
    print(json.dumps(result.to_dict(), indent=2))
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="stationflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city fixture")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stations", type=int, default=200)
    p.add_argument("--months", type=int, default=36)
    p.add_argument("--spillover", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name, func in (("train", cmd_train), ("experiment", cmd_experiment)):
        p = sub.add_parser(name)
        p.add_argument("--variant", default="mgat")
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--runs", type=int)
        p.add_argument("--data-dir", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("features", help="export the per-month feature matrix")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("graphs", help="export both localized graphs per month")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graphs)

    p = sub.add_parser("serve", help="run the scenario HTTP API")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--store", default=None, help="SQLite path for scenario persistence")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("predict", help="evaluate a scenario JSON file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--store", default=None)
    p.add_argument("--url", help="use a running server instead of a local engine")
    p.set_defaults(func=cmd_predict)

    args = parser.parse_args(argv)
    if args.command == "predict" and not args.url:
        if not args.checkpoint or not args.data_dir:
            parser.error("predict needs either --url or both --checkpoint and --data-dir")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
