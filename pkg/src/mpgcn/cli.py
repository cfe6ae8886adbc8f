"""Command-line pipeline: synth, ingest, build-graphs, cluster, train, predict,
evaluate, fit-distributions and optimize, each writing into its own directory."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, analysis, checkpoint, config as config_mod, optimizer
from .clustering import normalized_mutual_info, node_features, train_clustering
from .errors import ConfigError, MpgcnError, UndefinedMetricError
from .graphs import (
    build_sharing_stop,
    build_stop_network,
    distance_affinity,
    normalize,
    read_edge_list,
    write_edge_list,
)
from .ingest import (
    TIME_FORMAT,
    FlowTensor,
    PassengerStopProfile,
    aggregate_flow,
    detect_gaps,
    filter_passengers,
    infer_od,
    interpolate_gaps,
    match_stops,
    parse_registry,
    parse_tables,
    write_registry,
)
from .numerics import BACKEND
from .predictor import Gcn2FlowModel, fuse, predict, split_days, train_gcn2flow
from .synth import generate_city, write_city

log = logging.getLogger("mpgcn")

STAGES = ("synth", "ingest", "build-graphs", "cluster", "train", "predict", "evaluate",
          "fit-distributions", "optimize")
DIRS = {s: s.replace("-", "_") for s in STAGES}


class MissingArtifact(MpgcnError):
    def __init__(self, path):
        super().__init__(f"missing upstream artifact: {path}")
        self.path = path


def _need(*paths):
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifact(p)
    return paths


def _stage_dir(out, stage):
    d = Path(out) / DIRS[stage]
    d.mkdir(parents=True, exist_ok=True)
    return d


def _json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def versions():
    return {"mpgcn": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "kernels": BACKEND}


# -- shared readers --------------------------------------------------------


def _input_paths(cfg, out):
    base = Path(out) / DIRS["synth"]
    return (Path(cfg.paths.rides or base / "rides.csv"), Path(cfg.paths.events or base / "stop_events.csv"),
            Path(cfg.paths.stops or base / "stops.csv"))


def _profile(out):
    path, = _need(Path(out) / DIRS["ingest"] / "profile.json")
    return PassengerStopProfile.from_json(path)


def _registry(out):
    path, = _need(Path(out) / DIRS["ingest"] / "stops.csv")
    return parse_registry(path)


def _labels(out):
    path, = _need(Path(out) / DIRS["cluster"] / "labels.csv")
    with open(path, newline="") as fh:
        return {row["card_no"]: int(row["pattern"]) for row in csv.DictReader(fh)}


def _flows(out, cfg):
    """Total flow and one flow per pattern, gap-filled with the ingest mask."""
    ing = Path(out) / DIRS["ingest"]
    flow_path, gap_path = _need(ing / "flow.csv", ing / "gaps.json")
    total = FlowTensor.from_csv(flow_path, cfg.ingest.step_minutes)
    mask = np.zeros(total.values.shape, dtype=bool)
    for r, c in json.loads(gap_path.read_text()):
        mask[r, c] = True
    profile = _profile(out)
    labels = _labels(out)
    k = max(labels.values()) + 1 if labels else 1
    members = [[] for _ in range(k)]
    for card in sorted(labels):
        members[labels[card]].append(card)
    per = []
    for cards in members:
        f = aggregate_flow(profile, cfg.ingest.step_minutes, passenger_subset=cards, days=total.days,
                           stops=total.stops)
        per.append(interpolate_gaps(f, mask) if mask.any() else f)
    return total, per


def _propagation(out, cfg):
    path, = _need(Path(out) / DIRS["build-graphs"] / "stop_network.csv")
    net = read_edge_list(path)
    return net, normalize(distance_affinity(net.adjacency, cfg.graphs.sigma), symmetrize=True)


# -- stages ----------------------------------------------------------------


def stage_synth(cfg, out):
    d = _stage_dir(out, "synth")
    city = generate_city(replace(cfg.synth, seed=config_mod.sub_seed(cfg.seed, "synth")))
    write_city(city, d)
    return {"rides": len(city.rides), "stop_events": len(city.events), "passengers": cfg.synth.n_passengers}


def stage_ingest(cfg, out):
    rides_p, events_p, stops_p = _need(*_input_paths(cfg, out))
    d = _stage_dir(out, "ingest")
    parsed = parse_tables(rides_p, events_p)
    registry = parse_registry(stops_p)
    profile = match_stops(parsed.rides, parsed.events, tau=cfg.ingest.tau, registry=registry)
    kept = filter_passengers(profile, cfg.ingest.min_records, cfg.ingest.min_active_span_days)
    flow = aggregate_flow(kept, cfg.ingest.step_minutes, stops=registry.stops)
    mask = detect_gaps(parsed.rides, parsed.events, flow, registry.route_stops())
    filled = interpolate_gaps(flow, mask) if mask.any() else flow
    kept.to_json(d / "profile.json")
    filled.to_csv(d / "flow.csv")
    _json(d / "gaps.json", [[int(r), int(c)] for r, c in zip(*np.nonzero(mask))])
    write_registry(registry, d / "stops.csv")
    return {"matched": profile.matched, "unmatched": profile.unmatched, "passengers": len(profile),
            "kept_passengers": len(kept), "malformed": dict(parsed.malformed), "gap_cells": int(mask.sum())}


def stage_build_graphs(cfg, out):
    profile = _profile(out)
    registry = _registry(out)
    d = _stage_dir(out, "build-graphs")
    g = build_sharing_stop(profile)
    net = build_stop_network(registry)
    write_edge_list(g, d / "sharing_stop.csv", "sharing_stop")
    write_edge_list(net, d / "stop_network.csv", "stop_network")
    return {"passengers": g.n, "sharing_edges": g.adjacency.nnz, "stops": net.n,
            "stop_edges": net.adjacency.nnz}


def stage_cluster(cfg, out):
    path, = _need(Path(out) / DIRS["build-graphs"] / "sharing_stop.csv")
    graph = read_edge_list(path)
    d = _stage_dir(out, "cluster")
    ccfg = replace(cfg.cluster, seed=config_mod.sub_seed(cfg.seed, "cluster"))
    summary = {"k": ccfg.n_clusters}
    if ccfg.n_clusters == 1:
        labels = np.zeros(graph.n, dtype=np.int64)
    else:
        model, assignment = train_clustering(graph, node_features(graph), ccfg)
        labels = assignment.labels
        checkpoint.save(d / "model", model.manifest(), model.parameters())
        summary["final_loss"] = model.history[-1]["loss"] if model.history else None
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["card_no", "pattern"])
        for card, lab in sorted(zip(graph.nodes, labels.tolist())):
            w.writerow([card, lab])
    summary["sizes"] = np.bincount(labels, minlength=ccfg.n_clusters).tolist()
    truth_path = Path(out) / DIRS["synth"] / "ground_truth.json"
    if truth_path.exists() and ccfg.n_clusters > 1:
        truth = json.loads(truth_path.read_text())["labels"]
        common = [i for i, c in enumerate(graph.nodes) if c in truth]
        summary["nmi_vs_ground_truth"] = normalized_mutual_info(
            labels[common], np.array([truth[graph.nodes[i]] for i in common]))
    _json(d / "cluster.json", summary)
    return summary


def _pcfg(cfg):
    return replace(cfg.predictor, seed=config_mod.sub_seed(cfg.seed, "train"))


def _train_one(args):
    flow, prop, pcfg, j = args
    return train_gcn2flow(flow, prop, pcfg, stream=j)


def stage_train(cfg, out):
    _, per = _flows(out, cfg)
    _, prop = _propagation(out, cfg)
    d = _stage_dir(out, "train")
    pcfg = _pcfg(cfg)
    tasks = [(f, prop, pcfg, j) for j, f in enumerate(per)]
    if cfg.jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(tasks))) as pool:
            models = list(pool.map(_train_one, tasks))
    else:
        models = [_train_one(t) for t in tasks]
    summary = {}
    for j, m in enumerate(models):
        checkpoint.save(d / f"pattern_{j}", m.manifest(), m.parameters())
        best = min(m.history, key=lambda h: h["val_mse"]) if m.history else {}
        summary[str(j)] = {"epochs": len(m.history), "best_val_mse": best.get("val_mse"),
                           "final_train_mse": m.history[-1]["train_mse"] if m.history else None}
    _json(d / "train.json", summary)
    return {"patterns": len(models)}


def _load_models(out):
    d = Path(out) / DIRS["train"]
    _need(d / "pattern_0" / checkpoint.MANIFEST)
    models = []
    j = 0
    while (d / f"pattern_{j}" / checkpoint.MANIFEST).exists():
        models.append(Gcn2FlowModel.from_checkpoint(*checkpoint.load(d / f"pattern_{j}")))
        j += 1
    return models


def stage_predict(cfg, out):
    total, per = _flows(out, cfg)
    _, prop = _propagation(out, cfg)
    models = _load_models(out)
    if len(models) != len(per):
        raise MpgcnError(f"{len(models)} trained models for {len(per)} patterns; re-run train")
    d = _stage_dir(out, "predict")
    spd = total.slots_per_day
    _, _, test_days = split_days(len(total.days), models[0].config)
    preds, rows = [], None
    for m, f in zip(models, per):
        p, rows = predict(m, prop, f.values, spd, days=test_days)
        preds.append(p)
    fused = fuse(preds)
    stamps = total.slot_times()
    with open(d / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "stop_id", "pattern", "predicted", "actual"])
        for k, r in enumerate(rows):
            ts = stamps[r].strftime(TIME_FORMAT)
            for s, stop in enumerate(total.stops):
                for j, f in enumerate(per):
                    w.writerow([ts, stop, j, repr(float(preds[j][k, s])), repr(float(f.values[r, s]))])
                w.writerow([ts, stop, "total", repr(float(fused[k, s])), repr(float(total.values[r, s]))])
    return {"rows": int(len(rows)), "patterns": len(models)}


def read_predictions(path):
    """pattern -> (predicted, actual) arrays in file order."""
    series = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p, a = series.setdefault(row["pattern"], ([], []))
            p.append(float(row["predicted"]))
            a.append(float(row["actual"]))
    return {k: (np.array(p), np.array(a)) for k, (p, a) in series.items()}


def _metrics(pred, act, step):
    out = {"mae": analysis.mae(pred, act), "rmse": analysis.rmse(pred, act), "length": int(pred.size),
           "step_minutes": step}
    try:
        out["cc"] = analysis.cc(pred, act)
    except UndefinedMetricError:
        out["cc"] = None
    return out


def stage_evaluate(cfg, out, predictions=None):
    path, = _need(Path(predictions) if predictions else Path(out) / DIRS["predict"] / "predictions.csv")
    d = _stage_dir(out, "evaluate")
    series = read_predictions(path)
    step = cfg.ingest.step_minutes
    doc = {"split": "test", "patterns": {}}
    for name in sorted(series, key=lambda s: (s == "total", s)):
        m = _metrics(*series[name], step)
        if name == "total":
            doc["total"] = m
        else:
            doc["patterns"][name] = m
    _json(d / "metrics.json", doc)
    return doc.get("total", {})


def stage_fit(cfg, out):
    profile = _profile(out)
    registry = _registry(out)
    labels = _labels(out)
    d = _stage_dir(out, "fit-distributions")
    stats = analysis.pattern_stats(profile, labels, registry.route_stops())
    _json(d / "distributions.json", stats.to_dict())
    analysis.write_histograms_csv(stats, d / "histograms.csv")
    analysis.write_fit_curves_csv(stats, d / "fit_curves.csv")
    analysis.write_route_shares_csv(stats.shares, d / "route_shares.csv")
    return {"patterns": len(stats.histograms)}


def stage_optimize(cfg, out):
    profile = _profile(out)
    registry = _registry(out)
    net, _ = _propagation(out, cfg)
    pred_path, = _need(Path(out) / DIRS["predict"] / "predictions.csv")
    d = _stage_dir(out, "optimize")
    # the evaluation window is the last observed day
    last = max(b.time.date() for bs in profile.boardings.values() for b in bs)
    day = PassengerStopProfile({c: [b for b in bs if b.time.date() == last]
                                for c, bs in profile.boardings.items()})
    od = infer_od(day, registry.route_stops(), stops=net.nodes)
    background = {s: 0.0 for s in net.nodes}
    with open(pred_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["pattern"] == "total" and row["timestamp"].startswith(last.isoformat()):
                background[row["stop_id"]] += float(row["predicted"])
    bg = np.array([background[s] for s in net.nodes])
    oc = cfg.optimize
    cands = optimizer.generate_candidates(net, od, predicted_flow=bg, eps=oc.eps, cap=oc.cap, length=oc.length)
    state = optimizer.optimize_assignment(cands, base_flow=bg, max_sweeps=oc.max_sweeps, fraction=oc.fraction,
                                          seed=config_mod.sub_seed(cfg.seed, "optimize"))
    optimizer.write_report(state, cands, d)
    return {"day": last.isoformat(), "trips": len(state.trips), "objective_before": state.initial_objective,
            "objective_after": state.objective}


RUNNERS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "build-graphs": stage_build_graphs,
    "cluster": stage_cluster,
    "train": stage_train,
    "predict": stage_predict,
    "evaluate": stage_evaluate,
    "fit-distributions": stage_fit,
    "optimize": stage_optimize,
}
SEEDED = {"synth", "cluster", "train", "optimize"}


def run_stage(stage, cfg, out, **kw):
    t0 = time.perf_counter()
    summary = RUNNERS[stage](cfg, out, **kw)
    manifest = {
        "stage": stage,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "sub_seed": config_mod.sub_seed(cfg.seed, stage) if stage in SEEDED else None,
        "versions": versions(),
        "wall_seconds": round(time.perf_counter() - t0, 3),
        "summary": summary,
    }
    _json(_stage_dir(out, stage) / "manifest.json", manifest)
    log.info("%s done in %.1fs", stage, manifest["wall_seconds"])
    return manifest


def run_pipeline(cfg, out, start=None):
    order = list(STAGES)
    if cfg.paths.rides:
        order.remove("synth")
    if start is not None:
        if start not in order:
            raise ConfigError(f"--from must be one of {', '.join(order)}")
        order = order[order.index(start):]
    Path(out).mkdir(parents=True, exist_ok=True)
    _json(Path(out) / "config.json", cfg.to_dict())
    return [run_stage(s, cfg, out) for s in order]


# -- entry point -----------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--jobs", type=int, help="parallel per-pattern trainings")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="mpgcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common])
        if stage == "cluster":
            p.add_argument("--k", type=int, help="number of patterns")
        if stage == "evaluate":
            p.add_argument("--predictions", type=Path, help="predictions CSV (default: the predict stage output)")
    p = sub.add_parser("pipeline", parents=[common])
    p.add_argument("--from", dest="start", choices=STAGES, help="resume from this stage")
    p.add_argument("--k", type=int, help="number of patterns")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = config_mod.load(args.config, seed=args.seed, jobs=args.jobs, k=getattr(args, "k", None))
        cfg.validate()
        if args.command == "pipeline":
            manifests = run_pipeline(cfg, args.out, start=args.start)
            print(json.dumps({m["stage"]: m["wall_seconds"] for m in manifests}))
        else:
            kw = {"predictions": args.predictions} if args.command == "evaluate" else {}
            m = run_stage(args.command, cfg, args.out, **kw)
            print(json.dumps(m["summary"], sort_keys=True, default=str))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MpgcnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
