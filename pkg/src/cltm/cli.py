"""Command-line pipeline: synth, distances, structure, train, infer, eval, scene.

Every command reads files, runs one stage, writes its artifacts into
``--out-dir`` and prints a one-line JSON summary on stdout. Failures print a
JSON error object and exit with status 1 (2 for usage errors). Artifacts never
contain timings, so reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfg
from .data import LabeledDataset, ingest, write_dataset
from .evaluation import SCENE_SOURCES, kmeans, match_clusters, pr_curve, prf, scene_feature_vectors
from .kernel_distance import cond_distance_matrix, load_distance_matrix, save_distance_matrix
from .potentials import BaselineModel, CltmModel, independent_baseline_train, load_model, save_model, sgd_train
from .structure import clrg, load_tree, save_tree
from .synthetic import random_ground_truth, random_latent_tree, sample_dataset
from .tree_crf import latent_activation_scores

log = logging.getLogger("cltm")


class UsageError(Exception):
    pass


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _provenance(out: Path, command: str, config: dict, summary: dict) -> None:
    _write_json(out / f"{command}.run.json", {"command": command, "config": config, "summary": summary})


# ---------------------------------------------------------------- commands

def cmd_synth(args, config, out: Path) -> dict:
    s = config["synth"]
    rng = np.random.default_rng(cfg.stage_seed(config["seed"], "synth"))
    tree = random_latent_tree(s["n_observed"], s["n_latent"], rng)
    model = random_ground_truth(
        tree, s["n_clusters"], s["dim"], rng,
        edge_range=tuple(s["edge_range"]), bias_scale=s["bias_scale"], bias_mean=s["bias_mean"],
        separation=s["separation"], noise_scale=s["noise_scale"],
        repulsive_fraction=s["repulsive_fraction"], scene_on_latent=s["scene_on_latent"],
    )
    data = sample_dataset(model, s["n"], cfg.stage_seed(config["seed"], "synth-sample"))
    n_val = int(round(s["validation_fraction"] * s["n"]))
    order = rng.permutation(s["n"])
    data.split = {
        "train": sorted(int(i) for i in order[n_val:]),
        "validation": sorted(int(i) for i in order[:n_val]),
    }
    manifest = write_dataset(out, data, binary=s["binary_features"])
    _write_json(out / "truth.json", {
        "model": model.to_dict(),
        "hidden_names": list(tree.latent),
        "hidden": data.hidden.tolist(),
        "clusters": data.clusters.tolist(),
    })
    return {"manifest": manifest.name, "n": data.n, "labels": data.n_labels,
            "latent": tree.latent_count, "train": len(data.split["train"]),
            "validation": n_val}


def cmd_distances(args, config, out: Path) -> dict:
    k = config["kernel"]
    data = ingest(args.data).part(args.split)
    dm = cond_distance_matrix(
        data, gamma=k["gamma"], lam=k["lambda"], query_subsample=k["query_subsample"],
        seed=cfg.stage_seed(config["seed"], "distances"), scale_by_n=k["scale_by_n"],
        landmarks=k["landmarks"], det_floor=k["det_floor"], clamp_ceiling=k["clamp_ceiling"],
    )
    save_distance_matrix(dm, out / "distances.csv", out / "distances.json")
    off = dm.entries[np.triu_indices(dm.size, k=1)]
    return {"labels": dm.size, "n": data.n, "mean_distance": float(off.mean()) if off.size else 0.0}


def cmd_structure(args, config, out: Path) -> dict:
    src = Path(args.distances)
    sidecar = Path(args.sidecar) if args.sidecar else src.with_suffix(".json")
    dm = load_distance_matrix(src, sidecar)
    s = config["structure"]
    tree = clrg(dm, epsilon=s["epsilon"], scale_epsilon=s["scale_epsilon"])
    tree.validate()
    save_tree(tree, out / "tree.json", out / "tree.dot")
    return {"observed": tree.observed_count, "latent_count": tree.latent_count, "edges": len(tree.edges)}


def cmd_train(args, config, out: Path) -> dict:
    data = ingest(args.data).part(args.split)
    if args.kind == "cltm":
        if not args.tree:
            raise UsageError("train --kind cltm needs --tree")
        tree = load_tree(args.tree)
        tc = cfg.train_config(config, "train-cltm")
        model, trace = sgd_train(data, tree, tc)
        path = out / "model.json"
    else:
        tc = cfg.train_config(config, "train-baseline")
        model, trace = independent_baseline_train(data, tc)
        path = out / "baseline.json"
    save_model(model, path)
    _write_json(out / f"{path.stem}.trace.json", {"epoch_loss": trace})
    return {"model": path.name, "kind": args.kind, "epochs": len(trace),
            "final_loss": trace[-1] if trace else None}


def cmd_infer(args, config, out: Path) -> dict:
    model = load_model(args.model)
    data = ingest(args.data).part(args.split)
    if isinstance(model, BaselineModel):
        probs = model.predict_proba(data.features)
        _write_table(out / "probabilities.csv", model.label_names, [[repr(float(v)) for v in r] for r in probs])
        _write_table(out / "predictions.csv", model.label_names,
                     model.predict(data.features, config["eval"]["threshold"]).tolist())
        return {"kind": "baseline", "n": data.n}
    names = model.tree.node_names
    pot, _ = model.potentials(data.features)
    result = model.marginals(data.features)
    map_z = model.map(data.features)
    _write_table(out / "marginals.csv", names, [[repr(float(v)) for v in r] for r in result.node_marginals])
    _write_table(out / "map.csv", names, map_z.tolist())
    top = args.top_k
    activations = {
        h: [int(i) for i in latent_activation_scores(model.tree, pot.node, h, top)]
        for h in model.tree.latent
    }
    _write_json(out / "activations.json", {"top_k": top, "split": args.split, "ranking": activations})
    return {"kind": "cltm", "n": data.n, "nodes": len(names),
            "mean_log_partition": float(np.mean(result.log_partition))}


def _truth_for(model, data: LabeledDataset):
    names = model.tree.observed if isinstance(model, CltmModel) else model.label_names
    index = {n: i for i, n in enumerate(data.label_names)}
    return data.labels[:, [index[n] for n in names]], list(names)


def cmd_eval(args, config, out: Path) -> dict:
    model = load_model(args.model)
    data = ingest(args.data).part(args.split)
    truth, names = _truth_for(model, data)
    e = config["eval"]
    if isinstance(model, CltmModel):
        scores = model.marginals(data.features).node_marginals[:, : model.tree.observed_count]
        pred = model.map(data.features)[:, : model.tree.observed_count]
        decision = "map"
    else:
        scores = model.predict_proba(data.features)
        pred = (scores >= e["threshold"]).astype(np.int64)
        decision = f"threshold {e['threshold']}"
    report = prf(pred, truth, names)
    curve = pr_curve(scores, truth, np.linspace(0.0, 1.0, e["grid_points"]), names)
    curve.write_csv(out / "pr_curve.csv")
    metrics = report.to_dict()
    metrics["decision"] = decision
    metrics["config"] = config
    _write_json(out / "metrics.json", metrics)
    return {"micro_f": report.micro_f, "macro_f": report.macro_f,
            "micro_precision": report.micro_precision, "micro_recall": report.micro_recall}


def cmd_scene(args, config, out: Path) -> dict:
    model = load_model(args.model)
    data = ingest(args.data).part(args.split)
    if data.scenes is None:
        raise UsageError("scene clustering needs scene labels in the manifest")
    e = config["eval"]
    source = args.source or e["scene_source"]
    if isinstance(model, BaselineModel) and args.source is None:
        source = "baseline-probs"
    vectors = scene_feature_vectors(model, data.features, source)
    k = e["k"] or int(len(np.unique(data.scenes)))
    assign, inertia = kmeans(vectors, k, restarts=e["restarts"], seed=cfg.stage_seed(config["seed"], "scene"))
    result = match_clusters(assign, data.scenes, k)
    report = result.to_dict()
    report.update({"k": k, "source": source, "inertia": inertia, "config": config})
    _write_json(out / "cluster.json", report)
    return {"k": k, "source": source, "misclassification": result.misclassification}


COMMANDS = {
    "synth": cmd_synth,
    "distances": cmd_distances,
    "structure": cmd_structure,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "scene": cmd_scene,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out-dir", default=".", help="directory for artifacts")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cltm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    p = sub.add_parser("distances", parents=[common], help="conditional information distances")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--split", default="train")

    p = sub.add_parser("structure", parents=[common], help="learn a latent tree")
    p.add_argument("--distances", required=True, help="distance CSV")
    p.add_argument("--sidecar", help="label sidecar JSON (default: CSV path with .json)")

    p = sub.add_parser("train", parents=[common], help="train a CLTM or the independent baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--tree")
    p.add_argument("--kind", choices=("cltm", "baseline"), default="cltm")
    p.add_argument("--split", default="train")

    for name, helptext in (("infer", "marginals, MAP and latent activations"),
                           ("eval", "precision/recall/F and PR curves"),
                           ("scene", "k-means scene clustering with matched misclassification")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="validation")
        if name == "infer":
            p.add_argument("--top-k", type=int, default=10)
        if name == "scene":
            p.add_argument("--source", choices=SCENE_SOURCES)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        config = cfg.load(args.config, args.seed)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=max(args.threads, 1)):
            summary = COMMANDS[args.command](args, config, out)
        name = f"train-{args.kind}" if args.command == "train" else args.command
        _provenance(out, name, config, summary)
    except UsageError as exc:
        print(json.dumps({"ok": False, "command": args.command, "error": "usage", "message": str(exc)}))
        return 2
    except (OSError, ValueError, ArithmeticError, RuntimeError, KeyError) as exc:
        print(json.dumps({"ok": False, "command": args.command, "error": type(exc).__name__,
                          "message": str(exc)}))
        return 1
    summary = {"ok": True, "command": args.command, **summary,
               "seconds": round(time.perf_counter() - start, 3)}
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
