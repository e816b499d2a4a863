#!/usr/bin/env python3
"""Forest hyperparameter sweep on synthetic pages, no sockets involved.

Renders every page of a generated site directly to bytes, extracts the
feature vectors, then trains one forest per (trees, bootstrap) cell and
prints the held-out confusion counts and per-class metric table.

    python3 scripts/forest_sweep.py --benign 120 --malicious 80 --trees 1 5 10
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from websift import forest
from websift.features import extract_features
from websift.synthweb import generate_site, load_site_spec, render_page


def build_dataset(n_benign: int, n_malicious: int, seed: int):
    doc = generate_site(n_benign, n_malicious, seed=seed)
    samples, labels = [], []
    for spec in load_site_spec(doc).values():
        body = render_page(spec, seed=doc["seed"])
        samples.append(extract_features(body, declared_type="text/html"))
        labels.append(1 if spec.kind == "malicious" else 0)
    return samples, labels


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--benign", type=int, default=120)
    ap.add_argument("--malicious", type=int, default=80)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--trees", type=int, nargs="+", default=[1, 5, 10, 25])
    args = ap.parse_args(argv)

    samples, labels = build_dataset(args.benign, args.malicious, args.seed)
    train_idx, test_idx = forest.split_dataset(samples, labels, seed=args.seed)
    train_x = [samples[i] for i in train_idx]
    train_y = [labels[i] for i in train_idx]
    test_x = [samples[i] for i in test_idx]
    test_y = [labels[i] for i in test_idx]
    print(json.dumps({"train_size": len(train_idx),
                      "test_size": len(test_idx),
                      "malicious_total": sum(labels)}), flush=True)

    for bootstrap in (True, False):
        for n_trees in args.trees:
            config = forest.ForestConfig(n_trees=n_trees, seed=args.seed,
                                         bootstrap=bootstrap)
            model = forest.train_forest(train_x, train_y, config)
            cm = forest.evaluate(model, test_x, test_y, check_overlap=False)
            print(json.dumps({
                "trees": n_trees,
                "bootstrap": bootstrap,
                "confusion": {"tp": cm.tp, "fp": cm.fp,
                              "tn": cm.tn, "fn": cm.fn},
                "metrics": forest.metric_table(cm),
            }, sort_keys=True), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
