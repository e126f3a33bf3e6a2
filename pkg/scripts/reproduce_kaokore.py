"""Full-scale Kaokore status run with a ResNet-50 classifier.

Needs the Kaokore dataset (labels.csv plus images_256/) and torchvision state
dicts for VGG-19 (style encoder) and ResNet-50 (classifier backbone). Writes
``<out>/fullscale_result.json``; point STYLEBALANCE_FULLSCALE_RESULT at it to
let the acceptance suite check the reported test accuracy.

    python scripts/reproduce_kaokore.py --kaokore ~/data/kaokore \\
        --vgg19 vgg19.pth --resnet50 resnet50.pth --out runs/kaokore

With ``--sweep`` the full 10x10 (p1, p2) grid is run and the cell with the
best dev accuracy is reported; otherwise only the given (p1, p2) is trained.
"""

import argparse
import json
import sys
from pathlib import Path

from stylebalance.cli import main as cli


def run(stage: str, common: list[str], *extra: str) -> None:
    code = cli([stage, *common, *extra])
    if code != 0:
        sys.exit(f"{stage} failed with exit code {code}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--kaokore", type=Path, required=True, help="directory with labels.csv and images_256/")
    ap.add_argument("--vgg19", type=Path, required=True, help="torchvision vgg19 state dict")
    ap.add_argument("--resnet50", type=Path, required=True, help="torchvision resnet50 state dict")
    ap.add_argument("--out", type=Path, default=Path("runs/kaokore"))
    ap.add_argument("--p1", type=float, default=0.3)
    ap.add_argument("--p2", type=float, default=0.2)
    ap.add_argument("--sweep", action="store_true", help="run the 0.1..1.0 grid instead of one (p1, p2)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="config override passed to every stage")
    args = ap.parse_args()

    common = ["--out", str(args.out), "--seed", str(args.seed), "--source", "csv",
              "--data", str(args.kaokore / "images_256"), "--labels", str(args.kaokore / "labels.csv")]
    for item in args.set:
        common += ["--set", item]
    clf = ["--backbone", "resnet50", "--weights", str(args.resnet50)]
    run("ingest", common)
    run("train-style", common, "--style-backbone", "vgg19", "--style-weights", str(args.vgg19))

    if args.sweep:
        run("sweep", common, *clf, "--p1", "0.1:1.0:0.1", "--p2", "0.1:1.0:0.1")
        cells = []
        for path in (args.out / "sweep" / "cells").glob("*/metrics.json"):
            cells.append(json.loads(path.read_text()))
        grid = [c for c in cells if (c["p1"], c["p2"]) != (0.0, 0.0)]
        best = max(grid, key=lambda c: (c["dev"]["accuracy"], -c["p1"], -c["p2"]))
        result = {"backbone": "resnet50", "p1": best["p1"], "p2": best["p2"], "selected_by": "dev accuracy",
                  "test": best["test"], "dev": best["dev"]}
    else:
        run("augment", common, "--p1", str(args.p1), "--p2", str(args.p2))
        run("train-clf", common, *clf)
        run("eval", common)
        result = {"backbone": "resnet50", "p1": args.p1, "p2": args.p2,
                  "test": json.loads((args.out / "eval" / "metrics_test.json").read_text()),
                  "dev": json.loads((args.out / "eval" / "metrics_dev.json").read_text())}

    path = args.out / "fullscale_result.json"
    path.write_text(json.dumps(result, indent=2))
    print(f"test accuracy {100 * result['test']['accuracy']:.2f} (reported 83.22) -> {path}")


if __name__ == "__main__":
    main()
