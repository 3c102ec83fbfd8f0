"""End-to-end desk run: phantom cohort, ideal model, full pipeline, cohort metrics.

A second, randomly initialised micro model can be ensembled in with a small
weight to show how the ensemble and postprocessing react to a noisy member.
"""

import argparse
import json
import tempfile
import time
from pathlib import Path

from emednext.cli import main as cli
from emednext.model import MicroMedNeXt, ModelConfig, init_params, save_model
from emednext.synthetic import nested_phantom, write_case, write_ideal_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", type=Path, default=None)
    ap.add_argument("--cases", type=int, default=2)
    ap.add_argument("--noisy-member-weight", type=float, default=0.0)
    args = ap.parse_args()
    root = args.root or Path(tempfile.mkdtemp(prefix="emednext-demo-"))

    first = None
    for i in range(args.cases):
        mods, label = nested_phantom(shape=(64, 64, 48), radii=(12, 8, 5), brain_radii=(26, 26, 20), jitter=3, seed=i)
        write_case(root / "in", f"case{i:02d}", mods, label)
        first = first or mods
    write_ideal_model(root / "ideal", first)
    models = [str(root / "ideal")]
    weights = [[1.0, 1.0, 1.0]]
    if args.noisy_member_weight > 0:
        cfg = ModelConfig(base_channels=2, num_stages=4)
        save_model(MicroMedNeXt(cfg, init_params(cfg, seed=1)), root / "noisy")
        models.append(str(root / "noisy"))
        weights.append([args.noisy_member_weight] * 3)

    config = {
        "input_dir": str(root / "in"), "work_dir": str(root / "work"), "output_dir": str(root / "out"),
        "models": models, "weights": weights,
        "preprocess": {"target_shape": [64, 64, 48]},
        "sliding_window": {"patch_shape": [64, 64, 48]},
    }
    (root / "config.json").write_text(json.dumps(config, indent=2))
    start = time.perf_counter()
    code = cli(["pipeline", "--config", str(root / "config.json")])
    print(f"exit code {code} after {time.perf_counter() - start:.1f}s, outputs in {root / 'out'}")
    cohort = json.loads((root / "out" / "report.json").read_text())["cohort"]
    print(f"{'class':6s} " + " ".join(f"{k:>9s}" for k in next(iter(cohort.values()))))
    for cls, vals in cohort.items():
        print(f"{cls:6s} " + " ".join(f"{v:9.4f}" for v in vals.values()))


if __name__ == "__main__":
    main()
