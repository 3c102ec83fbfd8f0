"""Write a cohort of nested-sphere phantoms plus an ideal pointwise model.

    python3 scripts/make_phantom_cohort.py /tmp/cohort --cases 3
"""

import argparse
from pathlib import Path

from emednext.synthetic import nested_phantom, write_case, write_ideal_model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("root", type=Path)
    ap.add_argument("--cases", type=int, default=3)
    ap.add_argument("--shape", type=int, nargs=3, default=(96, 96, 72))
    ap.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    ap.add_argument("--jitter", type=int, default=4)
    args = ap.parse_args()

    first = None
    for i in range(args.cases):
        mods, label = nested_phantom(shape=args.shape, spacing=args.spacing, jitter=args.jitter, seed=i)
        write_case(args.root / "in", f"phantom{i:03d}", mods, label)
        first = first or mods
    write_ideal_model(args.root / "model", first)
    print(f"wrote {args.cases} cases to {args.root / 'in'} and a model to {args.root / 'model'}")


if __name__ == "__main__":
    main()
