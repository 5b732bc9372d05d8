"""Write a synthetic box/ellipsoid dataset (STL files + manifest.csv).

    python3 scripts/make_synthetic_dataset.py --out data/synthetic --n 64 --seed 0
    python3 scripts/make_synthetic_dataset.py --out data/overfit --overfit
"""

import argparse

from aerodrag.synthetic import overfit_family, random_family, write_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overfit", action="store_true", help="the fixed 8-design family instead")
    args = p.parse_args()
    designs = overfit_family() if args.overfit else random_family(args.n, args.seed)
    stl_dir, manifest = write_dataset(designs, args.out)
    print(f"{len(designs)} designs -> {stl_dir}, {manifest}")


if __name__ == "__main__":
    main()
