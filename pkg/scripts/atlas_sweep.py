"""Atlas (max-DSC) relabeling accuracy as delineation noise grows."""
import argparse

from structnorm.experiments import run_atlas_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.5, 1.0, 2.0])
    p.add_argument("--per-class", type=int, default=20)
    args = p.parse_args()
    for noise, acc in run_atlas_sweep(args.noise, args.per_class).items():
        print(f"noise {noise:4.2f}  accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
