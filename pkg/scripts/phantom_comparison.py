"""Global-crop baseline vs multi-scale crops + non-local blocks on the 8-class phantom."""
import argparse
import json
import logging

from structnorm.experiments import run_phantom_comparison


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/comparison")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=12)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    result = run_phantom_comparison(args.out, seeds=args.seeds, epochs=args.epochs)
    print(json.dumps(result.summary(), indent=1))


if __name__ == "__main__":
    main()
