"""Pretrain on the 8-class phantom, then fine-tune Res4 + head on four unseen organs."""
import argparse
import logging
from pathlib import Path

from structnorm.dataset import default_phantom_config, generate_phantom_dataset
from structnorm.experiments import comparison_arms, desk_train_config, run_transfer
from structnorm.network import save_checkpoint
from structnorm.training import train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/transfer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=5)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    manifest = generate_phantom_dataset(default_phantom_config(), 0, out / "pretrain")
    asac, net_cfg = comparison_arms()["asac_nonlocal"]
    net, _ = train(manifest, net_cfg, desk_train_config(args.seed), asac)
    save_checkpoint(net, out / "pretrained.ckpt", manifest.vocabulary.names)
    result = run_transfer(net, out / "transfer", per_class=args.per_class, asac=asac)
    print("frozen tensors identical:", result.frozen_identical)
    for name, tpr in result.per_class_tpr.items():
        print(f"{name:12s} TPR {tpr:.3f}")


if __name__ == "__main__":
    main()
