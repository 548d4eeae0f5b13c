"""Train the desk policy, run every study against it and export plot data.

Usage: python scripts/run_desk_pipeline.py [--out runs/desk] [--config FILE]
Takes roughly 25 minutes on one CPU core: three ~5 minute trainings (desk policy plus one per OOD case).
"""

import argparse
import logging
import time

from eftlab.harness import (
    cmd_behavior_study,
    cmd_diversity_ablation,
    cmd_export_plotdata,
    cmd_inference_study,
    cmd_noise_study,
    cmd_ood_study,
    cmd_train,
    load_config,
)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--config")
    p.add_argument("--skip-ood", action="store_true", help="skip the OOD study (it trains its own policies)")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    t0 = time.time()

    def progress(ep, r):
        if ep % 25 == 0:
            logging.info("episode %d reward %.3f", ep, r)

    ck = cmd_train(cfg, args.out, progress)["checkpoint"]
    for fn in (cmd_inference_study, cmd_noise_study, cmd_diversity_ablation, cmd_behavior_study):
        path = next(v for v in fn(cfg, ck, args.out).values() if not isinstance(v, list))
        logging.info("%s -> %s (%.0f s)", fn.__name__, path, time.time() - t0)
    if not args.skip_ood:
        logging.info("ood -> %s", cmd_ood_study(cfg, args.out, progress=progress)["ood"])
    res = cmd_export_plotdata(args.out)
    for fig, path in res["written"].items():
        logging.info("%s -> %s", fig, path)


if __name__ == "__main__":
    main()
