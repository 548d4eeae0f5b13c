"""Where does foresight gain or lose reward? Per-term comparison for the EFT agent.

Runs the diversity protocol with the EFT agent given the true characters of
everybody else ("oracle"), its own character for everybody (fce_eft) and no
foresight, and prints the ego's mean reward terms and lane-change rate.

Usage: python scripts/eft_reward_breakdown.py CHECKPOINT [--seeds 10] [--steps 400]
"""

import argparse

import numpy as np

from eftlab.eft import run_episode
from eftlab.harness.studies import diversity_characters
from eftlab.numerics import SeededRng
from eftlab.policy import load_checkpoint


def main():
    p = argparse.ArgumentParser()
    p.add_argument("checkpoint")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--levels", type=int, nargs="+", default=[2, 3])
    args = p.parse_args()
    policy = load_checkpoint(args.checkpoint).bundle
    env = policy.env_config
    space = policy.train_config.character_space
    print("n  variant      all_agents  ego     r1      r2      r3      lane_changes")
    for n in args.levels:
        stats = {k: [] for k in ("oracle", "fce_eft", "without_eft")}
        for seed in range(args.seeds):
            chars = diversity_characters(space, env.n_agents, n, seed)
            oracle = {j: chars[j] for j in range(1, env.n_agents)}
            for name in stats:
                mode = "proposed" if name == "oracle" else name
                res = run_episode(policy, env, mode, chars, oracle, SeededRng(seed).spawn(12, n), args.steps)
                lg = res.log
                stats[name].append([lg.rewards.mean(), lg.rewards[:, 0].mean(),
                                    *(lg.terms[:, k, 0].mean() for k in range(3)),
                                    np.mean((lg.a_d[:, 0] != 0) & ~lg.infeasible[:, 0])])
        for name, rows in stats.items():
            m = np.mean(rows, axis=0)
            print(f"{n}  {name:<11}  " + "  ".join(f"{v:.4f}" for v in m))


if __name__ == "__main__":
    main()
