"""End to end on the bundled toy model: measure, steer, tune, re-measure.

The toy model is a small transformer whose attention to image tokens drops
when the prompt contains framing words ("yes", "no", option letters), so the
constrained framings show the same visual-energy deficit as a real model
would. Takes well under a minute on a laptop CPU.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from framelens.harness import ToyAdapter, toy_triplets
from framelens.harness.config import load_config
from framelens.steering import measure, multiplier_sweep, ratio_recovery
from framelens.tuner import SoftPromptedAdapter, train

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy_tune.yaml"


def mean_ve(adapter, items) -> float:
    return float(np.mean([measure(adapter, it).stats.visual_energy for it in items]))


def main() -> None:
    cfg = load_config(CONFIG)
    toy = ToyAdapter(cfg.toy)
    trips = toy_triplets(10, seed=cfg.seed)

    print("visual energy by framing")
    for f in ("open", "yesno", "mcq"):
        print(f"  {f:6} {mean_ve(toy, [t[f] for t in trips]):.5f}")

    errs = [ratio_recovery(toy, t.open, t.mcq).relative_error for t in trips]
    print(f"ratio steering, worst relative VE error vs open: {max(errs):.2%}")

    sweep = multiplier_sweep(toy, [t.mcq for t in trips], "ve", [1.0, 1.25, 1.5, 2.0])
    print("VE over multipliers:", " ".join(f"{v:.5f}" for v in sweep.visual_energy), f"(rho={sweep.ve_rho.rho:.2f})")

    before = toy.parameters_hash()
    result = train(toy, trips, cfg.train)
    aligns = [r["align"] for r in result.log if "align" in r]
    print(f"tuning: {result.total_steps} steps, alignment {np.mean(aligns[:5]):.3e} -> {np.mean(aligns[-5:]):.3e}")
    print("model weights unchanged:", toy.parameters_hash() == before)

    prompted = SoftPromptedAdapter(toy, result.prompts)
    for f in ("yesno", "mcq"):
        print(f"  {f:6} VE with soft prompts {mean_ve(prompted, [t[f] for t in trips]):.5f}")


if __name__ == "__main__":
    main()
