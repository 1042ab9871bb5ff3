"""Population-based bandit HPO on a drifting quadratic objective, with the
equal-budget random-search baseline for contrast."""

import numpy as np

from fusionscreen import pb2

space = pb2.HyperParamSpace((
    pb2.Dimension("learning_rate", "continuous", (1e-4, 1.0), "log"),
    pb2.Dimension("optimizer", "categorical", ("adam", "rmsprop")),
))
cfg = pb2.Pb2Config(population_size=8, quantile_fraction=0.5, t_ready=5)
budget = 60

print("objective: (log10(lr) - log10(opt))^2 where the optimum drifts")
print(f"population {cfg.population_size}, interval {cfg.t_ready}, "
      f"budget {budget} epochs per trial\n")

best, history = pb2.run_hpo(space, cfg, budget,
                            pb2.quadratic_trainable(), seed=0)
for rec in history:
    scores = sorted(rec["scores"].values())
    clones = ", ".join(f"{e['trial_id']}<-{e['cloned_from']}"
                       for e in rec["lineage_events"]) or "none"
    print(f"gen {rec['generation']:>2}: best {scores[0]:.5f} "
          f"worst {scores[-1]:.5f}  clones: {clones}")

print(f"\npb2 best score     {best.best_score():.6f} "
      f"(lr = {best.config['learning_rate']:.4g})")

rs = [pb2.random_search(space, cfg, budget, pb2.quadratic_trainable(),
                        seed=s) for s in range(5)]
print(f"random search best {float(np.median(rs)):.6f} "
      f"(median of 5 seeds, same budget)")
