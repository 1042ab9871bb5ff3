"""Evaluation toolkit: regression metrics, best-pose aggregation, threshold
classification with Cohen's kappa, PR curves, and method comparison."""

import numpy as np

from fusionscreen import evaluate

rng = np.random.default_rng(0)
n = 500
true = rng.normal(6.0, 1.5, size=n)
pred = true + rng.normal(0.0, 0.8, size=n)

m = evaluate.regression_metrics(pred, true)
print(f"regression: RMSE {m.rmse:.3f}, MAE {m.mae:.3f}, "
      f"Pearson r {m.pearson_r:.3f}, Spearman rho {m.spearman_rho:.3f}")


class Rec:
    def __init__(self, c, t, p, s):
        self.compound_id, self.target_id = c, t
        self.pose_id, self.predicted_pk = p, s


poses = [Rec(f"c{i}", "t0", p, float(rng.normal(6, 1)))
         for i in range(50) for p in range(10)]
best = evaluate.aggregate_best_pose(poses, "max")
print(f"best-pose aggregation: {len(poses)} poses -> {len(best)} compounds")

labels_true = evaluate.binarize(true, cutoff=6.0)
labels_pred = evaluate.binarize(pred, cutoff=6.0)
c = evaluate.confusion(labels_pred, labels_true)
kappa = evaluate.cohen_kappa(labels_pred, labels_true)
print(f"\nactive/inactive at pK > 6: precision {c.precision:.3f}, "
      f"recall {c.recall:.3f}, F1 {c.f1:.3f}, kappa {kappa:.3f}")

shuffled = rng.permutation(labels_true)
print(f"kappa of a label-shuffled predictor: "
      f"{evaluate.cohen_kappa(shuffled, labels_true):+.3f} (chance level)")

_, _, _, f1_best, baseline = evaluate.pr_curve(pred, labels_true)
print(f"PR sweep: best F1 {f1_best:.3f} against a "
      f"{baseline:.2f} positive-rate baseline")

print("\n== comparing scoring methods against experiment ==")
exp = {f"cpd{i}": float(v) for i, v in enumerate(true[:100])}
methods = {
    "fusion": {k: v + rng.normal(0, 0.5) for k, v in exp.items()},
    "docking": {k: -v + rng.normal(0, 2.0) for k, v in exp.items()},
    "random": {k: float(rng.normal()) for k in exp},
}
rows = evaluate.method_comparison_report(methods, exp,
                                         lower_is_stronger={"docking"})
for r in rows:
    rho = r["abs_spearman_rho"]
    print(f"  {r['method']:<8} n={r['n']:<4} "
          f"|spearman| = {rho if rho is None else round(rho, 3)}")
