#!/usr/bin/env python3
# Tagging metrics on made-up predictions, and the per-group summary.

import numpy as np

from vcmr.eval import LabelMatrix, PredictionMatrix, evaluate_predictions, load_tag_groups, pr_auc, roc_auc, tag_group_report

print("ROC-AUC [0.9, 0.4, 0.6] vs [1, 1, 0]:", roc_auc([0.9, 0.4, 0.6], [1, 1, 0]))
print("PR-AUC  [0.9, 0.8, 0.7] vs [1, 0, 1]:", pr_auc([0.9, 0.8, 0.7], [1, 0, 1]))

groups = load_tag_groups()
tags = sorted(groups)
rng = np.random.default_rng(0)
n = 300
labels = (rng.random((n, len(tags))) < 0.08).astype(int)
# informative but noisy scores
scores = labels * rng.uniform(0.3, 1.0, labels.shape) + rng.uniform(0.0, 0.6, labels.shape)
ids = [f"track{i}" for i in range(n)]
m = evaluate_predictions(PredictionMatrix(scores, ids, tags), LabelMatrix(labels, ids, tags))
print(f"macro ROC-AUC {m['roc_auc']:.3f}  macro PR-AUC {m['pr_auc']:.3f}  skipped {m['skipped_tags']}")

report = tag_group_report(m["per_tag_roc_auc"], groups)
for g, v in report.means.items():
    print(f"{g:12s} {v:.3f}  ({report.counts[g]} tags)")
