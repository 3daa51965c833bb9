"""How the class-balanced loss treats a 91/9 imbalance.

    python3 demos/weighted_loss.py
"""

import torch

from octlesion.trainer import class_weights, weighted_ce_loss

w = class_weights({"benign": 91, "invasive": 9})
print(f"weights (benign, invasive): {w[0]:.2f}, {w[1]:.2f}")

# A lazy model that always says "benign" with 90% confidence.
logits = torch.log(torch.tensor([[0.9, 0.1]] * 100))
labels = torch.tensor([0] * 91 + [1] * 9)
plain = weighted_ce_loss(logits, labels, (0.5, 0.5)).item()
balanced = weighted_ce_loss(logits, labels, w).item()
print(f"always-benign loss: unweighted {plain:.3f}, class-balanced {balanced:.3f}")
print("the balanced loss makes each class carry half the total weight, so ignoring invasive lesions costs more")
