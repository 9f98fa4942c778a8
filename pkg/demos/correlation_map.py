"""Where does each teacher pixel look? A hand-made example of the correlation map.

The student map is a shifted copy of the teacher map, so a one-to-one
regression is badly wrong while the correlation loss can undo the shift.
Run with ``python demos/correlation_map.py``.
"""

import numpy as np

from tatkd import Tensor, fm_loss, tat_forward

rng = np.random.default_rng(0)
teacher = rng.normal(size=(6, 6, 4))
# equal-norm pixels: by Cauchy-Schwarz a pixel matches itself best
teacher *= 4 / np.linalg.norm(teacher, axis=-1, keepdims=True)
student = np.roll(teacher, shift=2, axis=1)

out = tat_forward(Tensor(student), Tensor(teacher))
W = out.correlation.matrix.data

print(f"one-to-one loss:  {fm_loss(Tensor(student), Tensor(teacher)).data.item():.4f}")
print(f"correlation loss: {out.loss.data.item():.4f}")

# teacher pixel (r, c) should attend to student pixel (r, c + 2)
hits = sum(W[r * 6 + c].argmax() == r * 6 + (c + 2) % 6 for r in range(6) for c in range(6))
print(f"{hits}/36 teacher pixels put their largest weight on the shifted student pixel")
print(f"row sums in [{W.sum(1).min():.6f}, {W.sum(1).max():.6f}]")
