"""Train a teacher and distil three students on a tiny shapes set.

Takes about a minute on one core. Every run is seeded, so the numbers
printed here repeat exactly.
"""

from tatkd import RunConfig
from tatkd.train import distill_student, load_datasets, train_teacher

cfg = RunConfig(n_train=256, n_test=256, epochs=15, teacher_epochs=15, eval_every=0)
train, test = load_datasets(cfg)
teacher, tm = train_teacher(cfg, train, test=test)
print(f"teacher accuracy {tm.final_metric:.3f}")

for method, eps in (("none", 0.0), ("fm", 1.0), ("tat", 1.0)):
    _, m = distill_student(cfg.replace(distill=method, epsilon=eps), teacher, train, seed=0, test=test)
    trace = " ".join(f"{v:.3f}" for v in m.column("loss_tat")[::5])
    print(f"{method:>4}: accuracy {m.final_metric:.3f}  feature loss every 5 epochs: {trace}")
