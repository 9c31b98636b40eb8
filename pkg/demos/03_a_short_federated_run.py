"""
A short federated run, with and without knowledge transfer
==========================================================

Eight heterogeneous clients, non-IID data, twenty rounds.
"""

from fedktl.experiment import ExperimentConfig, ledger_totals, run_trial

cfg = ExperimentConfig(
    dataset={"kind": "synthetic", "C": 10, "d": 32, "samples_per_class": 80, "spread": 0.5},
    N=8, rounds=20, server_epochs=20)

# the full loop
full = run_trial(cfg, seed=0)
for rep in full.reports[::5] + [full.final]:
    print(f"round {rep.round:>2}  acc {rep.weighted_acc:.3f}  "
          f"loss_A {rep.mean_loss_A:.3f}  loss_M {rep.mean_loss_M:.4f}")

# each client trains alone; over so few rounds the two can land either way
# (the acceptance suite compares them over 100 rounds and three seeds)
alone = run_trial(cfg.replace(ablation="-L_i^M"), seed=0)
print("final accuracy, full loop:", round(full.final.weighted_acc, 4))
print("final accuracy, local only:", round(alone.final.weighted_acc, 4))

# what moved over the wire, counted in array elements
print("full loop:", ledger_totals(full.ledger))
print("local only:", ledger_totals(alone.ledger))
