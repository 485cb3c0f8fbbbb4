"""
Baselines and the price of unawareness
======================================

JTT and ERM need a hyperparameter search, and the usual way to pick a
candidate is validation accuracy.  When that choice misses the candidate with
the best worst-group accuracy, the gap is the price of unawareness (PoU).
"""

from tabkit import JttConfig, ModelSpec, TrainConfig, gen_even_odd, run_erm, run_gdro, run_jtt
from tabkit.metrics import GridResult, GridRow, mms, pou
from tabkit.nn import EarlyStop

data = gen_even_odd(4000, 800, p=0.98, seed=1, n_test=800)
train, val, test = data["train"], data["val"], data["test"]
spec = ModelSpec("mlp", train.shape, 2, hidden=(64,))
base = TrainConfig(batch_size=256, max_epochs=25, early_stop=EarlyStop("val_acc"))

# %%
# A small JTT grid: identifier length x upweight factor.
rows = []
for cid, (epochs, up) in enumerate([(1, "ratio"), (2, "ratio"), (1, 5), (3, 20)]):
    r = run_jtt(train, val, base, JttConfig(epochs, up), seed=0, spec=spec, test_ds=test)
    rows.append(GridRow("jtt", cid, f"T={epochs};up={up}", 1, r.val_record.mean_acc,
                        r.val_record.wga, r.test_record.wga, r.test_record.mean_acc))
    print(f"{rows[-1].hyperparams:<14} lambda={r.extras['lambda_up']:<3} "
          f"val acc {rows[-1].val_acc_mean:.3f}  test WGA {rows[-1].test_wga_mean:.3f}")

grid = GridResult(rows)
print(f"JTT  PoU {pou(grid):.3f}  MMS {mms(grid):.3f}")

# %%
# G-DRO reads the true groups during training, so it is an upper reference.
gdro = run_gdro(train, val, base, seed=0, spec=spec, test_ds=test)
erm = run_erm(train, val, base, seed=0, spec=spec, test_ds=test)
print(f"ERM test WGA {erm.test_record.wga:.3f}, G-DRO test WGA {gdro.test_record.wga:.3f}")
print("final G-DRO group weights:", gdro.extras["q"].round(3))
