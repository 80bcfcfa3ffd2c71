"""
Learning a modality-intrinsic space
===================================

The intrinsic encoder summarises a feature map by channel moments, response
statistics and a pooled Gram matrix, then maps that summary to a small code.
Trained contrastively across modalities, codes of the same modality gather
together and codes of different modalities spread apart. Emerging modalities
are never seen during training.
"""

# %%
from unitrans import workbench as wb
from unitrans.mie import Stage1Config, intrinsic_space_report, stage1_train

split = wb.make_split()
print("training modalities:", split.train_seeds)
print("emerging modalities:", split.emerging_seeds)

# %%
# A short run; the CLI default is 600 steps.
res = stage1_train(split, Stage1Config(steps=200, seed=0))
print("epoch losses:", [round(v, 2) for v in res.epoch_losses])

# %%
# Compare raw channel moments with the learned codes on held-out scenes.
report = intrinsic_space_report(res.mie, split, n_scenes=20)
for metric, (raw, code) in report.rows.items():
    print(f"{metric:36s} raw {raw:7.3f}   codes {code:7.3f}")
