"""
Counting the cost of a translation
==================================

Multiply-adds are counted at every matrix product. The instantiated
translator runs the backbone once; a classic mixture of experts runs it once
per selected expert and averages the outputs.
"""

# %%
from unitrans import evaluation as ev
from unitrans import workbench as wb
from unitrans.mie import IntrinsicEncoder
from unitrans.stage2 import TaskHead
from unitrans.translator import ExpertBank, MappingRouter, MctArchitecture

arch = MctArchitecture()
print(f"closed-form backbone madds for a 32x32 map: {arch.backbone_madds(32, 32):,}")

# %%
# Untrained weights are enough: cost does not depend on parameter values.
model = ev.Translator(IntrinsicEncoder(), ExpertBank(arch.manifest()), MappingRouter(),
                      TaskHead(), arch)
for top_k in (1, 3, 8):
    rep = ev.profile(model, top_k=top_k, trials=3, split=wb.make_split())
    uni, classic = rep.rows
    print(f"top_k={top_k}: unitrans {uni['madds']:,} madds in {uni['passes']} pass, "
          f"classic {classic['madds']:,} in {classic['passes']} (ratio {rep.ratio:.3f})")
