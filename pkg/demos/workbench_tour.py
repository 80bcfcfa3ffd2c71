"""
A tour of the synthetic workbench
=================================

Scenes are boxes on a 32x32 grid seen by four agents. Each modality is a
frozen random encoder that lifts an agent's masked view into a 16-channel
feature map. This script walks through one scene and shows how different
two modalities look on the same input.
"""

# %%
# One scene, four views
import numpy as np

from unitrans import workbench as wb

scene = wb.generate_scene(7)
print(f"scene 7 holds {len(scene.objects)} objects")
for agent in range(wb.N_AGENTS):
    obs = wb.make_observation(scene, agent)
    print(f"  agent {agent} sees {obs.view_mask.mean():.0%} of the grid")

# %%
# The task labels are per-cell occupancy of the full scene
labels = wb.task_labels(scene)
print(f"occupied cells: {int(labels.sum())} of {labels.size}")

# %%
# Two modalities encode the same observation. Channel statistics differ a
# lot, which is what the intrinsic encoder later has to see through.
split = wb.make_split()
obs = wb.make_observation(scene, 0)
for spec in split.training_modalities[:2]:
    F = wb.build_encoder(spec)(obs).values
    print(f"modality {spec.modality_id} ({spec.nonlinearity}): "
          f"channel means {np.round(F.mean(axis=(1, 2))[:4], 3)} ...")

# %%
# The teacher feature is what an ego encoder would have produced from the
# neighbor's view; it is the target for translation.
ego_spec = split.training_modalities[0]
teacher = wb.teacher_feature(ego_spec, wb.make_observation(scene, 2)).values
print("teacher feature shape", teacher.shape)
