# %% [markdown]
# # Loss ablation
#
# `ablate` trains each on/off combination of the three losses with a shared
# seed and tabulates accuracy and final-layer similarity.

# %%
from divpatch.train import TrainConfig, ablate

cfg = TrainConfig(image_size=16, patch_size=4, dim=32, depth=4, heads=4,
                  train_size=256, eval_size=128, batch_size=32, total_epochs=2)
rows = ablate(cfg)
print("cos contrastive mixing   top1   final_p")
for r in rows:
    print(f"{r['cos']:3d} {r['contrastive']:11d} {r['mixing']:6d}  {r['top1']:.3f}  {r['final_p']:.3f}")
