# %% [markdown]
# # Diversity losses during training
#
# The cosine, contrastive and mixing terms are added to the class-token cross
# entropy.  Each is reported every step, even when its weight is zero.

# %%
from divpatch.data import load_splits
from divpatch.train import TrainConfig, train

base = TrainConfig(image_size=32, patch_size=4, dim=64, depth=6, heads=4,
                   train_size=512, eval_size=256, batch_size=32, total_epochs=2)
data = load_splits(base.dataset_spec(), base.seed)

# %%
for name, cfg in [("plain", base),
                  ("diversified", base.replace(alpha_cos=1.0, alpha_contrastive=1.0, alpha_mixing=1.0))]:
    runlog = train(cfg, data=data)
    last = runlog.steps[-1]
    rec = runlog.epochs[-1]
    print(f"{name:12s} total {last['total']:.3f} cos {last['l_cos']:.3f} "
          f"con {last['l_contrastive']:.3f} mix {last['l_mixing']:.3f} | "
          f"top-1 {rec.eval_top1:.3f} final P {rec.profile.last():.3f}")
