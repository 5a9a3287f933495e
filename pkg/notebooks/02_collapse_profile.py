# %% [markdown]
# # Patch similarity across depth
#
# P(h) is the mean absolute cosine between distinct patch representations.
# We train a small plain ViT for a couple of epochs on the synthetic grating
# data and look at how P changes from layer to layer.

# %%
from divpatch.data import load_splits
from divpatch.metrics import profile
from divpatch.train import TrainConfig, train
from divpatch.vit import init_params

cfg = TrainConfig(image_size=32, patch_size=4, dim=64, depth=6, heads=4,
                  train_size=512, eval_size=256, batch_size=32, total_epochs=2)
train_set, eval_set = load_splits(cfg.dataset_spec(), cfg.seed)
patches = eval_set.patches(cfg.patch_size)[:128]

# %%
untrained = profile(init_params(cfg.model_config(), cfg.seed), patches)
runlog = train(cfg, data=(train_set, eval_set))
trained = runlog.epochs[-1].profile
for a, b in zip(untrained.layers, trained.layers):
    print(f"layer {a.layer}: untrained {a.mean_p:.3f}  trained {b.mean_p:.3f}")
print("eval top-1:", runlog.epochs[-1].eval_top1)
