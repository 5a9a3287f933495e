# %% [markdown]
# # Patch mixing
#
# Two images exchange patches under a random or block mask.  Every output
# patch keeps a label for the image it came from, and the image-level target
# is weighted by the realised fraction of patches from the first image.

# %%
import numpy as np

from divpatch.data import DatasetSpec, load_splits
from divpatch.mixing import MixSpec, mix_batch

spec = DatasetSpec(image_size=32, train_size=8, eval_size=0)
train_set, _ = load_splits(spec, seed=0)
rng = np.random.default_rng(0)
# labels cycle with the index, so shuffle before pairing row i with row i + 4
order = rng.permutation(len(train_set))
patches, labels = train_set.patches(4)[order], train_set.labels[order]

# %%
for mode in ("random", "block"):
    mixed = mix_batch(patches, labels, MixSpec(mode=mode), rng, spec.num_classes)
    grid = mixed.mask[0].reshape(8, 8).astype(int)
    print(f"{mode}: lambda sampled {mixed.lambda_sampled[0]:.2f}, realised {mixed.lambda_eff[0]:.2f}")
    print("\n".join("".join("#" if v else "." for v in row) for row in grid))
    print("soft target:", np.round(mixed.y_mix[0], 3))
