"""Attention fusion of one global and six patch embeddings."""
import numpy as np
import torch

from glfusion.affm import FusionConfig, FusionStack, fuse_and_classify
from glfusion.core import Embedding

torch.manual_seed(0)
stack = FusionStack().eval()
rng = np.random.default_rng(0)

tokens = [Embedding(rng.normal(size=128), "global")] + [Embedding(rng.normal(size=128), "patch") for _ in range(6)]
print("fake probability:", round(fuse_and_classify(tokens, stack), 6))

# per-head attention maps of the first layer; every row is a distribution over the 7 tokens
x = torch.from_numpy(np.stack([t.data for t in tokens])).float()[None]
_, weights = stack.layers[0](x, return_weights=True)
print("layer 0 weights:", tuple(weights.shape), "row sums", weights.sum(-1).min().item(), "to", weights.sum(-1).max().item())
print("head 0, global token attends to:", np.round(weights[0, 0, 0].detach().numpy(), 3))

# Stacking bare attention layers averages the tokens toward each other. At
# initialisation the 7 outputs of the third layer are almost identical; the
# residual + LayerNorm variant keeps them apart.
for residual in (False, True):
    torch.manual_seed(0)
    st = FusionStack(FusionConfig(residual_norm=residual)).eval()
    h = x
    spreads = []
    for i, layer in enumerate(st.layers):
        h = st.norms[i](h + layer(h)) if residual else layer(h)
        spreads.append((h - h.mean(1, keepdim=True)).abs().max().item())
    print(f"residual_norm={residual}: max token deviation per layer", ["%.1e" % v for v in spreads])
