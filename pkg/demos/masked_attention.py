"""Walk through the two attention branches on a 3x3 toy grid.

Run with ``python demos/masked_attention.py``.
"""

import numpy as np

from mce_fss import tensor as T
from mce_fss.mce import build_additive_mask, query_branch_attention, support_logits
from mce_fss.tensor import Tensor

rng = np.random.default_rng(0)
n, d = 9, 4

# support mask on the attention grid: an L-shaped object, the rest is background
support_mask = np.array([[1, 0, 0],
                         [1, 0, 0],
                         [1, 1, 0]], dtype=np.uint8)
mask = build_additive_mask(support_mask)
print("additive key bias:", mask.bias)

# support branch: support queries attend over support keys, background keys get -inf
s_q, s_k = Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(n, d)))
weights = T.masked_softmax(support_logits(s_q, s_k), mask.bias).data
print("\nsupport-branch weights (rows sum to 1, background columns are exactly 0):")
print(np.array2string(weights, precision=3, suppress_small=True))
assert np.all(weights[:, support_mask.ravel() == 0] == 0.0)

# query branch: query tokens attend over query keys, but the values come from
# the support image and background support values are zeroed first
q_q, q_k = Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(n, d)))
s_v = rng.normal(size=(n, d))
r_q = query_branch_attention(q_q, q_k, Tensor(s_v), mask).data

# replace every background support value with garbage: R_Q does not move a single bit
s_v_noisy = s_v.copy()
s_v_noisy[support_mask.ravel() == 0] = 1e6 * rng.normal(size=(int((support_mask == 0).sum()), d))
r_q_noisy = query_branch_attention(q_q, q_k, Tensor(s_v_noisy), mask).data
print("\nR_Q unchanged after scrambling background support values:", r_q.tobytes() == r_q_noisy.tobytes())
