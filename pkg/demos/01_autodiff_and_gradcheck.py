"""Walk through the autodiff core: build a graph, run backward, and verify
gradients against central differences.

Run:  python3 demos/01_autodiff_and_gradcheck.py
"""

import numpy as np

from forgenet import autodiff as ad
from forgenet.autodiff import Tensor, backward, finite_diff_check
from forgenet.optim import ParamStore, adam_step

rng = np.random.default_rng(0)

# --- a tiny expression graph ------------------------------------------------
x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
loss = ad.sum_all(ad.mul(x, x))  # sum of squares
backward(loss)
print("loss            :", loss.item())
print("d(loss)/dx      :", x.grad, "(expected 2*x)")

# gradients accumulate until zeroed
backward(loss)
print("after 2nd pass  :", x.grad, "(doubled)")
x.zero_grad()

# --- verify an op against finite differences --------------------------------
w = Tensor(rng.normal(size=(2, 3, 3, 3)))
fn = lambda t: ad.sum_all(ad.conv2d(t, w, stride=1, padding=1))
err = finite_diff_check(fn, Tensor(rng.normal(size=(3, 6, 6))), h=1e-5)
print(f"conv2d gradient vs central differences: max rel err {err:.2e}")

# --- one Adam step ------------------------------------------------------------
store = ParamStore()
p = store.create("weight", np.array([0.5]))
p.grad[:] = 1.0
adam_step(store, lr=1e-2)
print("param after one Adam step with grad 1:", p.data, "(moved by ~lr)")

# --- the attention building block -------------------------------------------
feat = Tensor(rng.normal(size=(4, 2, 2)))
flat = ad.reshape(feat, (4, 4))
att = ad.softmax_rows(ad.matmul(ad.transpose(flat), flat))
print("attention row sums:", att.data.sum(axis=1), "(each exactly ~1)")
