"""Check the autodiff engine against central differences on a small conv net."""
import numpy as np

from gdfd import tensor as T

rng = np.random.default_rng(0)
x = T.Tensor(rng.normal(size=(2, 1, 6, 6)), requires_grad=True)
k = T.Tensor(rng.normal(size=(3, 1, 3, 3)) * 0.5, requires_grad=True)


def loss_fn():
    h = T.tanh(T.conv2d(x, k, padding=1))
    return T.mean(T.avg_pool2x(h) * T.avg_pool2x(h))


loss = loss_fn()
loss.backward()

# compare every kernel entry with a central difference
eps = 1e-6
worst = 0.0
for idx in np.ndindex(k.shape):
    saved = k.data[idx]
    k.data[idx] = saved + eps
    up = float(loss_fn().data)
    k.data[idx] = saved - eps
    down = float(loss_fn().data)
    k.data[idx] = saved
    worst = max(worst, abs((up - down) / (2 * eps) - k.grad[idx]))

print(f"loss {float(loss.data):.6f}, max |analytic - numeric| over kernel = {worst:.2e}")
