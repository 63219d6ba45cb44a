"""Tour of the reverse-mode tape: build expressions, get exact gradients.

Everything downstream (transformer, PEFT modules, the transfer objective)
is assembled from these few primitives, so if the tape is right, their
gradients are right by construction. The finite-difference comparison at
the end is the same oracle the test suite uses.
"""

import numpy as np

from peftlab.tensor import Tensor, backward
from peftlab import tensor as T


def main():
    rng = np.random.default_rng(0)

    # scalars first: d/dx of x^2 + 3x at x=2 is 2x+3 = 7
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = T.sum_all(T.add(T.mul(x, x), T.scale(x, 3.0)))
    backward(y)
    print("d/dx (x^2 + 3x) at x=2:", x.grad[0])

    # a matrix chain with a reduction, gradient checked numerically
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    v = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    inputs = rng.normal(size=(5, 4))

    def loss_value():
        h = T.relu(T.matmul(Tensor(inputs), w))
        out = T.matmul(h, v)
        return T.sum_squares(out)

    loss = loss_value()
    backward(loss)
    analytic = w.grad.copy()

    h = 1e-6
    numeric = np.zeros_like(w.data)
    flat = w.data.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_value().item()
        flat[i] = keep - h
        down = loss_value().item()
        flat[i] = keep
        numeric.reshape(-1)[i] = (up - down) / (2 * h)

    err = np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1.0)
    print(f"matmul/relu chain: max relative gradient error {err:.2e}")

    # the tape refuses to propagate non-finite values
    big = Tensor(np.array([1e308]), requires_grad=True)
    try:
        with np.errstate(over="ignore"):
            T.mul(big, big)
    except ValueError as e:
        print("overflow guard:", e)


if __name__ == "__main__":
    main()
