"""A tour of the tensor engine: build a graph, differentiate it, check it.

Everything downstream (the backbone, the tuning modes, the training loop)
is built from the eleven kernels shown here. Gradients come from recording
operations on an explicit tape; the same seed always replays the same tape.
"""

import numpy as np

from tunelab import Graph, Tensor, grad_check
from tunelab import tensor as T


def main():
    rng = np.random.default_rng(0)

    print("== a two-layer perceptron, by hand ==")
    x = Tensor(rng.normal(size=(4, 3)))
    w1 = Tensor(rng.normal(size=(3, 8)), requires_grad=True, name="w1")
    w2 = Tensor(rng.normal(size=(8, 2)), requires_grad=True, name="w2")
    targets = [0, 1, 1, 0]

    with Graph() as g:
        hidden = T.relu(T.matmul(x, w1))
        logits = T.matmul(hidden, w2)
        loss = T.cross_entropy(logits, targets, "mean")
        g.backward(loss)
    print(f"loss = {loss.item():.4f}")
    print(f"dL/dw1 has shape {w1.grad.shape}, mean magnitude "
          f"{np.abs(w1.grad).mean():.4f}")

    print("\n== the gradient is exact, not approximate ==")

    def f():
        return T.cross_entropy(T.matmul(T.relu(T.matmul(x, w1)), w2),
                               targets, "mean")

    report = grad_check(f, {"w1": w1, "w2": w2})
    for name, err in report.items():
        print(f"max relative error vs central differences [{name}]: {err:.2e}")

    print("\n== frozen tensors stay out of the tape ==")
    w1.requires_grad = False
    w1.grad = None
    with Graph() as g:
        loss = f()
        g.backward(loss)
    print(f"after backward: w1.grad is {w1.grad}, w2.grad is a "
          f"{w2.grad.shape} array")
    w1.requires_grad = True

    print("\n== softmax rows sum to one, cross entropy matches -log p ==")
    row = Tensor([[2.0, 0.5, -1.0]])
    probs = T.softmax_rows(row)
    print(f"softmax: {np.round(probs.data, 4)} (sum {probs.data.sum():.6f})")
    ce = T.cross_entropy(row, [0], "mean")
    print(f"cross entropy of class 0: {ce.item():.6f} == "
          f"{-np.log(probs.data[0, 0]):.6f}")


if __name__ == "__main__":
    main()
