"""Tour of the tape: record a forward pass, pull gradients back out.

Everything in this package runs on a small define-by-run autodiff core
over float64 numpy arrays. This script builds a two-layer network by
hand, checks one gradient against finite differences, and takes a few
Adam steps on a toy least-squares problem.
"""

import numpy as np

from cral.nn import Adam, MlpSpec, init_params, mlp_forward
from cral.tensor import Tape, Tensor, backward, matmul, mean, mul, relu

rng = np.random.default_rng(0)

# --- recording a computation -------------------------------------------

tape = Tape()
w = tape.leaf(rng.standard_normal((3, 2)))
x = Tensor(rng.standard_normal((4, 3)))  # constants do not get nodes
loss = mean(mul(relu(matmul(x, w)), relu(matmul(x, w))))
grads = backward(loss)
print("loss                 ", f"{loss.item():.6f}")
print("dloss/dw[0,0] (tape) ", f"{grads.wrt(w)[0, 0]:+.8f}")

# same thing by central differences
h = 1e-6
w_plus, w_minus = w.data.copy(), w.data.copy()
w_plus[0, 0] += h
w_minus[0, 0] -= h


def f(w_value):
    y = np.maximum(x.data @ w_value, 0.0)
    return float(np.mean(y * y))


print("dloss/dw[0,0] (fd)   ", f"{(f(w_plus) - f(w_minus)) / (2 * h):+.8f}")

# --- a real layer stack -------------------------------------------------

spec = MlpSpec(input_dim=3, hidden_dims=(8,), output_dim=2, dropout_rate=0.5)
mlp = init_params(spec, np.random.default_rng(1), name="demo")
print("\nparameters:", [p.name for p in mlp.params()])

# dropout only fires in train mode and needs its own rng
out_train, _ = mlp_forward(Tape(), mlp, Tensor(x.data), mode="train",
                           rng=np.random.default_rng(2))
out_eval, _ = mlp_forward(Tape(), mlp, Tensor(x.data), mode="eval")
print("train-mode output differs from eval:",
      bool(np.any(out_train.data != out_eval.data)))

# --- optimizing with Adam ----------------------------------------------

target = rng.standard_normal((4, 2))
adam = Adam(mlp.params(), lr=0.05)
for step in range(1, 201):
    tape = Tape()
    out, _ = mlp_forward(tape, mlp, Tensor(x.data))
    err = out - Tensor(target)
    loss = mean(mul(err, err))
    adam.step(backward(loss))
    if step in (1, 10, 50, 200):
        print(f"step {step:3d}  mse {loss.item():.6f}")
