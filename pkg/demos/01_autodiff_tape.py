"""
Reverse-mode gradients on a tape
================================

Builds a two-layer network from the raw ops, records the forward pass on a
Tape, replays it backward, and confirms every parameter gradient against
central finite differences.
"""

import numpy as np

from lossnets.autodiff import Tape, Value, backward, dense, leaky_relu, mean_all, mul

rng = np.random.default_rng(0)

# Parameters are plain float64 arrays wrapped in Values.  Passing an explicit
# grad buffer makes accumulation land where we can read it afterwards.
w1 = Value(rng.normal(0, 0.5, (4, 8)), grad=np.zeros((4, 8)))
b1 = Value(np.zeros(8), grad=np.zeros(8))
w2 = Value(rng.normal(0, 0.5, (8, 1)), grad=np.zeros((8, 1)))
b2 = Value(np.zeros(1), grad=np.zeros(1))
params = [w1, b1, w2, b2]

x = rng.normal(size=(16, 4))
head = rng.normal(size=(16, 1))


def forward():
    # Each op appends one record to the tape; backward() replays them in
    # reverse and accumulates into .grad.
    tape = Tape()
    h = leaky_relu(tape, dense(tape, x, w1, b1))
    out = dense(tape, h, w2, b2)
    loss = mean_all(tape, mul(tape, out, head))
    return tape, loss


tape, loss = forward()
backward(tape, loss)
print(f"loss = {loss.data.item():+.6f}")

# Central finite differences as an independent oracle: nudge one parameter
# entry at a time and difference the loss.
step = 1e-5
worst = 0.0
for p in params:
    flat = p.data.reshape(-1)
    grad = p.grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = forward()[1].data.item()
        flat[i] = keep - step
        down = forward()[1].data.item()
        flat[i] = keep
        fd = (up - down) / (2 * step)
        denom = max(abs(fd), abs(grad[i]), 1e-6)
        worst = max(worst, abs(fd - grad[i]) / denom)

print(f"worst relative error vs finite differences: {worst:.2e}")
assert worst < 1e-4
print("tape gradients match the finite-difference oracle")
