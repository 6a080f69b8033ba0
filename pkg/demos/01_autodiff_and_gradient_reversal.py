"""Walk through the autodiff core: build a graph, run backward, verify a
gradient against finite differences, and watch the gradient reversal layer
flip a gradient's sign.
"""

import numpy as np

import dualda.autodiff as ad

rng = np.random.default_rng(0)

# A tape records every op as it runs; backward replays it in reverse.
tape = ad.Tape()
x = tape.leaf(rng.uniform(-1, 1, (4, 3)))
w = tape.leaf(rng.uniform(-1, 1, (2, 3)))

logits = ad.matmul(ad.relu(x), w, transpose_b=True)
loss = ad.mean(ad.tensor_abs(ad.log_softmax(logits)))
grads = ad.backward(tape, loss)

print("loss:", loss.data[0])
print("grad wrt w:\n", w.grad)

# Check one coordinate against a central finite difference.
i = 3
h = 1e-5
flat = w.data.reshape(-1)


def value():
    t = ad.Tape()
    lo = ad.matmul(ad.relu(t.leaf(x.data)), t.leaf(w.data), transpose_b=True)
    return float(ad.mean(ad.tensor_abs(ad.log_softmax(lo))).data[0])


keep = flat[i]
flat[i] = keep + h
up = value()
flat[i] = keep - h
down = value()
flat[i] = keep
print(f"analytic grad[{i}] = {w.grad.reshape(-1)[i]:.8f}, "
      f"finite diff = {(up - down) / (2 * h):.8f}")

# The gradient reversal layer: identity forward, -lambda x gradient backward.
tape = ad.Tape()
v = tape.leaf([1.0, 2.0, 3.0])
out = ad.grad_reverse(v, 0.5)
print("\ngrad_reverse forward (identity):", out.data)
ad.backward(tape, ad.tensor_sum(out))
print("gradient through grad_reverse(lambda=0.5):", v.grad)
