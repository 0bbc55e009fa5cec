"""A walk through the tensor core: build a graph, run backward, check it numerically."""
import numpy as np

from bcaps import tensor as T

rng = np.random.default_rng(0)

# leaves that want gradients
w = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = T.Tensor(rng.normal(size=(4, 3)))

# a small expression: sum(sigmoid(x @ w)^2)
y = T.reduce_sum(T.square(T.sigmoid(x @ w)))
T.backward(y)
print("loss", y.item())
print("dL/dw\n", w.grad)

# the graph is consumed; a second backward is refused
try:
    T.backward(y)
except T.GraphError as e:
    print("second backward:", e)

# finite differences agree with the analytic gradient
err = T.grad_check(lambda ws: T.reduce_sum(T.square(T.sigmoid(x @ ws[0]))), [w])
print("max relative error vs central differences: %.2e" % err)

# broadcasting is deliberately narrow: scalar with tensor, or equal shapes
print((w * 2.0).shape)
try:
    T.add(w, T.Tensor(np.ones(2)))
except T.DimensionError as e:
    print("rejected:", e)
