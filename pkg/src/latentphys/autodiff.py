"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A :class:`Tape` records primitive operations executed inside its ``with``
block; :func:`backward` replays the records in reverse to accumulate
gradients into :class:`Parameter` objects. Outside any tape, the same
primitives run eagerly with no recording, which is the inference path.

Every primitive validates that its output is finite and raises
:class:`~latentphys.errors.NumericError` otherwise. Tapes are
single-threaded; independent tapes on different threads do not interact.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import NumericError

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "backward",
    "matmul",
    "affine",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "exp",
    "concat",
    "gather_rows",
    "repeat_rows",
    "sum_groups",
    "slice_cols",
    "sum_reduce",
    "mse",
    "sq_l2",
    "add_noise",
    "check_gradients",
    "primitive_gradcheck",
]

_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _ensure_finite(op: str, data: np.ndarray):
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Array value plus an optional node id on the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.node is None else f"node {self.node}"
        return f"Tensor(shape={self.data.shape}, {tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter:
    """Trainable array with a matching gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name: str = ""):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def tensor(self) -> Tensor:
        """Leaf tensor bound to the active tape (constant if no tape)."""
        tape = _active_tape()
        if tape is None:
            return Tensor(self.value)
        return tape._watch(self)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self._records = []  # (out_id, parent_ids, vjp)
        self._next_id = 0
        self._param_leaves = {}  # id(Parameter) -> node id
        self._leaf_params = {}   # node id -> Parameter
        self._finished = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _watch(self, param: Parameter) -> Tensor:
        if self._finished:
            raise RuntimeError("tape already consumed by backward()")
        nid = self._param_leaves.get(id(param))
        if nid is None:
            nid = self._new_id()
            self._param_leaves[id(param)] = nid
            self._leaf_params[nid] = param
        return Tensor(param.value, nid)

    def _emit(self, data, parents, vjp) -> Tensor:
        if self._finished:
            raise RuntimeError("tape already consumed by backward()")
        nid = self._new_id()
        self._records.append((nid, parents, vjp))
        return Tensor(data, nid)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) into every parameter reached by the
        recorded graph, then clear the tape."""
        if loss.node is None:
            raise ValueError("loss is not attached to this tape")
        if loss.data.size != 1:
            raise ValueError("loss must be a scalar")
        grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=np.float64)}
        owned = {loss.node}
        for out_id, parents, vjp in reversed(self._records):
            g = grads.pop(out_id, None)
            owned.discard(out_id)
            if g is None:
                continue
            for pid, pg in zip(parents, vjp(g)):
                if pid is None or pg is None:
                    continue
                if pid not in grads:
                    grads[pid] = pg
                elif pid in owned:
                    grads[pid] += pg
                else:
                    grads[pid] = grads[pid] + pg
                    owned.add(pid)
        for nid, param in self._leaf_params.items():
            g = grads.get(nid)
            if g is not None:
                param.grad += g
        self._records.clear()
        self._finished = True


def backward(loss: Tensor, tape: Tape | None = None):
    """Run reverse-mode accumulation for ``loss`` on ``tape`` (default:
    the innermost active tape)."""
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise ValueError("no active tape")
    tape.backward(loss)


def _record(op, data, inputs, vjp) -> Tensor:
    """Common tail of every primitive: finite check, then record if any
    input is tracked on the active tape."""
    _ensure_finite(op, data)
    tape = _active_tape()
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node for t in inputs)
    if all(p is None for p in parents):
        return Tensor(data)
    return tape._emit(data, parents, vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T, ad.T @ g)

    return _record("matmul", out, (a, b), vjp)


def affine(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` with a row-broadcast bias."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"affine shape mismatch: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    out += b.data
    xd, wd = x.data, w.data

    def vjp(g):
        return (g @ wd.T, xd.T @ g, g.sum(axis=0))

    return _record("affine", out, (x, w, b), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape))

    return _record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g * bd, a_shape), _unbroadcast(g * ad, b_shape))

    return _record("mul", out, (a, b), vjp)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = x.data * c

    def vjp(g):
        return (g * c,)

    return _record("scale", out, (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (out > 0.0),)

    return _record("relu", out, (x,), vjp)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", out, (x,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (constants and tracked tensors may mix)."""
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(ts), vjp)


def gather_rows(x, idx, scatter_perm=None, uniform_count: int | None = None) -> Tensor:
    """Select rows ``x[idx]``.

    When every source row is selected exactly ``uniform_count`` times the
    caller may pass the stable argsort of ``idx`` as ``scatter_perm``; the
    backward pass then reduces contiguous groups instead of scatter-adds.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx)
    out = x.data[idx]
    n_src = x.data.shape[0]
    rest = x.data.shape[1:]

    if scatter_perm is not None and uniform_count is not None:
        perm = scatter_perm
        k = uniform_count

        def vjp(g):
            return (g[perm].reshape((n_src, k) + rest).sum(axis=1),)
    else:
        def vjp(g):
            acc = np.zeros((n_src,) + rest, dtype=np.float64)
            np.add.at(acc, idx, g)
            return (acc,)

    return _record("gather_rows", out, (x,), vjp)


def repeat_rows(x, k: int) -> Tensor:
    """Repeat each row ``k`` times (row-major blocks)."""
    x = _as_tensor(x)
    out = np.repeat(x.data, k, axis=0)
    n = x.data.shape[0]
    rest = x.data.shape[1:]

    def vjp(g):
        return (g.reshape((n, k) + rest).sum(axis=1),)

    return _record("repeat_rows", out, (x,), vjp)


def sum_groups(x, k: int) -> Tensor:
    """Sum consecutive groups of ``k`` rows."""
    x = _as_tensor(x)
    n = x.data.shape[0]
    if n % k:
        raise ValueError(f"rows ({n}) not divisible by group size ({k})")
    rest = x.data.shape[1:]
    out = x.data.reshape((n // k, k) + rest).sum(axis=1)

    def vjp(g):
        return (np.repeat(g, k, axis=0),)

    return _record("sum_groups", out, (x,), vjp)


def slice_cols(x, start: int, stop: int) -> Tensor:
    """View columns [start, stop) of a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError("slice_cols expects a 2-D tensor")
    out = x.data[:, start:stop].copy()
    shape = x.data.shape

    def vjp(g):
        acc = np.zeros(shape, dtype=np.float64)
        acc[:, start:stop] = g
        return (acc,)

    return _record("slice_cols", out, (x,), vjp)


def sum_reduce(x) -> Tensor:
    """Sum of all elements (scalar output)."""
    x = _as_tensor(x)
    out = x.data.sum()
    shape = x.data.shape

    def vjp(g):
        return (np.full(shape, g, dtype=np.float64),)

    return _record("sum_reduce", out, (x,), vjp)


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.mean(diff * diff)
    n = diff.size

    def vjp(g):
        gd = (2.0 / n) * g * diff
        return (gd, -gd)

    return _record("mse", out, (pred, target), vjp)


def sq_l2(x) -> Tensor:
    """Sum of squared elements (scalar output)."""
    x = _as_tensor(x)
    out = np.sum(x.data * x.data)
    xd = x.data

    def vjp(g):
        return (2.0 * g * xd,)

    return _record("sq_l2", out, (x,), vjp)


def add_noise(x, std, rng: np.random.Generator) -> Tensor:
    """Add Gaussian noise with per-element ``std``; the noise is treated
    as a constant, so gradients pass through unchanged."""
    x = _as_tensor(x)
    noise = rng.standard_normal(x.data.shape) * np.asarray(std, dtype=np.float64)
    out = x.data + noise

    def vjp(g):
        return (g,)

    return _record("add_noise", out, (x,), vjp)


def primitive_gradcheck(seed: int = 0, eps: float = 1e-5):
    """Finite-difference check of every primitive at random inputs.

    Each case builds a scalar loss routed through one primitive (reduced
    by ``sq_l2``/``mse``/``sum_reduce``); analytic gradients of the
    participating parameters are compared against central differences.
    Returns ``(max_rel_err, rows)``.
    """
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((5, 4))
    gather_idx = np.array([1, 2, 0, 2, 0, 1])
    noise_seed = int(rng.integers(2 ** 31))

    cases = [
        ("matmul", [(4, 5), (5, 3)],
         lambda ps: sq_l2(matmul(ps[0].tensor(), ps[1].tensor()))),
        ("affine", [(6, 4), (4, 3), (3,)],
         lambda ps: sq_l2(affine(ps[0].tensor(), ps[1].tensor(),
                                 ps[2].tensor()))),
        ("add", [(4, 3), (3,)],
         lambda ps: sq_l2(add(ps[0].tensor(), ps[1].tensor()))),
        ("sub", [(4, 3), (4, 3)],
         lambda ps: sq_l2(sub(ps[0].tensor(), ps[1].tensor()))),
        ("mul", [(4, 3), (4, 3)],
         lambda ps: sq_l2(mul(ps[0].tensor(), ps[1].tensor()))),
        ("scale", [(4, 3)], lambda ps: sq_l2(scale(ps[0].tensor(), -1.7))),
        ("relu", [(8, 5)], lambda ps: sq_l2(relu(ps[0].tensor()))),
        ("exp", [(4, 3)],
         lambda ps: sq_l2(exp(scale(ps[0].tensor(), 0.3)))),
        ("concat", [(4, 3), (4, 2)],
         lambda ps: sq_l2(concat([ps[0].tensor(), ps[1].tensor()], axis=-1))),
        ("gather_rows", [(5, 3)],
         lambda ps: sq_l2(gather_rows(ps[0].tensor(),
                                      np.array([4, 0, 2, 2, 1, 3])))),
        ("gather_rows_uniform", [(3, 2)],
         lambda ps: sq_l2(gather_rows(
             ps[0].tensor(), gather_idx,
             scatter_perm=np.argsort(gather_idx, kind="stable"),
             uniform_count=2))),
        ("repeat_rows", [(3, 4)],
         lambda ps: sq_l2(repeat_rows(ps[0].tensor(), 3))),
        ("sum_groups", [(6, 4)],
         lambda ps: sq_l2(sum_groups(ps[0].tensor(), 2))),
        ("slice_cols", [(4, 6)],
         lambda ps: sq_l2(slice_cols(ps[0].tensor(), 1, 4))),
        ("sum_reduce", [(4, 3)],
         lambda ps: mul(sum_reduce(ps[0].tensor()),
                        sum_reduce(ps[0].tensor()))),
        ("mse", [(5, 4)], lambda ps: mse(ps[0].tensor(), target)),
        ("sq_l2", [(4, 3)], lambda ps: sq_l2(ps[0].tensor())),
        ("add_noise", [(5, 4)],
         lambda ps: sq_l2(add_noise(ps[0].tensor(),
                                    np.array([0.1, 0.2, 0.3, 0.4]),
                                    np.random.default_rng(noise_seed)))),
    ]

    max_err = 0.0
    all_rows = []
    for name, shapes, builder in cases:
        params = [Parameter(rng.standard_normal(s), name=f"{name}.{i}")
                  for i, s in enumerate(shapes)]
        err, rows = check_gradients(lambda b=builder, ps=params: b(ps),
                                    params, eps=eps, samples_per_param=4,
                                    seed=seed + 1)
        max_err = max(max_err, err)
        all_rows.extend((name,) + r for r in rows)
    return max_err, all_rows


def check_gradients(loss_fn, params, eps: float = 1e-5,
                    samples_per_param: int = 5, seed: int = 0):
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be a deterministic zero-argument callable returning a
    scalar :class:`Tensor` built from ``params`` (any internal randomness
    must be re-seeded per call). For each parameter a random subset of
    components is probed. Returns ``(max_rel_err, rows)`` where each row
    is ``(param_name, index, analytic, numeric, rel_err)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    rows = []
    max_err = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        take = min(samples_per_param, n)
        idxs = rng.choice(n, size=take, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[id(p)].reshape(-1)[i]
            # floor sits well above central-difference floating noise so
            # exactly-zero gradients (e.g. biases cancelled by centering)
            # are not flagged on noise alone
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            max_err = max(max_err, rel)
            rows.append((p.name, int(i), float(a), float(numeric), float(rel)))
    return max_err, rows
