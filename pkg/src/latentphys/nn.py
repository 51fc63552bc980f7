"""Network building blocks on top of the tape engine.

Contains plain ReLU MLPs, the pairwise-interaction core that maps a set
of per-object feature rows to per-object outputs, the Adam optimizer, the
validation-plateau ("waterfall") learning-rate schedule, and text
checkpoint serialization with exact float round-trip.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import NumericError

__all__ = [
    "MLP",
    "PairTable",
    "InteractionNet",
    "in_forward",
    "Adam",
    "WaterfallSchedule",
    "save_checkpoint",
    "load_checkpoint",
]


class MLP:
    """Affine/ReLU stack with a linear output layer.

    ``sizes`` lists every layer's output width; the final entry is the
    output width. Hidden weights use Kaiming-uniform init, the output
    layer uses uniform +/- 1/sqrt(fan_in), biases start at zero.
    """

    def __init__(self, name: str, in_width: int, sizes, rng: np.random.Generator):
        if not sizes:
            raise ValueError("MLP needs at least one layer")
        self.name = name
        self.in_width = int(in_width)
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = []
        fan_in = self.in_width
        for li, width in enumerate(self.sizes):
            last = li == len(self.sizes) - 1
            bound = (1.0 / np.sqrt(fan_in)) if last else np.sqrt(6.0 / fan_in)
            w = Parameter(rng.uniform(-bound, bound, size=(fan_in, width)),
                          name=f"{name}.{li}.w")
            b = Parameter(np.zeros(width), name=f"{name}.{li}.b")
            self.layers.append((w, b))
            fan_in = width

    @property
    def out_width(self) -> int:
        return self.sizes[-1]

    def __call__(self, x) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for li, (w, b) in enumerate(self.layers):
            h = ad.affine(h, w.tensor(), b.tensor())
            if li != last:
                h = ad.relu(h)
        return h

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers for p in pair]


@dataclass(frozen=True)
class PairTable:
    """Precomputed index tables for all ordered pairs (receiver, sender)
    over ``batch`` independent systems of ``n`` objects each.

    Pairs are receiver-major: for every flat object row the (n-1) rows
    with its senders are contiguous, so effect aggregation is a grouped
    sum and the sender gather has a uniform-count fast scatter.
    """

    batch: int
    n: int
    send_idx: np.ndarray
    scatter_perm: np.ndarray

    @staticmethod
    @lru_cache(maxsize=64)
    def build(batch: int, n: int) -> "PairTable":
        send = []
        for s in range(batch):
            base = s * n
            for i in range(n):
                for j in range(n):
                    if j != i:
                        send.append(base + j)
        send_idx = np.asarray(send, dtype=np.intp)
        perm = np.argsort(send_idx, kind="stable")
        return PairTable(batch=batch, n=n, send_idx=send_idx, scatter_perm=perm)


class InteractionNet:
    """Permutation-equivariant set-to-set map built from a relational MLP
    applied to every ordered object pair and an object MLP applied to each
    object with its summed incoming effects."""

    def __init__(self, name: str, obj_width: int, rel_sizes, obj_sizes,
                 rng: np.random.Generator):
        self.name = name
        self.obj_width = int(obj_width)
        self.rel = MLP(f"{name}.rel", 2 * obj_width, rel_sizes, rng)
        self.obj = MLP(f"{name}.obj", obj_width + self.rel.out_width,
                       obj_sizes, rng)

    @property
    def effect_width(self) -> int:
        return self.rel.out_width

    def __call__(self, x, table: PairTable):
        """Map flat object rows (batch*n, obj_width) to outputs.

        Returns ``(y, effects)``; effects is the pre-aggregation pairwise
        tensor (or None when n == 1) for use in regularization.
        """
        n = table.n
        if n == 1:
            e_sum = Tensor(np.zeros((table.batch, self.effect_width)))
            effects = None
        else:
            x_recv = ad.repeat_rows(x, n - 1)
            x_send = ad.gather_rows(x, table.send_idx,
                                    scatter_perm=table.scatter_perm,
                                    uniform_count=n - 1)
            effects = self.rel(ad.concat([x_recv, x_send], axis=-1))
            e_sum = ad.sum_groups(effects, n - 1)
        y = self.obj(ad.concat([x, e_sum], axis=-1))
        return y, effects

    def parameters(self) -> list[Parameter]:
        return self.rel.parameters() + self.obj.parameters()


def in_forward(net: InteractionNet, x, n_objects: int):
    """Apply ``net`` to a single system of ``n_objects`` rows."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.shape[0] % n_objects:
        raise ValueError("row count not divisible by object count")
    batch = x.data.shape[0] // n_objects
    return net(x, PairTable.build(batch, n_objects))


class Adam:
    """Standard bias-corrected Adam; gradients are cleared after a step."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {p.name}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [_array_to_json(m) for m in self.m],
            "v": [_array_to_json(v) for v in self.v],
        }

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = [_array_from_json(e) for e in state["m"]]
        self.v = [_array_from_json(e) for e in state["v"]]
        for p, m, v in zip(self.params, self.m, self.v):
            if m.shape != p.value.shape or v.shape != p.value.shape:
                raise ValueError("optimizer state does not match parameters")


class WaterfallSchedule:
    """Learning rate decays by a fixed factor whenever the windowed
    moving average of the validation error stops improving on the best
    window average seen so far."""

    def __init__(self, init_lr: float = 5e-4, decay: float = 0.8,
                 window: int = 10):
        self.lr = float(init_lr)
        self.decay = float(decay)
        self.window = int(window)
        self.history: list[float] = []
        self.best: float | None = None

    def update(self, val_error: float) -> float:
        """Record one epoch's validation error; returns the LR to use."""
        self.history.append(float(val_error))
        if len(self.history) < self.window:
            return self.lr
        current = float(np.mean(self.history[-self.window:]))
        if self.best is None:
            self.best = current
        elif current >= self.best:
            self.lr *= self.decay
        self.best = min(self.best, current)
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "decay": self.decay, "window": self.window,
                "history": self.history, "best": self.best}

    def load_state_dict(self, state: dict):
        self.lr = float(state["lr"])
        self.decay = float(state["decay"])
        self.window = int(state["window"])
        self.history = [float(x) for x in state["history"]]
        self.best = None if state["best"] is None else float(state["best"])


def _array_to_json(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _array_from_json(entry: dict) -> np.ndarray:
    arr = np.asarray(entry["data"], dtype=np.float64)
    return arr.reshape(entry["shape"])


def save_checkpoint(path, kind: str, params, configs: dict,
                    norm_stats: dict | None = None, adam: Adam | None = None,
                    schedule: WaterfallSchedule | None = None,
                    rng_state: dict | None = None, epoch: int = 0,
                    step: int = 0):
    """Write a self-contained text checkpoint (exact float round-trip).

    ``params`` is an ordered list of Parameters; names must be unique.
    """
    doc = {
        "format": "latentphys-checkpoint-v1",
        "kind": kind,
        "configs": configs,
        "norm_stats": norm_stats,
        "epoch": int(epoch),
        "step": int(step),
        "params": [
            {"name": p.name, **_array_to_json(p.value)} for p in params
        ],
        "adam": adam.state_dict() if adam is not None else None,
        "schedule": schedule.state_dict() if schedule is not None else None,
        "rng_state": rng_state,
    }
    text = json.dumps(doc)
    path = str(path)
    if path.endswith(".gz"):
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(text.encode())
    else:
        with open(path, "w") as fh:
            fh.write(text)


def load_checkpoint(path) -> dict:
    """Read a checkpoint document written by :func:`save_checkpoint`."""
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt") as fh:
        doc = json.load(fh)
    if doc.get("format") != "latentphys-checkpoint-v1":
        raise ValueError(f"not a latentphys checkpoint: {path}")
    return doc


def restore_parameters(doc: dict, params):
    """Load checkpoint values into an ordered parameter list by name."""
    stored = {e["name"]: e for e in doc["params"]}
    for p in params:
        if p.name not in stored:
            raise ValueError(f"checkpoint missing parameter {p.name}")
        value = _array_from_json(stored[p.name])
        if value.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {p.name}")
        p.value[...] = value
        p.zero_grad()
