"""Dataset generation for the three interaction domains.

Each sample packages an observation window (``n_obs`` frames used to
infer per-object latents), a fresh rollout segment (initial state plus
``n_rollout`` target frames simulated from a re-sampled configuration
with the same objects), the ground-truth properties, and the observation
window's collision events.

Rejection sampling keeps only samples whose latents are inferable from
the observation window: in the bouncing-ball domains every ball must be
linked to the reference ball through a chain of collisions, and in the
inelastic domain every ball must additionally hit a wall or a
strictly-lower-COR ball.

Files are newline-delimited JSON records (optionally gzipped, decided by
the ``.gz`` suffix) with a ``<file>.meta.json`` sidecar holding the spec,
seed, acceptance statistics and normalization moments. Sample ``k`` of a
run is drawn from its own RNG stream keyed by ``(seed, k)``, so output
files are identical for any batching or thread schedule.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass, field, asdict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DataError
from .physics import Domain, ObjectProperties, WorldConfig, simulate_batch

__all__ = [
    "DomainSpec",
    "NormStats",
    "Dataset",
    "domain_spec",
    "sample_properties",
    "sample_positions",
    "mass_connectivity_filter",
    "cor_inferability_filter",
    "reference_distance",
    "sample_accepted",
    "generate_dataset",
    "load_dataset",
    "iter_records",
]

MAX_POSITION_ATTEMPTS = 10_000
MAX_CONSECUTIVE_REJECTIONS = 10_000


@dataclass(frozen=True)
class DomainSpec:
    """Sampling distributions and window sizes for one domain.

    A ``*_range`` of None means the property is fixed for all objects at
    the ``fixed_*`` value; otherwise object 0 (the reference) gets the
    ``ref_*`` value and the rest draw i.i.d. from the range (log-uniform
    for charge and mass, uniform for COR).
    """

    domain: Domain
    world: WorldConfig
    v0_range: float
    charge_range: tuple[float, float] | None = None
    mass_range: tuple[float, float] | None = None
    cor_range: tuple[float, float] | None = None
    ref_charge: float = 1.0
    ref_mass: float = 1.0
    ref_cor: float = 0.75
    fixed_charge: float = 1.0
    fixed_mass: float = 1.0
    fixed_cor: float = 1.0
    n_obs: int = 50
    n_rollout: int = 24

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["domain"] = self.domain.value
        doc["world"] = {**doc["world"], "domain": self.domain.value}
        return doc

    @staticmethod
    def from_json(doc: dict) -> "DomainSpec":
        doc = dict(doc)
        world = dict(doc.pop("world"))
        world["domain"] = Domain(world["domain"])
        doc["domain"] = Domain(doc["domain"])
        for key in ("charge_range", "mass_range", "cor_range"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return DomainSpec(world=WorldConfig(**world), **doc)


def domain_spec(domain: Domain | str) -> DomainSpec:
    """Default sampling spec for a domain.

    Springs: charges log-uniform on [0.25, 4] (reference 1), all masses
    fixed at 1e4, elastic walls. Elastic balls: masses log-uniform on
    [0.25, 4] (reference 1), COR 1 everywhere. Inelastic balls: masses as
    elastic plus COR uniform on [0.5, 1] with reference 0.75. Initial
    velocity components are uniform per domain on [-15, 15], [-9, 9] and
    [-13, 13] px/frame respectively.
    """
    domain = Domain(domain)
    world = WorldConfig(domain=domain)
    if domain is Domain.SPRINGS:
        return DomainSpec(domain=domain, world=world, v0_range=15.0,
                          charge_range=(0.25, 4.0), fixed_mass=1e4,
                          fixed_cor=1.0)
    if domain is Domain.ELASTIC:
        return DomainSpec(domain=domain, world=world, v0_range=9.0,
                          mass_range=(0.25, 4.0), fixed_cor=1.0)
    return DomainSpec(domain=domain, world=world, v0_range=13.0,
                      mass_range=(0.25, 4.0), cor_range=(0.5, 1.0))


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size=size))


def sample_properties(spec: DomainSpec, n: int,
                      rng: np.random.Generator) -> ObjectProperties:
    """Draw per-object properties; object 0 always takes the reference
    values of the domain's varying properties."""
    if n < 2:
        raise ValueError("need the reference object plus at least one other")
    if spec.charge_range is not None:
        charge = _log_uniform(rng, *spec.charge_range, size=n)
        charge[0] = spec.ref_charge
    else:
        charge = np.full(n, spec.fixed_charge)
    if spec.mass_range is not None:
        mass = _log_uniform(rng, *spec.mass_range, size=n)
        mass[0] = spec.ref_mass
    else:
        mass = np.full(n, spec.fixed_mass)
    if spec.cor_range is not None:
        cor = rng.uniform(*spec.cor_range, size=n)
        cor[0] = spec.ref_cor
    else:
        cor = np.full(n, spec.fixed_cor)
    return ObjectProperties(mass=mass, charge=charge, cor=cor)


def sample_positions(n: int, world: WorldConfig, rng: np.random.Generator,
                     max_attempts: int = MAX_POSITION_ATTEMPTS) -> np.ndarray:
    """Uniform non-overlapping centers inside the box walls."""
    lo, hi = world.radius, world.box_size - world.radius
    min_d2 = (2 * world.radius) ** 2
    pos = np.empty((n, 2))
    attempts = 0
    i = 0
    while i < n:
        attempts += 1
        if attempts > max_attempts:
            raise DataError(
                f"could not place {n} non-overlapping balls after "
                f"{max_attempts} attempts")
        cand = rng.uniform(lo, hi, size=2)
        if i == 0 or np.all(np.sum((pos[:i] - cand) ** 2, axis=1) >= min_d2):
            pos[i] = cand
            i += 1
    return pos


def _ball_pairs(events):
    return [(i, j) for _, i, j in events if j >= 0]


def mass_connectivity_filter(events, n_objects: int) -> bool:
    """True iff every ball is connected to ball 0 in the graph whose
    edges are the observed ball-ball collisions."""
    adj = [[] for _ in range(n_objects)]
    for i, j in _ball_pairs(events):
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    queue = [0]
    while queue:
        cur = queue.pop()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == n_objects


def cor_inferability_filter(events, cor) -> bool:
    """True iff every ball has a wall collision or a ball-ball collision
    with a strictly lower-COR partner (only the larger COR of a pair is
    used in the dynamics, so only it is observable from that contact)."""
    cor = np.asarray(cor)
    ok = np.zeros(cor.shape[0], dtype=bool)
    for _, i, j in events:
        if j < 0:
            ok[i] = True
        else:
            if cor[j] < cor[i]:
                ok[i] = True
            if cor[i] < cor[j]:
                ok[j] = True
    return bool(ok.all())


def reference_distance(events, obj: int, n_objects: int) -> int | None:
    """BFS distance from ball 0 to ``obj`` in the ball-ball collision
    graph; None when unreachable."""
    if obj == 0:
        return 0
    adj = [set() for _ in range(n_objects)]
    for i, j in _ball_pairs(events):
        adj[i].add(j)
        adj[j].add(i)
    dist = {0: 0}
    frontier = [0]
    d = 0
    while frontier:
        d += 1
        nxt = []
        for cur in frontier:
            for nb in adj[cur]:
                if nb not in dist:
                    dist[nb] = d
                    if nb == obj:
                        return d
                    nxt.append(nb)
        frontier = nxt
    return dist.get(obj)


def sample_accepted(spec: DomainSpec, events, props: ObjectProperties) -> bool:
    """Domain-appropriate rejection decision for an observation window."""
    if spec.domain is Domain.SPRINGS:
        return True
    n = props.n_objects
    if not mass_connectivity_filter(events, n):
        return False
    if spec.domain is Domain.INELASTIC:
        return cor_inferability_filter(events, props.cor)
    return True


@dataclass
class NormStats:
    """Per-element mean/std of the state vector over a dataset."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(4)
        if np.any(self.std <= 0):
            raise ValueError("state-element std must be positive")

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return (states - self.mean) / self.std

    def denormalize(self, states: np.ndarray) -> np.ndarray:
        return states * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_json(doc: dict) -> "NormStats":
        return NormStats(mean=np.asarray(doc["mean"]),
                         std=np.asarray(doc["std"]))


class _SlotStream:
    """Candidate generator for one output sample index."""

    def __init__(self, spec: DomainSpec, n_objects: int, seed: int, index: int):
        self.index = index
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
        self.spec = spec
        self.n_objects = n_objects

    def draw(self):
        """One candidate: properties, observation init, rollout init.

        The rollout initial state is drawn up front so the stream position
        does not depend on the acceptance decision.
        """
        spec, n, rng = self.spec, self.n_objects, self.rng
        props = sample_properties(spec, n, rng)
        pos = sample_positions(n, spec.world, rng)
        vel = rng.uniform(-spec.v0_range, spec.v0_range, size=(n, 2))
        r_pos = sample_positions(n, spec.world, rng)
        r_vel = rng.uniform(-spec.v0_range, spec.v0_range, size=(n, 2))
        return props, pos, vel, r_pos, r_vel


def _stack_props(props_list) -> ObjectProperties:
    return ObjectProperties(
        mass=np.stack([p.mass for p in props_list]),
        charge=np.stack([p.charge for p in props_list]),
        cor=np.stack([p.cor for p in props_list]),
    )


def _generate_range(spec: DomainSpec, n_objects: int, seed: int, start: int,
                    stop: int, batch: int = 128):
    """Generate accepted samples for indices [start, stop).

    Returns (records, per-sample moment rows, rejection count). Batches
    candidate simulations for throughput; results depend only on
    (seed, index).
    """
    slots = {k: _SlotStream(spec, n_objects, seed, k) for k in range(start, stop)}
    todo = iter(range(start, stop))
    active: list[int] = []
    records: dict[int, dict] = {}
    moments: dict[int, np.ndarray] = {}
    rejected = 0
    consecutive = 0
    while True:
        while len(active) < batch:
            k = next(todo, None)
            if k is None:
                break
            active.append(k)
        if not active:
            break
        cands = {k: slots[k].draw() for k in active}
        props_b = _stack_props([cands[k][0] for k in active])
        pos_b = np.stack([cands[k][1] for k in active])
        vel_b = np.stack([cands[k][2] for k in active])
        frames, events = simulate_batch(pos_b, vel_b, props_b, spec.world,
                                        spec.n_obs - 1)
        accepted = []
        for row, k in enumerate(active):
            if sample_accepted(spec, events[row], cands[k][0]):
                accepted.append((row, k))
                consecutive = 0
            else:
                rejected += 1
                consecutive += 1
                if consecutive >= MAX_CONSECUTIVE_REJECTIONS:
                    raise DataError(
                        f"rejection sampling stalled: {consecutive} "
                        f"consecutive rejections in domain "
                        f"'{spec.domain.value}' with {n_objects} objects")
        if accepted:
            r_props = _stack_props([cands[k][0] for _, k in accepted])
            r_pos = np.stack([cands[k][3] for _, k in accepted])
            r_vel = np.stack([cands[k][4] for _, k in accepted])
            r_frames, _ = simulate_batch(r_pos, r_vel, r_props, spec.world,
                                         spec.n_rollout)
            for out_row, (row, k) in enumerate(accepted):
                obs = frames[row]
                roll = r_frames[out_row]
                props = cands[k][0]
                records[k] = {
                    "domain": spec.domain.value,
                    "n_objects": n_objects,
                    "props": {
                        "charge": props.charge.tolist(),
                        "mass": props.mass.tolist(),
                        "cor": props.cor.tolist(),
                    },
                    "observation": obs.tolist(),
                    "rollout_init": roll[0].tolist(),
                    "rollout_targets": roll[1:].tolist(),
                    "events": [[int(f), int(i), int(j)]
                               for f, i, j in events[row]],
                }
                stacked = np.concatenate(
                    [obs.reshape(-1, 4), roll.reshape(-1, 4)], axis=0)
                moments[k] = np.concatenate([
                    [stacked.shape[0]], stacked.sum(axis=0),
                    (stacked * stacked).sum(axis=0)])
        done = set(records)
        active = [k for k in active if k not in done]
    rows = [records[k] for k in range(start, stop)]
    mom = np.stack([moments[k] for k in range(start, stop)])
    return rows, mom, rejected


def generate_dataset(spec: DomainSpec, n_objects: int, n_samples: int,
                     seed: int, path, threads: int = 1) -> dict:
    """Generate ``n_samples`` accepted samples and write them to ``path``
    (NDJSON; gzipped when the name ends in .gz) plus a sidecar
    ``<path>.meta.json``. Returns the metadata document.

    Output is bit-identical for any ``threads`` value because sample
    ``k`` depends only on ``(seed, k)`` and normalization moments are
    reduced in index order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    path = str(path)
    spans = _split_spans(n_samples, threads)
    if len(spans) == 1:
        parts = [_generate_range(spec, n_objects, seed, 0, n_samples)]
    else:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            futs = [pool.submit(_generate_range, spec, n_objects, seed, a, b)
                    for a, b in spans]
            parts = [f.result() for f in futs]

    records = [r for rows, _, _ in parts for r in rows]
    moments = np.concatenate([m for _, m, _ in parts], axis=0)
    rejected = sum(rej for _, _, rej in parts)

    count = moments[:, 0].sum()
    total = moments[:, 1:5].sum(axis=0)
    total_sq = moments[:, 5:9].sum(axis=0)
    mean = total / count
    var = total_sq / count - mean * mean
    norm = NormStats(mean=mean, std=np.sqrt(np.maximum(var, 0.0)))

    if path.endswith(".gz"):
        # mtime=0 keeps identical runs byte-identical
        fh = io.TextIOWrapper(gzip.GzipFile(path, "wb", mtime=0),
                              encoding="utf-8")
    else:
        fh = open(path, "w")
    with fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")

    meta = {
        "format": "latentphys-dataset-v1",
        "domain": spec.domain.value,
        "n_objects": n_objects,
        "n_samples": n_samples,
        "seed": seed,
        "spec": spec.to_json(),
        "norm_stats": norm.to_json(),
        "acceptance": {
            "accepted": n_samples,
            "rejected": rejected,
            "rate": n_samples / (n_samples + rejected),
        },
    }
    with open(path + ".meta.json", "w") as mfh:
        json.dump(meta, mfh, indent=2)
    return meta


def _split_spans(n: int, threads: int):
    threads = max(1, min(int(threads), n))
    edges = np.linspace(0, n, threads + 1, dtype=int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def iter_records(path):
    """Stream records from an NDJSON(.gz) dataset file."""
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


@dataclass
class Dataset:
    """In-memory dataset with raw-pixel state arrays."""

    domain: Domain
    n_objects: int
    observation: np.ndarray    # (S, n_obs, N, 4)
    rollout_init: np.ndarray   # (S, N, 4)
    rollout_targets: np.ndarray  # (S, n_rollout, N, 4)
    charge: np.ndarray         # (S, N)
    mass: np.ndarray
    cor: np.ndarray
    events: list
    norm: NormStats
    meta: dict = field(repr=False, default_factory=dict)

    def __len__(self) -> int:
        return self.observation.shape[0]

    @property
    def spec(self) -> DomainSpec:
        return DomainSpec.from_json(self.meta["spec"])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            domain=self.domain, n_objects=self.n_objects,
            observation=self.observation[idx],
            rollout_init=self.rollout_init[idx],
            rollout_targets=self.rollout_targets[idx],
            charge=self.charge[idx], mass=self.mass[idx], cor=self.cor[idx],
            events=[self.events[i] for i in idx],
            norm=self.norm, meta=self.meta)


def load_dataset(path) -> Dataset:
    """Load a generated dataset file and its sidecar metadata."""
    path = str(path)
    with open(path + ".meta.json") as fh:
        meta = json.load(fh)
    n = meta["n_samples"]
    n_obj = meta["n_objects"]
    spec = DomainSpec.from_json(meta["spec"])
    obs = np.empty((n, spec.n_obs, n_obj, 4))
    r0 = np.empty((n, n_obj, 4))
    targets = np.empty((n, spec.n_rollout, n_obj, 4))
    charge = np.empty((n, n_obj))
    mass = np.empty((n, n_obj))
    cor = np.empty((n, n_obj))
    events = []
    count = 0
    for k, rec in enumerate(iter_records(path)):
        if k >= n:
            raise DataError(f"{path}: more records than metadata declares")
        obs[k] = rec["observation"]
        r0[k] = rec["rollout_init"]
        targets[k] = rec["rollout_targets"]
        charge[k] = rec["props"]["charge"]
        mass[k] = rec["props"]["mass"]
        cor[k] = rec["props"]["cor"]
        events.append([tuple(e) for e in rec["events"]])
        count += 1
    if count != n:
        raise DataError(f"{path}: expected {n} records, found {count}")
    return Dataset(
        domain=Domain(meta["domain"]), n_objects=n_obj, observation=obs,
        rollout_init=r0, rollout_targets=targets, charge=charge, mass=mass,
        cor=cor, events=events,
        norm=NormStats.from_json(meta["norm_stats"]), meta=meta)
