"""Property extraction and model evaluation.

PCA over the learned per-object vectors recovers scalar properties; the
squared Pearson correlation between a principal component's projections
and a ground-truth property measures how well that property was
discovered. Rollout quality is scored as mean Euclidean position error
as a fraction of the frame width, against two baselines: an exact
simulation that wrongly assumes every object carries the reference
property values, and a rollout net trained with the true latents as
inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace, field

import numpy as np

from .dataset import (Dataset, DomainSpec, domain_spec, generate_dataset,
                      load_dataset, reference_distance)
from .physics import Domain, ObjectProperties, simulate_batch

__all__ = [
    "PCAModel",
    "PropertyExtractor",
    "fit_pca",
    "component_r2",
    "fit_extractor",
    "leakage_r2",
    "r2_by_reference_distance",
    "rollout_error",
    "mean_property_rollout",
    "latent_rows",
    "property_truths",
    "PropertyReport",
    "property_report",
    "RolloutReport",
    "rollout_report",
    "generalization_sweep",
    "spearman",
]


@dataclass
class PCAModel:
    """Principal axes (rows, sorted by explained variance), explained
    variance ratios, and the data mean they were fit around."""

    components: np.ndarray
    evr: np.ndarray
    mean: np.ndarray

    def project(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows) - self.mean) @ self.components.T

    def to_json(self) -> dict:
        return {"components": self.components.tolist(),
                "evr": self.evr.tolist(), "mean": self.mean.tolist()}

    @staticmethod
    def from_json(doc: dict) -> "PCAModel":
        return PCAModel(components=np.asarray(doc["components"]),
                        evr=np.asarray(doc["evr"]),
                        mean=np.asarray(doc["mean"]))


def fit_pca(rows: np.ndarray) -> PCAModel:
    """Eigendecomposition of the covariance of mean-centered rows.

    Deterministic sign convention: each component's largest-magnitude
    loading is positive. Rank-deficient input simply yields a zero EVR
    tail.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < rows.shape[1] + 1:
        raise ValueError("need at least dim + 1 rows")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / (rows.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    comps = eigvecs[:, order].T
    for k in range(comps.shape[0]):
        pivot = np.argmax(np.abs(comps[k]))
        if comps[k, pivot] < 0:
            comps[k] = -comps[k]
    total = eigvals.sum()
    evr = eigvals / total if total > 0 else np.zeros_like(eigvals)
    return PCAModel(components=comps, evr=evr, mean=mean)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom == 0:
        return np.nan
    return float((x * y).sum() / denom)


def component_r2(pca: PCAModel, rows: np.ndarray, truths: np.ndarray,
                 n_components: int | None = None) -> np.ndarray:
    """Squared Pearson correlation between each component's projections
    and the ground-truth scalars (affine rescaling of projections leaves
    this invariant). NaN for a zero-variance truth."""
    truths = np.asarray(truths, dtype=np.float64).reshape(-1)
    proj = pca.project(rows)
    k = proj.shape[1] if n_components is None else n_components
    out = np.empty(k)
    for c in range(k):
        r = _pearson(proj[:, c], truths)
        out[c] = np.nan if np.isnan(r) else r * r
    return out


@dataclass
class PropertyExtractor:
    """Affine read-out of one principal component, calibrated so the
    prediction matches the truth's mean/std (sign from the correlation)
    on the calibration split."""

    pca: PCAModel
    component: int
    scale: float
    offset: float

    def predict(self, rows: np.ndarray) -> np.ndarray:
        proj = self.pca.project(rows)[:, self.component]
        return self.scale * proj + self.offset

    def to_json(self) -> dict:
        return {"pca": self.pca.to_json(), "component": self.component,
                "scale": self.scale, "offset": self.offset}

    @staticmethod
    def from_json(doc: dict) -> "PropertyExtractor":
        return PropertyExtractor(pca=PCAModel.from_json(doc["pca"]),
                                 component=int(doc["component"]),
                                 scale=float(doc["scale"]),
                                 offset=float(doc["offset"]))


def fit_extractor(pca: PCAModel, rows: np.ndarray, truths: np.ndarray,
                  component: int) -> PropertyExtractor:
    truths = np.asarray(truths, dtype=np.float64).reshape(-1)
    proj = pca.project(rows)[:, component]
    p_std = proj.std()
    r = _pearson(proj, truths)
    sign = -1.0 if (not np.isnan(r) and r < 0) else 1.0
    scale = sign * truths.std() / p_std if p_std > 0 else 0.0
    offset = truths.mean() - scale * proj.mean()
    return PropertyExtractor(pca=pca, component=component, scale=scale,
                             offset=offset)


def leakage_r2(z: np.ndarray, truths: np.ndarray):
    """In-sample R-squared of a linear fit predicting object i's property
    from the concatenated vectors of all other objects in its sample.

    ``z``: (S, N, L) latents; ``truths``: (S, N). Non-reference objects
    are the targets (the reference property is constant). Returns
    ``(r2, ridge_flagged)``; an underdetermined system falls back to a
    small ridge penalty and sets the flag.
    """
    s, n, l = z.shape
    feats = []
    ys = []
    for i in range(1, n):
        others = [z[:, j, :] for j in range(n) if j != i]
        feats.append(np.concatenate(others, axis=1))
        ys.append(truths[:, i])
    x = np.concatenate(feats, axis=0)
    y = np.concatenate(ys, axis=0)
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    flagged = x.shape[0] <= x.shape[1]
    if flagged:
        a = x.T @ x + 1e-6 * np.eye(x.shape[1])
        coef = np.linalg.solve(a, x.T @ y)
    else:
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        return 0.0, flagged
    r2 = 1.0 - np.sum(resid * resid) / ss_tot
    return float(max(r2, 0.0)), flagged


def r2_by_reference_distance(pca: PCAModel, component: int, data: Dataset,
                             z: np.ndarray, truths: np.ndarray) -> dict:
    """Bucket non-reference objects by their collision-graph distance to
    the reference and report the component R-squared per bucket."""
    buckets: dict[int, list] = {}
    s, n, _ = z.shape
    for k in range(s):
        for i in range(1, n):
            d = reference_distance(data.events[k], i, n)
            key = -1 if d is None else int(d)
            buckets.setdefault(key, []).append((z[k, i], truths[k, i]))
    out = {}
    for key in sorted(buckets):
        rows = np.stack([r for r, _ in buckets[key]])
        ys = np.asarray([t for _, t in buckets[key]])
        r2 = component_r2(pca, rows, ys)[component] if len(rows) > 1 else np.nan
        out[key] = {"r2": None if np.isnan(r2) else float(r2),
                    "count": len(rows)}
    return out


def rollout_error(pred_frames: np.ndarray, true_frames: np.ndarray,
                  frame_width: float = 512.0):
    """Mean Euclidean position error as a fraction of frame width.

    Inputs are raw-pixel (S, T, N, 4) arrays. Returns
    ``(overall, per_timestep)``.
    """
    pred_frames = np.asarray(pred_frames)
    true_frames = np.asarray(true_frames)
    if pred_frames.shape != true_frames.shape:
        raise ValueError("rollout shape mismatch")
    diff = (pred_frames[..., :2] - true_frames[..., :2]) / frame_width
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    per_t = dist.mean(axis=(0, 2))
    return float(dist.mean()), per_t


def _assumed_reference_props(spec: DomainSpec, n: int) -> ObjectProperties:
    charge = spec.ref_charge if spec.charge_range is not None else spec.fixed_charge
    mass = spec.ref_mass if spec.mass_range is not None else spec.fixed_mass
    cor = spec.ref_cor if spec.cor_range is not None else spec.fixed_cor
    return ObjectProperties(mass=np.full(n, mass), charge=np.full(n, charge),
                            cor=np.full(n, cor))


def mean_property_rollout(data: Dataset, steps: int | None = None) -> np.ndarray:
    """Exact simulation from each sample's rollout start under the wrong
    assumption that every object carries the reference property values."""
    spec = data.spec
    steps = spec.n_rollout if steps is None else steps
    props = _assumed_reference_props(spec, data.n_objects)
    frames, _ = simulate_batch(data.rollout_init[:, :, :2],
                               data.rollout_init[:, :, 2:], props,
                               spec.world, steps)
    return frames[:, 1:]


def latent_rows(z: np.ndarray):
    """Pool non-reference rows: (S, N, L) -> (S*(N-1), L)."""
    return z[:, 1:, :].reshape(-1, z.shape[-1])


def property_truths(data: Dataset) -> dict[str, np.ndarray]:
    """Ground-truth scalars relevant to the domain, per (sample, object),
    non-reference objects only, flattened to match :func:`latent_rows`."""
    out = {}
    if data.domain is Domain.SPRINGS:
        out["log_charge"] = np.log(data.charge[:, 1:]).reshape(-1)
    else:
        out["log_mass"] = np.log(data.mass[:, 1:]).reshape(-1)
        if data.domain is Domain.INELASTIC:
            out["cor"] = data.cor[:, 1:].reshape(-1)
    return out


@dataclass
class PropertyReport:
    domain: str
    evr: list
    r2_in: dict
    r2_out: dict
    assignment: dict
    leakage: dict
    by_reference_distance: dict
    n_components: int = 4

    def to_json(self) -> dict:
        return {
            "domain": self.domain,
            "n_components": self.n_components,
            "evr": self.evr,
            "r2_in_sample": self.r2_in,
            "r2_out_of_sample": self.r2_out,
            "component_assignment": self.assignment,
            "leakage_r2": self.leakage,
            "r2_by_reference_distance": self.by_reference_distance,
        }

    def write_csv(self, path):
        props = sorted(self.r2_in)
        lines = ["component,evr," + ",".join(
            f"r2_in_{p},r2_out_{p}" for p in props)]
        for c in range(self.n_components):
            cells = [str(c + 1), _fmt(self.evr[c])]
            for p in props:
                cells.append(_fmt(self.r2_in[p][c]))
                cells.append(_fmt(self.r2_out[p][c]))
            lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _nan_to_none(arr) -> list:
    return [None if np.isnan(v) else float(v) for v in arr]


def property_report(model, train_data: Dataset, test_data: Dataset,
                    n_components: int = 4):
    """Fit PCA on the training split's latents, evaluate on the test
    split. Returns ``(report, extractors)`` where extractors maps each
    property name to its calibrated read-out (fit on the training split,
    using the out-of-sample best component assignment convention:
    highest in-sample R-squared among the top components)."""
    z_train = model.infer_properties(train_data.observation)
    z_test = model.infer_properties(test_data.observation)
    rows_train = latent_rows(z_train)
    rows_test = latent_rows(z_test)
    pca = fit_pca(rows_train)
    truths_train = property_truths(train_data)
    truths_test = property_truths(test_data)

    r2_in, r2_out, assignment, extractors = {}, {}, {}, {}
    for name, t_train in truths_train.items():
        r2_tr = component_r2(pca, rows_train, t_train, n_components)
        r2_te = component_r2(pca, rows_test, truths_test[name], n_components)
        r2_in[name] = _nan_to_none(r2_tr)
        r2_out[name] = _nan_to_none(r2_te)
        best = int(np.nanargmax(r2_tr))
        assignment[name] = best
        extractors[name] = fit_extractor(pca, rows_train, t_train, best)

    leak = {}
    full_truths = property_truths(test_data)
    for name in full_truths:
        per_obj = {
            "log_charge": lambda d: np.log(d.charge),
            "log_mass": lambda d: np.log(d.mass),
            "cor": lambda d: d.cor,
        }[name](test_data)
        r2, flagged = leakage_r2(z_test, per_obj)
        leak[name] = {"r2": r2, "ridge": flagged}

    by_dist = {}
    if test_data.domain is not Domain.SPRINGS:
        name = "log_mass"
        by_dist = r2_by_reference_distance(
            pca, assignment[name], test_data, z_test,
            np.log(test_data.mass))

    report = PropertyReport(
        domain=test_data.domain.value,
        evr=[float(v) for v in pca.evr[:n_components]],
        r2_in=r2_in, r2_out=r2_out, assignment=assignment, leakage=leak,
        by_reference_distance=by_dist, n_components=n_components)
    return report, extractors


@dataclass
class RolloutReport:
    entries: dict = field(default_factory=dict)

    def add(self, name: str, pred_frames, true_frames):
        overall, per_t = rollout_error(pred_frames, true_frames)
        self.entries[name] = {"overall": overall,
                              "per_timestep": per_t.tolist()}

    def to_json(self) -> dict:
        return {"rollout_error_fraction_of_framewidth": self.entries}

    def write_csv(self, path):
        names = list(self.entries)
        steps = len(next(iter(self.entries.values()))["per_timestep"])
        lines = ["model,overall," + ",".join(f"t{t+1}" for t in range(steps))]
        for name in names:
            e = self.entries[name]
            lines.append(",".join(
                [name, f"{e['overall']:.6f}"]
                + [f"{v:.6f}" for v in e["per_timestep"]]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def rollout_report(test_data: Dataset, model=None,
                   true_props_model=None) -> RolloutReport:
    """Score the learned model (if given) against the mean-property
    simulation baseline and, optionally, the true-property rollout net."""
    report = RolloutReport()
    steps = test_data.rollout_targets.shape[1]
    truth = test_data.rollout_targets
    if model is not None:
        pred = model.rollout_states(test_data.observation,
                                    test_data.rollout_init, steps)
        report.add("learned", pred, truth)
    report.add("mean_props", mean_property_rollout(test_data, steps), truth)
    if true_props_model is not None:
        from .model import ground_truth_latents
        latents = ground_truth_latents(test_data)
        pred = true_props_model.rollout_states(
            latents, test_data.rollout_init, steps)
        report.add("true_props", pred, truth)
    return report


DEFAULT_SWEEP_VALUES = tuple(float(2.0 ** e) for e in range(-5, 6))


def generalization_sweep(model, extractor: PropertyExtractor,
                         domain: Domain | str,
                         values=DEFAULT_SWEEP_VALUES, n_per_value: int = 200,
                         seed: int = 0, workdir=None):
    """Probe property read-outs outside the training range.

    For each value, 2-object systems are generated where the second
    object's varying property (spring charge or mass) is pinned to the
    value; the extractor's predicted log-property for that object is
    summarized as mean with a 95% normal-approximation CI. Returns a list
    of row dicts.
    """
    import tempfile
    domain = Domain(domain)
    base = domain_spec(domain)
    rows = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for vi, value in enumerate(values):
            if domain is Domain.SPRINGS:
                spec_v = replace(base, charge_range=(value, value))
            else:
                spec_v = replace(base, mass_range=(value, value))
            path = f"{tmp}/sweep_{vi}.ndjson"
            generate_dataset(spec_v, 2, n_per_value, seed=seed * 1000 + vi,
                             path=path)
            data = load_dataset(path)
            z = model.infer_properties(data.observation)
            preds = extractor.predict(z[:, 1, :])
            mean = float(preds.mean())
            half = 1.96 * float(preds.std(ddof=1)) / np.sqrt(len(preds))
            rows.append({"value": float(value),
                         "true_log": float(np.log(value)),
                         "pred_log_mean": mean,
                         "ci_lo": mean - half, "ci_hi": mean + half,
                         "n": len(preds)})
    return rows


def write_sweep_csv(rows, path):
    lines = ["value,true_log,pred_log_mean,ci_lo,ci_hi,n"]
    for r in rows:
        lines.append(f"{r['value']:.6f},{r['true_log']:.6f},"
                     f"{r['pred_log_mean']:.6f},{r['ci_lo']:.6f},"
                     f"{r['ci_hi']:.6f},{r['n']}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks not needed for the
    continuous quantities used here)."""
    x = np.asarray(x)
    y = np.asarray(y)
    rx = np.empty(len(x))
    ry = np.empty(len(y))
    rx[np.argsort(x)] = np.arange(len(x))
    ry[np.argsort(y)] = np.arange(len(y))
    return _pearson(rx, ry)
