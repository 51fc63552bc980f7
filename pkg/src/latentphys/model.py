"""Perception/prediction model and its end-to-end training loop.

The perception net runs a recurrent interaction core over consecutive
observation-frame pairs to build per-object code vectors, then maps the
final codes through a small MLP to per-object property vectors. Property
vectors are centered by subtracting the reference object's (row 0)
uncentered vector, so the reference row is exactly zero. The prediction
net rolls future states out recursively from a fresh initial state, with
each object conditioned on its property vector.

All network inputs and outputs live in normalized state space (per
element standardization by the dataset's NormStats); training injects
Gaussian noise into rollout inputs to teach self-correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .dataset import Dataset, Domain, NormStats
from .errors import NumericError
from .nn import InteractionNet, MLP, PairTable

__all__ = [
    "PerceptionConfig",
    "PredictionConfig",
    "LossConfig",
    "TrainConfig",
    "LatentDynamicsModel",
    "ConditionedDynamicsModel",
    "TrainArrays",
    "prepare_arrays",
    "ground_truth_latents",
    "train_model",
    "load_model",
    "micro_instance_gradcheck",
]

STATE_WIDTH = 4


@dataclass(frozen=True)
class PerceptionConfig:
    code_size: int = 25
    prop_size: int = 15
    rel_sizes: tuple = (75, 75, 75, 50)
    obj_sizes: tuple = (50, 50, 25)
    prop_mlp_sizes: tuple = (15, 15, 15)
    n_obs: int = 50
    variational: bool = False

    def __post_init__(self):
        if self.obj_sizes[-1] != self.code_size:
            raise ValueError("object MLP must output the code size")
        if self.prop_mlp_sizes[-1] != self.prop_size:
            raise ValueError("property MLP must output the property size")
        if self.n_obs < 2:
            raise ValueError("need at least two observation frames")


@dataclass(frozen=True)
class PredictionConfig:
    rel_sizes: tuple = (100, 100, 100, 100, 50)
    obj_sizes: tuple = (50, 50, 4)
    n_rollout: int = 24
    noise_scale: float = 0.001

    def __post_init__(self):
        if self.obj_sizes[-1] != STATE_WIDTH:
            raise ValueError("prediction object MLP must output a state vector")


@dataclass(frozen=True)
class LossConfig:
    effects_perception: float = 1e-5
    effects_prediction: float = 1e-5
    beta: float = 0.0

    def __post_init__(self):
        if min(self.effects_perception, self.effects_prediction, self.beta) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 256
    init_lr: float = 5e-4
    lr_decay: float = 0.8
    lr_window: int = 10
    seed: int = 0


def _flat_frames(states: np.ndarray) -> np.ndarray:
    """(B, N, 4) -> (B*N, 4) float64 view/copy."""
    b, n, w = states.shape
    return np.ascontiguousarray(states.reshape(b * n, w))


def _sum_sq(effects) -> Tensor | None:
    total = None
    for e in effects:
        if e is None:
            continue
        term = ad.sq_l2(e)
        total = term if total is None else ad.add(total, term)
    return total


def _rollout(core: InteractionNet, table: PairTable, condition, r0_flat,
             steps: int, train_mode: bool, rng, noise_std):
    """Recursive next-state prediction shared by both model kinds.

    ``condition`` is a per-object row tensor appended to each input
    state; gradients flow through the full recursion.
    """
    preds = []
    effects = []
    state = r0_flat if isinstance(r0_flat, Tensor) else Tensor(r0_flat)
    for _ in range(steps):
        inp = state
        if train_mode:
            inp = ad.add_noise(inp, noise_std, rng)
        y, e = core(ad.concat([inp, condition], axis=-1), table)
        preds.append(y)
        effects.append(e)
        state = y
    return preds, effects


def _stack_time_major(frames: np.ndarray) -> np.ndarray:
    """(B, T, N, 4) -> (T*B*N, 4) matching concat of per-step rows."""
    b, t, n, w = frames.shape
    return np.ascontiguousarray(frames.transpose(1, 0, 2, 3).reshape(t * b * n, w))


class LatentDynamicsModel:
    """Observation -> per-object latent vectors -> learned rollout."""

    kind = "latent-dynamics"

    def __init__(self, perception: PerceptionConfig = PerceptionConfig(),
                 prediction: PredictionConfig = PredictionConfig(),
                 loss: LossConfig = LossConfig(),
                 norm: NormStats | None = None, seed: int = 0):
        if loss.beta > 0 and not perception.variational:
            raise ValueError("beta > 0 requires a variational perception head")
        self.perception_cfg = perception
        self.prediction_cfg = prediction
        self.loss_cfg = loss
        self.norm = norm
        self.seed = seed
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
        self.perception = InteractionNet(
            "perception", perception.code_size + 2 * STATE_WIDTH,
            perception.rel_sizes, perception.obj_sizes, rng)
        prop_sizes = list(perception.prop_mlp_sizes)
        if perception.variational:
            prop_sizes[-1] = 2 * perception.prop_size
        self.prop_mlp = MLP("property", perception.code_size, prop_sizes, rng)
        self.prediction = InteractionNet(
            "prediction", STATE_WIDTH + perception.prop_size,
            prediction.rel_sizes, prediction.obj_sizes, rng)

    def parameters(self):
        return (self.perception.parameters() + self.prop_mlp.parameters()
                + self.prediction.parameters())

    def perceive(self, obs_norm: np.ndarray, rng=None):
        """Run the recurrent perception pass.

        ``obs_norm``: (B, T, N, 4) normalized observation frames.
        Returns ``(z, aux)`` where ``z`` is a (B*N, prop_size) tensor with
        the reference rows exactly zero and ``aux`` carries the uncentered
        vectors, the pairwise effects of every step, and (variational
        mode) the mean/log-variance tensors.
        """
        b, t, n, w = obs_norm.shape
        if t < 2:
            raise ValueError("perception needs at least two frames")
        cfg = self.perception_cfg
        table = PairTable.build(b, n)
        code = Tensor(np.zeros((b * n, cfg.code_size)))
        frames = [Tensor(_flat_frames(obs_norm[:, ti])) for ti in range(t)]
        effects = []
        for ti in range(1, t):
            inp = ad.concat([code, frames[ti - 1], frames[ti]], axis=-1)
            code, eff = self.perception(inp, table)
            effects.append(eff)
        head = self.prop_mlp(code)
        mu = logvar = None
        if cfg.variational:
            mu = ad.slice_cols(head, 0, cfg.prop_size)
            logvar = ad.slice_cols(head, cfg.prop_size, 2 * cfg.prop_size)
            if rng is not None:
                eps = rng.standard_normal(mu.shape)
                z_unc = ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), eps))
            else:
                z_unc = mu
        else:
            z_unc = head
        ref_rows = np.arange(b) * n
        ref = ad.gather_rows(z_unc, ref_rows)
        z = ad.sub(z_unc, ad.repeat_rows(ref, n))
        assert not z.data[ref_rows].any(), "reference rows must center to zero"
        aux = {"z_uncentered": z_unc, "effects": effects,
               "mu": mu, "logvar": logvar}
        return z, aux

    def predict_rollout(self, z, r0_norm: np.ndarray, steps: int,
                        train_mode: bool = False, rng=None):
        """Roll states forward ``steps`` frames from ``r0_norm`` (B, N, 4).

        Returns ``(preds, effects)``; preds is a list of (B*N, 4) tensors.
        In training mode Gaussian noise with per-element std
        ``noise_scale`` (times the dataset std, i.e. noise_scale in
        normalized space) perturbs every input state.
        """
        b, n, w = r0_norm.shape
        z_rows = z.data.shape[0] if isinstance(z, Tensor) else np.shape(z)[0]
        if z_rows != b * n:
            raise ValueError("property rows do not match rollout rows")
        if train_mode and rng is None:
            raise ValueError("training mode needs an RNG for rollout noise")
        table = PairTable.build(b, n)
        noise_std = np.full(STATE_WIDTH, self.prediction_cfg.noise_scale)
        return _rollout(self.prediction, table,
                        z if isinstance(z, Tensor) else Tensor(z),
                        Tensor(_flat_frames(r0_norm)), steps, train_mode,
                        rng, noise_std)

    def training_loss(self, preds, targets: np.ndarray, aux_pe, effects_pr):
        """Summed per-step MSE plus effects penalties (and KL when
        variational with beta > 0)."""
        t = len(preds)
        pred_stack = ad.concat(preds, axis=0)
        target_stack = _stack_time_major(targets)
        total = ad.scale(ad.mse(pred_stack, target_stack), float(t))
        lcfg = self.loss_cfg
        if lcfg.effects_perception > 0:
            pen = _sum_sq(aux_pe["effects"])
            if pen is not None:
                total = ad.add(total, ad.scale(pen, lcfg.effects_perception))
        if lcfg.effects_prediction > 0:
            pen = _sum_sq(effects_pr)
            if pen is not None:
                total = ad.add(total, ad.scale(pen, lcfg.effects_prediction))
        if lcfg.beta > 0:
            mu, logvar = aux_pe["mu"], aux_pe["logvar"]
            rows = mu.shape[0]
            kl = ad.sub(ad.add(ad.sum_reduce(ad.mul(mu, mu)),
                               ad.sum_reduce(ad.exp(logvar))),
                        ad.sum_reduce(logvar))
            kl = ad.scale(ad.sub(kl, Tensor(float(mu.data.size))),
                          0.5 / rows)
            total = ad.add(total, ad.scale(kl, lcfg.beta))
        return total

    def batch_loss(self, batch: dict, rng, train_mode: bool = True):
        """Full forward pass for one mini-batch of normalized arrays."""
        z, aux = self.perceive(batch["obs"], rng if train_mode else None)
        steps = batch["targets"].shape[1]
        preds, eff_pr = self.predict_rollout(
            z, batch["r0"], steps, train_mode=train_mode, rng=rng)
        return self.training_loss(preds, batch["targets"], aux, eff_pr)

    # -- inference helpers (raw pixel space) --------------------------------

    def infer_properties(self, obs_raw: np.ndarray, batch_size: int = 256):
        """(S, T, N, 4) raw observation -> (S, N, prop_size) latents."""
        s, t, n, w = obs_raw.shape
        out = np.empty((s, n, self.perception_cfg.prop_size))
        for a in range(0, s, batch_size):
            b = min(a + batch_size, s)
            obs = self.norm.normalize(obs_raw[a:b])
            z, _ = self.perceive(obs)
            out[a:b] = z.data.reshape(b - a, n, -1)
        return out

    def rollout_states(self, obs_raw: np.ndarray, r0_raw: np.ndarray,
                       steps: int, batch_size: int = 256) -> np.ndarray:
        """Deterministic rollout in raw pixel space: (S, steps, N, 4)."""
        s, t, n, w = obs_raw.shape
        out = np.empty((s, steps, n, w))
        for a in range(0, s, batch_size):
            b = min(a + batch_size, s)
            obs = self.norm.normalize(obs_raw[a:b])
            z, _ = self.perceive(obs)
            preds, _ = self.predict_rollout(
                z, self.norm.normalize(r0_raw[a:b]), steps)
            stacked = np.stack([p.data.reshape(b - a, n, w) for p in preds],
                               axis=1)
            out[a:b] = self.norm.denormalize(stacked)
        return out

    # -- checkpointing -------------------------------------------------------

    def config_doc(self) -> dict:
        return {
            "perception": asdict(self.perception_cfg),
            "prediction": asdict(self.prediction_cfg),
            "loss": asdict(self.loss_cfg),
            "seed": self.seed,
        }

    @staticmethod
    def from_checkpoint(doc: dict) -> "LatentDynamicsModel":
        cfgs = doc["configs"]
        model = LatentDynamicsModel(
            perception=PerceptionConfig(**_tupled(cfgs["perception"])),
            prediction=PredictionConfig(**_tupled(cfgs["prediction"])),
            loss=LossConfig(**cfgs["loss"]),
            norm=NormStats.from_json(doc["norm_stats"]),
            seed=cfgs["seed"])
        nn.restore_parameters(doc, model.parameters())
        return model


class ConditionedDynamicsModel:
    """Rollout net identical to the prediction core but conditioned on
    supplied per-object ground-truth latents instead of learned vectors."""

    kind = "true-props-dynamics"

    def __init__(self, latent_width: int,
                 prediction: PredictionConfig = PredictionConfig(),
                 loss: LossConfig = LossConfig(),
                 norm: NormStats | None = None, seed: int = 0):
        self.latent_width = int(latent_width)
        self.prediction_cfg = prediction
        self.loss_cfg = loss
        self.norm = norm
        self.seed = seed
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
        self.prediction = InteractionNet(
            "prediction", STATE_WIDTH + self.latent_width,
            prediction.rel_sizes, prediction.obj_sizes, rng)

    def parameters(self):
        return self.prediction.parameters()

    def predict_rollout(self, latents: np.ndarray, r0_norm: np.ndarray,
                        steps: int, train_mode: bool = False, rng=None):
        b, n, w = r0_norm.shape
        table = PairTable.build(b, n)
        cond = Tensor(latents.reshape(b * n, -1))
        noise_std = np.full(STATE_WIDTH, self.prediction_cfg.noise_scale)
        return _rollout(self.prediction, table, cond,
                        Tensor(_flat_frames(r0_norm)), steps, train_mode,
                        rng, noise_std)

    def batch_loss(self, batch: dict, rng, train_mode: bool = True):
        steps = batch["targets"].shape[1]
        preds, effects = self.predict_rollout(
            batch["latents"], batch["r0"], steps, train_mode=train_mode,
            rng=rng)
        t = len(preds)
        total = ad.scale(ad.mse(ad.concat(preds, axis=0),
                                _stack_time_major(batch["targets"])), float(t))
        if self.loss_cfg.effects_prediction > 0:
            pen = _sum_sq(effects)
            if pen is not None:
                total = ad.add(total,
                               ad.scale(pen, self.loss_cfg.effects_prediction))
        return total

    def rollout_states(self, latents: np.ndarray, r0_raw: np.ndarray,
                       steps: int, batch_size: int = 256) -> np.ndarray:
        s, n, w = r0_raw.shape
        out = np.empty((s, steps, n, w))
        for a in range(0, s, batch_size):
            b = min(a + batch_size, s)
            preds, _ = self.predict_rollout(
                latents[a:b], self.norm.normalize(r0_raw[a:b]), steps)
            stacked = np.stack([p.data.reshape(b - a, n, w) for p in preds],
                               axis=1)
            out[a:b] = self.norm.denormalize(stacked)
        return out

    def config_doc(self) -> dict:
        return {
            "latent_width": self.latent_width,
            "prediction": asdict(self.prediction_cfg),
            "loss": asdict(self.loss_cfg),
            "seed": self.seed,
        }

    @staticmethod
    def from_checkpoint(doc: dict) -> "ConditionedDynamicsModel":
        cfgs = doc["configs"]
        model = ConditionedDynamicsModel(
            latent_width=cfgs["latent_width"],
            prediction=PredictionConfig(**_tupled(cfgs["prediction"])),
            loss=LossConfig(**cfgs["loss"]),
            norm=NormStats.from_json(doc["norm_stats"]),
            seed=cfgs["seed"])
        nn.restore_parameters(doc, model.parameters())
        return model


def _tupled(cfg: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}


def load_model(path):
    """Load either model kind from a checkpoint file."""
    doc = nn.load_checkpoint(path)
    if doc["kind"] == LatentDynamicsModel.kind:
        return LatentDynamicsModel.from_checkpoint(doc)
    if doc["kind"] == ConditionedDynamicsModel.kind:
        return ConditionedDynamicsModel.from_checkpoint(doc)
    raise ValueError(f"unknown checkpoint kind {doc['kind']!r}")


def ground_truth_latents(data: Dataset) -> np.ndarray:
    """Per-object true latents for the conditioned baseline: log charge
    (springs), log mass (elastic), or log mass plus COR (inelastic)."""
    if data.domain is Domain.SPRINGS:
        return np.log(data.charge)[..., None]
    if data.domain is Domain.ELASTIC:
        return np.log(data.mass)[..., None]
    return np.stack([np.log(data.mass), data.cor], axis=-1)


@dataclass
class TrainArrays:
    """Normalized training tensors plus conditioning latents."""

    obs: np.ndarray
    r0: np.ndarray
    targets: np.ndarray
    latents: np.ndarray

    def __len__(self):
        return self.obs.shape[0]

    def batch(self, idx) -> dict:
        return {"obs": self.obs[idx], "r0": self.r0[idx],
                "targets": self.targets[idx], "latents": self.latents[idx]}


def prepare_arrays(data: Dataset, norm: NormStats) -> TrainArrays:
    return TrainArrays(
        obs=norm.normalize(data.observation),
        r0=norm.normalize(data.rollout_init),
        targets=norm.normalize(data.rollout_targets),
        latents=ground_truth_latents(data),
    )


def _eval_loss(model, arrays: TrainArrays, batch_size: int) -> float:
    """Mean summed-MSE rollout loss over a dataset, eval mode (no noise,
    no regularization terms)."""
    s = len(arrays)
    total = 0.0
    for a in range(0, s, batch_size):
        b = min(a + batch_size, s)
        batch = arrays.batch(np.arange(a, b))
        if isinstance(model, ConditionedDynamicsModel):
            preds, _ = model.predict_rollout(
                batch["latents"], batch["r0"], batch["targets"].shape[1])
        else:
            z, _ = model.perceive(batch["obs"])
            preds, _ = model.predict_rollout(
                z, batch["r0"], batch["targets"].shape[1])
        stacked = np.concatenate([p.data for p in preds], axis=0)
        diff = stacked - _stack_time_major(batch["targets"])
        total += float(np.mean(diff * diff)) * len(preds) * (b - a)
    return total / s


def train_model(model, train_arrays: TrainArrays, val_arrays: TrainArrays,
                cfg: TrainConfig, out_dir=None, log=print,
                start_epoch: int = 0, adam: nn.Adam | None = None,
                schedule: nn.WaterfallSchedule | None = None):
    """End-to-end gradient training with the waterfall LR schedule.

    Writes ``best.ckpt`` and ``final.ckpt`` (plus ``train_log.jsonl``)
    into ``out_dir`` when given. Per-epoch RNG streams are keyed by
    ``(cfg.seed, epoch)``, so resuming from a checkpoint reproduces the
    uninterrupted run bit-exactly. Returns the history list.
    """
    params = model.parameters()
    adam = adam or nn.Adam(params)
    schedule = schedule or nn.WaterfallSchedule(
        init_lr=cfg.init_lr, decay=cfg.lr_decay, window=cfg.lr_window)
    history = []
    best_val = np.inf
    out_dir = str(out_dir) if out_dir is not None else None
    log_rows = []

    def _save(name, epoch):
        if out_dir is None:
            return
        nn.save_checkpoint(
            f"{out_dir}/{name}", model.kind, params,
            configs=model.config_doc(),
            norm_stats=model.norm.to_json() if model.norm else None,
            adam=adam, schedule=schedule, epoch=epoch, step=adam.t)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, epoch)))
        noise_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2, epoch)))
        perm = shuffle_rng.permutation(len(train_arrays))
        snapshot = ([p.value.copy() for p in params],
                    [m.copy() for m in adam.m], [v.copy() for v in adam.v],
                    adam.t)
        epoch_loss = 0.0
        n_batches = 0
        try:
            for a in range(0, len(perm), cfg.batch_size):
                idx = perm[a:a + cfg.batch_size]
                batch = train_arrays.batch(idx)
                with Tape() as tape:
                    loss = model.batch_loss(batch, noise_rng, train_mode=True)
                    tape.backward(loss)
                adam.step(schedule.lr)
                epoch_loss += loss.item()
                n_batches += 1
        except NumericError:
            # roll back to the last epoch boundary before dumping
            for p, val in zip(params, snapshot[0]):
                p.value[...] = val
                p.zero_grad()
            for m, val in zip(adam.m, snapshot[1]):
                m[...] = val
            for v, val in zip(adam.v, snapshot[2]):
                v[...] = val
            adam.t = snapshot[3]
            _save("last_good.ckpt", epoch - 1)
            raise
        val_loss = _eval_loss(model, val_arrays, cfg.batch_size)
        lr_used = schedule.lr
        schedule.update(val_loss)
        row = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1),
               "val_loss": val_loss, "lr": lr_used, "step": adam.t}
        history.append(row)
        log_rows.append(json.dumps(row))
        log(f"epoch {epoch:4d}  train {row['train_loss']:.6f}  "
            f"val {val_loss:.6f}  lr {lr_used:.2e}")
        if val_loss < best_val:
            best_val = val_loss
            _save("best.ckpt", epoch)
        if out_dir is not None:
            with open(f"{out_dir}/train_log.jsonl", "w") as fh:
                fh.write("\n".join(log_rows) + "\n")
    _save("final.ckpt", cfg.epochs)
    return history


def micro_instance_gradcheck(seed: int = 0, eps: float = 1e-5,
                             samples_per_param: int = 4,
                             variational: bool = False):
    """Finite-difference check of the full model loss on a tiny instance
    (2 objects, 3 observation frames, 2 rollout steps), exercising the
    recurrent perception pass, the noisy rollout, and both effects
    penalties. Returns ``(max_rel_err, rows)``."""
    n, t_obs, t_roll = 2, 3, 2
    pcfg = PerceptionConfig(n_obs=t_obs, variational=variational)
    rcfg = PredictionConfig(n_rollout=t_roll)
    lcfg = LossConfig(effects_perception=1e-3, effects_prediction=1e-3,
                      beta=0.1 if variational else 0.0)
    model = LatentDynamicsModel(pcfg, rcfg, lcfg, seed=seed)
    data_rng = np.random.default_rng(seed + 1)
    obs = data_rng.standard_normal((1, t_obs, n, STATE_WIDTH))
    r0 = data_rng.standard_normal((1, n, STATE_WIDTH))
    targets = data_rng.standard_normal((1, t_roll, n, STATE_WIDTH))
    batch = {"obs": obs, "r0": r0, "targets": targets}

    def loss_fn():
        rng = np.random.default_rng(seed + 2)
        return model.batch_loss(batch, rng, train_mode=True)

    return ad.check_gradients(loss_fn, model.parameters(), eps=eps,
                              samples_per_param=samples_per_param,
                              seed=seed + 3)
