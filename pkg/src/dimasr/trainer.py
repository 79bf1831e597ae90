"""Training loops: joint multilingual runs, the candidate grid, per-pair runs.

One run = AdamW over the head (and the toy encoder's trainable projection)
with per-epoch seeded batch shuffling, validation RMSE after every epoch,
and early stopping with best-epoch weight restore.  Everything about a run
is a pure function of (data, config, seed): two runs with identical inputs
produce byte-identical checkpoints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import encoding, metrics, regressor
from .corpus import Instance, PairID, VAScore, split_train_validation
from .encoding import EncoderSpec

logger = logging.getLogger(__name__)

REGIMES = ("joint", "separate")

# AdamW constants; unstated by the protocol, fixed here and recorded in every
# checkpoint header via the config.
ADAMW_BETAS = (0.9, 0.999)
ADAMW_EPS = 1e-8
ADAMW_WEIGHT_DECAY = 0.01
IMPROVEMENT_DELTA = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    learning_rate: float
    max_epochs: int
    bounded: bool
    seed: int = 42
    patience: int = 2
    regime: str = "joint"
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")

    def in_standard_grid(self) -> bool:
        """Whether batch size and learning rate sit in the protocol's ranges."""
        return self.batch_size in (16, 32, 64) and 8e-6 <= self.learning_rate <= 3e-5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def default_grid(seed: int = 42, regime: str = "joint") -> list[TrainConfig]:
    """The seven candidate configurations (M1..M7): five bounded, two raw."""
    rows = [
        (16, 1e-5, 7, True),
        (32, 1e-5, 3, False),
        (32, 1e-5, 5, True),
        (32, 1e-5, 7, True),
        (32, 2e-5, 5, True),
        (32, 8e-6, 3, True),
        (32, 8e-6, 7, False),
    ]
    return [TrainConfig(batch_size=b, learning_rate=lr, max_epochs=e,
                        bounded=s, seed=seed, regime=regime)
            for b, lr, e, s in rows]


class AdamW:
    """Adam with decoupled weight decay; biases are exempt from decay.

    With learning rate 0 a step leaves parameters bit-unchanged (decay is
    multiplied by the learning rate, as in the decoupled formulation).
    """

    def __init__(self, learning_rate: float, betas=ADAMW_BETAS, eps=ADAMW_EPS,
                 weight_decay=ADAMW_WEIGHT_DECAY, no_decay=("b",)):
        self.lr = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            if name not in self.no_decay:
                p -= self.lr * self.weight_decay * p
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class EarlyStopping:
    """Stop after `patience` consecutive epochs without strict improvement.

    Improvement means the monitored value drops by more than `delta`; ties
    count as non-improvement.
    """

    def __init__(self, patience: int = 2, delta: float = IMPROVEMENT_DELTA):
        self.patience = patience
        self.delta = delta
        self.counter = 0
        self.best_score: float | None = None
        self.best_epoch: int | None = None
        self.should_stop = False

    def update(self, score: float, epoch: int) -> bool:
        """Record an epoch result; returns True when this epoch is the new best."""
        if self.best_score is None or score < self.best_score - self.delta:
            self.best_score = score
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        if self.counter >= self.patience:
            self.should_stop = True
        return False


@dataclass
class Checkpoint:
    """Frozen parameters of one run plus the metadata to reproduce it."""

    id: str
    config: TrainConfig
    encoder_spec: EncoderSpec
    head: regressor.HeadParams
    projection: np.ndarray | None
    best_val_rmse: float
    epoch_of_best: int
    history: list[dict] = field(default_factory=list)

    def predict(self, instances: list[Instance],
                backend_handle=None) -> list[metrics.Prediction]:
        feats = encoding.instance_features(instances, self.encoder_spec, backend_handle)
        e = encoding.apply_projection(feats, self.projection)
        out = regressor.predict(e, self.head)
        return [metrics.Prediction(id=inst.id, aspect=inst.aspect,
                                   va=VAScore(float(v), float(a)))
                for inst, (v, a) in zip(instances, out)]

    def save(self, path) -> None:
        header = {
            "id": self.id,
            "encoder": self.encoder_spec.to_dict(),
            "config": self.config.to_dict(),
            "bounded": self.config.bounded,
            "seed": self.config.seed,
            "dropout_rate": self.head.dropout_rate,
            "optimizer": {"betas": list(ADAMW_BETAS), "eps": ADAMW_EPS,
                          "weight_decay": ADAMW_WEIGHT_DECAY},
            "best_val_rmse": self.best_val_rmse,
            "epoch_of_best": self.epoch_of_best,
        }
        arrays = {"W": self.head.W, "b": self.head.b}
        if self.projection is not None:
            arrays["A"] = self.projection
        regressor.save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, arrays = regressor.load_checkpoint(path)
        config = TrainConfig.from_dict(header["config"])
        head = regressor.HeadParams(W=arrays["W"], b=arrays["b"],
                                    dropout_rate=header["dropout_rate"],
                                    bounded=header["bounded"])
        return cls(id=header["id"], config=config,
                   encoder_spec=EncoderSpec.from_dict(header["encoder"]),
                   head=head, projection=arrays.get("A"),
                   best_val_rmse=header["best_val_rmse"],
                   epoch_of_best=header["epoch_of_best"])


def _gold_array(instances: list[Instance], what: str) -> np.ndarray:
    missing = [inst.key for inst in instances if inst.gold is None]
    if missing:
        raise TrainingError(f"{what} instance {missing[0]} has no gold VA")
    return metrics.va_array([inst.gold for inst in instances])


def _validation_rmse(feats: np.ndarray, golds: np.ndarray,
                     head: regressor.HeadParams,
                     projection: np.ndarray | None) -> float:
    e = encoding.apply_projection(feats, projection)
    return metrics.rmse_va(regressor.predict(e, head), golds)


def train(train_set: list[Instance], validation_set: list[Instance],
          config: TrainConfig, encoder_spec: EncoderSpec, *,
          ckpt_id: str = "M1", val_metric_fn=None,
          backend_handle=None) -> Checkpoint:
    """Run one training job and return the best-epoch checkpoint.

    `val_metric_fn(epoch, model) -> float`, when given, replaces the
    validation RMSE computation (the early-stopping tests inject scripted
    sequences through it); `model` exposes {"head", "projection"}.
    """
    if not train_set:
        raise TrainingError("empty training set")
    if val_metric_fn is None and not validation_set:
        raise TrainingError("empty validation set")

    feats = encoding.instance_features(train_set, encoder_spec, backend_handle)
    golds = _gold_array(train_set, "training")
    if val_metric_fn is None:
        val_feats = encoding.instance_features(validation_set, encoder_spec,
                                               backend_handle)
        val_golds = _gold_array(validation_set, "validation")

    d = encoder_spec.hidden_size
    head = regressor.init_head(d, config.seed, config.dropout_rate, config.bounded)
    projection = encoding.init_projection(d) if encoder_spec.trainable_layer else None

    tensors = {"W": head.W, "b": head.b}
    if projection is not None:
        tensors["A"] = projection
    opt = AdamW(config.learning_rate)
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(patience=config.patience)
    best: dict[str, np.ndarray] = {k: v.copy() for k, v in tensors.items()}
    history: list[dict] = []
    n = len(train_set)

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            pred, cache = regressor.forward_cached(
                feats[idx], head, projection, rng=rng, train=True)
            loss = regressor.mse_loss(pred, golds[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"{ckpt_id}: non-finite loss at epoch {epoch}, step {step}")
            grads = regressor.backward(cache, golds[idx])
            opt.step(tensors, grads)
            loss_sum += loss * len(idx)
        train_mse = loss_sum / n

        if val_metric_fn is not None:
            val_rmse = float(val_metric_fn(
                epoch, {"head": head, "projection": projection}))
        else:
            val_rmse = _validation_rmse(val_feats, val_golds, head, projection)
        history.append({"epoch": epoch, "train_mse": train_mse,
                        "val_rmse": val_rmse})
        logger.info("%s epoch %d  train_mse %.6f  val_rmse %.6f",
                    ckpt_id, epoch, train_mse, val_rmse)

        if stopper.update(val_rmse, epoch):
            best = {k: v.copy() for k, v in tensors.items()}
        if stopper.should_stop:
            logger.info("%s early stop after epoch %d (best epoch %d)",
                        ckpt_id, epoch, stopper.best_epoch)
            break

    head.W = best["W"]
    head.b = best["b"]
    return Checkpoint(
        id=ckpt_id, config=config, encoder_spec=encoder_spec, head=head,
        projection=best.get("A"), best_val_rmse=float(stopper.best_score),
        epoch_of_best=int(stopper.best_epoch), history=history,
    )


def train_grid(train_set: list[Instance], validation_set: list[Instance],
               configs: list[TrainConfig], encoder_spec: EncoderSpec,
               ids: list[str] | None = None) -> list[Checkpoint]:
    """Train one checkpoint per config; ids default to M1..Mk in config order."""
    if len(set(configs)) != len(configs):
        raise ValueError("grid configs must be distinct")
    if ids is None:
        ids = [f"M{i + 1}" for i in range(len(configs))]
    checkpoints = []
    for cid, config in zip(ids, configs):
        try:
            checkpoints.append(train(train_set, validation_set, config,
                                     encoder_spec, ckpt_id=cid))
        except Exception as exc:
            raise TrainingError(f"{cid}: {exc}") from exc
    return checkpoints


def train_separate(per_pair: dict[PairID, list[Instance]], config: TrainConfig,
                   encoder_spec: EncoderSpec,
                   validation_fraction: float = 0.10) -> dict[PairID, Checkpoint]:
    """One independent run per pair, trained on that pair's data only."""
    config = replace(config, regime="separate")
    out: dict[PairID, Checkpoint] = {}
    for pair, instances in per_pair.items():
        tr, val = split_train_validation(instances, validation_fraction, config.seed)
        out[pair] = train(tr, val, config, encoder_spec, ckpt_id=str(pair))
    return out
