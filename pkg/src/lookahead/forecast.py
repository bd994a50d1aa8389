"""Predictors for 12-month-ahead fundamentals.

Three kinds: naive (copy the last input step), linear (16 independent ridge
regressions on the flattened inputs), and a multi-task MLP trained with a
weighted square loss, AdaDelta, inverted dropout, global gradient-norm
clipping, and patience-based early stopping. Training is bitwise
reproducible from the config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    EBIT_IDX,
    FUNDAMENTAL_FIELDS,
    N_FUNDAMENTALS,
    ConfigError,
    ContractError,
    DivergenceError,
    DomainError,
    ParseError,
)
from .features import (
    N_INPUT_COLUMNS,
    N_STEPS,
    Sample,
    Standardizer,
    fit_standardizer,
    samples_to_matrices,
)

N_FLAT_INPUTS = N_STEPS * N_INPUT_COLUMNS  # 100

ADADELTA_RHO = 0.95
ADADELTA_EPS = 1e-6


@dataclass
class PredictorConfig:
    kind: str = "mlp"  # naive | linear | mlp
    hidden_layers: int = 2
    hidden_units: int = 1024
    input_keep_prob: float = 1.0
    hidden_keep_prob: float = 0.5
    ebit_loss_weight: float = 0.75
    max_grad_norm: float = 1.0
    patience_epochs: int = 25
    max_epochs: int = 1000
    batch_size: int = 256
    seed: int = 0
    validation_stock_fraction: float = 0.30
    ridge_lambda: float = 1e-6

    def validate(self) -> None:
        if self.kind not in ("naive", "linear", "mlp"):
            raise ConfigError(f"unknown predictor kind {self.kind!r}")
        if self.hidden_layers < 1 or self.hidden_units < 1:
            raise ConfigError("hidden_layers and hidden_units must be >= 1")
        for name in ("input_keep_prob", "hidden_keep_prob"):
            p = getattr(self, name)
            if not 0.0 < p <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {p}")
        if not 0.0 <= self.ebit_loss_weight <= 1.0:
            raise ConfigError("ebit_loss_weight must be in [0, 1]")
        if not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be > 0")
        if self.patience_epochs < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience/epochs/batch_size must be >= 1")
        if not 0.0 < self.validation_stock_fraction < 1.0:
            raise ConfigError("validation_stock_fraction must be in (0, 1)")
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda must be >= 0")


@dataclass(frozen=True)
class SplitPlan:
    """Seeded partition of securities into train and validation sets."""

    train_sids: tuple[str, ...]
    validation_sids: tuple[str, ...]


def split_securities(
    sids: Sequence[str], validation_fraction: float, seed: int
) -> SplitPlan:
    """Randomly hold out a fraction of securities for validation.

    Reproducible from the seed and independent of the input ordering.
    """
    unique = sorted(set(sids))
    if len(unique) < 2:
        raise DomainError("need at least 2 securities to split")
    if not 0.0 < validation_fraction < 1.0:
        raise DomainError("validation_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(unique))
    n_val = int(round(validation_fraction * len(unique)))
    n_val = min(max(n_val, 1), len(unique) - 1)
    val_idx = set(perm[:n_val].tolist())
    validation = tuple(unique[i] for i in sorted(val_idx))
    train = tuple(unique[i] for i in range(len(unique)) if i not in val_idx)
    return SplitPlan(train_sids=train, validation_sids=validation)


def _loss_weights(ebit_weight: float) -> np.ndarray:
    w = np.full(N_FUNDAMENTALS, (1.0 - ebit_weight) / (N_FUNDAMENTALS - 1))
    w[EBIT_IDX] = ebit_weight
    return w


def weighted_loss(pred: np.ndarray, target: np.ndarray, ebit_weight: float) -> float:
    """EBIT-up-weighted square loss.

    Per sample: ebit_weight * ebit_error^2 plus (1 - ebit_weight) times the
    mean squared error over the 15 remaining targets; averaged over a batch.
    """
    if not 0.0 <= ebit_weight <= 1.0:
        raise DomainError("ebit_weight must be in [0, 1]")
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    err = pred - target
    return float(np.mean((err * err) @ _loss_weights(ebit_weight)))


class Predictor:
    """Common prediction surface: standardized outputs plus currency EBIT."""

    standardizer: Standardizer

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        raise NotImplementedError

    def predict_ebit_musd(self, samples: Sequence[Sample]) -> np.ndarray:
        """Forecast EBIT at t+12 in millions USD per sample.

        Undoes target standardization and the per-sample market-cap scaling.
        """
        preds = self.predict(samples)
        mcap = np.array([s.mcap_t for s in samples], dtype=np.float64)
        currency = self.standardizer.inverse_transform_target(preds)
        return currency[:, EBIT_IDX] * mcap


def naive_predict(sample: Sample, standardizer: Standardizer) -> np.ndarray:
    """Copy the scaled fundamentals at the last input step, mapped into
    target-standardized space so its MSE is comparable with the models'."""
    return standardizer.transform_target(sample.inputs[N_STEPS - 1, :N_FUNDAMENTALS])


class NaivePredictor(Predictor):
    def __init__(self, standardizer: Standardizer):
        self.standardizer = standardizer

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        last = np.stack([s.inputs[N_STEPS - 1, :N_FUNDAMENTALS] for s in samples])
        return self.standardizer.transform_target(last)


class LinearModel(Predictor):
    """16 independent ridge regressions on the 100 flattened inputs."""

    def __init__(self, weights: np.ndarray, standardizer: Standardizer):
        if weights.shape != (N_FLAT_INPUTS + 1, N_FUNDAMENTALS):
            raise ContractError(f"bad linear weight shape {weights.shape}")
        self.weights = weights
        self.standardizer = standardizer

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        x, _ = samples_to_matrices(samples, self.standardizer)
        design = np.hstack([np.ones((x.shape[0], 1)), x])
        return design @ self.weights


def fit_linear(
    samples: Sequence[Sample],
    cfg: PredictorConfig,
    standardizer: Standardizer | None = None,
) -> LinearModel:
    """Solve the ridge normal equations, one system for all 16 targets.

    The intercept is unpenalized, so in the infinite-ridge limit predictions
    collapse to the target means.
    """
    cfg.validate()
    if len(samples) < N_FLAT_INPUTS + 1:
        raise DomainError(
            f"need at least {N_FLAT_INPUTS + 1} training samples, got {len(samples)}"
        )
    if standardizer is None:
        standardizer = fit_standardizer(samples)
    x, y = samples_to_matrices(samples, standardizer)
    if y is None:
        raise DomainError("all training samples must have targets")
    design = np.hstack([np.ones((x.shape[0], 1)), x])
    gram = design.T @ design
    penalty = np.eye(N_FLAT_INPUTS + 1)
    penalty[0, 0] = 0.0
    try:
        weights = np.linalg.solve(gram + cfg.ridge_lambda * penalty, design.T @ y)
    except np.linalg.LinAlgError:
        raise DomainError(
            "singular normal equations; set ridge_lambda > 0"
        ) from None
    return LinearModel(weights=weights, standardizer=standardizer)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class MlpModel(Predictor):
    """Dense ReLU network 100 -> hidden_units x hidden_layers -> 16.

    Holds the standardizer used at fit time and the per-epoch training log;
    parameters are the best-validation snapshot.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    standardizer: Standardizer
    config: PredictorConfig
    training_log: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ w + b, 0.0)
        return a @ self.weights[-1] + self.biases[-1]

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        x, _ = samples_to_matrices(samples, self.standardizer)
        return self.forward(x)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def _init_parameters(
    cfg: PredictorConfig, rng: np.random.Generator
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Uniform He-style fan-in init for all layers, zero biases."""
    sizes = [N_FLAT_INPUTS] + [cfg.hidden_units] * cfg.hidden_layers + [N_FUNDAMENTALS]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _forward_full(
    weights: list[np.ndarray],
    biases: list[np.ndarray],
    x: np.ndarray,
    masks: list[np.ndarray] | None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass keeping post-dropout activations for backprop.

    ``masks[0]`` applies to the input, masks[1:] to each hidden activation;
    None disables dropout entirely.
    """
    activations = []
    a = x if masks is None else x * masks[0]
    activations.append(a)
    for i, (w, b) in enumerate(zip(weights[:-1], biases[:-1])):
        a = np.maximum(a @ w + b, 0.0)
        if masks is not None:
            a = a * masks[i + 1]
        activations.append(a)
    out = a @ weights[-1] + biases[-1]
    return out, activations


def _backward(
    weights: list[np.ndarray],
    activations: list[np.ndarray],
    dout: np.ndarray,
    masks: list[np.ndarray] | None,
) -> list[np.ndarray]:
    """Gradients for [w0, b0, w1, b1, ...] given d(loss)/d(output)."""
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(weights))
    delta = dout
    for layer in range(len(weights) - 1, -1, -1):
        a_prev = activations[layer]
        grads[2 * layer] = a_prev.T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ weights[layer].T
            # ReLU derivative; post-dropout activations are zero exactly
            # where the mask or the ReLU zeroed them, so one gate covers both
            delta = np.where(a_prev > 0.0, delta, 0.0)
            if masks is not None:
                delta = delta * masks[layer]
    return grads


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


class AdaDelta:
    """Per-parameter adaptive step from running squared-gradient and
    squared-update averages. A zero gradient leaves parameters unchanged."""

    def __init__(self, params: Sequence[np.ndarray], rho: float = ADADELTA_RHO, eps: float = ADADELTA_EPS):
        self.rho = rho
        self.eps = eps
        self.sq_grad = [np.zeros_like(p) for p in params]
        self.sq_delta = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for p, g, eg, ed in zip(params, grads, self.sq_grad, self.sq_delta):
            eg *= self.rho
            eg += (1.0 - self.rho) * g * g
            delta = -np.sqrt(ed + self.eps) / np.sqrt(eg + self.eps) * g
            p += delta
            ed *= self.rho
            ed += (1.0 - self.rho) * delta * delta


def _loss_and_dout(
    pred: np.ndarray, target: np.ndarray, ebit_weight: float
) -> tuple[float, np.ndarray]:
    err = pred - target
    wvec = _loss_weights(ebit_weight)
    loss = float(np.mean((err * err) @ wvec))
    dout = 2.0 * err * wvec / pred.shape[0]
    return loss, dout


def mlp_loss(model: MlpModel, samples: Sequence[Sample]) -> float:
    """Weighted training loss on a batch, dropout off (check mode)."""
    x, y = samples_to_matrices(samples, model.standardizer)
    if y is None:
        raise DomainError("loss requires targets")
    return weighted_loss(model.forward(x), y, model.config.ebit_loss_weight)


def mlp_gradient(model: MlpModel, samples: Sequence[Sample]) -> list[np.ndarray]:
    """Analytic gradients of the weighted loss, ordered [w0, b0, w1, b1, ...].

    Dropout is disabled; this is the deterministic check-mode path used by
    the finite-difference tests.
    """
    x, y = samples_to_matrices(samples, model.standardizer)
    if y is None:
        raise DomainError("gradients require targets")
    pred, activations = _forward_full(model.weights, model.biases, x, None)
    _, dout = _loss_and_dout(pred, y, model.config.ebit_loss_weight)
    return _backward(model.weights, activations, dout, None)


def train_mlp(
    samples: Sequence[Sample],
    split: SplitPlan,
    cfg: PredictorConfig,
    standardizer: Standardizer | None = None,
) -> MlpModel:
    """Mini-batch AdaDelta training with early stopping.

    Validation MSE (unweighted, over all 16 targets) is recorded after every
    epoch; the best-epoch parameters are kept and returned once
    ``patience_epochs`` pass without improvement or ``max_epochs`` is hit.
    Fully reproducible from cfg.seed.
    """
    cfg.validate()
    train_set = set(split.train_sids)
    val_set = set(split.validation_sids)
    if train_set & val_set:
        raise DomainError("split plan partitions overlap")
    train_samples = [s for s in samples if s.sid in train_set and s.target is not None]
    val_samples = [s for s in samples if s.sid in val_set and s.target is not None]
    if not train_samples or not val_samples:
        raise DomainError("both train and validation partitions must be non-empty")
    if standardizer is None:
        standardizer = fit_standardizer(train_samples)
    x_train, y_train = samples_to_matrices(train_samples, standardizer)
    x_val, y_val = samples_to_matrices(val_samples, standardizer)

    rng = np.random.default_rng(cfg.seed)
    weights, biases = _init_parameters(cfg, rng)
    params: list[np.ndarray] = []
    for w, b in zip(weights, biases):
        params.extend([w, b])
    optimizer = AdaDelta(params)

    n = x_train.shape[0]
    use_input_mask = cfg.input_keep_prob < 1.0
    use_hidden_mask = cfg.hidden_keep_prob < 1.0
    best_val = np.inf
    best_epoch = 0
    best_params: list[np.ndarray] = [p.copy() for p in params]
    log: list[dict] = []

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            masks: list[np.ndarray] | None = None
            if use_input_mask or use_hidden_mask:
                masks = []
                if use_input_mask:
                    keep = cfg.input_keep_prob
                    masks.append(
                        (rng.random(xb.shape) < keep).astype(np.float64) / keep
                    )
                else:
                    masks.append(np.ones_like(xb))
                for _ in range(cfg.hidden_layers):
                    if use_hidden_mask:
                        keep = cfg.hidden_keep_prob
                        masks.append(
                            (rng.random((xb.shape[0], cfg.hidden_units)) < keep).astype(
                                np.float64
                            )
                            / keep
                        )
                    else:
                        masks.append(np.ones((xb.shape[0], cfg.hidden_units)))
            pred, activations = _forward_full(weights, biases, xb, masks)
            loss, dout = _loss_and_dout(pred, yb, cfg.ebit_loss_weight)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            grads = _backward(weights, activations, dout, masks)
            grads, _ = clip_global_norm(grads, cfg.max_grad_norm)
            optimizer.step(params, grads)
            epoch_loss += loss * len(idx)
        val_pred, _ = _forward_full(weights, biases, x_val, None)
        val_mse = float(np.mean((val_pred - y_val) ** 2))
        log.append(
            {"epoch": epoch, "train_loss": epoch_loss / n, "val_mse": val_mse}
        )
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_params = [p.copy() for p in params]
        elif epoch - best_epoch >= cfg.patience_epochs:
            break

    best_weights = [best_params[2 * i] for i in range(len(weights))]
    best_biases = [best_params[2 * i + 1] for i in range(len(weights))]
    return MlpModel(
        weights=best_weights,
        biases=best_biases,
        standardizer=standardizer,
        config=cfg,
        training_log=log,
        best_epoch=best_epoch,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"LOOKAHEAD-CKPT\n"
_CHECKPOINT_VERSION = 1


def _model_arrays(model: Predictor) -> list[tuple[str, np.ndarray]]:
    if isinstance(model, MlpModel):
        out = []
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        return out
    if isinstance(model, LinearModel):
        return [("weights", model.weights)]
    raise ContractError(f"cannot checkpoint a {type(model).__name__}")


def save_checkpoint(model: Predictor, path: str | Path) -> None:
    """Write a versioned binary checkpoint; round-trips bit-exactly.

    Layout: magic line, JSON header length line, JSON header (topology,
    canonical field order, standardizer statistics, config, training log,
    array manifest), then raw little-endian float64 array bytes in manifest
    order. Identical models serialize to identical bytes.
    """
    arrays = _model_arrays(model)
    if isinstance(model, MlpModel):
        kind, training_log, best_epoch, cfg = (
            "mlp",
            model.training_log,
            model.best_epoch,
            model.config,
        )
    else:
        kind, training_log, best_epoch, cfg = "linear", [], None, None
    header = {
        "format_version": _CHECKPOINT_VERSION,
        "kind": kind,
        "config": None if cfg is None else asdict(cfg),
        "field_order": list(FUNDAMENTAL_FIELDS),
        "standardizer": model.standardizer.to_jsonable(),
        "training_log": training_log,
        "best_epoch": best_epoch,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(f"{len(blob)}\n".encode("ascii"))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Predictor:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != _CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad checkpoint magic")
        try:
            header_len = int(fh.readline().strip())
        except ValueError:
            raise ParseError(f"{path}: bad checkpoint header length") from None
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != _CHECKPOINT_VERSION:
            raise ParseError(
                f"{path}: unsupported checkpoint version {header.get('format_version')}"
            )
        if header["field_order"] != list(FUNDAMENTAL_FIELDS):
            raise ParseError(f"{path}: fundamental field order mismatch")
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ParseError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    standardizer = Standardizer.from_jsonable(header["standardizer"])
    if header["kind"] == "linear":
        return LinearModel(weights=arrays["weights"], standardizer=standardizer)
    if header["kind"] != "mlp":
        raise ParseError(f"{path}: unknown checkpoint kind {header['kind']!r}")
    cfg = PredictorConfig(**header["config"])
    n_layers = cfg.hidden_layers + 1
    weights = [arrays[f"w{i}"] for i in range(n_layers)]
    biases = [arrays[f"b{i}"] for i in range(n_layers)]
    return MlpModel(
        weights=weights,
        biases=biases,
        standardizer=standardizer,
        config=cfg,
        training_log=header["training_log"],
        best_epoch=header["best_epoch"],
    )
