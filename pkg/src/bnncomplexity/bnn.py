"""Binarized two-hidden-layer MLP trained with straight-through gradients.

Latent real weights are binarized by sign (> 0 -> +1, <= 0 -> -1) in the
forward pass, as are hidden activations; gradients cross each sign via
the clipped straight-through estimator d sign(u)/du := 1[|u| <= clip].
Hidden pre-activations are batch-normalized; the output layer applies a
binarized weight matrix with no normalization, leaving real logits.
Adam updates the latent weights (clipped to [-1, 1] after every step)
and the batch-norm scale/shift.  Logits are the mean vote of the output
layer's binary units, which pins the untrained loss to the 10-class
chance level regardless of width.

A single run is strictly sequential; distinct runs are independent and
own their RNG stream (seeded from the run's TrainConfig), their model,
and their optimizer.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .complexity import measure_network
from .ctm import CtmTable
from .errors import DimensionError, EmptyDataset
from .snapshots import SnapshotWriter
from .trace import RunTrace

log = logging.getLogger(__name__)

_TAG_RUN = 4

INPUT_DIM = 100
OUTPUT_DIM = 10


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    init_range: float = 0.5
    ste_clip: float = 1.0
    # diagnostic surrogate for gradient checks: "sign", "tanh" or "identity"
    nonlinearity: str = "sign"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("lr > 0, batch_size >= 1 and patience >= 1 required")


def sign_pm1(u: np.ndarray) -> np.ndarray:
    """Binarize to {-1, +1}: > 0 -> +1, <= 0 -> -1."""
    return np.where(u > 0, 1.0, -1.0)


def _apply_nl(u, kind):
    if kind == "sign":
        return sign_pm1(u)
    if kind == "tanh":
        return np.tanh(u)
    return u


def _nl_grad(u, kind, clip):
    if kind == "sign":
        return (np.abs(u) <= clip).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(u)
        return 1.0 - t * t
    return np.ones_like(u)


class BatchNorm:
    """Per-feature batch normalization with running statistics."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(num_features)
        self.beta = np.zeros(num_features)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self._cache = None

    def forward(self, z, train):
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)  # biased
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (z - mu) * inv
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var
            self._cache = (xhat, inv)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (z - self.running_mean) * inv
            self._cache = None
        return self.gamma * xhat + self.beta

    def backward(self, dh):
        """Gradients for the last train-mode forward: (dz, dgamma, dbeta)."""
        xhat, inv = self._cache
        b = dh.shape[0]
        dgamma = (dh * xhat).sum(axis=0)
        dbeta = dh.sum(axis=0)
        dxhat = dh * self.gamma
        dz = (inv / b) * (
            b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        return dz, dgamma, dbeta

    def state(self):
        return {
            "gamma": self.gamma.copy(),
            "beta": self.beta.copy(),
            "running_mean": self.running_mean.copy(),
            "running_var": self.running_var.copy(),
        }

    def load_state(self, state):
        self.gamma = state["gamma"].copy()
        self.beta = state["beta"].copy()
        self.running_mean = state["running_mean"].copy()
        self.running_var = state["running_var"].copy()


class BnnModel:
    """Latent weights plus batch-norm layers for a (N1, N2) architecture."""

    def __init__(self, arch, config: TrainConfig, rng):
        n1, n2 = arch
        r = config.init_range
        self.arch = (n1, n2)
        self.config = config
        self.w1 = rng.uniform(-r, r, (INPUT_DIM, n1))
        self.w2 = rng.uniform(-r, r, (n1, n2))
        self.w3 = rng.uniform(-r, r, (n2, OUTPUT_DIM))
        self.bn1 = BatchNorm(n1, config.bn_momentum, config.bn_eps)
        self.bn2 = BatchNorm(n2, config.bn_momentum, config.bn_eps)

    def weight_matrices(self):
        """Linear-layer latent weights only; BN parameters excluded."""
        return [self.w1, self.w2, self.w3]

    def params(self):
        return {
            "w1": self.w1,
            "w2": self.w2,
            "w3": self.w3,
            "bn1_gamma": self.bn1.gamma,
            "bn1_beta": self.bn1.beta,
            "bn2_gamma": self.bn2.gamma,
            "bn2_beta": self.bn2.beta,
        }

    def set_param(self, name, value):
        if name.startswith("bn"):
            layer = self.bn1 if name.startswith("bn1") else self.bn2
            setattr(layer, name.split("_", 1)[1], value)
        else:
            setattr(self, name, value)

    def state(self):
        return {
            "w1": self.w1.copy(),
            "w2": self.w2.copy(),
            "w3": self.w3.copy(),
            "bn1": self.bn1.state(),
            "bn2": self.bn2.state(),
        }

    def load_state(self, state):
        self.w1 = state["w1"].copy()
        self.w2 = state["w2"].copy()
        self.w3 = state["w3"].copy()
        self.bn1.load_state(state["bn1"])
        self.bn2.load_state(state["bn2"])


def forward(model: BnnModel, batch, train: bool):
    """Run the network; returns (logits, cache for backward)."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.w1.shape[0]:
        raise DimensionError(
            f"batch shape {x.shape} incompatible with input dim {model.w1.shape[0]}"
        )
    nl = model.config.nonlinearity
    wb1 = _apply_nl(model.w1, nl)
    wb2 = _apply_nl(model.w2, nl)
    wb3 = _apply_nl(model.w3, nl)

    z1 = x @ wb1
    h1 = model.bn1.forward(z1, train)
    a1 = _apply_nl(h1, nl)

    z2 = a1 @ wb2
    h2 = model.bn2.forward(z2, train)
    a2 = _apply_nl(h2, nl)

    # Mean vote of the N2 binary neurons: keeps the initial loss at the
    # ln(10) chance level for every architecture (argmax unaffected).
    out_scale = 1.0 / wb3.shape[0]
    logits = a2 @ wb3 * out_scale
    cache = {
        "x": x, "h1": h1, "a1": a1, "h2": h2, "a2": a2,
        "wb1": wb1, "wb2": wb2, "wb3": wb3, "out_scale": out_scale, "train": train,
    }
    return logits, cache


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy (natural log) and its gradient at the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    b = len(labels)
    nll = -np.log(probs[np.arange(b), labels] + 1e-300)
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    return float(nll.mean()), dlogits / b


def backward(model: BnnModel, cache, dlogits):
    """Gradients on latent weights and BN parameters for the cached forward."""
    nl = model.config.nonlinearity
    clip = model.config.ste_clip

    dout = dlogits * cache["out_scale"]
    dw3 = cache["a2"].T @ dout * _nl_grad(model.w3, nl, clip)
    da2 = dout @ cache["wb3"].T
    dh2 = da2 * _nl_grad(cache["h2"], nl, clip)
    dz2, dg2, db2 = model.bn2.backward(dh2)

    dw2 = cache["a1"].T @ dz2 * _nl_grad(model.w2, nl, clip)
    da1 = dz2 @ cache["wb2"].T
    dh1 = da1 * _nl_grad(cache["h1"], nl, clip)
    dz1, dg1, db1 = model.bn1.backward(dh1)

    dw1 = cache["x"].T @ dz1 * _nl_grad(model.w1, nl, clip)
    return {
        "w1": dw1, "w2": dw2, "w3": dw3,
        "bn1_gamma": dg1, "bn1_beta": db1,
        "bn2_gamma": dg2, "bn2_beta": db2,
    }


class Adam:
    """Standard Adam with bias correction; latent weights clipped after update."""

    CLIPPED = ("w1", "w2", "w3")

    def __init__(self, model: BnnModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.t = 0
        params = model.params()
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, value in self.model.params().items():
            g = grads[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            new = value - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            if name in self.CLIPPED:
                np.clip(new, -1.0, 1.0, out=new)
            self.model.set_param(name, new)


class EarlyStopper:
    """Patience-based stopping on validation loss; strict improvement resets."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, loss, epoch) -> bool:
        """Record an epoch's validation loss; True means stop now."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def _batched_loss(model, images, labels, chunk=65536):
    total = 0.0
    for lo in range(0, len(images), chunk):
        logits, _ = forward(model, images[lo : lo + chunk], train=False)
        probs_loss, _ = softmax_cross_entropy(logits, labels[lo : lo + chunk])
        total += probs_loss * (min(chunk, len(images) - lo))
    return total / len(images)


def evaluate(model: BnnModel, images, labels) -> float:
    """Eval-mode argmax accuracy; argmax breaks ties toward lower class index."""
    correct = 0
    for lo in range(0, len(images), 65536):
        logits, _ = forward(model, images[lo : lo + 65536], train=False)
        correct += int((logits.argmax(axis=1) == labels[lo : lo + 65536]).sum())
    return correct / len(images)


def train_run(
    arch,
    config: TrainConfig,
    train_images,
    train_labels,
    val_images=None,
    val_labels=None,
    test_images=None,
    test_labels=None,
    table: Optional[CtmTable] = None,
    run_id: str = "run",
    subset_id: int = -1,
    snapshot_path=None,
) -> RunTrace:
    """Train one model instance, measuring complexity after every step.

    With a validation set, applies patience-based early stopping and
    restores the best-validation weights before the test evaluation;
    without one (control mode) runs exactly ``config.max_epochs``.
    """
    n = len(train_images)
    if n == 0:
        raise EmptyDataset("training subset is empty")
    rng = np.random.default_rng((config.seed, _TAG_RUN))
    model = BnnModel(arch, config, rng)
    opt = Adam(model, config)
    stopper = EarlyStopper(config.patience) if val_images is not None else None
    writer = SnapshotWriter(snapshot_path) if snapshot_path else None

    step_loss, step_bdm, step_ent, step_epoch = [], [], [], []
    ep_loss, ep_val, ep_bdm, ep_ent, ep_steps = [], [], [], [], []
    best_state = None
    stop_epoch = 0
    last_reading = None

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        losses, bdms, ents = [], [], []
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            logits, cache = forward(model, train_images[idx], train=True)
            loss, dlogits = softmax_cross_entropy(logits, train_labels[idx])
            grads = backward(model, cache, dlogits)
            opt.step(grads)

            if table is not None:
                reading = measure_network(model.weight_matrices(), table)
                bdms.append(reading.bdm_bits)
                ents.append(reading.entropy_bits)
                last_reading = reading
            if writer:
                writer.append(opt.t, model.weight_matrices())
            losses.append(loss)

        stop_epoch = epoch
        step_loss.extend(losses)
        step_bdm.extend(bdms if table is not None else [math.nan] * len(losses))
        step_ent.extend(ents if table is not None else [math.nan] * len(losses))
        step_epoch.extend([epoch] * len(losses))
        ep_loss.append(float(np.mean(losses)))
        ep_bdm.append(float(np.mean(bdms)) if bdms else math.nan)
        ep_ent.append(float(np.mean(ents)) if ents else math.nan)
        ep_steps.append(len(losses))

        if stopper is not None:
            val_loss = _batched_loss(model, val_images, val_labels)
            ep_val.append(val_loss)
            improved = val_loss < stopper.best
            stop = stopper.update(val_loss, epoch)
            if improved:
                best_state = model.state()
            if stop:
                break

    best_epoch = stop_epoch
    if stopper is not None and best_state is not None:
        model.load_state(best_state)
        best_epoch = stopper.best_epoch
        if stop_epoch < config.max_epochs:
            assert stop_epoch - best_epoch == config.patience
    if writer:
        writer.close()

    test_accuracy = None
    if test_images is not None:
        test_accuracy = evaluate(model, test_images, test_labels)

    return RunTrace(
        run_id=run_id,
        arch=tuple(arch),
        seed=config.seed,
        subset_id=subset_id,
        step_loss=np.array(step_loss),
        step_bdm=np.array(step_bdm),
        step_entropy=np.array(step_ent),
        step_epoch=np.array(step_epoch, dtype=np.int64),
        epoch_train_loss=np.array(ep_loss),
        epoch_val_loss=np.array(ep_val) if stopper is not None else None,
        epoch_bdm=np.array(ep_bdm),
        epoch_entropy=np.array(ep_ent),
        epoch_steps=np.array(ep_steps, dtype=np.int64),
        stop_epoch=stop_epoch,
        best_epoch=best_epoch,
        test_accuracy=test_accuracy,
        per_matrix_last=last_reading.per_matrix if last_reading else (),
    )
