"""Feed-forward acoustic model with hand-rolled backprop and Adam.

The network consumes a context window of feature rows (2 * context_frames
+ 1 stacked frames, edges replicated), applies ReLU hidden layers and a
softmax output over HMM states.  Everything is plain float64 numpy and a
pure function of its seeds, so training is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import derive_seed

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetArchitecture:
    input_dim: int
    hidden_sizes: tuple[int, ...]
    output_size: int
    dropout_p: float = 0.0
    context_frames: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if self.output_size < 2:
            raise ValueError("output_size must be at least 2")
        if not self.hidden_sizes:
            raise ValueError("need at least one hidden layer")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.context_frames < 0:
            raise ValueError("context_frames must be nonnegative")

    @property
    def stacked_dim(self) -> int:
        return self.input_dim * (2 * self.context_frames + 1)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.stacked_dim,) + self.hidden_sizes + (self.output_size,)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 25
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    dropout_p: float | None = None  # None -> use the architecture's value

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")


@dataclass
class AcousticNet:
    architecture: NetArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int
    loss_history: list[float] = field(default_factory=list)

    def copy(self) -> "AcousticNet":
        return AcousticNet(self.architecture, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.seed,
                           list(self.loss_history))

    @property
    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def init_network(arch: NetArchitecture, seed: int) -> AcousticNet:
    """He-style uniform fan-in initialization, deterministic in (arch, seed)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    sizes = arch.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return AcousticNet(arch, weights, biases, seed)


def stack_context(features: np.ndarray, context: int) -> np.ndarray:
    """Stack each row with its +-context neighbours (edge rows replicated)."""
    features = np.atleast_2d(features)
    if context == 0:
        return features
    t = features.shape[0]
    cols = []
    for offset in range(-context, context + 1):
        idx = np.clip(np.arange(t) + offset, 0, t - 1)
        cols.append(features[idx])
    return np.concatenate(cols, axis=1)


def unstack_context_gradient(d_stacked: np.ndarray, context: int, input_dim: int) -> np.ndarray:
    """Adjoint of stack_context: accumulate window gradients onto the rows."""
    t = d_stacked.shape[0]
    if context == 0:
        return d_stacked.copy()
    grad = np.zeros((t, input_dim))
    for k, offset in enumerate(range(-context, context + 1)):
        idx = np.clip(np.arange(t) + offset, 0, t - 1)
        np.add.at(grad, idx, d_stacked[:, k * input_dim:(k + 1) * input_dim])
    return grad


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(net: AcousticNet, x: np.ndarray, dropout_mask=None):
    """Hidden activations then logits; the optional mask applies after layer 1."""
    activations = [x]
    h = x
    for i, (w, b) in enumerate(zip(net.weights[:-1], net.biases[:-1])):
        h = np.maximum(h @ w + b, 0.0)
        if i == 0 and dropout_mask is not None:
            h = h * dropout_mask
        activations.append(h)
    logits = h @ net.weights[-1] + net.biases[-1]
    return activations, logits


def forward(net: AcousticNet, features: np.ndarray):
    """Posteriors (softmax rows) and penultimate activations; dropout off."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != net.architecture.input_dim:
        raise ValueError(
            f"feature width {features.shape[1]} != network input {net.architecture.input_dim}"
        )
    x = stack_context(features, net.architecture.context_frames)
    activations, logits = _forward_pass(net, x)
    return _softmax(logits), activations[-1]


def train(net: AcousticNet, samples, cfg: TrainConfig) -> AcousticNet:
    """Mini-batch Adam on per-frame cross-entropy against aligned states.

    ``samples`` is a list of (feature matrix, state-label vector) pairs.
    Returns a new network; shuffling and dropout masks are functions of
    cfg.seed only.
    """
    if not samples:
        raise ValueError("empty training set")
    arch = net.architecture
    xs, ys = [], []
    for feats, labels in samples:
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        labels = np.asarray(labels, dtype=int)
        if feats.shape[0] != labels.shape[0]:
            raise ValueError("feature rows and labels differ in length")
        if feats.shape[1] != arch.input_dim:
            raise ValueError(f"feature width {feats.shape[1]} != input {arch.input_dim}")
        xs.append(stack_context(feats, arch.context_frames))
        ys.append(labels)
    x_all = np.concatenate(xs)
    y_all = np.concatenate(ys)
    if np.any(y_all < 0) or np.any(y_all >= arch.output_size):
        raise ValueError("alignment label outside the network's state range")

    out = net.copy()
    out.loss_history = []
    dropout_p = cfg.dropout_p if cfg.dropout_p is not None else arch.dropout_p
    rng = np.random.default_rng(cfg.seed)
    beta1, beta2 = cfg.adam_betas
    m = [np.zeros_like(w) for w in out.weights] + [np.zeros_like(b) for b in out.biases]
    v = [np.zeros_like(w) for w in out.weights] + [np.zeros_like(b) for b in out.biases]
    step = 0
    n = x_all.shape[0]
    n_layers = len(out.weights)

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            xb, yb = x_all[batch], y_all[batch]
            mask = None
            if dropout_p > 0.0:
                keep = rng.random((xb.shape[0], arch.hidden_sizes[0])) >= dropout_p
                mask = keep / (1.0 - dropout_p)
            activations, logits = _forward_pass(out, xb, mask)
            probs = _softmax(logits)
            picked = probs[np.arange(len(batch)), yb]
            epoch_loss += float(-np.sum(np.log(np.maximum(picked, 1e-300))))

            d_logits = probs
            d_logits[np.arange(len(batch)), yb] -= 1.0
            d_logits /= len(batch)
            grads_w = [None] * n_layers
            grads_b = [None] * n_layers
            delta = d_logits
            for layer in range(n_layers - 1, -1, -1):
                grads_w[layer] = activations[layer].T @ delta
                grads_b[layer] = delta.sum(axis=0)
                if layer > 0:
                    delta = delta @ out.weights[layer].T
                    if layer - 1 == 0 and mask is not None:
                        delta = delta * mask
                    delta = delta * (activations[layer] > 0.0)

            step += 1
            params = out.weights + out.biases
            grads = grads_w + grads_b
            for i, (p, g) in enumerate(zip(params, grads)):
                m[i] = beta1 * m[i] + (1 - beta1) * g
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                m_hat = m[i] / (1 - beta1**step)
                v_hat = v[i] / (1 - beta2**step)
                p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        out.loss_history.append(epoch_loss / n)
    return out


def penultimate_gradient(net: AcousticNet, features: np.ndarray,
                         d_penultimate: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient on the penultimate activations to the features."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    arch = net.architecture
    x = stack_context(features, arch.context_frames)
    activations, _ = _forward_pass(net, x)
    if d_penultimate.shape != activations[-1].shape:
        raise ValueError(
            f"penultimate gradient shape {d_penultimate.shape} != {activations[-1].shape}"
        )
    delta = np.asarray(d_penultimate, dtype=np.float64)
    for layer in range(len(net.weights) - 2, -1, -1):
        delta = delta * (activations[layer + 1] > 0.0)
        delta = delta @ net.weights[layer].T
    return unstack_context_gradient(delta, arch.context_frames, arch.input_dim)


def input_gradient(nets, features: np.ndarray, loss_fn):
    """Exact gradient of a penultimate-space loss with respect to the features.

    ``loss_fn`` maps the list of penultimate matrices (one per net) to
    (scalar loss, list of upstream gradients).  Returns (loss, dFeatures).
    """
    nets = list(nets)
    pens = [forward(net, features)[1] for net in nets]
    loss, d_pens = loss_fn(pens)
    grad = np.zeros_like(np.atleast_2d(features), dtype=np.float64)
    for net, d_pen in zip(nets, d_pens):
        if d_pen is not None:
            grad += penultimate_gradient(net, features, d_pen)
    return loss, grad


def dropout_rate_probe(arch: NetArchitecture, seed: int, draws: int = 10000) -> float:
    """Empirical zeroing rate of the training-time dropout mask stream."""
    p = arch.dropout_p
    rng = np.random.default_rng(seed)
    zeros = 0
    for _ in range(draws // 100):
        keep = rng.random((100, arch.hidden_sizes[0])) >= p
        zeros += int(np.count_nonzero(~keep))
    return zeros / ((draws // 100) * 100 * arch.hidden_sizes[0])


def save_checkpoint(path, net: AcousticNet) -> None:
    """Versioned npz container; round-trips parameters bit-exactly."""
    arch = net.architecture
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "seed": np.array(net.seed),
        "input_dim": np.array(arch.input_dim),
        "hidden_sizes": np.array(arch.hidden_sizes),
        "output_size": np.array(arch.output_size),
        "dropout_p": np.array(arch.dropout_p),
        "context_frames": np.array(arch.context_frames),
        "loss_history": np.array(net.loss_history),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path) -> AcousticNet:
    data = np.load(path)
    if int(data["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
    arch = NetArchitecture(
        input_dim=int(data["input_dim"]),
        hidden_sizes=tuple(int(h) for h in data["hidden_sizes"]),
        output_size=int(data["output_size"]),
        dropout_p=float(data["dropout_p"]),
        context_frames=int(data["context_frames"]),
    )
    n_layers = len(arch.hidden_sizes) + 1
    weights = [data[f"w{i}"] for i in range(n_layers)]
    biases = [data[f"b{i}"] for i in range(n_layers)]
    return AcousticNet(arch, weights, biases, int(data["seed"]),
                       list(data["loss_history"]))
