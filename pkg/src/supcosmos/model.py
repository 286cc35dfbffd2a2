"""Stacked tied-weight autoencoder with skips, a pseudo-metric and an MI head."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .losses import LossGrads
from .numeric import SeedLike, ShapeError, as_matrix, init_weights, make_rng


@dataclass
class CosmosModel:
    """Parameters of one supervised COSMOS autoencoder.

    ``dims`` lists the input dimension followed by each encoder layer width;
    ``weights[i]`` maps ``dims[i] -> dims[i+1]`` and decoding reuses its
    transpose. ``skips`` maps a source layer ``i`` (1-based hidden index) to
    the projection feeding layer ``i + 2``; ``None`` means identity.
    """
    dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dec_biases: list[np.ndarray]
    skips: dict[int, np.ndarray | None]
    M: np.ndarray
    omega: np.ndarray
    dropout_rate: float = 0.0
    use_skips: bool = True

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def code_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_classes(self) -> int:
        return self.omega.shape[1]

    def copy(self) -> "CosmosModel":
        return copy.deepcopy(self)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b, c) in enumerate(zip(self.weights, self.biases, self.dec_biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
            out[f"c{i}"] = c
        for i, p in self.skips.items():
            if p is not None:
                out[f"skip{i}"] = p
        out["M"] = self.M
        out["omega"] = self.omega
        return out


def skip_pairs(dims: list[int]) -> list[int]:
    """Hidden layers ``i`` that send a skip connection into layer ``i + 2``."""
    n_layers = len(dims) - 1
    return [i for i in range(1, n_layers - 1)]


def init_model(dims: list[int], n_classes: int, seed: SeedLike, dropout_rate: float = 0.0,
               use_skips: bool = True) -> CosmosModel:
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ShapeError(f"layer dims must have >= 2 positive entries, got {dims}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    base = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    weights = [init_weights(dims[i], dims[i + 1], (*base, 1, i)) for i in range(len(dims) - 1)]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    dec_biases = [np.zeros(dims[i]) for i in range(len(dims) - 1)]
    skips: dict[int, np.ndarray | None] = {}
    for i in skip_pairs(dims):
        if dims[i] == dims[i + 2]:
            skips[i] = None
        else:
            skips[i] = init_weights(dims[i], dims[i + 2], (*base, 2, i))
    omega = init_weights(dims[-1], n_classes, (*base, 3))
    return CosmosModel(dims, weights, biases, dec_biases, skips, np.eye(dims[0]), omega,
                       dropout_rate=dropout_rate, use_skips=use_skips)


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre: list[np.ndarray]          # encoder pre-activations a_1..a_L
    hidden: list[np.ndarray]       # h_0 = x, h_1..h_L after ReLU and dropout
    masks: list[np.ndarray | None]  # inverted-dropout multipliers for h_1..h_L
    dec_pre: list[np.ndarray]      # decoder pre-activations, index j reconstructs h_j
    dec_out: list[np.ndarray]      # decoder outputs z_j; z_0 is the reconstruction
    logits: np.ndarray
    class_probs: np.ndarray
    shapes: tuple = field(default=())

    @property
    def code(self) -> np.ndarray:
        return self.hidden[-1]

    @property
    def reconstruction(self) -> np.ndarray:
        return self.dec_out[0]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _skip_term(model: CosmosModel, i: int, h: np.ndarray) -> np.ndarray:
    proj = model.skips[i]
    return h if proj is None else h @ proj


def _param_shapes(model: CosmosModel) -> tuple:
    return tuple(w.shape for w in model.weights) + (model.M.shape, model.omega.shape)


def forward(model: CosmosModel, x, train: bool = False, seed: SeedLike | None = None,
            decoder_weights: list[np.ndarray] | None = None) -> ForwardTrace:
    """Encode, decode with tied transposes and classify the code.

    Dropout is active only when ``train`` is true and needs ``seed``.
    ``decoder_weights`` substitutes explicit decoder matrices (already
    transposed, ``dims[i+1] x dims[i]``); used to verify tying.
    """
    x = as_matrix(x)
    if x.shape[1] != model.dims[0]:
        raise ShapeError(f"input has {x.shape[1]} features, model expects {model.dims[0]}")
    if not 0.0 <= model.dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    use_dropout = train and model.dropout_rate > 0.0
    if use_dropout and seed is None:
        raise ValueError("train-mode dropout requires a seed")
    rng = make_rng(seed) if use_dropout else None
    keep = 1.0 - model.dropout_rate

    hidden = [x]
    pre: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    L = model.n_layers
    for i in range(L):
        a = hidden[i] @ model.weights[i] + model.biases[i]
        src = i - 1  # hidden layer feeding layer i+1 through a skip
        if model.use_skips and src >= 1 and src in model.skips:
            a = a + _skip_term(model, src, hidden[src])
        h = np.maximum(a, 0.0)
        if use_dropout:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        else:
            mask = None
        pre.append(a)
        masks.append(mask)
        hidden.append(h)

    dec_pre: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    dec_out: list[np.ndarray] = [None] * (L + 1)  # type: ignore[list-item]
    dec_out[L] = hidden[L]
    for j in range(L - 1, -1, -1):
        w_dec = model.weights[j].T if decoder_weights is None else decoder_weights[j]
        a = dec_out[j + 1] @ w_dec + model.dec_biases[j]
        dec_pre[j] = a
        dec_out[j] = a if j == 0 else np.maximum(a, 0.0)

    logits = hidden[L] @ model.omega
    return ForwardTrace(x, pre, hidden, masks, dec_pre, dec_out, logits, softmax(logits),
                        shapes=_param_shapes(model))


@dataclass
class ParamGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dec_biases: list[np.ndarray]
    skips: dict[int, np.ndarray]
    M: np.ndarray
    omega: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b, c) in enumerate(zip(self.weights, self.biases, self.dec_biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
            out[f"c{i}"] = c
        for i, p in self.skips.items():
            out[f"skip{i}"] = p
        out["M"] = self.M
        out["omega"] = self.omega
        return out


def backward(model: CosmosModel, trace: ForwardTrace, grads: LossGrads) -> ParamGrads:
    """Backpropagate loss gradients to every parameter group.

    Tied weights receive the sum of their encoder and decoder contributions.
    """
    if trace.shapes != _param_shapes(model):
        raise ShapeError("trace was produced by a model with different parameter shapes")
    L = model.n_layers
    g_w = [np.zeros_like(w) for w in model.weights]
    g_b = [np.zeros_like(b) for b in model.biases]
    g_c = [np.zeros_like(c) for c in model.dec_biases]
    g_skip = {i: np.zeros_like(p) for i, p in model.skips.items() if p is not None}
    g_M = np.zeros_like(model.M) if grads.M is None else np.array(grads.M, dtype=np.float64)
    if g_M.shape != model.M.shape:
        raise ShapeError(f"metric gradient {g_M.shape} does not match {model.M.shape}")

    g_xhat = as_matrix(grads.xhat)
    if g_xhat.shape != trace.reconstruction.shape:
        raise ShapeError(f"reconstruction gradient {g_xhat.shape} does not match trace")

    # decoder, from the reconstruction back to the code
    g_z = g_xhat
    for j in range(L):
        g_a = g_z if j == 0 else g_z * (trace.dec_pre[j] > 0)
        g_w[j] += g_a.T @ trace.dec_out[j + 1]
        g_c[j] += g_a.sum(axis=0)
        g_z = g_a @ model.weights[j]

    g_h: list[np.ndarray | None] = [None] * (L + 1)
    g_h[L] = g_z
    if grads.probs is not None:
        p = trace.class_probs
        g_p = as_matrix(grads.probs)
        g_logits = p * (g_p - np.sum(g_p * p, axis=1, keepdims=True))
        g_omega = trace.hidden[L].T @ g_logits
        g_h[L] = g_h[L] + g_logits @ model.omega.T
    else:
        g_omega = np.zeros_like(model.omega)

    # encoder, top layer first so skip contributions are accumulated in time
    for i in range(L, 0, -1):
        g = g_h[i]
        if g is None:
            g = np.zeros_like(trace.hidden[i])
        if trace.masks[i - 1] is not None:
            g = g * trace.masks[i - 1]
        g_a = g * (trace.pre[i - 1] > 0)
        g_w[i - 1] += trace.hidden[i - 1].T @ g_a
        g_b[i - 1] += g_a.sum(axis=0)
        if i - 1 >= 1:
            g_prev = g_a @ model.weights[i - 1].T
            g_h[i - 1] = g_prev if g_h[i - 1] is None else g_h[i - 1] + g_prev
        src = i - 2
        if model.use_skips and src >= 1 and src in model.skips:
            proj = model.skips[src]
            if proj is None:
                g_src = g_a
            else:
                g_skip[src] += trace.hidden[src].T @ g_a
                g_src = g_a @ proj.T
            g_h[src] = g_src if g_h[src] is None else g_h[src] + g_src
    return ParamGrads(g_w, g_b, g_c, g_skip, g_M, g_omega)


def regularizer(model: CosmosModel) -> tuple[float, list[np.ndarray]]:
    """Squared Frobenius norm of the encoder weights and its gradient."""
    value = float(sum(np.sum(w * w) for w in model.weights))
    return value, [2.0 * w for w in model.weights]


def extract_features(model: CosmosModel, x) -> np.ndarray:
    """Eval-mode code vectors, one row per sample."""
    return forward(model, x, train=False).code


def predict_classes(model: CosmosModel, x) -> np.ndarray:
    return np.argmax(forward(model, x, train=False).class_probs, axis=1)
