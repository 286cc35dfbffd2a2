"""Alternating minimization of encoder weights, pseudo-metric and MI head."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, TextIO

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import DataBatch
from .losses import COSINE_MODES, LossBreakdown, LossGrads, LossTerms, mutual_information, supervised_cosmos_loss
from .model import CosmosModel, ParamGrads, backward, forward, regularizer
from .numeric import AdamState, NonFiniteError, adam_step, make_rng

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, term: str, epoch: int | None = None):
        self.term = term
        self.epoch = epoch
        where = "" if epoch is None else f" at epoch {epoch}"
        super().__init__(f"non-finite {term}{where}")


@dataclass(frozen=True)
class Hyperparams:
    lambda1: float = 1.0
    lambda2: float = 1e-4
    lr_w: float = 1e-3
    lr_m: float = 1e-4
    lr_omega: float = 1e-2
    dropout_rate: float = 0.0
    max_iters: int = 50
    batch_size: int = 128
    convergence_tol: float = 1e-6
    patience: int = 10
    lambda_decay: float = 0.0
    cosine_mode: str = "standard"
    euclidean: bool = False
    mahalanobis: bool = True
    freeze_metric: bool = False
    metric_cap: float = 1e3
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda_decay < 0:
            raise ValueError("lambda1, lambda2 and lambda_decay must be nonnegative")
        if min(self.lr_w, self.lr_m, self.lr_omega) <= 0:
            raise ValueError("learning rates must be positive")
        if self.max_iters < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_iters >= 0, batch_size >= 1 and patience >= 1 required")
        if self.convergence_tol <= 0 or self.metric_cap <= 0:
            raise ValueError("convergence_tol and metric_cap must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.cosine_mode not in COSINE_MODES:
            raise ValueError(f"cosine_mode must be one of {COSINE_MODES}")
        if not (self.euclidean or self.mahalanobis or self.cosine_mode != "off"):
            raise ValueError("at least one reconstruction loss must be enabled")

    def terms(self, epoch: int = 0) -> LossTerms:
        l1, l2 = lambda_schedule(self, epoch)
        return LossTerms(euclidean=self.euclidean, cosine_mode=self.cosine_mode,
                         mahalanobis=self.mahalanobis, lambda1=l1, lambda2=l2)


def lambda_schedule(hyper: Hyperparams, epoch: int) -> tuple[float, float]:
    """Inverse-time decay of both regularization constants."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    scale = 1.0 / (1.0 + hyper.lambda_decay * epoch)
    return hyper.lambda1 * scale, hyper.lambda2 * scale


class Optimizers:
    """Adam state for every parameter of one model, grouped by training step."""

    def __init__(self, model: CosmosModel, hyper: Hyperparams):
        self.states: dict[str, AdamState] = {}
        for name, t in model.named_tensors().items():
            lr = hyper.lr_m if name == "M" else hyper.lr_omega if name == "omega" else hyper.lr_w
            self.states[name] = AdamState.zeros_like(t, lr=lr)

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        new, self.states[name] = adam_step(param, grad, self.states[name])
        return new


def _batch_loss(model: CosmosModel, x, y, terms: LossTerms, train: bool, seed=None):
    trace = forward(model, x, train=train, seed=seed)
    reg_value, reg_grads = regularizer(model) if terms.lambda2 > 0 else (0.0, None)
    breakdown, grads = supervised_cosmos_loss(
        x, trace.reconstruction, model.M if terms.mahalanobis else None,
        trace.class_probs, y, terms, reg=reg_value)
    return trace, breakdown, grads, reg_grads


def _check(breakdown: LossBreakdown, epoch: int | None) -> None:
    for name, value in breakdown.as_dict().items():
        if not np.isfinite(value):
            raise DivergenceError(name, epoch)


def step_weights(model: CosmosModel, opt: Optimizers, x, y, terms: LossTerms, seed) -> LossBreakdown:
    """Step 1: Adam update of encoder weights, biases and skips on the full objective."""
    trace, breakdown, grads, reg_grads = _batch_loss(model, x, y, terms, train=True, seed=seed)
    _check(breakdown, None)
    if terms.lambda1 == 0:
        grads = LossGrads(grads.xhat, grads.M, None)
    pg = backward(model, trace, grads)
    for i in range(model.n_layers):
        gw = pg.weights[i] if reg_grads is None else pg.weights[i] + terms.lambda2 * reg_grads[i]
        model.weights[i] = opt.step(f"W{i}", model.weights[i], gw)
        model.biases[i] = opt.step(f"b{i}", model.biases[i], pg.biases[i])
        model.dec_biases[i] = opt.step(f"c{i}", model.dec_biases[i], pg.dec_biases[i])
    if model.use_skips:
        for i, g in pg.skips.items():
            model.skips[i] = opt.step(f"skip{i}", model.skips[i], g)
    return breakdown


def cap_metric(M: np.ndarray, cap: float) -> np.ndarray:
    """Rescale each row to unit max-abs when any entry exceeds ``cap``."""
    if np.max(np.abs(M)) <= cap:
        return M
    row_max = np.max(np.abs(M), axis=1, keepdims=True)
    return M / np.where(row_max > 0, row_max, 1.0)


def step_metric(model: CosmosModel, opt: Optimizers, x, xhat, cap: float) -> None:
    """Step 2: Adam update of the pseudo-metric against the Mahalanobis term only."""
    d = x - xhat
    model.M = cap_metric(opt.step("M", model.M, d.T @ d), cap)


def step_classifier(model: CosmosModel, opt: Optimizers, code, y, lambda1: float) -> None:
    """Step 3: Adam update of the MI head against ``-lambda1 * MI`` only."""
    if lambda1 == 0:
        return
    logits = code @ model.omega
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    _, g_mi = mutual_information(p, y)
    g_p = -lambda1 * g_mi
    g_logits = p * (g_p - np.sum(g_p * p, axis=1, keepdims=True))
    model.omega = opt.step("omega", model.omega, code.T @ g_logits)


def batch_order(n: int, hyper: Hyperparams, epoch: int) -> list[np.ndarray]:
    perm = make_rng(hyper.seed, 101, epoch).permutation(n)
    return [perm[s:s + hyper.batch_size] for s in range(0, n, hyper.batch_size)]


def _evaluate(model: CosmosModel, data: DataBatch, hyper: Hyperparams, epoch: int) -> tuple[LossBreakdown, np.ndarray]:
    terms = hyper.terms(epoch)
    parts, probs = [], []
    for s in range(0, data.n, hyper.batch_size):
        trace, b, _, _ = _batch_loss(model, data.x[s:s + hyper.batch_size], data.y[s:s + hyper.batch_size],
                                     terms, train=False)
        parts.append(b)
        probs.append(trace.class_probs)
    return LossBreakdown.mean(parts), np.concatenate(probs)


def evaluate_breakdown(model: CosmosModel, data: DataBatch, hyper: Hyperparams, epoch: int = 0) -> LossBreakdown:
    """Eval-mode objective, averaged over contiguous chunks of ``batch_size``."""
    return _evaluate(model, data, hyper, epoch)[0]


def label_map(probs: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Assignment of head outputs to labels maximizing agreement.

    Mutual information is blind to how predicted classes are named, so the
    head's argmax must be matched to the labels before it can be scored.
    """
    counts = np.zeros((probs.shape[1], n_classes))
    np.add.at(counts, (np.argmax(probs, axis=1), labels), 1)
    rows, cols = linear_sum_assignment(-counts)
    mapping = np.arange(probs.shape[1])
    mapping[rows] = cols
    return mapping


def alt_min_epoch(model: CosmosModel, data: DataBatch, hyper: Hyperparams, epoch_index: int,
                  opt: Optimizers | None = None) -> tuple[CosmosModel, LossBreakdown]:
    """One pass over ``data``; each mini-batch runs steps 1, 2 and 3 in order.

    ``model`` is updated in place and returned along with the eval-mode
    breakdown of the updated model on ``data``.
    """
    breakdown, _ = _epoch(model, data, hyper, epoch_index, opt)
    return model, breakdown


def _epoch(model: CosmosModel, data: DataBatch, hyper: Hyperparams, epoch_index: int,
           opt: Optimizers | None) -> tuple[LossBreakdown, np.ndarray]:
    if data.x.shape[1] != model.dims[0]:
        raise ValueError(f"data has {data.x.shape[1]} features, model expects {model.dims[0]}")
    if opt is None:
        opt = Optimizers(model, hyper)
    terms = hyper.terms(epoch_index)
    update_metric = hyper.mahalanobis and not hyper.freeze_metric
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            for b, idx in enumerate(batch_order(data.n, hyper, epoch_index)):
                x, y = data.x[idx], data.y[idx]
                seed = (hyper.seed, 202, epoch_index, b)
                step_weights(model, opt, x, y, terms, seed)
                if update_metric or terms.lambda1 > 0:
                    trace = forward(model, x, train=True, seed=seed)
                    if update_metric:
                        step_metric(model, opt, x, trace.reconstruction, hyper.metric_cap)
                    step_classifier(model, opt, trace.code, y, terms.lambda1)
            breakdown, probs = _evaluate(model, data, hyper, epoch_index)
    except DivergenceError as err:
        raise DivergenceError(err.term, epoch_index) from None
    except (NonFiniteError, FloatingPointError) as err:
        raise DivergenceError(str(err), epoch_index) from None
    _check(breakdown, epoch_index)
    return breakdown, probs


def classifier_accuracy(model: CosmosModel, data: DataBatch, mapping: np.ndarray | None = None) -> float:
    """Accuracy of the MI head on ``data`` after relabeling its outputs with ``mapping``.

    Without a mapping the assignment is fitted on ``data`` itself.
    """
    if data.n == 0:
        return 0.0
    probs = forward(model, data.x, train=False).class_probs
    if mapping is None:
        mapping = label_map(probs, data.y, data.class_count)
    return float(np.mean(mapping[np.argmax(probs, axis=1)] == data.y))


@dataclass
class EpochRecord:
    epoch: int
    breakdown: LossBreakdown
    val_acc: float
    seconds: float = field(compare=False)

    def log_line(self, timing: bool = True) -> str:
        """One ``key=value`` line; ``timing=False`` drops wall-clock time for reproducible logs."""
        b = self.breakdown
        line = (f"epoch={self.epoch} euclidean={b.euclidean!r} cosine={b.cosine!r} "
                f"mahalanobis={b.mahalanobis!r} mi={b.mutual_info!r} reg={b.regularizer!r} "
                f"total={b.total!r} val_acc={self.val_acc!r}")
        return f"{line} seconds={self.seconds:.3f}" if timing else line


@dataclass
class TrainReport:
    history: list[EpochRecord]
    stop_reason: str
    hyper: Hyperparams
    best_epoch: int = -1
    best_val_acc: float = 0.0

    def totals(self) -> list[float]:
        return [r.breakdown.total for r in self.history]

    def to_dict(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "hyper": asdict(self.hyper),
            "history": [{"epoch": r.epoch, "val_acc": r.val_acc, **r.breakdown.as_dict()} for r in self.history],
        }


def train(model: CosmosModel, train_data: DataBatch, val_data: DataBatch | None, hyper: Hyperparams,
          log_stream: TextIO | None = None) -> tuple[CosmosModel, TrainReport]:
    """Run epochs until ``max_iters``, loss convergence or validation patience runs out.

    Models are ranked by label-matched validation accuracy of the MI head,
    ties broken by validation loss; with ``lambda1 == 0`` the head is never
    trained and only the loss counts. Patience resets whenever either
    quantity reaches a new best. Returns a copy of the best model, or the
    final model when no validation data is given.
    """
    if hyper.batch_size > train_data.n:
        hyper = replace(hyper, batch_size=train_data.n)
    has_val = val_data is not None and val_data.n > 0
    model = model.copy()
    opt = Optimizers(model, hyper)
    history: list[EpochRecord] = []
    best_model, best_score, best_epoch, best_acc = model, (-np.inf, -np.inf), -1, float("nan")
    top_acc, top_loss = -np.inf, np.inf
    stop_reason = "max_iters"
    flat_epochs = stale_epochs = 0
    for epoch in range(hyper.max_iters):
        t0 = time.perf_counter()
        breakdown, train_probs = _epoch(model, train_data, hyper, epoch, opt)
        val_acc, val_loss = float("nan"), breakdown.total
        if has_val:
            val_acc = classifier_accuracy(model, val_data, label_map(train_probs, train_data.y, train_data.class_count))
            val_loss = evaluate_breakdown(model, val_data, hyper, epoch).total
        score = (val_acc if has_val and hyper.lambda1 > 0 else 0.0, -val_loss)
        record = EpochRecord(epoch, breakdown, val_acc, time.perf_counter() - t0)
        history.append(record)
        if log_stream is not None:
            log_stream.write(record.log_line() + "\n")
        log.debug(record.log_line())

        if score > best_score:
            best_score, best_epoch, best_acc = score, epoch, val_acc
            if has_val:
                best_model = model.copy()
        if score[0] > top_acc or val_loss < top_loss:
            stale_epochs = 0
        else:
            stale_epochs += 1
        top_acc, top_loss = max(top_acc, score[0]), min(top_loss, val_loss)
        if len(history) > 1 and abs(history[-1].breakdown.total - history[-2].breakdown.total) < hyper.convergence_tol:
            flat_epochs += 1
        else:
            flat_epochs = 0
        if flat_epochs >= hyper.patience:
            stop_reason = "converged"
            break
        if has_val and stale_epochs >= hyper.patience:
            stop_reason = "early_stopping"
            break
    if not history:
        return model, TrainReport([], "max_iters", hyper)
    if not has_val:
        best_model, best_epoch = model, len(history) - 1
    return best_model, TrainReport(history, stop_reason, hyper, best_epoch, best_acc)


def grid_search_lambdas(model_factory: Callable[[Hyperparams], CosmosModel], train_data: DataBatch,
                        val_data: DataBatch, grid: Iterable[tuple[float, float]], budget_epochs: int,
                        base: Hyperparams | None = None) -> tuple[Hyperparams, list[tuple[float, float, float]]]:
    """Pick (lambda1, lambda2) by short-budget validation accuracy of the MI head.

    Diverging points score 0. Ties go to the smaller ``lambda1 + lambda2``,
    then to the earlier grid entry. Returns the chosen hyperparameters and
    the ``(lambda1, lambda2, accuracy)`` score list in grid order.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty lambda grid")
    base = base or Hyperparams()
    scores = []
    for l1, l2 in grid:
        hyper = replace(base, lambda1=float(l1), lambda2=float(l2), max_iters=budget_epochs)
        try:
            trained, _ = train(model_factory(hyper), train_data, None, hyper)
            probs = forward(trained, train_data.x).class_probs
            acc = classifier_accuracy(trained, val_data, label_map(probs, train_data.y, train_data.class_count))
        except (DivergenceError, FloatingPointError):
            acc = 0.0
        scores.append((float(l1), float(l2), acc))
    order = sorted(range(len(grid)), key=lambda k: (-scores[k][2], scores[k][0] + scores[k][1], k))
    l1, l2, _ = scores[order[0]]
    return replace(base, lambda1=l1, lambda2=l2), scores
