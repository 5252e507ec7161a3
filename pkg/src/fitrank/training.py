"""Training loop, evaluation metrics and the query-similarity diagnostic."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import TrainConfig
from .data import BatchStream, DataSplit
from .meta_query import TemperatureSchedule, query_similarity
from .model import FITModel
from .tensor_core import Adam, NonFiniteError, Tape
from .tensor_core import tensor as T

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# metrics


def bce_loss(logits, labels) -> float:
    """Mean sigmoid cross-entropy, computed in float64 log-sum-exp form."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks, so tied scores count 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)  # mean of 1-based ranks a+1..b
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(probs, labels) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def rela_impr(auc_measured: float, auc_base: float) -> float:
    """Relative AUC improvement above the 0.5 floor, in percent."""
    if auc_base == 0.5:
        raise ValueError("base AUC of exactly 0.5 leaves the improvement undefined")
    return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))


@dataclass
class EvalReport:
    auc: float
    logloss: float
    n_examples: int
    wall_time: float
    qs: float | None = None  # median query similarity, MQM models only
    rela_impr: float | None = None
    base: str | None = None

    def with_base(self, name: str, base_auc: float) -> "EvalReport":
        return EvalReport(self.auc, self.logloss, self.n_examples, self.wall_time, self.qs,
                          rela_impr(self.auc, base_auc), name)


# --------------------------------------------------------------------------
# evaluation


def predict(model: FITModel, stream: BatchStream, hard: bool = True, tau: float | None = None):
    """Logits and labels over a stream, eval-mode statistics, no tape."""
    tau = model.config.tau_floor if tau is None else tau
    scores, labels = [], []
    with model._inference():
        for batch in stream:
            logits, _ = model(batch, tau=tau, hard=hard)
            scores.append(logits.data.astype(np.float64))
            labels.append(batch.labels)
    if not scores:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(scores), np.concatenate(labels)


def query_similarities(model: FITModel, stream: BatchStream, tau: float) -> np.ndarray:
    """QS = cos(soft query at ``tau``, hard query) for every candidate of the stream."""
    if model.mqm is None:
        return np.zeros(0)
    out = []
    with model._inference():
        for batch in stream:
            e_c = model.item_input(batch.cand[:, 0], batch.cand[:, 1])
            soft, *_ = model.mqm(e_c, tau, hard=False)
            hard, *_ = model.mqm(e_c, model.config.tau_floor, hard=True)
            out.append(np.atleast_1d(query_similarity(soft.data, hard.data)))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: FITModel, stream: BatchStream, hard: bool = True, qs_tau: float | None = None) -> EvalReport:
    t0 = time.perf_counter()
    scores, labels = predict(model, stream, hard=hard)
    if len(scores) == 0:
        raise ValueError("cannot evaluate an empty stream")
    qs = None
    if model.mqm is not None:
        tau = model.config.tau_floor if qs_tau is None else qs_tau
        qs = float(np.median(query_similarities(model, stream, tau)))
    return EvalReport(auc(scores, labels), logloss(sigmoid(scores), labels), len(scores),
                      time.perf_counter() - t0, qs)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    step: int
    tau: float
    loss: float
    val_auc: float
    val_logloss: float
    qs: float | None
    seconds: float


@dataclass
class TrainResult:
    model: FITModel
    history: list = field(default_factory=list)  # EpochRecord per epoch
    losses: list = field(default_factory=list)  # per optimizer step
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    steps: int = 0

    def history_rows(self) -> list[dict]:
        return [asdict(r) for r in self.history]


def _snapshot(model: FITModel) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state().items()}


def _restore(model: FITModel, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for name, value in state.items():
        if name.startswith("buffer:"):
            model.set_buffer(name[len("buffer:"):], value)
        else:
            params[name].data = value.copy()


def train_step(model: FITModel, opt: Adam, batch, tau: float) -> float:
    """One soft-query forward, backward and Adam update; returns the batch loss."""
    opt.zero_grad()
    with Tape() as tape:
        logits, _ = model(batch, tau=tau, hard=False)
        loss = T.bce_with_logits(logits, batch.labels)
    tape.backward(loss)
    opt.step()
    return float(loss.data)


def train(config: TrainConfig, data: DataSplit, epoch_callback=None, max_steps: int | None = None) -> TrainResult:
    """Fit a model, keeping the parameters of the best validation-AUC epoch.

    The temperature advances once per optimizer step.  ``epoch_callback``
    receives each :class:`EpochRecord` as soon as it is available.
    """
    config.validate()
    with T.deterministic(config.deterministic):
        model = FITModel(config)
        opt = Adam(model.parameters(), lr=config.lr)
        threshold = config.tau_threshold or max(len(data.train), 1)
        schedule = TemperatureSchedule(threshold, config.tau_floor)
        result = TrainResult(model)
        best_state = None
        stale = 0
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            model.train()
            epoch_losses = []
            for batch in data.train.epoch(epoch):
                tau = schedule.tau
                try:
                    loss = train_step(model, opt, batch, tau)
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite value at epoch {epoch}, step {schedule.step} (tau={tau:.4g}): {exc}"
                    ) from exc
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {schedule.step}")
                epoch_losses.append(loss)
                result.losses.append(loss)
                schedule.advance()
                if max_steps is not None and schedule.step >= max_steps:
                    break
            report = evaluate(model, data.val, hard=True, qs_tau=schedule.tau)
            rec = EpochRecord(epoch, schedule.step, schedule.tau, float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                              report.auc, report.logloss, report.qs, time.perf_counter() - t0)
            result.history.append(rec)
            log.info("epoch %d step %d tau %.4f loss %.5f val_auc %.5f", epoch, rec.step, rec.tau,
                     rec.loss, rec.val_auc)
            if epoch_callback is not None:
                epoch_callback(rec)
            if best_state is None or report.auc > result.best_val_auc:
                result.best_val_auc = report.auc
                result.best_epoch = epoch
                best_state = _snapshot(model)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
            if max_steps is not None and schedule.step >= max_steps:
                break
        result.steps = schedule.step
        if best_state is not None:
            _restore(model, best_state)
        model.eval()
    return result
