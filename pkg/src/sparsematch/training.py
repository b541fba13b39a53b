"""Ground-truth labels, the hybrid loss, Adam, and the training loop.

Labeling follows the reprojection rules: a keypoint is non-repeatable
when its reprojection lands more than 10 px from every keypoint in the
other image; a pair is a ground-truth match when the two are mutually
nearest after reprojection and both reprojection distances are under
3 px.  Keypoints in neither set (the 3-10 px band) carry a positive
matchability label but no match.

The loss combines the assignment log-likelihood over matches and
dustbins with a per-unit binary cross entropy on the matchability
scores, weighted by lambda.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ContractError, ShapeError
from .layers import iter_parameters
from .matching import assignment_result
from .model import (Matcher, MatcherConfig, MatcherParams, PairForward,
                    forward_pair, init_matcher_params)

MATCH_DISTANCE_PX = 3.0
NON_REPEATABLE_DISTANCE_PX = 10.0
BCE_EPS = 1e-7
P_FLOOR = 1e-30  # keeps log(P) finite if float32 probabilities underflow


@dataclass
class GroundTruthLabels:
    matches: np.ndarray  # C x 2 index pairs (i into A, j into B)
    non_repeatable_a: np.ndarray
    non_repeatable_b: np.ndarray
    num_a: int
    num_b: int

    def binary_a(self) -> np.ndarray:
        lbl = np.ones(self.num_a)
        lbl[self.non_repeatable_a] = 0.0
        return lbl

    def binary_b(self) -> np.ndarray:
        lbl = np.ones(self.num_b)
        lbl[self.non_repeatable_b] = 0.0
        return lbl


def make_labels(proj_a_to_b: np.ndarray, proj_b_to_a: np.ndarray,
                kps_a, kps_b) -> GroundTruthLabels:
    """Derive match / non-repeatable labels from exact cross-projections."""
    pos_a = np.asarray(kps_a.positions, dtype=np.float64)
    pos_b = np.asarray(kps_b.positions, dtype=np.float64)
    pab = np.asarray(proj_a_to_b, dtype=np.float64)
    pba = np.asarray(proj_b_to_a, dtype=np.float64)
    m, n = len(pos_a), len(pos_b)

    d_ab = np.sqrt(((pab[:, None, :] - pos_b[None, :, :]) ** 2).sum(axis=2))  # m x n
    d_ba = np.sqrt(((pba[:, None, :] - pos_a[None, :, :]) ** 2).sum(axis=2))  # n x m

    non_rep_a = np.flatnonzero(d_ab.min(axis=1) > NON_REPEATABLE_DISTANCE_PX)
    non_rep_b = np.flatnonzero(d_ba.min(axis=1) > NON_REPEATABLE_DISTANCE_PX)

    nn_of_a = d_ab.argmin(axis=1)  # nearest B keypoint to each reprojected A
    nn_of_b = d_ba.argmin(axis=1)  # nearest A keypoint to each reprojected B
    matches = [(i, j) for i, j in enumerate(nn_of_a)
               if nn_of_b[j] == i
               and d_ab[i, j] < MATCH_DISTANCE_PX
               and d_ba[j, i] < MATCH_DISTANCE_PX]
    matches_arr = np.array(matches, dtype=np.int64).reshape(-1, 2)
    return GroundTruthLabels(matches_arr, non_rep_a, non_rep_b, m, n)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def matching_loss(p_hat: Tensor, labels: GroundTruthLabels) -> Tensor:
    """Negative log-likelihood of matches and dustbin assignments.

    Mean -log P over ground-truth match cells, plus half the mean
    -log P over each non-repeatable set's dustbin cells; an empty
    non-repeatable set simply drops its term.
    """
    if len(labels.matches) == 0:
        raise ContractError("matching_loss needs at least one ground-truth match")
    mp1, np1 = p_hat.shape
    if mp1 != labels.num_a + 1 or np1 != labels.num_b + 1:
        raise ShapeError(f"assignment {p_hat.shape} does not fit "
                         f"{labels.num_a}x{labels.num_b} keypoints")
    weights = np.zeros((mp1, np1), dtype=p_hat.data.dtype)
    mi, mj = labels.matches[:, 0], labels.matches[:, 1]
    weights[mi, mj] = 1.0 / len(labels.matches)
    if len(labels.non_repeatable_a):
        weights[labels.non_repeatable_a, np1 - 1] = 0.5 / len(labels.non_repeatable_a)
    if len(labels.non_repeatable_b):
        weights[mp1 - 1, labels.non_repeatable_b] = 0.5 / len(labels.non_repeatable_b)
    log_p = ad.log(ad.clamp(p_hat, lo=P_FLOOR))
    weight_t = Tensor(weights, dtype=p_hat.data.dtype)
    return ad.scale(ad.tsum(ad.mul(weight_t, log_p)), -1.0)


def _bce_sum(gamma: Tensor, target: np.ndarray) -> Tensor:
    t = Tensor(np.asarray(target).reshape(-1, 1), dtype=gamma.data.dtype)
    one = Tensor.ones(gamma.rows, 1, dtype=gamma.data.dtype)
    g = ad.clamp(gamma, BCE_EPS, 1.0 - BCE_EPS)
    pos = ad.mul(t, ad.log(g))
    neg = ad.mul(ad.sub(one, t), ad.log(ad.sub(one, g)))
    return ad.scale(ad.tsum(ad.add(pos, neg)), -1.0)


def classification_loss(gamma_a: Tensor, gamma_b: Tensor,
                        labels: GroundTruthLabels,
                        class_balanced: bool = False) -> Tensor:
    """Mean binary cross entropy of the scores, both images pooled.

    ``class_balanced`` reweights so matchable and non-repeatable
    keypoints contribute equally (off by default).
    """
    if gamma_a.rows != labels.num_a or gamma_b.rows != labels.num_b:
        raise ShapeError(f"scores ({gamma_a.rows}, {gamma_b.rows}) do not match "
                         f"labels ({labels.num_a}, {labels.num_b})")
    la, lb = labels.binary_a(), labels.binary_b()
    if not class_balanced:
        total = _bce_sum(gamma_a, la) + _bce_sum(gamma_b, lb)
        return ad.scale(total, 1.0 / (labels.num_a + labels.num_b))
    pooled = np.concatenate([la, lb])
    n_pos = max(pooled.sum(), 1.0)
    n_neg = max(len(pooled) - pooled.sum(), 1.0)

    def balanced(gamma, lbl):
        col = lbl.reshape(-1, 1)
        pos_w = Tensor(col * (0.5 / n_pos))
        neg_w = Tensor((1 - col) * (0.5 / n_neg))
        g = ad.clamp(gamma, BCE_EPS, 1.0 - BCE_EPS)
        one = Tensor.ones(gamma.rows, 1, dtype=gamma.data.dtype)
        return ad.scale(ad.add(ad.tsum(ad.mul(pos_w, ad.log(g))),
                               ad.tsum(ad.mul(neg_w, ad.log(ad.sub(one, g))))), -1.0)

    return ad.add(balanced(gamma_a, la), balanced(gamma_b, lb))


def total_loss(match_loss: Tensor, cls_losses: list[Tensor], lam: float,
               expected_units: int) -> Tensor:
    """Hybrid objective: matching loss plus lambda times the per-unit
    classification losses (one per sampling unit)."""
    if len(cls_losses) != expected_units:
        raise ContractError(f"expected {expected_units} classification losses, "
                            f"got {len(cls_losses)}")
    out = match_loss
    for cls in cls_losses:
        out = ad.add(out, ad.scale(cls, lam))
    return out


def pair_loss(fwd: PairForward, labels: GroundTruthLabels, lam: float,
              class_balanced: bool = False) -> tuple[Tensor, float, float]:
    """Total loss for one forward pass; returns (loss, match, cls) values."""
    m_loss = matching_loss(fwd.p_hat, labels)
    cls_losses = [classification_loss(ga, gb, labels, class_balanced)
                  for ga, gb in fwd.gammas]
    tot = total_loss(m_loss, cls_losses, lam, len(fwd.gammas))
    cls_value = float(sum(c.item() for c in cls_losses))
    return tot, m_loss.item(), cls_value


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState, lr: float) -> None:
    """Standard Adam update with bias correction; zeroes grads afterwards."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        g = p.grad
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
        p.zero_grad()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    dim: int = 32
    heads: int = 4
    init_layers: int = 1
    unit_layers: int = 2
    k: int = 16
    lam: float = 5.0
    learning_rate: float = 1e-4
    batch_size: int = 1
    iterations: int = 2000
    sinkhorn_iters: int = 100
    seed: int = 0
    eval_every: int = 200
    min_gt_matches: int = 10
    lr_decay: float = 0.0  # per-iteration multiplicative decay; 0 disables
    class_balanced_cls: bool = False
    variant: str = "full"
    match_threshold: float = 0.2
    # stop once a target precision is reached during periodic evaluation
    target_precision: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.init_layers < 1 or self.unit_layers < 1:
            raise ValueError("layer counts must be >= 1")

    def matcher_config(self) -> MatcherConfig:
        return MatcherConfig(
            dim=self.dim, heads=self.heads, init_layers=self.init_layers,
            unit_layers=self.unit_layers, k=self.k,
            sinkhorn_iters=self.sinkhorn_iters,
            match_threshold=self.match_threshold,
        ).with_variant(self.variant)

    @staticmethod
    def paper_scale() -> "TrainConfig":
        return TrainConfig(dim=128, heads=4, init_layers=3, unit_layers=6,
                           k=128, batch_size=16, lam=5.0, learning_rate=1e-4,
                           min_gt_matches=50)


@dataclass
class MetricsRow:
    iteration: int
    match_loss: float
    cls_loss: float
    total: float
    precision: float | None = None
    matching_score: float | None = None


@dataclass
class EvalReport:
    precision: float | None  # None when nothing was predicted
    matching_score: float
    predictor_precision: float | None
    predictor_recall: float | None
    num_predicted: int
    num_correct: int


def match_metrics(matches, labels: GroundTruthLabels) -> tuple[int, int, float]:
    """(num_predicted, num_correct, matching_score) for one pair."""
    gt = {(int(i), int(j)) for i, j in labels.matches}
    correct = sum((m.index_a, m.index_b) in gt for m in matches)
    score = correct / ((labels.num_a + labels.num_b) / 2)
    return len(matches), correct, score


def predictor_counts(gamma_a: np.ndarray, gamma_b: np.ndarray,
                     labels: GroundTruthLabels,
                     threshold: float = 0.5) -> tuple[int, int, int]:
    """(true_pos, predicted_pos, actual_pos) pooled over both images."""
    pred = np.concatenate([gamma_a.reshape(-1), gamma_b.reshape(-1)]) > threshold
    actual = np.concatenate([labels.binary_a(), labels.binary_b()]) > 0.5
    tp = int(np.sum(pred & actual))
    return tp, int(pred.sum()), int(actual.sum())


def evaluate(matcher: Matcher, pairs, rng_seed: int = 0) -> EvalReport:
    """Match quality and predictor quality over labeled pairs."""
    total_pred = total_correct = 0
    scores = []
    tp = pp = ap = 0
    for pair in pairs:
        with ad.no_grad():
            rng = (np.random.default_rng(rng_seed)
                   if matcher.config.random_sampling else None)
            fwd = matcher.forward(pair.kps_a, pair.kps_b, rng=rng)
        res = assignment_result(fwd.p_hat.data, matcher.config.match_threshold)
        n_pred, n_corr, score = match_metrics(res.matches, pair.labels)
        total_pred += n_pred
        total_correct += n_corr
        scores.append(score)
        ga, gb = fwd.gammas[-1]
        t, p, a = predictor_counts(ga.data, gb.data, pair.labels)
        tp, pp, ap = tp + t, pp + p, ap + a
    return EvalReport(
        precision=(total_correct / total_pred) if total_pred else None,
        matching_score=float(np.mean(scores)) if scores else 0.0,
        predictor_precision=(tp / pp) if pp else None,
        predictor_recall=(tp / ap) if ap else None,
        num_predicted=total_pred,
        num_correct=total_correct,
    )


def train(config: TrainConfig, dataset) -> tuple[Matcher, list[MetricsRow]]:
    """Deterministic training loop with gradient accumulation per batch.

    Pairs with fewer ground-truth matches than the configured minimum
    are filtered out up front.  Aborts with a diagnostic naming the
    first non-finite tensor if the loss goes NaN.
    """
    pairs = [p for p in dataset if len(p.labels.matches) >= config.min_gt_matches]
    if not pairs:
        raise ValueError("no training pairs pass the ground-truth-match filter")
    cfg = config.matcher_config()
    rng = np.random.default_rng(config.seed)
    params = init_matcher_params(cfg, rng)
    matcher = Matcher(cfg, params)
    plist = [p for _, p in iter_parameters(params)]
    state = AdamState()
    lr = config.learning_rate
    sample_rng = np.random.default_rng(config.seed + 1)

    metrics: list[MetricsRow] = []
    for it in range(config.iterations):
        batch_match = batch_cls = batch_total = 0.0
        for b in range(config.batch_size):
            pair = pairs[(it * config.batch_size + b) % len(pairs)]
            fwd = forward_pair(params, cfg, pair.kps_a, pair.kps_b, rng=sample_rng)
            loss, m_val, c_val = pair_loss(fwd, pair.labels, config.lam,
                                           config.class_balanced_cls)
            loss = ad.scale(loss, 1.0 / config.batch_size)
            if not math.isfinite(loss.item()):
                bad = ad.find_first_nonfinite(loss)
                where = f"op '{bad.op}' of shape {bad.shape}" if bad is not None else "loss"
                raise RuntimeError(
                    f"non-finite loss at iteration {it}: first bad tensor is {where}")
            ad.backward(loss)
            batch_match += m_val / config.batch_size
            batch_cls += c_val / config.batch_size
            batch_total += loss.item()
        adam_step(plist, state, lr)
        if config.lr_decay:
            lr *= config.lr_decay
        row = MetricsRow(it, batch_match, batch_cls, batch_total)
        if config.eval_every and (it + 1) % config.eval_every == 0:
            report = evaluate(matcher, pairs)
            row.precision = report.precision
            row.matching_score = report.matching_score
            if (config.target_precision is not None
                    and report.precision is not None
                    and report.precision >= config.target_precision):
                metrics.append(row)
                break
        metrics.append(row)
    return matcher, metrics


def write_metrics_csv(path, metrics: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "match_loss", "cls_loss", "total",
                         "precision", "matching_score"])
        for row in metrics:
            writer.writerow([
                row.iteration,
                f"{row.match_loss:.6f}",
                f"{row.cls_loss:.6f}",
                f"{row.total:.6f}",
                "" if row.precision is None else f"{row.precision:.6f}",
                "" if row.matching_score is None else f"{row.matching_score:.6f}",
            ])
