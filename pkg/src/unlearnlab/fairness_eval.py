"""Accuracy, group fairness gaps, membership inference, and input-gradient
diagnostics.

Group metrics operate on binary prediction and group vectors. Multi-class
scenarios are binarized upstream (one-vs-rest on the scenario's designated
positive class). The membership attack is the loss-threshold attacker: score
every sample by its negative loss and rank members against nonmembers; the
reported AUC is the exact pairwise (Mann-Whitney) statistic with ties
credited one half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import biasgen as bg
from . import model as md


@dataclass
class EvalReport:
    """Per-model evaluation row, plus drop percentages when a baseline is known."""

    fa: float
    ra: float
    ta: float
    dp_gap: float
    eo_gap: float
    mia_auc: float
    wall_time_seconds: float = 0.0
    time_units: float = 0.0
    dp_drop_pct: float | None = None
    eo_drop_pct: float | None = None


def accuracy(model: md.ModelParams, samples: list[bg.Sample]) -> float:
    if not samples:
        raise ValueError("accuracy: empty sample list")
    X, y, _, _ = bg.stack(samples)
    return float((md.predict(model, X) == y).mean())


def _binary(vec, name: str) -> np.ndarray:
    arr = np.asarray(vec)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d vector")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(np.int64)


def demographic_parity_gap(predictions, groups) -> float:
    """|P(yhat=1 | g=0) - P(yhat=1 | g=1)|."""
    preds = _binary(predictions, "predictions")
    grp = _binary(groups, "groups")
    if preds.shape != grp.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {grp.shape}")
    if not (grp == 0).any() or not (grp == 1).any():
        raise ValueError("both groups must be present")
    return abs(float(preds[grp == 0].mean()) - float(preds[grp == 1].mean()))


def equalized_odds_gap(predictions, labels, groups, on_missing: str = "raise") -> float:
    """max(|TPR_0 - TPR_1|, |FPR_0 - FPR_1|) over binary groups.

    A (group, label-class) cell with no samples makes a rate undefined. With
    on_missing="raise" that is an error naming the offending cell. With
    "available", the max runs over the computable rate differences only, and
    when neither is computable (each group carries a single, different label
    class) the positive-rate gap is returned, which is what the fully
    degenerate group==label construction collapses to.
    """
    preds = _binary(predictions, "predictions")
    y = _binary(labels, "labels")
    grp = _binary(groups, "groups")
    if not (preds.shape == y.shape == grp.shape):
        raise ValueError("predictions, labels, groups must share length")
    if not (grp == 0).any() or not (grp == 1).any():
        raise ValueError("both groups must be present")
    if on_missing not in ("raise", "available"):
        raise ValueError(f"unknown on_missing policy {on_missing!r}")

    diffs = []
    for label_class in (1, 0):
        rates = []
        for g in (0, 1):
            cell = preds[(grp == g) & (y == label_class)]
            if cell.size == 0:
                if on_missing == "raise":
                    raise ValueError(f"group {g} has no samples with label {label_class}")
                rates = None
                break
            rates.append(float(cell.mean()))
        if rates is not None:
            diffs.append(abs(rates[0] - rates[1]))
    if not diffs:
        return demographic_parity_gap(preds, grp)
    return max(diffs)


def fairness_drop_pct(baseline_gap: float, unlearned_gap: float) -> float:
    """100 * (1 - unlearned/baseline); negative when the gap regressed."""
    if baseline_gap == 0.0:
        raise ValueError("baseline gap is zero; relative drop undefined")
    if baseline_gap < 0.0 or unlearned_gap < 0.0:
        raise ValueError("gaps must be non-negative")
    return 100.0 * (1.0 - unlearned_gap / baseline_gap)


def auc_from_scores(member_scores: np.ndarray, nonmember_scores: np.ndarray) -> float:
    """Exact pairwise P(member > nonmember) + 0.5 P(tie)."""
    m = np.asarray(member_scores, dtype=np.float64)
    n = np.asarray(nonmember_scores, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise ValueError("both score sets must be non-empty")
    ns = np.sort(n)
    below = np.searchsorted(ns, m, side="left")
    below_or_eq = np.searchsorted(ns, m, side="right")
    wins = below.sum() + 0.5 * (below_or_eq - below).sum()
    return float(wins) / (m.size * n.size)


def mia_auc(model: md.ModelParams, members: list[bg.Sample], nonmembers: list[bg.Sample]) -> float:
    """Loss-threshold membership attack: lower loss reads as "was trained on"."""
    if not members or not nonmembers:
        raise ValueError("mia_auc: empty member or nonmember set")
    Xm, ym, _, _ = bg.stack(members)
    Xn, yn, _, _ = bg.stack(nonmembers)
    return auc_from_scores(
        -md.per_sample_loss(model, Xm, ym), -md.per_sample_loss(model, Xn, yn)
    )


# ---------------------------------------------------------------------------
# Input-gradient diagnostics.
# ---------------------------------------------------------------------------

def _winning_logit_input_grads(model: md.ModelParams, X: np.ndarray) -> np.ndarray:
    """d(max logit)/d(input) per row, via one batched backward pass.

    Rows are independent through the network, so summing each row's winning
    logit gives per-row input gradients in a single graph.
    """
    X = np.asarray(X, dtype=np.float64)
    leaf = ad.tensor(X)
    logits = md.forward_stack(md.effective_weights(model), leaf)
    z = logits.data
    pick = np.zeros_like(z)
    if model.head == "sigmoid":
        pick[:, 0] = 1.0
    else:
        pick[np.arange(z.shape[0]), z.argmax(axis=1)] = 1.0
    selected = ad.sum_all(ad.mul(logits, ad.tensor(pick)))
    (g,) = ad.grad(selected, [leaf])
    return g.data


def bias_gradient_ratio(model: md.ModelParams, samples: list[bg.Sample], d_s: int) -> float:
    """Mean over samples of ||d f / d b|| / (||d f / d s|| + 1e-12), f = winning logit."""
    if not samples:
        raise ValueError("bias_gradient_ratio: empty sample list")
    X = bg.stack(samples)[0]
    grads = _winning_logit_input_grads(model, X)
    s_norm = np.linalg.norm(grads[:, :d_s], axis=1)
    b_norm = np.linalg.norm(grads[:, d_s:], axis=1)
    return float(np.mean(b_norm / (s_norm + 1e-12)))


def saliency(model: md.ModelParams, sample: bg.Sample) -> np.ndarray:
    """Per-feature |d(winning logit)/d x|, scaled to unit maximum."""
    grads = np.abs(_winning_logit_input_grads(model, sample.x[None, :])[0])
    top = grads.max()
    if top == 0.0:
        return grads
    return grads / top


# ---------------------------------------------------------------------------
# Scenario-level evaluation.
# ---------------------------------------------------------------------------

def binarize_predictions(bundle: bg.DataBundle, preds: np.ndarray) -> np.ndarray:
    """Map raw predicted classes to the scenario's positive-class indicator."""
    if bundle.kind == "patch":
        return (preds == bundle.meta["target_class"]).astype(np.int64)
    if bundle.kind == "attribute":
        return preds.astype(np.int64)
    if bundle.kind == "pose":
        return np.isin(preds, bundle.meta["favored_classes"]).astype(np.int64)
    raise ValueError(f"unknown bundle kind {bundle.kind!r}")


def binarize_labels(bundle: bg.DataBundle, labels: np.ndarray) -> np.ndarray:
    return binarize_predictions(bundle, labels)


def binarize_groups(bundle: bg.DataBundle, groups: np.ndarray) -> np.ndarray:
    """Pose groups are bins {0,1,2}; the sensitive attribute is top-bin membership."""
    if bundle.kind == "pose":
        return (groups == 2).astype(np.int64)
    return groups.astype(np.int64)


def evaluate_model(
    model: md.ModelParams,
    bundle: bg.DataBundle,
    wall_time_seconds: float = 0.0,
    time_units: float = 0.0,
    baseline: EvalReport | None = None,
) -> EvalReport:
    """FA on D_f, RA on D_r, TA on test, DP/EO/MIA on the scenario's terms.

    The patch scenario's flagged group never carries negative labels, so its
    EO uses the available-components policy; the other scenarios populate
    every cell and use the strict one.
    """
    forget = bg.forget_samples(bundle)
    retain = bg.retain_samples(bundle)
    fa = accuracy(model, forget) if forget else float("nan")
    ra = accuracy(model, retain)
    ta = accuracy(model, bundle.test)

    X, y, groups, _ = bg.stack(bundle.test)
    preds = md.predict(model, X)
    bin_preds = binarize_predictions(bundle, preds)
    bin_labels = binarize_labels(bundle, y)
    bin_groups = binarize_groups(bundle, groups)
    dp = demographic_parity_gap(bin_preds, bin_groups)
    policy = "available" if bundle.kind == "patch" else "raise"
    eo = equalized_odds_gap(bin_preds, bin_labels, bin_groups, on_missing=policy)

    mia = mia_auc(model, forget, bundle.test) if forget else float("nan")

    report = EvalReport(
        fa=fa, ra=ra, ta=ta, dp_gap=dp, eo_gap=eo, mia_auc=mia,
        wall_time_seconds=wall_time_seconds, time_units=time_units,
    )
    if baseline is not None:
        # A gapless baseline leaves the relative drop undefined; NaN marks it.
        report.dp_drop_pct = (fairness_drop_pct(baseline.dp_gap, dp)
                              if baseline.dp_gap > 0 else float("nan"))
        report.eo_drop_pct = (fairness_drop_pct(baseline.eo_gap, eo)
                              if baseline.eo_gap > 0 else float("nan"))
    return report
