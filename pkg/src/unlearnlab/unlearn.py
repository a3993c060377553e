"""Unlearning strategies: retraining, gradient ascent, low-rank adapters,
teacher-student distillation, and a one-step Newton update on counterfactual
data, plus influence scores for ranking sample contributions.

Every strategy takes the baseline model as an immutable input and returns a
fresh parameter set with a per-step loss trace. Compute is accounted in
deterministic cost units: a backward pass over a batch of n samples costs n,
a Hessian-vector product costs 2n (it is a double backward). Reports built
from these units are identical across reruns, unlike wall-clock times, which
are recorded separately.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import biasgen as bg
from . import model as md

STRATEGIES = ("hard", "gradient_ascent", "lora", "scrub", "fmd")

# Gradient ascent stops once the forget loss passes this ceiling; beyond it
# the iterates are headed for overflow, not useful forgetting.
FORGET_LOSS_CEILING = 50.0

# SCRUB's forget-divergence term stops contributing gradient once the batch
# KL exceeds this, preventing runaway drift away from the teacher.
FORGET_KL_CLIP = 10.0


@dataclass
class StrategyConfig:
    strategy: str
    eta: float = 1e-3
    alpha: float = 1.0
    beta: float = 1.0
    rank: int = 8
    steps: int = 50
    damping: float = 1e-2
    seed: int = 0
    finetune_steps: int = 0
    hessian_scope: str = "head"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.hessian_scope not in ("head", "all"):
            raise ValueError(f"hessian_scope must be 'head' or 'all', got {self.hessian_scope!r}")


@dataclass
class UnlearnResult:
    model: md.ModelParams
    wall_time_seconds: float
    step_log: list[dict]
    cost_units: float = 0.0
    truncated: bool = False
    extra: dict = field(default_factory=dict)


def _mean_loss(model: md.ModelParams, samples: list[bg.Sample]) -> float:
    if not samples:
        return float("nan")
    X, y, _, _ = bg.stack(samples)
    return float(np.mean(md.per_sample_loss(model, X, y)))


def loss_closure(model: md.ModelParams, samples: list[bg.Sample], scope: str = "all"):
    """(theta0, fn) where fn maps a flat parameter tensor to the mean loss.

    The flat layout is the model module's flat_param_closure layout; with
    scope "head" the body activations are frozen at the model's current
    weights and only the last layer is a function of the flat vector.
    """
    if not samples:
        raise ValueError("loss_closure: empty sample list")
    X, y, _, _ = bg.stack(samples)
    theta0, rebuild = md.flat_param_closure(model, scope)
    inputs = md.body_features(model, X) if scope == "head" else X
    head = model.head

    def fn(flat: ad.Tensor) -> ad.Tensor:
        logits = md.forward_stack(rebuild(flat), inputs)
        return md.loss_from_logits(logits, y, head)

    return theta0, fn


# ---------------------------------------------------------------------------
# Hard unlearning: the gold model.
# ---------------------------------------------------------------------------

def hard_unlearn(
    bundle: bg.DataBundle,
    train_config: md.TrainConfig,
    layer_sizes: list[int],
    head: str = "softmax",
) -> UnlearnResult:
    """Fresh-initialized model trained on D_r only; the retraining oracle."""
    retain = bg.retain_samples(bundle)
    if not retain:
        raise ValueError("hard_unlearn: empty retain set")
    X, y, _, _ = bg.stack(retain)
    model = md.init_model(layer_sizes, head, train_config.seed)
    _, seconds = md.train(model, (X, y), train_config)
    log = [{
        "step": 0,
        "forget_loss": _mean_loss(model, bg.forget_samples(bundle)),
        "retain_loss": _mean_loss(model, retain),
    }]
    return UnlearnResult(
        model=model, wall_time_seconds=seconds, step_log=log,
        cost_units=float(train_config.epochs * len(retain)),
    )


# ---------------------------------------------------------------------------
# Gradient ascent.
# ---------------------------------------------------------------------------

def gradient_ascent(
    model: md.ModelParams, bundle: bg.DataBundle, cfg: StrategyConfig
) -> UnlearnResult:
    """theta <- theta + eta * grad(L(D_f) - alpha * L(D_r batch)) per step.

    D_f is taken full-batch and D_r as a same-size seeded minibatch, keeping
    the two gradient terms comparable in scale. If an update pushes the
    forget loss past FORGET_LOSS_CEILING or any parameter non-finite, that
    update is undone and the result is flagged truncated.
    """
    forget = bg.forget_samples(bundle)
    retain = bg.retain_samples(bundle)
    if not forget:
        raise ValueError("gradient_ascent: empty forget set")
    if not retain:
        raise ValueError("gradient_ascent: empty retain set")
    Xf, yf, _, _ = bg.stack(forget)
    Xr, yr, _, _ = bg.stack(retain)
    batch = min(len(forget), len(retain))
    rng = np.random.default_rng(cfg.seed)

    work = md.copy_model(model)
    params = md.trainable_params(work)
    t0 = time.perf_counter()
    log: list[dict] = []
    cost = 0.0
    truncated = False
    for step in range(cfg.steps):
        idx = rng.choice(len(retain), size=batch, replace=False)
        snapshot = [p.data.copy() for p in params]
        loss_f = md.loss(work, Xf, yf)
        loss_r = md.loss(work, Xr[idx], yr[idx])
        objective = ad.sub(loss_f, ad.scale(loss_r, cfg.alpha))
        grads = ad.grad(objective, params)
        for p, g in zip(params, grads):
            p.data = p.data + cfg.eta * g.data
        cost += len(forget) + batch

        post = _mean_loss(work, forget)
        finite = np.isfinite(post) and all(np.isfinite(p.data).all() for p in params)
        if not finite or post > FORGET_LOSS_CEILING:
            for p, s in zip(params, snapshot):
                p.data = s
            truncated = True
            break
        log.append({
            "step": step,
            "forget_loss": float(loss_f.data),
            "retain_loss": float(loss_r.data),
        })
    return UnlearnResult(
        model=work, wall_time_seconds=time.perf_counter() - t0, step_log=log,
        cost_units=cost, truncated=truncated,
    )


# ---------------------------------------------------------------------------
# Low-rank adapter unlearning.
# ---------------------------------------------------------------------------

def adapter_layer_index(model: md.ModelParams) -> int:
    """Last non-head layer, or the only layer of a depth-1 model."""
    return max(len(model.layers) - 2, 0)


def lora_unlearn(
    model: md.ModelParams, bundle: bg.DataBundle, cfg: StrategyConfig
) -> UnlearnResult:
    """Adam on adapter factors only, minimizing L(D_r batch) - beta * L(D_f).

    The base weights stay frozen; the returned model keeps its adapters
    attached (merge via the model module if a plain stack is needed).
    """
    if model.adapters:
        raise ValueError("lora_unlearn: model already carries adapters")
    forget = bg.forget_samples(bundle)
    retain = bg.retain_samples(bundle)
    if not retain:
        raise ValueError("lora_unlearn: empty retain set")
    Xr, yr, _, _ = bg.stack(retain)
    Xf, yf, _, _ = bg.stack(forget)
    batch = min(len(retain), max(len(forget), 1))
    rng = np.random.default_rng(cfg.seed)

    work = md.copy_model(model)
    layer_idx = adapter_layer_index(work)
    md.attach_lora(work, [layer_idx], cfg.rank, cfg.seed)
    params = md.trainable_params(work)
    opt = md.Adam(params, cfg.eta)

    use_forget = bool(forget) and cfg.beta > 0.0
    t0 = time.perf_counter()
    log: list[dict] = []
    cost = 0.0
    for step in range(cfg.steps):
        idx = rng.choice(len(retain), size=batch, replace=False)
        loss_r = md.loss(work, Xr[idx], yr[idx])
        if use_forget:
            loss_f = md.loss(work, Xf, yf)
            objective = ad.sub(loss_r, ad.scale(loss_f, cfg.beta))
            forget_val = float(loss_f.data)
            cost += len(forget)
        else:
            objective = loss_r
            forget_val = _mean_loss(work, forget)
        grads = ad.grad(objective, params)
        opt.step([g.data for g in grads])
        cost += batch
        log.append({
            "step": step,
            "forget_loss": forget_val,
            "retain_loss": float(loss_r.data),
            "objective": float(objective.data),
        })
    return UnlearnResult(
        model=work, wall_time_seconds=time.perf_counter() - t0, step_log=log,
        cost_units=cost, extra={"adapter_layer": layer_idx, "rank": cfg.rank},
    )


# ---------------------------------------------------------------------------
# Teacher-student distillation (SCRUB-style).
# ---------------------------------------------------------------------------

def _kl_to_teacher(p: np.ndarray, student_logits: ad.Tensor, head: str) -> ad.Tensor:
    """Mean KL(teacher || student) as a graph scalar; p is a constant."""
    n = p.shape[0]
    if head == "softmax":
        safe = np.clip(p, 1e-300, None)
        plogp = float(np.sum(np.where(p > 0.0, p * np.log(safe), 0.0))) / n
        cross = ad.scale(
            ad.sum_all(ad.mul(ad.tensor(p), ad.log_softmax(student_logits))), -1.0 / n
        )
        return ad.addc(cross, plogp)
    safe = np.clip(p, 1e-300, 1.0 - 1e-16)
    plogp = float(np.mean(p * np.log(safe) + (1.0 - p) * np.log1p(-safe)))
    cross = ad.mean_all(
        ad.add(
            ad.mul(ad.tensor(p), ad.softplus(ad.neg(student_logits))),
            ad.mul(ad.tensor(1.0 - p), ad.softplus(student_logits)),
        )
    )
    return ad.addc(cross, plogp)


def scrub_unlearn(
    baseline: md.ModelParams,
    teacher: md.ModelParams,
    bundle: bg.DataBundle,
    cfg: StrategyConfig,
) -> UnlearnResult:
    """Student starts from the baseline and is pulled toward the teacher on
    D_r (KL + task cross-entropy) and pushed away on D_f (negated KL).

    The forget KL is clipped at FORGET_KL_CLIP per batch by dropping its
    gradient once past the cap; the logged total always equals
    retain_kl + task_loss - forget_used.
    """
    if baseline.layer_sizes != teacher.layer_sizes or baseline.head != teacher.head:
        raise ValueError(
            f"scrub_unlearn: teacher {teacher.layer_sizes}/{teacher.head} does not match "
            f"student {baseline.layer_sizes}/{baseline.head}"
        )
    forget = bg.forget_samples(bundle)
    retain = bg.retain_samples(bundle)
    if not retain:
        raise ValueError("scrub_unlearn: empty retain set")
    Xr, yr, _, _ = bg.stack(retain)
    Xf, yf, _, _ = bg.stack(forget)
    teacher_r = md.predict_proba(teacher, Xr)
    teacher_f = md.predict_proba(teacher, Xf) if forget else None
    batch = min(len(retain), len(forget)) if forget else min(64, len(retain))
    rng = np.random.default_rng(cfg.seed)

    student = md.copy_model(baseline)
    params = md.trainable_params(student)
    opt = md.Adam(params, cfg.eta)
    t0 = time.perf_counter()
    log: list[dict] = []
    cost = 0.0
    for step in range(cfg.steps):
        idx = rng.choice(len(retain), size=batch, replace=False)
        z_r = md.forward(student, Xr[idx])
        retain_kl = _kl_to_teacher(teacher_r[idx], z_r, student.head)
        task = md.loss_from_logits(z_r, yr[idx], student.head)
        keep_terms = ad.add(retain_kl, task)
        cost += batch

        forget_kl_val = 0.0
        forget_used = 0.0
        if forget:
            z_f = md.forward(student, Xf)
            forget_kl = _kl_to_teacher(teacher_f, z_f, student.head)
            forget_kl_val = float(forget_kl.data)
            if forget_kl_val <= FORGET_KL_CLIP:
                total = ad.sub(keep_terms, forget_kl)
                forget_used = forget_kl_val
                cost += len(forget)
            else:
                total = ad.addc(keep_terms, -FORGET_KL_CLIP)
                forget_used = FORGET_KL_CLIP
        else:
            total = keep_terms
        grads = ad.grad(total, params)
        opt.step([g.data for g in grads])
        log.append({
            "step": step,
            "forget_loss": forget_kl_val,
            "retain_loss": float(retain_kl.data),
            "task_loss": float(task.data),
            "forget_used": forget_used,
            "total": float(total.data),
        })
    return UnlearnResult(
        model=student, wall_time_seconds=time.perf_counter() - t0, step_log=log,
        cost_units=cost,
    )


# ---------------------------------------------------------------------------
# Influence scores.
# ---------------------------------------------------------------------------

@dataclass
class InfluenceResult:
    value: float
    converged: bool
    iterations: int
    residual_norm: float


def influence(
    model: md.ModelParams,
    sample: bg.Sample,
    bias_measure: Callable[[ad.Tensor], ad.Tensor],
    train_samples: list[bg.Sample],
    damping: float = 1e-2,
    scope: str = "all",
    max_iter: int = 200,
    tol: float = 1e-10,
) -> InfluenceResult:
    """-grad(sample loss) . H^{-1} grad(B): the first-order effect on B of
    upweighting the sample, where H is the training-loss Hessian at the
    current parameters.

    bias_measure builds a scalar from the same flat parameter tensor layout
    as loss_closure(model, ..., scope). CG non-convergence is reported via
    the flags, not raised.
    """
    theta0, train_fn = loss_closure(model, train_samples, scope)

    leaf = ad.tensor(theta0)
    (g_bias,) = ad.grad(bias_measure(leaf), [leaf])

    hvp_leaf = ad.tensor(theta0)
    solve = ad.cg_solve(
        lambda v: ad.hessian_vector_product(train_fn, hvp_leaf, v).data,
        g_bias.data, damping=damping, max_iter=max_iter, tol=tol,
    )

    _, sample_fn = loss_closure(model, [sample], scope)
    sample_leaf = ad.tensor(theta0)
    (g_sample,) = ad.grad(sample_fn(sample_leaf), [sample_leaf])
    value = -float(g_sample.data @ solve.x)
    return InfluenceResult(value, solve.converged, solve.iterations, solve.residual_norm)


# ---------------------------------------------------------------------------
# One-step Newton unlearning on counterfactual data.
# ---------------------------------------------------------------------------

@dataclass
class NewtonInfo:
    converged: bool
    iterations: int
    residual_norm: float
    fallback: bool
    step_norm: float


def newton_unlearn_step(
    loss_fn: Callable[[ad.Tensor], ad.Tensor],
    theta0: np.ndarray,
    damping: float = 1e-2,
    max_iter: int = 200,
    tol: float = 1e-10,
) -> tuple[np.ndarray, NewtonInfo]:
    """theta0 - (H + damping*I)^{-1} grad, with the solve done by CG on
    Hessian-vector products.

    Indefinite curvature (CG cannot proceed) falls back to a plain gradient
    step scaled by 1/damping; plain non-convergence keeps the partial CG
    solution and is reported in the info.
    """
    leaf = ad.tensor(theta0)
    (g,) = ad.grad(loss_fn(leaf), [leaf])
    grad_vec = g.data

    hvp_leaf = ad.tensor(theta0)
    fallback = False
    try:
        solve = ad.cg_solve(
            lambda v: ad.hessian_vector_product(loss_fn, hvp_leaf, v).data,
            grad_vec, damping=damping, max_iter=max_iter, tol=tol,
        )
        step = solve.x
        converged, iterations, residual = solve.converged, solve.iterations, solve.residual_norm
    except ad.NonFiniteError:
        fallback = True
        step = grad_vec / max(damping, 1e-8)
        converged, iterations, residual = False, 0, float(np.linalg.norm(grad_vec))
    info = NewtonInfo(converged, iterations, residual, fallback, float(np.linalg.norm(step)))
    return theta0 - step, info


def _embedding_graph(model: md.ModelParams, X: np.ndarray) -> ad.Tensor | None:
    """Activations entering the head, as graph nodes; None for depth-1 models."""
    weights = md.effective_weights(model)
    if len(weights) == 1:
        return None
    return ad.relu(md.forward_stack(weights[:-1], X))


def fmd_unlearn(
    model: md.ModelParams,
    counterfactual: list[bg.Sample],
    cfg: StrategyConfig,
    bundle: bg.DataBundle | None = None,
    pairs: list[tuple[bg.Sample, bg.Sample]] | None = None,
) -> UnlearnResult:
    """One damped Newton step on the counterfactual mean gradient, then an
    optional fine-tune on the counterfactual set.

    The Hessian scope defaults to the head parameters; non-head weights are
    untouched by the Newton step in that mode. Without pairs, the fine-tune
    is cross-entropy on the head only. With pairs of (original, altered)
    samples, it becomes a joint objective over all parameters: cross-entropy
    plus the mean squared distance between the two embeddings, pulling the
    representation toward ignoring the altered block.
    """
    if not counterfactual:
        raise ValueError("fmd_unlearn: empty counterfactual set")
    work = md.copy_model(model)
    Xc, yc, _, _ = bg.stack(counterfactual)
    n_c = len(counterfactual)
    t0 = time.perf_counter()

    theta0, fn = loss_closure(work, counterfactual, cfg.hessian_scope)
    loss_before = float(fn(ad.tensor(theta0)).data)
    theta1, info = newton_unlearn_step(fn, theta0, damping=cfg.damping)
    md.set_flat_params(work, theta1, cfg.hessian_scope)
    cost = float(n_c * (1 + 2 * info.iterations))
    log: list[dict] = [{
        "step": 0,
        "forget_loss": _mean_loss(work, bg.forget_samples(bundle)) if bundle else float("nan"),
        "retain_loss": _mean_loss(work, bg.retain_samples(bundle)) if bundle else float("nan"),
        "counterfactual_loss": loss_before,
        "step_norm": info.step_norm,
    }]

    if cfg.finetune_steps:
        if pairs:
            params = md.trainable_params(work)
            Xa = np.stack([p[0].x for p in pairs])
            Xb = np.stack([p[1].x for p in pairs])
        else:
            W, b = work.layers[-1]
            params = [W, b]
        opt = md.Adam(params, cfg.eta)
        for k in range(cfg.finetune_steps):
            objective = md.loss(work, Xc, yc)
            cost += n_c
            if pairs:
                ea = _embedding_graph(work, Xa)
                eb = _embedding_graph(work, Xb)
                if ea is not None:
                    gap = ad.scale(ad.sq_norm(ad.sub(ea, eb)), 1.0 / len(pairs))
                    objective = ad.add(objective, gap)
                    cost += 2 * len(pairs)
            grads = ad.grad(objective, params)
            opt.step([g.data for g in grads])
            log.append({"step": k + 1, "finetune_loss": float(objective.data)})

    return UnlearnResult(
        model=work, wall_time_seconds=time.perf_counter() - t0, step_log=log,
        cost_units=cost,
        extra={
            "cg_converged": info.converged, "cg_iterations": info.iterations,
            "fallback": info.fallback, "step_norm": info.step_norm,
        },
    )
