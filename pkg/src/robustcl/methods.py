"""Per-batch training losses for adversarially robust class-incremental learning.

Each supported method is a named recipe combining: a cross-entropy or
multilabel term on adversarial inputs, optional distillation against the
frozen previous-task model, optional replay terms, and optional quadratic
parameter penalties. Builders return graph nodes so one backward pass
yields exact parameter gradients; zero-weighted terms are skipped
entirely, which makes endpoint reductions bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .attacks import AttackConfig
from .autodiff import Node
from .errors import ArgumentError, ConfigurationError, ContractError
from .network import Network, ParamNodes, ParamView

Array = np.ndarray

BUFFER_KINDS = ("none", "herding", "reservoir", "reservoir-with-logits")


@dataclass(frozen=True)
class MethodInfo:
    name: str
    family: str                       # at | iad | nonrehearsal | rehearsal | flatness
    default_alpha: float
    default_beta: float
    default_buffer: str
    allowed_buffers: tuple[str, ...]
    inner_objective: str              # default PGD objective
    composition: str                  # merged | separate | none
    reg: str | None = None            # ewc | si
    augment_default: bool = False


def _info(name, family, alpha=0.0, beta=0.0, buffer="none",
          allowed=("none",), objective="ce", composition="none",
          reg=None, augment=False) -> MethodInfo:
    return MethodInfo(name, family, alpha, beta, buffer, allowed,
                      objective, composition, reg, augment)


REGISTRY: dict[str, MethodInfo] = {m.name: m for m in [
    _info("pgd-at", "at", allowed=("none", "herding"), composition="merged"),
    _info("trades", "at", alpha=6.0, allowed=("none", "herding"),
          objective="kl-vs-clean", composition="merged"),
    _info("mart", "at", alpha=6.0, allowed=("none", "herding"), composition="merged"),
    _info("i-ard", "iad", alpha=1.0, beta=1.0, allowed=("none", "herding"),
          composition="merged"),
    _info("i-rslad", "iad", alpha=1.0, beta=1.0, allowed=("none", "herding"),
          composition="merged"),
    _info("i-adaad", "iad", alpha=1.0, beta=1.0, allowed=("none", "herding"),
          composition="merged"),
    _info("r-lwf", "nonrehearsal", alpha=1.0),
    _info("r-lwf-mc", "nonrehearsal"),
    _info("r-ewc-on", "nonrehearsal", alpha=1.0, reg="ewc"),
    _info("r-si", "nonrehearsal", alpha=1.0, reg="si"),
    _info("r-er", "rehearsal", buffer="reservoir", allowed=("reservoir",),
          composition="separate"),
    _info("r-er-ace", "rehearsal", buffer="reservoir", allowed=("reservoir",),
          composition="separate"),
    _info("r-der", "rehearsal", alpha=0.3, buffer="reservoir-with-logits",
          allowed=("reservoir-with-logits",), composition="separate"),
    _info("r-der++", "rehearsal", alpha=0.1, beta=0.5, buffer="reservoir-with-logits",
          allowed=("reservoir-with-logits",), composition="separate"),
    _info("r-icarl", "rehearsal", buffer="herding", allowed=("herding",),
          composition="merged"),
    _info("flair", "flatness", alpha=0.5, beta=2.0, allowed=("none", "herding"),
          composition="merged"),
    _info("flair+", "flatness", alpha=0.5, beta=2.0, allowed=("none", "herding"),
          composition="merged", augment=True),
]}

METHOD_NAMES = tuple(REGISTRY)


@dataclass(frozen=True)
class MethodConfig:
    name: str
    alpha: float
    beta: float
    buffer_kind: str
    attack: AttackConfig
    augment: bool = False
    ewc_gamma: float = 0.9
    si_xi: float = 1e-3
    fpd_metric: str = "kl"

    @property
    def info(self) -> MethodInfo:
        return REGISTRY[self.name]


def make_method_config(name: str, attack: AttackConfig, alpha: float | None = None,
                       beta: float | None = None, buffer_kind: str | None = None,
                       augment: bool | None = None, fpd_metric: str = "kl",
                       ewc_gamma: float = 0.9, si_xi: float = 1e-3) -> MethodConfig:
    """Fill method defaults and validate buffer compatibility."""
    if name not in REGISTRY:
        raise ConfigurationError(f"unknown method {name!r}; known: {sorted(REGISTRY)}")
    info = REGISTRY[name]
    alpha = info.default_alpha if alpha is None else float(alpha)
    beta = info.default_beta if beta is None else float(beta)
    if alpha < 0 or beta < 0 or not np.isfinite(alpha) or not np.isfinite(beta):
        raise ConfigurationError("alpha and beta must be finite and nonnegative")
    buffer_kind = info.default_buffer if buffer_kind is None else buffer_kind
    if buffer_kind not in BUFFER_KINDS:
        raise ConfigurationError(f"unknown buffer kind {buffer_kind!r}")
    if buffer_kind not in info.allowed_buffers:
        raise ConfigurationError(
            f"method {name!r} requires buffer kind in {info.allowed_buffers}, "
            f"got {buffer_kind!r}")
    if fpd_metric not in ("kl", "mse"):
        raise ConfigurationError("fpd_metric must be 'kl' or 'mse'")
    if attack.objective == "ce" and info.inner_objective != "ce":
        attack = replace(attack, objective=info.inner_objective)
    augment = info.augment_default if augment is None else bool(augment)
    return MethodConfig(name, alpha, beta, buffer_kind, attack, augment,
                        ewc_gamma, si_xi, fpd_metric)


# ---------------------------------------------------------------------------
# regularization state (online-EWC Fisher, SI importance)


@dataclass
class RegState:
    fisher: Array
    omega: Array
    si_path: Array
    anchor: Array
    layout: tuple[tuple[int, ...], ...]

    @classmethod
    def zeros(cls, net: Network) -> "RegState":
        n = net.n_params
        return cls(np.zeros(n), np.zeros(n), np.zeros(n),
                   net.flatten().vector.copy(), net.layout())

    def expand_to(self, net: Network) -> "RegState":
        """Re-shape state after a head expansion; new slots get zero weight."""
        new_layout = net.layout()
        if new_layout == self.layout:
            return self

        def grow(vec: Array, fill_from: Array | None = None) -> Array:
            blocks = ParamView(vec, self.layout).split()
            target = ParamView(net.flatten().vector, new_layout).split()
            out = []
            for old, new in zip(blocks, target):
                if old.shape == new.shape:
                    out.append(old.ravel())
                    continue
                padded = np.zeros(new.shape)
                if fill_from is not None:
                    padded[...] = new
                if old.ndim == 2:
                    padded[:old.shape[0], :old.shape[1]] = old
                else:
                    padded[:old.shape[0]] = old
                out.append(padded.ravel())
            return np.concatenate(out)

        return RegState(grow(self.fisher), grow(self.omega), grow(self.si_path),
                        grow(self.anchor, fill_from=net.flatten().vector), new_layout)


def _quadratic_penalty(params: ParamNodes, weights: Array, anchor: Array,
                       layout) -> Node:
    """sum_i weights_i * (theta_i - anchor_i)^2 as a graph node."""
    w_blocks = ParamView(weights, layout).split()
    a_blocks = ParamView(anchor, layout).split()
    total: Node | None = None
    for i, (wn, bn) in enumerate(params.pairs):
        for node, w, a in ((wn, w_blocks[2 * i], a_blocks[2 * i]),
                           (bn, w_blocks[2 * i + 1], a_blocks[2 * i + 1])):
            d = ad.sub(node, a)
            term = ad.sum_all(ad.mul(ad.mul(d, d), w))
            total = term if total is None else ad.add(total, term)
    return total


def update_reg_state(kind: str, reg: RegState, student: Network | None = None, *,
                     adv_batches: Sequence[tuple[Array, Array]] | None = None,
                     gamma: float = 0.9,
                     step: tuple[Array, Array] | None = None,
                     consolidate: bool = False, xi: float = 1e-3) -> RegState:
    """Advance EWC or SI bookkeeping.

    kind "ewc-on": `adv_batches` holds (x_adv, y) batches; the Fisher
    diagonal becomes gamma * old + mean over batches of squared CE
    parameter gradients. kind "si": pass `step=(grads, delta_theta)` per
    optimizer step, and `consolidate=True` once at task end to fold the
    accumulated path into omega (clamped nonnegative) against the anchor.
    """
    from .network import grad_params  # local to avoid a cycle at import time

    if kind == "ewc-on":
        if student is None or adv_batches is None:
            raise ArgumentError("ewc-on update needs a student and adversarial batches")
        acc = np.zeros_like(reg.fisher)
        for x_adv, y in adv_batches:
            g = grad_params(student, lambda z, aux: losses.ce(z, aux), (x_adv, y))
            acc += g.vector ** 2
        batch_stat = acc / max(len(adv_batches), 1)
        reg.fisher = gamma * reg.fisher + batch_stat
        return reg
    if kind == "si":
        if step is not None:
            grads, delta = step
            reg.si_path += -grads * delta
        if consolidate:
            if student is None:
                raise ArgumentError("si consolidation needs the trained student")
            total_delta = student.flatten().vector - reg.anchor
            reg.omega += np.maximum(reg.si_path / (total_delta ** 2 + xi), 0.0)
            reg.si_path = np.zeros_like(reg.si_path)
        return reg
    raise ArgumentError(f"unknown regularizer kind {kind!r}")


# ---------------------------------------------------------------------------
# helpers shared by the builders


def _old_width(student: Network) -> int:
    if student.n_tasks < 2:
        raise ContractError("no previous-task slice on a single-head network")
    return student.head_boundaries[-2]


def _check_teacher(student: Network, teacher: Network) -> int:
    w = _old_width(student)
    if teacher.out_dim != w:
        raise ContractError(f"teacher width {teacher.out_dim} != old-slice width {w}")
    return w


def _require_adv(x_adv) -> Array:
    if x_adv is None:
        raise ContractError("this loss needs adversarial inputs for the batch")
    return np.asarray(x_adv, dtype=np.float64)


def _total(terms: dict[str, Node]) -> Node:
    nodes = list(terms.values())
    total = nodes[0]
    for node in nodes[1:]:
        total = ad.add(total, node)
    return total


# ---------------------------------------------------------------------------
# plain adversarial-training losses


def at_terms(kind: str, student: Network, batch, x_adv, cfg: MethodConfig,
             params: ParamNodes | None = None) -> dict[str, Node]:
    x, y = batch
    x_adv = _require_adv(x_adv)
    params = params or ParamNodes(student)
    if kind == "pgd-at":
        return {"ce_adv": losses.ce(student.forward_graph(x_adv, params), y)}
    if kind == "trades":
        clean = student.forward_graph(x, params)
        terms = {"ce_clean": losses.ce(clean, y)}
        if cfg.alpha != 0.0:
            adv = student.forward_graph(x_adv, params)
            terms["kl_adv_clean"] = cfg.alpha * losses.kl_div(adv, clean)
        return terms
    if kind == "mart":
        adv = student.forward_graph(x_adv, params)
        width = student.out_dim
        terms = {"bce_adv": losses.bce_multilabel(adv, losses.one_hot(y, width))}
        if cfg.alpha != 0.0:
            clean = student.forward_graph(x, params)
            p_true = ad.exp(ad.take_per_row(ad.log_softmax(clean), np.asarray(y)))
            weight = ad.sub(1.0, p_true)
            kl = losses.kl_rows(adv, clean)
            terms["weighted_kl"] = cfg.alpha * ad.mean_all(ad.mul(weight, kl))
        return terms
    raise ArgumentError(f"unknown adversarial-training kind {kind!r}")


def at_loss(kind, student, batch, x_adv, cfg, params=None) -> Node:
    return _total(at_terms(kind, student, batch, x_adv, cfg, params))


# ---------------------------------------------------------------------------
# incremental adversarial distillation (previous-task model as teacher)


def incremental_distill_terms(kind: str, student: Network, teacher: Network,
                              batch, x_adv, cfg: MethodConfig,
                              params: ParamNodes | None = None) -> dict[str, Node]:
    x, y = batch
    x_adv = _require_adv(x_adv)
    params = params or ParamNodes(student)
    w = _check_teacher(student, teacher)
    old = slice(0, w)
    adv = student.forward_graph(x_adv, params)
    terms = {"ce_adv": losses.ce(adv, y)}
    if cfg.beta == 0.0:
        return terms
    if kind == "i-ard":
        terms["distill"] = cfg.beta * losses.kl_div(ad.take_cols(adv, old),
                                                    teacher.forward(x))
        return terms
    if kind not in ("i-rslad", "i-adaad"):
        raise ArgumentError(f"unknown distillation kind {kind!r}")
    teacher_adv_ref = teacher.forward(x_adv) if kind == "i-adaad" else teacher.forward(x)
    parts: dict[str, Node] = {}
    if cfg.alpha != 0.0:
        parts["adv"] = cfg.alpha * losses.kl_div(ad.take_cols(adv, old), teacher_adv_ref)
    if cfg.alpha != 1.0:
        clean = student.forward_graph(x, params)
        parts["clean"] = (1.0 - cfg.alpha) * losses.kl_div(ad.take_cols(clean, old),
                                                           teacher.forward(x))
    if parts:
        terms["distill"] = cfg.beta * _total(parts)
    return terms


def incremental_distill_loss(kind, student, teacher, batch, x_adv, cfg,
                             params=None) -> Node:
    return _total(incremental_distill_terms(kind, student, teacher, batch,
                                            x_adv, cfg, params))


# ---------------------------------------------------------------------------
# revised CIL, non-rehearsal


def nonrehearsal_terms(kind: str, student: Network, teacher: Network | None,
                       reg: RegState | None, batch, x_adv, cfg: MethodConfig,
                       params: ParamNodes | None = None) -> dict[str, Node]:
    x, y = batch
    x_adv = _require_adv(x_adv)
    params = params or ParamNodes(student)
    if kind == "r-lwf":
        adv = student.forward_graph(x_adv, params)
        terms = {"ce_adv": losses.ce(adv, y)}
        if cfg.alpha != 0.0 and teacher is not None:
            w = _check_teacher(student, teacher)
            clean = student.forward_graph(x, params)
            terms["distill"] = cfg.alpha * losses.kl_div(
                ad.take_cols(clean, slice(0, w)), teacher.forward(x))
        return terms
    if kind == "r-lwf-mc":
        adv = student.forward_graph(x_adv, params)
        if teacher is None:
            width = student.out_dim
            return {"bce_new": losses.bce_multilabel(adv, losses.one_hot_in_slice(
                y, 0, width))}
        w = _check_teacher(student, teacher)
        clean = student.forward_graph(x, params)
        new = slice(w, student.out_dim)
        return {
            "bce_new": losses.bce_multilabel(ad.take_cols(adv, new),
                                             losses.one_hot_in_slice(y, w, student.out_dim)),
            "bce_distill": losses.bce_multilabel(ad.take_cols(clean, slice(0, w)),
                                                 losses.sigmoid(teacher.forward(x))),
        }
    if kind in ("r-ewc-on", "r-si"):
        if reg is None:
            raise ContractError(f"{kind} needs an initialized regularization state")
        adv = student.forward_graph(x_adv, params)
        terms = {"ce_adv": losses.ce(adv, y)}
        weights = reg.fisher if kind == "r-ewc-on" else reg.omega
        if cfg.alpha != 0.0:
            terms["penalty"] = cfg.alpha * _quadratic_penalty(
                params, weights, reg.anchor, reg.layout)
        return terms
    raise ArgumentError(f"unknown non-rehearsal kind {kind!r}")


def nonrehearsal_loss(kind, student, teacher, reg, batch, x_adv, cfg,
                      params=None) -> Node:
    return _total(nonrehearsal_terms(kind, student, teacher, reg, batch,
                                     x_adv, cfg, params))


# ---------------------------------------------------------------------------
# revised CIL, rehearsal


def _der_mse(student: Network, params: ParamNodes, x_adv_buf: Array,
             stored_logits: Sequence[Array]) -> Node:
    """Mean per-sample MSE between current logits and stored logits.

    Stored vectors may be narrower than the current head (they were
    captured before later expansions); each sample is compared on its own
    stored width.
    """
    widths = np.asarray([z.shape[0] for z in stored_logits])
    total: Node | None = None
    n = len(stored_logits)
    for w in np.unique(widths):
        idx = np.nonzero(widths == w)[0]
        logits = student.forward_graph(x_adv_buf[idx], params)
        z = np.stack([stored_logits[i] for i in idx])
        rows = losses.mse_rows(ad.take_cols(logits, slice(0, int(w))), z)
        part = ad.sum_all(rows)
        total = part if total is None else ad.add(total, part)
    return total / n


def rehearsal_terms(kind: str, student: Network, teacher: Network | None,
                    batch, buffer_batch, x_adv_current, x_adv_buffer,
                    cfg: MethodConfig, params: ParamNodes | None = None
                    ) -> dict[str, Node]:
    x, y = batch
    params = params or ParamNodes(student)
    have_buffer = buffer_batch is not None and len(buffer_batch[0]) > 0

    if kind == "r-icarl":
        # merged-pool method: `batch` already contains current + replayed data
        x_adv = _require_adv(x_adv_current)
        adv = student.forward_graph(x_adv, params)
        if teacher is None:
            return {"bce_new": losses.bce_multilabel(
                adv, losses.one_hot_in_slice(y, 0, student.out_dim))}
        w = _check_teacher(student, teacher)
        clean = student.forward_graph(x, params)
        return {
            "bce_new": losses.bce_multilabel(
                ad.take_cols(adv, slice(w, student.out_dim)),
                losses.one_hot_in_slice(y, w, student.out_dim)),
            "bce_distill": losses.bce_multilabel(
                ad.take_cols(clean, slice(0, w)),
                losses.sigmoid(teacher.forward(x))),
        }

    x_adv = _require_adv(x_adv_current)
    adv = student.forward_graph(x_adv, params)
    if kind == "r-er":
        terms = {"ce_adv": losses.ce(adv, y)}
        if have_buffer:
            xb, yb = buffer_batch[0], buffer_batch[1]
            terms["ce_buffer"] = losses.ce(
                student.forward_graph(_require_adv(x_adv_buffer), params), yb)
        return terms
    if kind == "r-er-ace":
        present = np.unique(np.asarray(y, dtype=np.int64))
        terms = {"ace_adv": losses.ace(adv, y, present)}
        if have_buffer:
            xb, yb = buffer_batch[0], buffer_batch[1]
            terms["ce_buffer"] = losses.ce(
                student.forward_graph(_require_adv(x_adv_buffer), params), yb)
        return terms
    if kind in ("r-der", "r-der++"):
        terms = {"ce_adv": losses.ce(adv, y)}
        if have_buffer:
            xb, yb, zb = buffer_batch
            if zb is None or any(z is None for z in zb):
                raise ConfigurationError(f"{kind} needs stored logits in the buffer")
            xab = _require_adv(x_adv_buffer)
            if cfg.alpha != 0.0:
                terms["mse_buffer"] = cfg.alpha * _der_mse(student, params, xab, zb)
            if kind == "r-der++" and cfg.beta != 0.0:
                terms["ce_buffer"] = cfg.beta * losses.ce(
                    student.forward_graph(xab, params), yb)
        return terms
    raise ArgumentError(f"unknown rehearsal kind {kind!r}")


def rehearsal_loss(kind, student, teacher, batch, buffer_batch, x_adv_current,
                   x_adv_buffer, cfg, params=None) -> Node:
    return _total(rehearsal_terms(kind, student, teacher, batch, buffer_batch,
                                  x_adv_current, x_adv_buffer, cfg, params))


# ---------------------------------------------------------------------------
# separated-logit distillation and flatness-preserving distillation


def separated_logit_terms(student: Network, teacher: Network | None, x_adv, y,
                          alpha: float, params: ParamNodes | None = None
                          ) -> dict[str, Node]:
    x_adv = _require_adv(x_adv)
    params = params or ParamNodes(student)
    adv = student.forward_graph(x_adv, params)
    if teacher is None:
        return {"bce_new": losses.bce_multilabel(
            adv, losses.one_hot_in_slice(y, 0, student.out_dim))}
    w = _check_teacher(student, teacher)
    terms = {"bce_new": losses.bce_multilabel(
        ad.take_cols(adv, slice(w, student.out_dim)),
        losses.one_hot_in_slice(y, w, student.out_dim))}
    if alpha != 0.0:
        terms["bce_distill"] = alpha * losses.bce_multilabel(
            ad.take_cols(adv, slice(0, w)), losses.sigmoid(teacher.forward(x_adv)))
    return terms


def separated_logit_loss(student, teacher, x_adv, y, alpha, params=None) -> Node:
    """New-task multilabel fit plus old-slice distillation from the teacher.

    The new-task term reads only the newest head columns, so its gradient
    w.r.t. old-class output weights is exactly zero.
    """
    return _total(separated_logit_terms(student, teacher, x_adv, y, alpha, params))


def flatness_distill_loss(student: Network, teacher: Network, x, x_adv,
                          metric: str = "kl",
                          params: ParamNodes | None = None) -> Node:
    """Match the clean-vs-adversarial output difference against the teacher.

    The difference f(x_adv) - f(x) carries first- and second-order
    input-space information, so matching it on the old-class slice keeps
    past gradients and Hessians close to the teacher's.
    """
    if teacher is None:
        raise ContractError("flatness distillation needs a frozen teacher")
    x_adv = _require_adv(x_adv)
    params = params or ParamNodes(student)
    w = _check_teacher(student, teacher)
    old = slice(0, w)
    delta_student = ad.sub(ad.take_cols(student.forward_graph(x_adv, params), old),
                           ad.take_cols(student.forward_graph(x, params), old))
    delta_teacher = teacher.forward(x_adv) - teacher.forward(x)
    if metric == "kl":
        return losses.kl_div(delta_teacher, delta_student)
    if metric == "mse":
        return losses.mse(delta_teacher, delta_student)
    raise ArgumentError(f"unknown difference metric {metric!r}")


def flair_terms(student: Network, teacher: Network | None, x, x_adv, y,
                alpha: float, beta: float, metric: str = "kl",
                params: ParamNodes | None = None) -> dict[str, Node]:
    params = params or ParamNodes(student)
    terms = separated_logit_terms(student, teacher, x_adv, y, alpha, params)
    if teacher is not None and beta != 0.0:
        terms["fpd"] = beta * flatness_distill_loss(student, teacher, x, x_adv,
                                                    metric, params)
    return terms


def flair_loss(student, teacher, x, x_adv, y, alpha, beta, metric="kl",
               params=None) -> Node:
    """Separated-logit terms plus beta-weighted flatness distillation."""
    return _total(flair_terms(student, teacher, x, x_adv, y, alpha, beta,
                              metric, params))


# ---------------------------------------------------------------------------
# dispatch used by the training loop


def build_training_loss(cfg: MethodConfig, student: Network,
                        teacher: Network | None, batch, buffer_batch,
                        x_adv, x_adv_buffer, reg: RegState | None,
                        params: ParamNodes) -> tuple[Node, dict[str, float]]:
    """Assemble the configured method's loss; returns (node, term values)."""
    info = cfg.info
    x, y = batch
    if info.family == "at":
        terms = at_terms(cfg.name, student, batch, x_adv, cfg, params)
    elif info.family == "iad":
        if teacher is None:
            terms = {"ce_adv": losses.ce(student.forward_graph(
                _require_adv(x_adv), params), y)}
        else:
            terms = incremental_distill_terms(cfg.name, student, teacher, batch,
                                              x_adv, cfg, params)
    elif info.family == "nonrehearsal":
        terms = nonrehearsal_terms(cfg.name, student, teacher, reg, batch,
                                   x_adv, cfg, params)
    elif info.family == "rehearsal":
        terms = rehearsal_terms(cfg.name, student, teacher, batch, buffer_batch,
                                x_adv, x_adv_buffer, cfg, params)
    elif info.family == "flatness":
        terms = flair_terms(student, teacher, x, x_adv, y, cfg.alpha, cfg.beta,
                            cfg.fpd_metric, params)
    else:
        raise ArgumentError(f"unknown method family {info.family!r}")
    return _total(terms), {k: float(v.value) for k, v in terms.items()}
