"""Central finite-difference checks against the tape's analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, backward, no_grad, record_branches, zero_grad

MIN_STEP = 1e-9


@dataclass
class GradCheckRow:
    param_id: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    step: float = 0.0

    @property
    def ok(self) -> bool:
        return self.passed(1e-4)

    def passed(self, tol: float) -> bool:
        return bool(self.rel_error < tol)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Parameter]) -> float:
    zero_grad(params)
    with Tape():
        loss = loss_fn()
    backward(loss)
    return loss.item()


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def numeric_gradient(
    loss_fn: Callable[[], Tensor],
    param: Parameter,
    index: tuple,
    h: float = 1e-5,
    parts_fn: Callable[[], np.ndarray] | None = None,
    smooth: bool = False,
) -> tuple[float, float]:
    """Central difference of the loss at one entry; returns ``(derivative, step)``.

    ``parts_fn``, when given, returns the additive components of the loss;
    they are differenced before an exact ``math.fsum`` so that round-off in a
    large total does not swamp small derivatives.

    With ``smooth=True`` the step is cut by 10 until both evaluations take
    the same branches (ReLU masks, clips, selections) as the unperturbed
    point, so the difference never straddles a kink.
    """
    evaluate = parts_fn or (lambda: np.array([loss_fn().item()]))
    orig = param.data[index].copy()
    base = None
    if smooth:
        with no_grad(), record_branches() as base:
            evaluate()
    try:
        while True:
            with no_grad():
                param.data[index] = orig + h
                with record_branches() as log_up:
                    up = evaluate()
                param.data[index] = orig - h
                with record_branches() as log_down:
                    down = evaluate()
            if base is None or h <= MIN_STEP or (_same_branches(base, log_up) and _same_branches(base, log_down)):
                return math.fsum(up - down) / (2 * h), h
            h /= 10
    finally:
        param.data[index] = orig


def check_entries(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    entries: Sequence[tuple[Parameter, tuple]],
    h: float = 1e-5,
    floor: float = 1e-8,
    parts_fn: Callable[[], np.ndarray] | None = None,
    smooth: bool = False,
) -> list[GradCheckRow]:
    """Compare analytic and numeric derivatives at the given (param, index) entries."""
    analytic_gradients(loss_fn, params)
    analytic = {(p.id, idx): float(p.grad[idx]) for p, idx in entries}
    rows = []
    for p, idx in entries:
        a = analytic[(p.id, idx)]
        n, step = numeric_gradient(loss_fn, p, idx, h, parts_fn, smooth)
        rows.append(GradCheckRow(p.id, idx, a, n, relative_error(a, n, floor), step))
    return rows


def random_entries(params: Sequence[Parameter], n: int, rng: np.random.Generator) -> list[tuple[Parameter, tuple]]:
    """``n`` random scalar entries, cycling through ``params`` so each gets picked."""
    out = []
    for k in range(n):
        p = params[k % len(params)]
        flat = int(rng.integers(p.size))
        out.append((p, tuple(int(i) for i in np.unravel_index(flat, p.shape))))
    return out


# ---------------------------------------------------------------------------
# whole-model check


def fixture_batch(image_size: int, n: int = 2, seed: int = 0):
    """Small phantom slices with all three regions present, for gradient checks."""
    from .data import PhantomSpec, batch_arrays, extract_slices, generate_phantom

    r = image_size / 4
    spec = PhantomSpec(shape=(3, image_size, image_size), wt_radius=(r, 1.4 * r), depth_radius=(1.2, 1.5), seed=seed)
    samples = extract_slices(generate_phantom(spec), "tumor")[:n]
    return batch_arrays(samples)


def module_of(param_id: str) -> str:
    parts = param_id.split(".")
    if parts[0] == "encoder":
        return "encoder"
    if parts[0] == "fusion":
        return "aff" if parts[1].startswith("aff") else "stage4"
    if parts[2] == "head":
        return f"head.{parts[1]}"
    return f"decoder.{parts[1]}"


def fe_entries(model, n: int, rng) -> list[tuple[Parameter, tuple]]:
    """Entries of the ET level-3 conv weights that read the curvature-selected channels."""
    from .decoder import fe_channels

    w = model.decoders["ET"]["levels"][2]["conv1"]["w"]
    c = model.cfg.embed_dims[0]
    width = c + fe_channels(c, model.cfg.fe_fraction)
    channels = list(range(c, width)) + list(range(width + c, 2 * width))
    out = []
    for _ in range(n):
        ch = int(channels[int(rng.integers(len(channels)))])
        o, u, v = (int(rng.integers(s)) for s in (w.shape[0], 3, 3))
        out.append((w, (o, ch, u, v)))
    return out


def model_gradcheck(cfg, n_params: int = 100, seed: int = 0, h: float = 1e-4):
    """Finite-difference check of a float64 model on sampled entries from every module.

    Entries are spread evenly over module groups, a slice of them target the
    curvature-selected channels, and a few are checked against the BCE and
    Dice terms alone. Returns ``(rows, terms)`` where ``terms[i]`` names the
    loss checked for ``rows[i]``.

    The loss is in the hundreds (summed over pixels), so differences are
    taken component-wise, and the step shrinks only when it would cross a
    kink: stem parameters move every stage-1 pre-activation at once.
    """
    from .config import TASKS
    from .losses import bce_clipped, dice_loss, loss_components, total_loss
    from .model import Model

    if cfg.image_size > 16:
        raise ValueError(f"gradient check needs the tiny config (<= 16x16 input), got {cfg.image_size}")
    model = Model(cfg, seed=seed, precision="f64")
    images, masks = fixture_batch(cfg.image_size, seed=seed)
    rng = np.random.default_rng(seed)
    params = list(model.params)

    losses = {
        "total": lambda: total_loss(model(images), masks),
        "bce": lambda: _sum_terms(model(images), masks, bce_clipped, TASKS),
        "dice": lambda: _sum_terms(model(images), masks, dice_loss, TASKS),
    }
    kinds = {"total": ("bce", "dice"), "bce": ("bce",), "dice": ("dice",)}

    def parts(term):
        return lambda: loss_components(model(images), masks, kinds[term])

    groups: dict[str, list[Parameter]] = {}
    for p in params:
        groups.setdefault(module_of(p.id), []).append(p)
    n_fe = max(4, n_params // 10) if cfg.use_fe else 0
    n_terms = max(2, n_params // 20)
    n_main = max(n_params - n_fe - 2 * n_terms, len(groups))
    names = sorted(groups)
    plan: list[tuple[Parameter, tuple]] = []
    for k in range(n_main):
        plist = groups[names[k % len(names)]]
        plan += random_entries([plist[int(rng.integers(len(plist)))]], 1, rng)
    plan += fe_entries(model, n_fe, rng)

    rows = check_entries(losses["total"], params, plan, h, parts_fn=parts("total"), smooth=True)
    terms = ["total"] * len(rows)
    for term in ("bce", "dice"):
        extra = random_entries([params[int(i)] for i in rng.integers(len(params), size=n_terms)], n_terms, rng)
        rows += check_entries(losses[term], params, extra, h, parts_fn=parts(term), smooth=True)
        terms += [term] * n_terms
    return rows, terms


def _sum_terms(preds, masks, fn, tasks):
    out = fn(preds[tasks[0]], masks[tasks[0]])
    for t in tasks[1:]:
        out = out + fn(preds[t], masks[t])
    return out
