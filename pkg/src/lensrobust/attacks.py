"""Attributional attacks: perturb an input within an l-inf ball so its
attribution map changes while the predicted class stays the same.

Iterative attacks take signed steps on an attribution objective, project back
onto the epsilon ball intersected with [0, 1], and keep the iterate that is
worst under the evaluation metric among those that preserve the prediction.
The derivative of an attribution map w.r.t. the input is obtained through a
finite-difference Hessian-vector product on a softplus copy of the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import AttributionMap, ImageTensor
from .errors import DomainError
from .metrics import dilate, lens_prec_at_k, top_k_mask, topk_intersection
from .model import ToyNetwork, gradient_vector, hvp_fd, ig_vector, input_gradients, predict

VARIANTS = ("random_sign", "universal_random", "top_k", "mass_center", "lens_objective")
ATTRIBUTIONS = ("simple_grad", "input_x_grad", "ig")

HVP_RADIUS = 1e-4


@dataclass(frozen=True)
class AttackConfig:
    variant: str = "top_k"
    epsilon: float = 0.3
    steps: int = 100
    step_size: float = 0.01
    t: int = 10
    k_eval: int = 10
    w_eval: int = 1
    seed: int = 0
    attribution: str = "ig"
    ig_steps: int = 16
    restarts: int = 3
    ig_gradient: str = "exact"
    record_iterates: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown attack variant {self.variant!r}")
        if self.ig_gradient not in ("proxy", "exact"):
            raise DomainError(f"ig_gradient must be 'proxy' or 'exact', not {self.ig_gradient!r}")
        if self.attribution not in ATTRIBUTIONS:
            raise DomainError(f"unknown attribution {self.attribution!r}")
        if self.epsilon < 0:
            raise DomainError("epsilon must be nonnegative")
        if self.steps < 0 or self.restarts < 1 or self.ig_steps < 1:
            raise DomainError("steps, restarts and ig_steps must be nonnegative/positive")
        if not self.step_size > 0:
            raise DomainError("step size must be positive")
        # a zero budget is allowed with any step size: every iterate is x itself
        if self.epsilon > 0 and self.step_size > self.epsilon:
            raise DomainError(f"step size {self.step_size} exceeds epsilon {self.epsilon}")
        if self.t < 1 or self.k_eval < 1 or self.w_eval < 0:
            raise DomainError("t and k_eval must be positive, w_eval nonnegative")


@dataclass
class AttackResult:
    perturbed: ImageTensor
    delta_linf: float
    prediction_preserved: bool
    objective_trace: list[float] = field(default_factory=list)
    chosen_iteration: int = 0
    metric_trace: list[float] = field(default_factory=list)
    iterates: Optional[list[np.ndarray]] = None

    @property
    def usable(self) -> bool:
        return self.prediction_preserved


def _vector(x) -> tuple[np.ndarray, tuple[int, ...]]:
    if isinstance(x, ImageTensor):
        return x.flat.copy(), x.pixels.shape
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(-1).copy(), arr.shape


def _image(vec: np.ndarray, shape) -> ImageTensor:
    if len(shape) == 1:
        side = int(round(np.sqrt(vec.size)))
        shape = (1, side, side)
    return ImageTensor(np.clip(vec, 0.0, 1.0).reshape(shape))


def attribution_vector(net: ToyNetwork, x: np.ndarray, class_index: int, method: str = "ig", ig_steps: int = 16) -> np.ndarray:
    if method == "simple_grad":
        return gradient_vector(net, x, class_index)
    if method == "input_x_grad":
        return x * gradient_vector(net, x, class_index)
    if method == "ig":
        return ig_vector(net, x, class_index, ig_steps)
    raise DomainError(f"unknown attribution {method!r}")


def attribution_map(net: ToyNetwork, x, class_index: int, shape, method: str = "ig", ig_steps: int = 16) -> AttributionMap:
    vec, _ = _vector(x)
    return AttributionMap(attribution_vector(net, vec, class_index, method, ig_steps).reshape(shape))


def _ig_vjp(net: ToyNetwork, x: np.ndarray, v: np.ndarray, label: int, steps: int) -> np.ndarray:
    """Exact v^T d(IG)/dx for a zero baseline, with one batched central
    difference per interpolation point."""
    alphas = (np.arange(steps) + 0.5) / steps
    path = alphas[:, None] * x[None, :]
    u = x * v
    r = HVP_RADIUS
    g = input_gradients(net, np.concatenate([path, path + r * u, path - r * u]), label)
    mean_grad = g[:steps].mean(axis=0)
    hvps = (g[steps:2 * steps] - g[2 * steps:]) / (2.0 * r)
    return v * mean_grad + (alphas[:, None] * hvps).mean(axis=0)


def _attribution_vjp(surrogate: ToyNetwork, x: np.ndarray, v: np.ndarray, label: int, method: str,
                     ig_steps: int = 16, ig_gradient: str = "proxy") -> np.ndarray:
    """v^T d(attribution)/dx.

    With ``ig_gradient="proxy"`` integrated gradients use the simple-gradient
    term H v in place of their exact derivative.
    """
    if method == "input_x_grad":
        g = gradient_vector(surrogate, x, label)
        return g * v + hvp_fd(surrogate, x, x * v, label, HVP_RADIUS)
    if method == "ig" and ig_gradient == "exact":
        return _ig_vjp(surrogate, x, v, label, ig_steps)
    return hvp_fd(surrogate, x, v, label, HVP_RADIUS)


# --- random perturbations --------------------------------------------------------


def universal_random(shape, epsilon: float, seed: int) -> np.ndarray:
    """A single +-epsilon sign pattern meant to be reused for every image."""
    if epsilon < 0:
        raise DomainError("epsilon must be nonnegative")
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=shape) * 2 - 1
    return epsilon * signs.astype(np.float64)


def apply_perturbation(x, delta: np.ndarray, net: Optional[ToyNetwork] = None) -> AttackResult:
    """Add ``delta``, clip to [0, 1] and check the prediction (if a net is given)."""
    vec, shape = _vector(x)
    pert = np.clip(vec + np.asarray(delta, dtype=np.float64).reshape(-1), 0.0, 1.0)
    preserved = True
    if net is not None:
        preserved = bool(predict(net, pert) == predict(net, vec))
    return AttackResult(
        perturbed=_image(pert, shape),
        delta_linf=float(np.max(np.abs(pert - vec))) if vec.size else 0.0,
        prediction_preserved=preserved,
        chosen_iteration=1,
    )


def random_sign(x, epsilon: float, seed: int, net: Optional[ToyNetwork] = None) -> AttackResult:
    """Independent fair +-epsilon signs per coordinate."""
    vec, _ = _vector(x)
    return apply_perturbation(x, universal_random(vec.shape, epsilon, seed), net)


# --- iterative attacks ---------------------------------------------------------------


def _project(z: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(z, lo), hi)


def _iterate(net: ToyNetwork, x, cfg: AttackConfig, direction: Callable, objective: Callable,
             score: Callable) -> AttackResult:
    """Shared loop.

    ``direction(z, rng)`` is an ascent direction for ``objective(z, attr)``;
    ``score(attr)`` ranks iterates (lower is a stronger attack).
    """
    x0, shape = _vector(x)
    label = int(predict(net, x0))
    lo = np.maximum(x0 - cfg.epsilon, 0.0)
    hi = np.minimum(x0 + cfg.epsilon, 1.0)
    objective_trace: list[float] = []
    metric_trace: list[float] = []
    iterates: Optional[list] = [] if cfg.record_iterates else None
    best = None
    best_score = np.inf
    best_iter = 0
    it = 0
    for restart in range(cfg.restarts if cfg.steps > 0 else 0):
        rng = np.random.default_rng([cfg.seed, restart])
        z = x0.copy()
        if restart > 0:
            z = _project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), lo, hi)
        for _ in range(cfg.steps):
            it += 1
            z = _project(z + cfg.step_size * np.sign(direction(z, rng)), lo, hi)
            attr = attribution_vector(net, z, label, cfg.attribution, cfg.ig_steps)
            objective_trace.append(float(objective(z, attr)))
            s = float(score(attr))
            metric_trace.append(s)
            if iterates is not None:
                iterates.append(z.copy())
            if int(predict(net, z)) != label:
                continue
            if s < best_score:
                best, best_score, best_iter = z.copy(), s, it
    if cfg.steps == 0:
        return AttackResult(_image(x0, shape), 0.0, True, [], 0, [], iterates)
    if best is None:
        return AttackResult(_image(x0, shape), 0.0, False, objective_trace, 0, metric_trace, iterates)
    return AttackResult(
        perturbed=_image(best, shape),
        delta_linf=float(np.max(np.abs(best - x0))),
        prediction_preserved=True,
        objective_trace=objective_trace,
        chosen_iteration=best_iter,
        metric_trace=metric_trace,
        iterates=iterates,
    )


def _mass_attack(net: ToyNetwork, x, cfg: AttackConfig, target: np.ndarray, select: Callable) -> AttackResult:
    """Push attribution mass off ``target`` (flat boolean mask)."""
    x0, _ = _vector(x)
    label = int(predict(net, x0))
    surrogate = net.smooth_surrogate()
    indicator = target.astype(np.float64)

    def direction(z, rng):
        return -_attribution_vjp(surrogate, z, indicator, label, cfg.attribution, cfg.ig_steps, cfg.ig_gradient)

    def objective(z, attr):
        return -float(attr[target].sum())

    return _iterate(net, x, cfg, direction, objective, select)


def _grid(net: ToyNetwork, x) -> tuple[int, int]:
    vec, shape = _vector(x)
    if len(shape) == 3:
        return shape[1], shape[2]
    side = int(round(np.sqrt(vec.size)))
    return side, side


def topk_attack(net: ToyNetwork, x, cfg: AttackConfig) -> AttackResult:
    """Lower the attribution mass on the original top-t pixels; keep the
    iterate with the smallest top-k intersection."""
    return _neighborhood_attack(net, x, cfg, w_target=0, lens=False)


def lens_objective_attack(net: ToyNetwork, x, cfg: AttackConfig) -> AttackResult:
    """As :func:`topk_attack`, but the target is the w_eval-neighborhood of the
    top-t set and iterates are ranked by w_eval-LENS-prec@k."""
    return _neighborhood_attack(net, x, cfg, w_target=cfg.w_eval, lens=True)


def _neighborhood_attack(net, x, cfg, w_target: int, lens: bool) -> AttackResult:
    x0, _ = _vector(x)
    dims = _grid(net, x)
    if cfg.t > x0.size or cfg.k_eval > x0.size:
        raise DomainError("t and k_eval must not exceed the image size")
    label = int(predict(net, x0))
    a0 = AttributionMap(attribution_vector(net, x0, label, cfg.attribution, cfg.ig_steps).reshape(dims))
    target = dilate(top_k_mask(a0, cfg.t), w_target).ravel()

    if lens:
        def select(attr):
            return lens_prec_at_k(a0, AttributionMap(attr.reshape(dims)), cfg.k_eval, cfg.w_eval)
    else:
        def select(attr):
            return topk_intersection(a0, AttributionMap(attr.reshape(dims)), cfg.k_eval)

    return _mass_attack(net, x, cfg, target, select)


def center_of_mass(amap) -> tuple[float, float]:
    """Center of the absolute attribution mass, in (row, col) pixel units."""
    values = amap.values if isinstance(amap, AttributionMap) else np.asarray(amap, dtype=np.float64)
    mass = np.abs(values)
    total = float(mass.sum())
    if total == 0.0:
        raise DomainError("center of mass of an all-zero map is undefined")
    rows, cols = np.indices(values.shape)
    return float((mass * rows).sum() / total), float((mass * cols).sum() / total)


def mass_center_attack(net: ToyNetwork, x, cfg: AttackConfig) -> AttackResult:
    """Move the center of attribution mass as far as possible.

    ``objective_trace`` holds the displacement (in pixels) of every iterate.
    """
    x0, _ = _vector(x)
    dims = _grid(net, x)
    label = int(predict(net, x0))
    surrogate = net.smooth_surrogate()
    a0 = attribution_vector(net, x0, label, cfg.attribution, cfg.ig_steps).reshape(dims)
    c0 = np.array(center_of_mass(a0))
    rows, cols = (g.ravel().astype(np.float64) for g in np.indices(dims))

    def displacement(attr):
        return float(np.linalg.norm(np.array(center_of_mass(attr.reshape(dims))) - c0))

    def direction(z, rng):
        attr = attribution_vector(net, z, label, cfg.attribution, cfg.ig_steps)
        mass = np.abs(attr)
        total = mass.sum()
        if total == 0.0:
            return np.zeros_like(z)
        c = np.array([(mass * rows).sum(), (mass * cols).sum()]) / total
        shift = c - c0
        norm = np.linalg.norm(shift)
        if norm < 1e-12:
            # no preferred direction yet: push the center along a random heading
            theta = rng.uniform(0.0, 2.0 * np.pi)
            unit = np.array([np.cos(theta), np.sin(theta)])
        else:
            unit = shift / norm
        # d|C - C0| / d attr_i
        v = np.sign(attr) * (unit[0] * (rows - c[0]) + unit[1] * (cols - c[1])) / total
        return _attribution_vjp(surrogate, z, v, label, cfg.attribution, cfg.ig_steps, cfg.ig_gradient)

    def objective(z, attr):
        return displacement(attr)

    return _iterate(net, x, cfg, direction, objective, lambda attr: -displacement(attr))


def run_attack(net: ToyNetwork, x, cfg: AttackConfig, universal_delta: Optional[np.ndarray] = None) -> AttackResult:
    if cfg.variant == "random_sign":
        return random_sign(x, cfg.epsilon, cfg.seed, net)
    if cfg.variant == "universal_random":
        if universal_delta is None:
            vec, _ = _vector(x)
            universal_delta = universal_random(vec.shape, cfg.epsilon, cfg.seed)
        return apply_perturbation(x, universal_delta, net)
    if cfg.variant == "top_k":
        return topk_attack(net, x, cfg)
    if cfg.variant == "mass_center":
        return mass_center_attack(net, x, cfg)
    return lens_objective_attack(net, x, cfg)
