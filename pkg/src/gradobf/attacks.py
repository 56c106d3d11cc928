"""Targeted adversarial attacks: standard gradient attacks, BPDA, EOT and their combinations.

Conventions
-----------
* Targeted attacks *descend* the cross-entropy toward the target label;
  ``targeted=False`` ascends it away from the true label instead.
* Every attack returns an :class:`AttackTrace`.  Round 0 records the clean
  input pushed through the defense; later rounds record the current candidate.
  Predictions always come from one fresh draw of the full defended pipeline.
* Standard attacks (FGSM, I-FGSM, L-BFGS, C&W) craft against the undefended
  model and are judged once, through the defense, on their final output.
* Iterative BPDA/EOT attacks take plain gradient steps of size ``budget.lr``,
  clamp to [0, 1], and stop at the first success, when the perturbation l2
  exceeds ``budget.l2_bound``, or after ``budget.max_rounds``.

Random streams: round ``r`` draws its gradient transforms from
``rng.child(f"grad{r}")`` and its defended evaluation from
``rng.child(f"eval{r}")``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Rng
from .metrics import l2_norm, linf_norm
from .preprocess import Preprocessor, compose, identity

__all__ = [
    "AttackBudget",
    "AttackTrace",
    "RoundRecord",
    "BpdaSurrogate",
    "AttackSpec",
    "parse_attack",
    "fgsm",
    "ifgsm",
    "lbfgs_attack",
    "lbfgs_minimize",
    "cw_attack",
    "bpda_gradient",
    "eot_gradient",
    "run_iterative_attack",
    "semi_brute_force_eot",
    "run_attack",
]


@dataclass(frozen=True)
class AttackBudget:
    max_rounds: int = 100
    l2_bound: float = 0.05
    linf_bound: float = 8 / 255
    lr: float = 0.1
    eot_ensemble: int = 30
    # "stop": end the attack once l2 exceeds the bound.
    # "project": pull each iterate back onto the l2 ball and keep going.
    bound_mode: str = "stop"

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.l2_bound <= 0 or self.linf_bound <= 0:
            raise ValueError("norm bounds must be positive")
        if self.eot_ensemble < 1:
            raise ValueError("eot_ensemble must be at least 1")
        if self.bound_mode not in ("stop", "project"):
            raise ValueError(f"bound_mode must be 'stop' or 'project', got {self.bound_mode!r}")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    l2: float
    linf: float
    pred: int
    success: bool


@dataclass
class AttackTrace:
    label: int
    target: int
    rounds: list = field(default_factory=list)
    final_image: Optional[np.ndarray] = field(default=None, repr=False)
    succeeded: bool = False
    rounds_used: int = 0

    @property
    def final(self) -> RoundRecord:
        return self.rounds[-1]


@dataclass(frozen=True)
class BpdaSurrogate:
    """Stand-in for the Jacobian of a stage that has none.

    ``identity`` passes the incoming gradient through untouched.  ``custom``
    calls ``fn(stage_input, grad)`` and uses its result.
    """

    mode: str = "identity"
    fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in ("identity", "custom"):
            raise ValueError(f"unknown surrogate mode {self.mode!r}")
        if self.mode == "custom" and self.fn is None:
            raise ValueError("custom surrogate needs a function")

    def __call__(self, stage_input, g):
        if self.mode == "identity":
            return g
        return self.fn(stage_input, g)


IDENTITY_SURROGATE = BpdaSurrogate()


# --------------------------------------------------------------------------- helpers


class _Judge:
    """Records rounds against the original image using fresh defended inference."""

    def __init__(self, model, defense, x, label, target, l2_bound, rng, targeted=True):
        self.model, self.defense, self.x = model, defense, x
        self.label, self.target, self.targeted = int(label), int(target), targeted
        self.l2_bound, self.rng = l2_bound, rng
        self.trace = AttackTrace(self.label, self.target)

    def __call__(self, r: int, candidate: np.ndarray) -> RoundRecord:
        seen = self.defense.apply(candidate, self.rng.child(f"eval{r}"))
        pred = int(self.model.predict(seen))
        l2 = l2_norm(candidate, self.x)
        hit = pred == self.target if self.targeted else pred != self.label
        rec = RoundRecord(r, l2, linf_norm(candidate, self.x), pred, bool(hit and l2 <= self.l2_bound))
        self.trace.rounds.append(rec)
        self.trace.succeeded = self.trace.succeeded or rec.success
        return rec

    def finish(self, final_image, rounds_used) -> AttackTrace:
        self.trace.final_image = final_image
        self.trace.rounds_used = rounds_used
        return self.trace


def _loss_grad(model, x, target, targeted=True):
    """Gradient of the attack loss (descended by every attack here)."""
    loss, g = model.loss_grad(x, target)
    return (loss, g) if targeted else (-loss, -g)


def _rng_or_default(rng):
    return rng if rng is not None else Rng(0, "attack")


# --------------------------------------------------------------------------- standard attacks


def fgsm(model, defense: Preprocessor, x, target: int, eps: float, rng: Optional[Rng] = None,
         label: int = -1, l2_bound: float = 0.05, targeted: bool = True) -> AttackTrace:
    """One signed step of size ``eps`` against the undefended model."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return ifgsm(model, defense, x, target, eps, 1, eps, rng, label, l2_bound, targeted)


def ifgsm(model, defense: Preprocessor, x, target: int, eps: float, iters: int = 10,
          step: Optional[float] = None, rng: Optional[Rng] = None, label: int = -1,
          l2_bound: float = 0.05, targeted: bool = True) -> AttackTrace:
    """Iterated signed steps, each projected onto the l-infinity ball and [0, 1].

    ``step`` defaults to ``eps / iters``.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    step = eps / iters if step is None else step
    judge = _Judge(model, defense, x, label, target, l2_bound, _rng_or_default(rng), targeted)
    judge(0, x)
    adv = x.copy()
    for _ in range(iters):
        _, g = _loss_grad(model, adv, target, targeted)
        adv = adv - step * np.sign(g)
        adv = np.clip(np.clip(adv, x - eps, x + eps), 0.0, 1.0)
    judge(1, adv)
    return judge.finish(adv, iters)


def lbfgs_minimize(fun, x0, lower=None, upper=None, memory: int = 10, max_iters: int = 1000,
                   tol: float = 1e-9, callback=None):
    """Projected L-BFGS on a box.

    ``fun(x) -> (value, grad)``.  The search direction comes from the two-loop
    recursion over the last ``memory`` curvature pairs; each trial point is
    projected onto ``[lower, upper]`` and accepted by Armijo backtracking.
    Returns ``(x, value, iterations)``.  ``callback(x)`` returning True stops early.
    """
    lo = -np.inf if lower is None else lower
    hi = np.inf if upper is None else upper
    x = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)
    f, g = fun(x)
    s_hist, y_hist = [], []
    it = 0
    for it in range(1, max_iters + 1):
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            a = np.vdot(s, q) / np.vdot(y, s)
            alphas.append(a)
            q -= a * y
        if s_hist:
            s, y = s_hist[-1], y_hist[-1]
            q *= np.vdot(s, y) / np.vdot(y, y)
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            b = np.vdot(y, q) / np.vdot(y, s)
            q += (a - b) * s
        d = -q
        if np.vdot(d, g) >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        step = 1.0
        while True:
            x_new = np.clip(x + step * d, lo, hi)
            f_new, g_new = fun(x_new)
            if f_new <= f + 1e-4 * np.vdot(g, x_new - x) or step < 1e-12:
                break
            step *= 0.5
        s, y = x_new - x, g_new - g
        if np.vdot(s, y) > 1e-12:
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        converged = abs(f - f_new) <= tol * max(1.0, abs(f)) or not np.any(s)
        x, f, g = x_new, f_new, g_new
        if converged or (callback is not None and callback(x)):
            break
    return x, f, it


def _binary_search(solve, x, steps: int, c0: float = 1.0):
    """Look for the smallest successful trade-off constant.

    ``solve(c) -> (candidate, success, iters)``.  The constant doubles while no
    success has been seen and bisects once bracketed.  Returns the successful
    candidate with the smallest l2 (or the last one if none succeeded) and
    the total iteration count.
    """
    lo, hi, c = 0.0, np.inf, c0
    best, best_l2, last, total = None, np.inf, x, 0
    for _ in range(steps):
        cand, ok, used = solve(c)
        total += used
        last = cand
        if ok:
            dist = l2_norm(cand, x)
            if dist < best_l2:
                best, best_l2 = cand, dist
            hi = c
            c = (lo + hi) / 2 if lo > 0 else c / 2
        else:
            lo = c
            c = (lo + hi) / 2 if np.isfinite(hi) else c * 2
    return (best if best is not None else last), total


def lbfgs_attack(model, x, target: int, binary_search_steps: int = 5, max_iters: int = 1000,
                 defense: Preprocessor = identity, rng: Optional[Rng] = None, label: int = -1,
                 l2_bound: float = 0.05, c0: float = 1.0) -> AttackTrace:
    """Minimise ``c * CE(f(x'), target) + ||x' - x||^2`` over the unit box."""
    x = np.asarray(x, dtype=np.float64)
    judge = _Judge(model, defense, x, label, target, l2_bound, _rng_or_default(rng))
    judge(0, x)
    if int(model.predict(x)) == target:
        judge(1, x)
        return judge.finish(x.copy(), 0)

    def solve(c):
        def fun(v):
            loss, g = model.loss_grad(v, target)
            d = v - x
            return c * loss + np.vdot(d, d), c * g + 2.0 * d

        cand, _, used = lbfgs_minimize(fun, x, 0.0, 1.0, memory=10, max_iters=max_iters)
        return cand, int(model.predict(cand)) == target, used

    adv, total = _binary_search(solve, x, binary_search_steps, c0)
    judge(1, adv)
    return judge.finish(adv, total)


def cw_attack(model, x, target: int, binary_search_steps: int = 5, max_iters: int = 1000,
              lr: float = 0.1, kappa: float = 0.0, defense: Preprocessor = identity,
              rng: Optional[Rng] = None, label: int = -1, l2_bound: float = 0.05,
              c0: float = 1.0) -> AttackTrace:
    """Carlini-Wagner l2 attack in tanh space, optimised with Adam.

    The objective is ``||x' - x||^2 + c * max(max_{i != t} z_i - z_t, -kappa)``
    with ``x' = (tanh(w) + 1) / 2``.  Within each constant the iterate with the
    smallest distance that the model labels as the target is kept.
    """
    x = np.asarray(x, dtype=np.float64)
    judge = _Judge(model, defense, x, label, target, l2_bound, _rng_or_default(rng))
    judge(0, x)
    if int(model.predict(x)) == target:
        judge(1, x)
        return judge.finish(x.copy(), 0)
    w0 = np.arctanh(np.clip(2.0 * x - 1.0, -1 + 1e-6, 1 - 1e-6))
    others = np.ones(model.class_count, dtype=bool)
    others[target] = False

    def margin(z):
        # z is a batch holding the single candidate
        rival = int(np.argmax(np.where(others, z[0], -np.inf)))
        m = float(z[0, rival] - z[0, target])
        dz = np.zeros_like(z)
        if m > -kappa:
            dz[0, rival] = 1.0
            dz[0, target] = -1.0
        return max(m, -kappa), dz

    def solve(c):
        w = w0.copy()
        m1, m2 = np.zeros_like(w), np.zeros_like(w)
        best, best_l2 = None, np.inf
        prev = np.inf
        used = 0
        for t in range(1, max_iters + 1):
            used = t
            v = (np.tanh(w) + 1.0) / 2.0
            mval, gm = model.logit_vjp(v, lambda z: margin(z))
            d = v - x
            obj = np.vdot(d, d) + c * mval
            if mval <= -kappa and int(model.predict(v)) == target:
                dist = l2_norm(v, x)
                if dist < best_l2:
                    best, best_l2 = v, dist
            gv = 2.0 * d + c * gm
            gw = gv * (1.0 - np.tanh(w) ** 2) / 2.0
            m1 = 0.9 * m1 + 0.1 * gw
            m2 = 0.999 * m2 + 0.001 * gw * gw
            w = w - lr * (m1 / (1 - 0.9**t)) / (np.sqrt(m2 / (1 - 0.999**t)) + 1e-8)
            if t % max(max_iters // 10, 1) == 0:
                if obj > prev * 0.9999:
                    break
                prev = obj
        if best is None:
            return (np.tanh(w) + 1.0) / 2.0, False, used
        return best, True, used

    adv, total = _binary_search(solve, x, binary_search_steps, c0)
    judge(1, adv)
    return judge.finish(adv, total)


# --------------------------------------------------------------------------- BPDA / EOT


def bpda_gradient(model, defense: Preprocessor, x, target: int,
                  surrogate: BpdaSurrogate = IDENTITY_SURROGATE, rng: Optional[Rng] = None,
                  targeted: bool = True) -> np.ndarray:
    """Loss gradient of ``f`` at ``g(x)``, passed back through the surrogate for ``g``."""
    x = np.asarray(x, dtype=np.float64)
    seen = defense.apply(x, rng) if defense is not identity else x
    _, g = _loss_grad(model, seen, target, targeted)
    return surrogate(x, g)


def eot_gradient(model, defense: Preprocessor, x, target: int, n: int, rng: Rng,
                 surrogate: Optional[BpdaSurrogate] = None, targeted: bool = True) -> np.ndarray:
    """Average loss gradient over ``n`` independent draws of ``defense``.

    Differentiable stages contribute their exact Jacobian for the realised
    draw.  Stages without one use ``surrogate``; passing ``None`` requires the
    whole defense to be differentiable.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if surrogate is None and not defense.differentiable:
        raise ValueError(f"{defense.name} has non-differentiable stages; use BPDA+EOT")
    x = np.asarray(x, dtype=np.float64)
    outs, vjps = [], []
    for _ in range(n):
        out, vjp = defense.draw(x, rng)
        outs.append(out)
        vjps.append(vjp)
    _, grads = _loss_grad(model, np.stack(outs), np.full(n, target), targeted)
    total = np.zeros_like(x)
    sur = surrogate if surrogate is not None else IDENTITY_SURROGATE
    for g, vjp in zip(grads, vjps):
        if vjp is None:
            total += sur(x, g)
        elif hasattr(vjp, "steps"):
            total += vjp(g, sur)
        else:
            total += vjp(g)
    return total / n


def _project_l2(adv, x, bound):
    d = adv - x
    rms = np.sqrt(np.mean(d * d))
    if rms > bound:
        adv = x + d * (bound / rms)
    return adv


def _iterate(model, x, target, budget: AttackBudget, grad, judge: _Judge, rng: Rng) -> AttackTrace:
    judge(0, x)
    adv = x.copy()
    if judge.trace.succeeded:
        return judge.finish(adv, 0)
    used = 0
    for r in range(1, budget.max_rounds + 1):
        used = r
        g = grad(adv, rng.child(f"grad{r}"))
        adv = np.clip(adv - budget.lr * g, 0.0, 1.0)
        if budget.bound_mode == "project":
            adv = np.clip(_project_l2(adv, x, budget.l2_bound), 0.0, 1.0)
        rec = judge(r, adv)
        if rec.success or (budget.bound_mode == "stop" and rec.l2 > budget.l2_bound):
            break
    return judge.finish(adv, used)


def run_iterative_attack(model, defense: Preprocessor, x, target: int, budget: AttackBudget,
                         grad_fn: str = "bpda", rng: Optional[Rng] = None, label: int = -1,
                         surrogate: BpdaSurrogate = IDENTITY_SURROGATE,
                         targeted: bool = True) -> AttackTrace:
    """Gradient-descent attack loop with one defended inference per round.

    ``grad_fn`` is ``"bpda"`` (gradient at one draw of ``g(x)``, identity
    backward), ``"eot"`` (exact Jacobians only; the defense must be
    differentiable) or ``"bpda+eot"`` (exact where available, surrogate
    elsewhere), the latter two averaging ``budget.eot_ensemble`` draws.
    """
    rng = _rng_or_default(rng)
    x = np.asarray(x, dtype=np.float64)
    if grad_fn == "bpda":
        def grad(v, stream):
            return bpda_gradient(model, defense, v, target, surrogate, stream, targeted)
    elif grad_fn in ("eot", "bpda+eot"):
        sur = None if grad_fn == "eot" else surrogate
        if sur is None and not defense.differentiable:
            raise ValueError(f"{defense.name} has non-differentiable stages; use BPDA+EOT")

        def grad(v, stream):
            return eot_gradient(model, defense, v, target, budget.eot_ensemble, stream, sur, targeted)
    else:
        raise ValueError(f"unknown gradient estimator {grad_fn!r}")
    judge = _Judge(model, defense, x, label, target, budget.l2_bound, rng, targeted)
    return _iterate(model, x, target, budget, grad, judge, rng)


def semi_brute_force_eot(model, g1: Preprocessor, g2: Preprocessor, x, target: int,
                         budget: AttackBudget, rng: Rng, label: int = -1) -> AttackTrace:
    """EOT against the differentiable stage ``g1`` alone, tested on the full pipeline.

    Gradients ignore ``g2``.  Every round the candidate goes through the full
    defense (``g2`` first, then ``g1``) with fresh randomness, and the loop
    stops at the first success.
    """
    if not g1.differentiable:
        raise ValueError("g1 must be differentiable for semi-brute-force EOT")
    x = np.asarray(x, dtype=np.float64)
    full = compose([g2, g1])

    def grad(v, stream):
        return eot_gradient(model, g1, v, target, budget.eot_ensemble, stream)

    judge = _Judge(model, full, x, label, target, budget.l2_bound, rng)
    return _iterate(model, x, target, budget, grad, judge, rng)


# --------------------------------------------------------------------------- attack strings


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __str__(self):
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}({inner})"


_ATTACK_KEYS = {
    "fgsm": {"eps": float},
    "ifgsm": {"eps": float, "iters": int, "step": float},
    "lbfgs": {"steps": int, "iters": int},
    "cw": {"steps": int, "iters": int, "lr": float},
    "bpda": {"lr": float},
    "eot": {"lr": float, "n": int},
    "bpda+eot": {"lr": float, "n": int},
    "sbf-eot": {"lr": float, "n": int},
}

_ATTACK_DEFAULTS = {
    "fgsm": {"eps": 0.03},
    "ifgsm": {"eps": 0.03, "iters": 10},
    "lbfgs": {"steps": 5, "iters": 1000},
    "cw": {"steps": 5, "iters": 1000, "lr": 0.1},
    "bpda": {"lr": 0.1},
    "eot": {"lr": 0.1, "n": 30},
    "bpda+eot": {"lr": 0.1, "n": 30},
    "sbf-eot": {"lr": 0.1, "n": 30},
}

_ATTACK_RE = re.compile(r"^(?P<kind>[a-z+\-]+)(?:\((?P<args>[^()]*)\))?$")


def parse_attack(spec: str) -> AttackSpec:
    """Parse strings like ``ifgsm(eps=0.03,iters=10)`` or ``bpda+eot(n=30)``."""
    m = _ATTACK_RE.match(spec.strip().replace(" ", ""))
    if not m or m["kind"] not in _ATTACK_KEYS:
        raise ValueError(f"unknown attack {spec!r}; expected one of {', '.join(_ATTACK_KEYS)}")
    kind = m["kind"]
    params = dict(_ATTACK_DEFAULTS[kind])
    if m["args"]:
        for item in m["args"].split(","):
            key, sep, val = item.partition("=")
            if not sep or key not in _ATTACK_KEYS[kind]:
                raise ValueError(f"bad argument {item!r} for attack {kind}")
            try:
                params[key] = _ATTACK_KEYS[kind][key](val)
            except ValueError as exc:
                raise ValueError(f"bad value {val!r} for {kind}.{key}") from exc
    for key in ("eps", "lr"):
        if key in params and params[key] < 0:
            raise ValueError(f"{kind}.{key} must be non-negative")
    for key in ("iters", "steps", "n"):
        if key in params and params[key] < 1:
            raise ValueError(f"{kind}.{key} must be at least 1")
    return AttackSpec(kind, params)


def _split_defense(defense: Preprocessor):
    """Split a pipeline into its non-differentiable part g2 and differentiable part g1."""
    hard = [s for s in defense.stages if not s.differentiable]
    soft = [s for s in defense.stages if s.differentiable]
    g2 = compose(hard) if hard else identity
    g1 = compose(soft) if soft else identity
    return g1, g2


def run_attack(spec: AttackSpec, model, defense: Preprocessor, x, label: int, target: int,
               budget: AttackBudget, rng: Rng) -> AttackTrace:
    """Dispatch one attack described by ``spec`` on a single image."""
    p = spec.params
    kw = dict(rng=rng, label=label)
    if spec.kind == "fgsm":
        return fgsm(model, defense, x, target, p["eps"], l2_bound=budget.l2_bound, **kw)
    if spec.kind == "ifgsm":
        return ifgsm(model, defense, x, target, p["eps"], p["iters"], p.get("step"),
                     l2_bound=budget.l2_bound, **kw)
    if spec.kind == "lbfgs":
        return lbfgs_attack(model, x, target, p["steps"], p["iters"], defense=defense,
                            l2_bound=budget.l2_bound, **kw)
    if spec.kind == "cw":
        return cw_attack(model, x, target, p["steps"], p["iters"], p["lr"], defense=defense,
                         l2_bound=budget.l2_bound, **kw)
    budget = AttackBudget(budget.max_rounds, budget.l2_bound, budget.linf_bound,
                          p["lr"], p.get("n", budget.eot_ensemble), budget.bound_mode)
    if spec.kind == "sbf-eot":
        g1, g2 = _split_defense(defense)
        return semi_brute_force_eot(model, g1, g2, x, target, budget, rng, label)
    return run_iterative_attack(model, defense, x, target, budget, spec.kind, **kw)
