"""Attack-budget scheduling.

The default strategy is residual feedback: the next budget moves
proportionally to how far the current misclassification rate sits below
the full-image baseline established at stage 0 (the attack boundary).
Plain cumulative / exponential increments and a grow-then-bisect search
are available as alternatives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .probe import ProbeConfig, full_regions, masked_pgd

BUDGET_STRATEGIES = ("feedback", "cumulative", "exponential", "binary_search")


@dataclass
class SchedulerConfig:
    epsilon0: float = 4 / 255
    kappa: float = 16 / 255          # feedback gain
    eta: float = 0.05                # acceptable |asr - boundary| margin
    lam: float = 0.0                 # sparsity-term weight; stored, unused
    max_attempts: int = 3
    strategy: str = "feedback"
    cumulative_step: float = 2 / 255
    step_delta: float = 4 / 255      # binary-search growth step
    xi: float = 0.2                  # minimum stage-0 asr for binary_search
    bounds: tuple = None             # defaults to (epsilon0, 1.0)

    def __post_init__(self):
        if self.strategy not in BUDGET_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.bounds is None:
            self.bounds = (self.epsilon0, 1.0)
        self.bounds = (float(self.bounds[0]), float(self.bounds[1]))
        if not 0.0 < self.bounds[0] <= self.bounds[1] <= 1.0:
            raise ValueError(f"bad budget bounds {self.bounds}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")

    def clamp(self, eps):
        return float(min(max(eps, self.bounds[0]), self.bounds[1]))

    def to_dict(self):
        return {"epsilon0": self.epsilon0, "kappa": self.kappa,
                "eta": self.eta, "lam": self.lam,
                "max_attempts": self.max_attempts, "strategy": self.strategy,
                "cumulative_step": self.cumulative_step,
                "step_delta": self.step_delta, "xi": self.xi,
                "bounds": list(self.bounds)}


@dataclass
class BoundaryState:
    beta: float
    degenerate: bool = False
    history: list = field(default_factory=list)

    def record(self, stage, budget, asr, attempts):
        self.history.append({"stage": int(stage), "budget": float(budget),
                             "asr_a": float(asr), "attempts": int(attempts)})


def initial_boundary(model, batch, config=None, probe_config=None, seed=0):
    """Full-image probe at the starting budget; its misclassification rate
    becomes the attack boundary. Returns (ProbeState, BoundaryState).

    Under the binary_search strategy the budget instead grows by step_delta
    (up to 3 steps) until the rate reaches xi, and the boundary is the rate
    actually achieved.
    """
    config = config or SchedulerConfig()
    probe_config = probe_config or ProbeConfig()
    regions = full_regions(batch)
    eps = config.epsilon0
    state = masked_pgd(model, batch, regions, eps, probe_config, seed=seed)
    attempts = 1
    if config.strategy == "binary_search":
        while (state.asr_a < config.xi and attempts <= 3
               and eps < config.bounds[1]):
            eps = config.clamp(eps + config.step_delta)
            state = masked_pgd(model, batch, regions, eps, probe_config,
                               seed=seed)
            attempts += 1
    state.attempts = attempts
    boundary = BoundaryState(beta=state.asr_a)
    if state.asr_a == 0.0:
        boundary.degenerate = True
        warnings.warn("degenerate attack boundary: no stage-0 flips",
                      stacklevel=2)
    boundary.record(0, state.budget, state.asr_a, attempts)
    return state, boundary


def next_budget(eps_prev, asr_current, boundary, config):
    """Residual-feedback update, clamped to the configured bounds."""
    return config.clamp(eps_prev + config.kappa * (boundary.beta - asr_current))


def increment_budget(eps_prev, config):
    """One cumulative (+step) or exponential (x2) budget increment."""
    if config.strategy == "cumulative":
        return config.clamp(eps_prev + config.cumulative_step)
    if config.strategy == "exponential":
        return config.clamp(2.0 * eps_prev)
    raise ValueError(f"strategy {config.strategy!r} has no plain increment")


def binary_search_budget(asr_fn, eps_prev, beta, config):
    """Grow-then-bisect search on a monotone asr(budget) response.

    Grows from eps_prev by step_delta (at most 3 steps) until asr exceeds
    beta, then runs 8 bisection rounds for the largest budget whose asr
    stays at or below beta. If asr already exceeds beta at eps_prev the
    bracket is [lower bound, eps_prev]. Returns (budget, evaluations).
    """
    lo_bound, hi_bound = config.bounds
    evals = 0

    def probe(eps):
        nonlocal evals
        evals += 1
        return asr_fn(eps)

    eps = float(eps_prev)
    asr = probe(eps)
    if asr > beta:
        lo, hi = lo_bound, eps
    else:
        lo = eps
        hi = None
        for step in range(1, 4):
            cand = min(eps + step * config.step_delta, hi_bound)
            if probe(cand) > beta:
                hi = cand
                break
            lo = cand
            if cand >= hi_bound:
                break
        if hi is None:
            return lo, evals    # growth cap or ceiling hit without excess
    for _ in range(8):
        mid = 0.5 * (lo + hi)
        if probe(mid) > beta:
            hi = mid
        else:
            lo = mid
    return lo, evals


def run_stage_budget(model, batch, regions, eps_start, boundary, config,
                     probe_config=None, seed=0):
    """Resolve one stage's budget with at most max_attempts probe rounds.

    feedback: signed correction toward the boundary rate, accepting when
    |asr - beta| <= eta. cumulative / exponential: grow-only increments,
    accepting when asr >= beta - eta. binary_search: grow-then-bisect on
    real probe evaluations (this strategy spends more probe calls than
    max_attempts by design). Returns the accepted ProbeState.
    """
    probe_config = probe_config or ProbeConfig()

    if config.strategy == "binary_search":
        states = {}

        def asr_at(eps):
            key = round(eps, 12)
            if key not in states:
                states[key] = masked_pgd(model, batch, regions, eps,
                                         probe_config, seed=seed)
            return states[key].asr_a

        eps, evals = binary_search_budget(asr_at, eps_start, boundary.beta,
                                          config)
        asr_at(eps)    # the returned bound may be an unprobed bracket edge
        state = states[round(eps, 12)]
        state.attempts = len(states)
        return state

    eps = config.clamp(eps_start)
    state = None
    for attempt in range(1, config.max_attempts + 1):
        state = masked_pgd(model, batch, regions, eps, probe_config,
                           seed=seed)
        state.attempts = attempt
        residual = state.asr_a - boundary.beta
        if config.strategy == "feedback":
            if abs(residual) <= config.eta:
                break
            eps = next_budget(eps, state.asr_a, boundary, config)
        else:
            if residual >= -config.eta:
                break
            eps = increment_budget(eps, config)
        if eps == state.budget:    # clamped to a fixed point, no progress
            break
    return state
