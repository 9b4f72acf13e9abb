"""Round-budget policies.

* fixed-T: just run the federation loop to its round budget;
* adaptive discounting: whenever the test-loss improvement of a round
  falls below a threshold zeta, shrink the remaining budget by a factor
  beta — ``T <- floor(beta*(T - t)) + t`` — and let the noise
  recalibration absorb the change;
* exhaustive search: run a fixed-T grid and pick the argmin of the
  seed-averaged final loss;
* linear noise decay: a fixed starting noise scale shrinking linearly
  each round, halted by a cumulative moment accountant instead of a
  preset round count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .accountant import MomentLedger, calibrate_sigma, sensitivity
from .federation import FederationConfig, ServerState, TrainingResult, evaluate, run_round

# floor() guard so values like 0.9*150 = 134.99999999999997 floor to 135
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class CrdConfig:
    """Adaptive round-discounting parameters."""

    beta: float = 0.9
    zeta: float = 0.001
    T_init: int = 200

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if self.zeta <= 0.0:
            raise ValueError(f"zeta must be > 0, got {self.zeta}")
        if self.T_init < 1:
            raise ValueError(f"T_init must be >= 1, got {self.T_init}")


@dataclass(frozen=True)
class SchedulerDecision:
    new_T: int
    triggered: bool
    delta_v: float  # observed improvement V_prev - V_curr


def crd_step(v_prev: float, v_curr: float, t: int, T: int, cfg: CrdConfig) -> SchedulerDecision:
    """One discounting decision after a round finishing at time t.

    Improvement below zeta shrinks the remaining budget:
    ``new_T = floor(beta*(T-t)) + t``; otherwise T is kept.  The result
    always satisfies ``t <= new_T <= T``; a trigger with no rounds left to
    discount returns ``new_T = t``, ending training.
    """
    if t > T:
        raise ValueError(f"need t <= T, got t={t}, T={T}")
    delta_v = v_prev - v_curr
    if delta_v < cfg.zeta:
        new_T = math.floor(cfg.beta * (T - t) + _FLOOR_EPS) + t
        return SchedulerDecision(new_T=new_T, triggered=True, delta_v=delta_v)
    return SchedulerDecision(new_T=T, triggered=False, delta_v=delta_v)


class CrdScheduler:
    """Stateful ``on_round`` callback applying crd_step each round.

    ``initial_v`` is the test loss of the initial model, so the very first
    round's improvement is measurable.
    """

    def __init__(self, cfg: CrdConfig, initial_v: float) -> None:
        self.cfg = cfg
        self.prev_v = initial_v
        self.decisions: list[SchedulerDecision] = []

    def __call__(self, server: ServerState, record) -> None:
        v = record.test_loss
        if server.t < server.T:
            decision = crd_step(self.prev_v, v, server.t, server.T, self.cfg)
            server.T = decision.new_T
            record.trigger_fired = decision.triggered
            self.decisions.append(decision)
        self.prev_v = v


def search_optimal_T(run_one, T_grid, seeds):
    """Exhaustive fixed-T search.

    ``run_one(T, seed)`` returns the final test loss of a fixed-T run.
    Returns ``(T_star, mean_loss_by_T, failures)`` where failures maps
    (T, seed) to the raised exception; a grid point with at least one
    surviving seed stays in the argmin, and per-point failures never abort
    the sweep.
    """
    T_grid = list(T_grid)
    if not T_grid:
        raise ValueError("empty T grid")
    mean_loss_by_T: dict[int, float] = {}
    failures: dict[tuple, Exception] = {}
    for T in T_grid:
        losses = []
        for seed in seeds:
            try:
                losses.append(run_one(T, seed))
            except Exception as exc:  # noqa: BLE001 - sweep must survive
                failures[(T, seed)] = exc
        if losses:
            mean_loss_by_T[T] = sum(losses) / len(losses)
    if not mean_loss_by_T:
        raise RuntimeError(f"every grid point failed: {failures}")
    T_star = min(mean_loss_by_T, key=lambda T: (mean_loss_by_T[T], T))
    return T_star, mean_loss_by_T, failures


@dataclass
class DecayResult:
    params: object
    records: list
    rounds_run: int
    halt_reason: str  # "accountant_halt" | "sigma_floor" | "completed"
    sigma_start: dict  # client id -> starting noise scale
    initial_test_loss: float


def linear_decay_baseline(
    server: ServerState,
    clients: list,
    cfg: FederationConfig,
    train_eval,
    test_eval,
    slope_fraction: float = 1.0,
) -> DecayResult:
    """Linearly shrinking noise, halted by the cumulative moment accountant.

    Round r uses ``sigma_start - slope*r`` per client, with
    ``slope = slope_fraction * sigma_start / T``; ``slope_fraction=0``
    keeps sigma fixed.  Before each round the per-client moment ledgers
    preview the charge and halt as soon as any client's tail bound would
    exceed its delta at its epsilon — so at halt the spent privacy is
    within budget and one more round would not be.
    """
    if slope_fraction < 0.0:
        raise ValueError(f"slope_fraction must be >= 0, got {slope_fraction}")
    U = len(clients)
    q = cfg.K / U
    sigma_start, ledgers = {}, {}
    for c in clients:
        dl = sensitivity(cfg.eta, cfg.clip, len(c.shard))
        sigma_start[c.id] = calibrate_sigma(c.budget, q, server.T, dl)
        ledgers[c.id] = MomentLedger(q, dl)
    slopes = {i: slope_fraction * s / server.T for i, s in sigma_start.items()}

    v0, _ = evaluate(cfg.spec, server.global_params, test_eval)
    halt = "completed"
    while server.t < server.T:
        r = server.t
        sig = {i: sigma_start[i] - slopes[i] * r for i in sigma_start}
        if any(s <= 0.0 for s in sig.values()):
            halt = "sigma_floor"
            break
        if any(
            not ledgers[c.id].within(c.budget, extra_sigma=sig[c.id])
            for c in clients
        ):
            halt = "accountant_halt"
            break
        run_round(server, clients, cfg, train_eval, test_eval, sigma_override=sig)
        for c in clients:
            ledgers[c.id].charge(sig[c.id])
    return DecayResult(
        params=server.global_params,
        records=server.records,
        rounds_run=server.t,
        halt_reason=halt,
        sigma_start=sigma_start,
        initial_test_loss=v0,
    )
