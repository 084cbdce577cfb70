"""Hamiltonian Monte Carlo over velocity-field coefficients.

Identity mass matrix, leapfrog integration and a Metropolis correction on the
Hamiltonian ``H(q, p) = -log pi(q) + |p|^2 / 2``. The step size is adapted
only during burn-in, so the kept part of the chain has a fixed kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np

from paddit.core.errors import DegenerateChainError
from paddit.core.logging import get_logger
from paddit.models.volumes import FloatArray, ScalarVolume
from paddit.registration.kernels import KernelVelocityField
from paddit.registration.posterior import PosteriorTarget
from paddit.schemas import ChainDiagnostics, HmcConfig, RegistrationConfig

logger = get_logger(__name__)

ADAPT_FACTOR = 1.2
ADAPT_BAND = 0.1
MAX_STEP_SEARCH = 30


class Target(Protocol):
    def evaluate(self, q: FloatArray) -> tuple[float, FloatArray]: ...


def chain_rng(seed: int, subject: int = 0, iteration: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, subject, iteration), independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, subject, iteration])))


@dataclass(frozen=True, eq=False)
class ChainState:
    q: FloatArray
    log_density: float
    gradient: FloatArray

    @classmethod
    def at(cls, target: Target, q: FloatArray) -> ChainState:
        log_density, gradient = _safe_evaluate(target, q)
        return cls(np.array(q, dtype=np.float64), log_density, gradient)

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.log_density) and np.all(np.isfinite(self.gradient)))


@dataclass(frozen=True, eq=False)
class HmcStep:
    state: ChainState
    accepted: bool
    accept_prob: float
    energy_error: float
    divergent: bool


class StepSizeTuning(NamedTuple):
    step_size: float
    state: ChainState
    acceptance_rate: float


@dataclass(frozen=True, eq=False)
class ChainResult:
    samples: list[FloatArray]
    diagnostics: ChainDiagnostics
    final_state: ChainState


def _safe_evaluate(target: Target, q: FloatArray) -> tuple[float, FloatArray]:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            log_density, gradient = target.evaluate(q)
    except (ValueError, FloatingPointError, OverflowError):
        return -np.inf, np.full_like(q, np.nan)
    return float(log_density), np.asarray(gradient, dtype=np.float64)


def leapfrog(
    target: Target, state: ChainState, p: FloatArray, step_size: float, n_steps: int
) -> tuple[ChainState, FloatArray]:
    """``n_steps`` leapfrog updates starting from ``state`` with momentum ``p``."""
    q = state.q.copy()
    p = p + 0.5 * step_size * state.gradient
    current = state
    for i in range(n_steps):
        q = q + step_size * p
        current = ChainState.at(target, q)
        if not current.finite:
            return current, p
        if i != n_steps - 1:
            p = p + step_size * current.gradient
    p = p + 0.5 * step_size * current.gradient
    return current, p


def hmc_step(
    state: ChainState,
    target: Target,
    cfg: HmcConfig,
    rng: np.random.Generator,
    step_size: float | None = None,
) -> HmcStep:
    """One HMC transition; the rejected proposal leaves ``state`` unchanged."""
    eps = cfg.step_size if step_size is None else step_size
    p0 = rng.standard_normal(state.q.shape)
    u = rng.uniform()
    proposal, p1 = leapfrog(target, state, p0, eps, cfg.leapfrog_steps)

    h0 = -state.log_density + 0.5 * float(p0 @ p0)
    with np.errstate(over="ignore", invalid="ignore"):
        h1 = -proposal.log_density + 0.5 * float(p1 @ p1)
    energy_error = h1 - h0
    if not proposal.finite or not np.isfinite(energy_error):
        return HmcStep(state, False, 0.0, float("inf"), True)

    accept_prob = 1.0 if energy_error <= 0.0 else float(np.exp(-energy_error))
    if u < accept_prob:
        return HmcStep(proposal, True, accept_prob, energy_error, False)
    return HmcStep(state, False, accept_prob, energy_error, False)


def adapt_step_size(step_size: float, acceptance: float, target_acceptance: float = 0.65) -> float:
    """Multiply or divide by 1.2 when the acceptance leaves the no-move band."""
    if acceptance > target_acceptance + ADAPT_BAND:
        return step_size * ADAPT_FACTOR
    if acceptance < target_acceptance - ADAPT_BAND:
        return step_size / ADAPT_FACTOR
    return step_size


def _one_step_stable(
    target: Target, state: ChainState, p0: FloatArray, step_size: float
) -> bool:
    proposal, p1 = leapfrog(target, state, p0, step_size, 1)
    with np.errstate(over="ignore", invalid="ignore"):
        energy_error = (-proposal.log_density + 0.5 * float(p1 @ p1)) - (
            -state.log_density + 0.5 * float(p0 @ p0)
        )
    return bool(proposal.finite and np.isfinite(energy_error) and energy_error <= np.log(2.0))


def initial_step_size(
    target: Target, state: ChainState, step_size: float, rng: np.random.Generator
) -> float:
    """Starting point for adaptation.

    One momentum draw is held fixed. A stable step (single-step energy error
    within ``log 2``) is doubled while it stays stable; an unstable one is
    halved until it becomes stable. At most ``MAX_STEP_SEARCH`` changes.
    """
    p0 = rng.standard_normal(state.q.shape)
    if _one_step_stable(target, state, p0, step_size):
        for _ in range(MAX_STEP_SEARCH):
            if not _one_step_stable(target, state, p0, 2.0 * step_size):
                break
            step_size *= 2.0
        return step_size
    for _ in range(MAX_STEP_SEARCH):
        step_size /= 2.0
        if _one_step_stable(target, state, p0, step_size):
            break
    return step_size


def tune_step_size(
    target: Target, state: ChainState, cfg: HmcConfig, rng: np.random.Generator
) -> StepSizeTuning:
    """Run the burn-in, adapting the step size toward ``cfg.target_acceptance``.

    After a coarse search by doubling or halving, the step is updated after
    every burn-in transition from that transition's acceptance probability.
    The returned step is the geometric mean over the second half of burn-in.
    """
    step_size = cfg.step_size
    adapt = cfg.adapt_step_size and cfg.burn_in > 0
    if adapt:
        step_size = initial_step_size(target, state, step_size, rng)
        logger.debug(f"Initial step size {cfg.step_size:.3g} -> {step_size:.3g}")
    probs: list[float] = []
    used: list[float] = []
    for _ in range(cfg.burn_in):
        step = hmc_step(state, target, cfg, rng, step_size)
        state = step.state
        probs.append(step.accept_prob)
        used.append(step_size)
        if adapt:
            step_size = adapt_step_size(step_size, step.accept_prob, cfg.target_acceptance)
    if adapt:
        settled = used[len(used) // 2 :]
        step_size = float(np.exp(np.mean(np.log(settled))))
        logger.debug(f"Tuned step size {step_size:.3g} (burn-in acceptance {np.mean(probs):.2f})")
    rate = float(np.mean(probs)) if probs else 1.0
    return StepSizeTuning(step_size, state, rate)


def run_chain(
    target: Target, q0: FloatArray, cfg: HmcConfig, rng: np.random.Generator
) -> ChainResult:
    """Burn-in with tuning, then keep every ``thin``-th state until ``samples`` are stored.

    After burn-in each transition scales the tuned step by a uniform factor in
    ``1 +/- cfg.step_jitter``. The mean energy error covers finite steps only and
    is 0.0 when every step diverged (``divergent_steps`` then equals the total).
    """
    state = ChainState.at(target, q0)
    if not state.finite:
        raise DegenerateChainError("initial state has a non-finite log-density or gradient")

    tuning = tune_step_size(target, state, cfg, rng)
    state = tuning.state

    samples: list[FloatArray] = []
    accepted = 0
    divergent = 0
    energy_errors: list[float] = []
    total = cfg.samples * cfg.thin
    for i in range(total):
        step_size = tuning.step_size
        if cfg.step_jitter > 0.0:
            step_size *= 1.0 + cfg.step_jitter * rng.uniform(-1.0, 1.0)
        step = hmc_step(state, target, cfg, rng, step_size)
        state = step.state
        accepted += int(step.accepted)
        divergent += int(step.divergent)
        if np.isfinite(step.energy_error):
            energy_errors.append(step.energy_error)
        if (i + 1) % cfg.thin == 0:
            samples.append(state.q.copy())

    diagnostics = ChainDiagnostics(
        acceptance_rate=accepted / total,
        mean_energy_error=float(np.mean(energy_errors)) if energy_errors else 0.0,
        tuned_step_size=tuning.step_size,
        divergent_steps=divergent,
    )
    logger.info(
        f"Chain done: acceptance={diagnostics.acceptance_rate:.2f}, "
        f"step_size={diagnostics.tuned_step_size:.3g}, divergent={divergent}"
    )
    if diagnostics.acceptance_rate < cfg.min_acceptance:
        raise DegenerateChainError(
            f"acceptance rate {diagnostics.acceptance_rate:.3f} below {cfg.min_acceptance}",
            diagnostics=diagnostics,
        )
    return ChainResult(samples, diagnostics, state)


def sample_posterior(
    Ik: ScalarVolume,
    IT: ScalarVolume,
    init: KernelVelocityField,
    rc: RegistrationConfig,
    cfg: HmcConfig,
    rng: np.random.Generator | None = None,
    likelihood_weight: float = 1.0,
) -> tuple[list[KernelVelocityField], ChainDiagnostics]:
    """Draw ``cfg.samples`` velocity fields registering ``Ik`` to the template ``IT``."""
    target = PosteriorTarget(Ik, IT, init.grid, rc, likelihood_weight)
    result = run_chain(target, init.flat(), cfg, rng or chain_rng(cfg.seed))
    fields = [KernelVelocityField.from_flat(init.grid, q) for q in result.samples]
    return fields, result.diagnostics
