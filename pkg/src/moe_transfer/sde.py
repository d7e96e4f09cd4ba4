"""Normalized-update optimizer proxy: discrete iteration and its limiting SDE.

A scalar parameter driven by a noise-normalized gradient step is governed
by three quantities only: the signal-to-noise parameter sigma0 = eta *
sigma_noise, the normalized decay lambda_tilde = lambda / eta, and the
horizon T * eta**2. This module simulates both the discrete iteration and
the Euler-Maruyama integration of the limit, and packages the transfer
experiments built on them: the exact fixed-token batch rule, the
fixed-iteration sigma0 shift, and the activated-expert cancellation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .rng import Rng

__all__ = [
    "SDEConfig",
    "DiscreteConfig",
    "SDEStats",
    "Case1Result",
    "Case2Result",
    "ActivatedTransferResult",
    "simulate_sde",
    "simulate_sde_path",
    "simulate_discrete",
    "ou_moments",
    "case1_batch_transfer",
    "case2_fixed_iterations",
    "activated_expert_transfer",
    "sde_config_to_dict",
    "discrete_config_from_dict",
    "sde_config_from_dict",
    "stats_to_dict",
]

_TRIPLE_TOL = 1e-12


@dataclass(frozen=True)
class SDEConfig:
    """Continuous-time inputs: sigma0, lambda_tilde, horizon, constant drift gbar."""

    sigma0: float
    lambda_tilde: float
    horizon: float
    gbar: float
    n_steps: int
    n_traj: int
    theta0: float = 0.0

    def __post_init__(self) -> None:
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.lambda_tilde < 0:
            raise ValueError("lambda_tilde must be nonnegative")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1 or self.n_traj < 2:
            raise ValueError("need at least one step and two trajectories")


@dataclass(frozen=True)
class DiscreteConfig:
    """Discrete iteration inputs; the derived SDE objects come from :meth:`to_sde`."""

    eta: float
    lam: float
    sigma_exp: float
    gbar: float
    T: int
    n_traj: int
    theta0: float = 0.0

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not self.sigma_exp > 0:
            raise ValueError("sigma_exp must be positive")
        if self.T < 1 or self.n_traj < 2:
            raise ValueError("need at least one step and two trajectories")

    @property
    def sigma0(self) -> float:
        return self.eta * self.sigma_exp

    @property
    def lambda_tilde(self) -> float:
        return self.lam / self.eta

    @property
    def horizon(self) -> float:
        return self.T * self.eta * self.eta

    def to_sde(self, n_steps: int | None = None) -> SDEConfig:
        return SDEConfig(
            sigma0=self.sigma0,
            lambda_tilde=self.lambda_tilde,
            horizon=self.horizon,
            gbar=self.gbar,
            n_steps=self.T if n_steps is None else n_steps,
            n_traj=self.n_traj,
            theta0=self.theta0,
        )


@dataclass(frozen=True)
class SDEStats:
    """Terminal mean and variance over trajectories, with standard errors."""

    terminal_mean: float
    terminal_var: float
    mean_std_error: float
    var_std_error: float
    n_traj: int

    def __post_init__(self) -> None:
        if self.terminal_var < 0:
            raise ValueError("variance cannot be negative")


def _stats(theta: np.ndarray) -> SDEStats:
    n = theta.size
    var = float(theta.var(ddof=1))
    return SDEStats(
        terminal_mean=float(theta.mean()),
        terminal_var=var,
        mean_std_error=math.sqrt(var / n),
        var_std_error=var * math.sqrt(2.0 / (n - 1)),
        n_traj=n,
    )


def _integrate_sde(cfg: SDEConfig, rng: Rng, checkpoints: int = 0) -> tuple[np.ndarray, list[tuple[float, float, float]]]:
    dt = cfg.horizon / cfg.n_steps
    sdt = math.sqrt(dt)
    drift = -cfg.gbar / cfg.sigma0
    theta = np.full(cfg.n_traj, cfg.theta0, dtype=float)
    rows: list[tuple[float, float, float]] = []
    every = max(1, cfg.n_steps // checkpoints) if checkpoints else 0
    gen = rng.gen
    for step in range(1, cfg.n_steps + 1):
        theta = theta + (drift - cfg.lambda_tilde * theta) * dt - sdt * gen.standard_normal(cfg.n_traj)
        if every and (step % every == 0 or step == cfg.n_steps):
            rows.append((step * dt, float(theta.mean()), float(theta.var(ddof=1))))
    return theta, rows


def simulate_sde(cfg: SDEConfig, rng: Rng) -> SDEStats:
    """Euler-Maruyama integration of d(theta) = -(gbar/sigma0) dtau - lambda_tilde theta dtau - dW."""
    if cfg.n_steps < 10 or cfg.n_traj < 100:
        raise ValueError("SDE simulation needs n_steps >= 10 and n_traj >= 100")
    theta, _ = _integrate_sde(cfg, rng)
    return _stats(theta)


def simulate_sde_path(cfg: SDEConfig, rng: Rng, checkpoints: int = 20) -> tuple[SDEStats, list[tuple[float, float, float]]]:
    """Like :func:`simulate_sde` but also returns (tau, mean, var) checkpoint rows."""
    if cfg.n_steps < 10 or cfg.n_traj < 100:
        raise ValueError("SDE simulation needs n_steps >= 10 and n_traj >= 100")
    theta, rows = _integrate_sde(cfg, rng, checkpoints=checkpoints)
    return _stats(theta), rows


def simulate_discrete(cfg: DiscreteConfig, rng: Rng) -> SDEStats:
    """Iterate theta <- theta - eta * (g / sigma_exp + lam * theta) with g = gbar + sigma_exp * xi.

    The noise contribution is applied as -eta * xi directly, which is the
    same decomposition and keeps the iteration exactly invariant under a
    common rescaling of sigma_exp and gbar when gbar = 0.
    """
    if cfg.T < 10 or cfg.n_traj < 100:
        raise ValueError("discrete simulation needs T >= 10 and n_traj >= 100")
    theta = np.full(cfg.n_traj, cfg.theta0, dtype=float)
    drift = cfg.eta * (cfg.gbar / cfg.sigma_exp)
    gen = rng.gen
    for _ in range(cfg.T):
        theta = theta - drift - cfg.eta * gen.standard_normal(cfg.n_traj) - cfg.eta * cfg.lam * theta
    return _stats(theta)


def ou_moments(
    sigma0: float,
    lambda_tilde: float,
    gbar: float,
    theta0: float,
    tau: float,
) -> tuple[float, float]:
    """Closed-form mean and variance of the linear SDE at time tau.

    With decay: mean relaxes toward -gbar / (sigma0 * lambda_tilde) at rate
    lambda_tilde and the variance saturates at 1 / (2 * lambda_tilde); the
    lambda_tilde -> 0 limit is drifting Brownian motion with variance tau.
    """
    if lambda_tilde == 0.0:
        return theta0 - gbar * tau / sigma0, tau
    pull = -gbar / (sigma0 * lambda_tilde)
    decay = math.exp(-lambda_tilde * tau)
    mean = (theta0 - pull) * decay + pull
    var = (1.0 - math.exp(-2.0 * lambda_tilde * tau)) / (2.0 * lambda_tilde)
    return mean, var


@dataclass(frozen=True)
class Case1Result:
    """Fixed-token batch transfer: both runs plus the statistical match verdict."""

    base: SDEStats
    transferred: SDEStats
    match: bool


def _triples_close(a: DiscreteConfig, b: DiscreteConfig) -> bool:
    pairs = (
        (a.sigma0, b.sigma0),
        (a.lambda_tilde, b.lambda_tilde),
        (a.horizon, b.horizon),
    )
    return all(abs(x - y) <= _TRIPLE_TOL * max(1.0, abs(x), abs(y)) for x, y in pairs)


def _stats_match(a: SDEStats, b: SDEStats) -> bool:
    mean_tol = 3.0 * math.hypot(a.mean_std_error, b.mean_std_error)
    var_tol = 3.0 * math.hypot(a.var_std_error, b.var_std_error)
    return abs(a.terminal_mean - b.terminal_mean) <= mean_tol and abs(a.terminal_var - b.terminal_var) <= var_tol


def case1_batch_transfer(
    base: DiscreteConfig,
    kappa_B: float,
    rng: Rng,
    common_noise: bool = False,
) -> Case1Result:
    """Scale the batch by kappa_B at fixed total tokens and check the exact rule.

    The transferred run uses eta' = sqrt(kappa) * eta, lam' = sqrt(kappa) *
    lam, sigma_exp' = sigma_exp / sqrt(kappa), T' = T / kappa; that
    preserves all three derived SDE objects exactly, so terminal statistics
    must agree up to Monte-Carlo error. With ``common_noise`` the
    transferred run consumes block-aggregated base noise, which is what
    averaging a kappa-times larger batch does.
    """
    if not kappa_B > 0:
        raise ValueError("kappa_B must be positive")
    steps = base.T / kappa_B
    if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
        raise ValueError(f"transferred step count T/kappa_B = {steps} is not a positive integer")
    root = math.sqrt(kappa_B)
    transferred = replace(
        base,
        eta=base.eta * root,
        lam=base.lam * root,
        sigma_exp=base.sigma_exp / root,
        T=round(steps),
    )
    if not _triples_close(base, transferred):
        raise AssertionError("derived SDE objects failed to carry over exactly")
    if common_noise:
        kappa_int = round(kappa_B)
        if abs(kappa_B - kappa_int) > 1e-9 or kappa_int < 1:
            raise ValueError("common-noise pairing needs an integer kappa_B")
        base_stats, trans_stats = _paired_case1(base, transferred, kappa_int, rng)
    else:
        base_rng, trans_rng = rng.split(2)
        base_stats = simulate_discrete(base, base_rng)
        trans_stats = simulate_discrete(transferred, trans_rng)
    return Case1Result(base=base_stats, transferred=trans_stats, match=_stats_match(base_stats, trans_stats))


def _paired_case1(
    base: DiscreteConfig,
    transferred: DiscreteConfig,
    kappa: int,
    rng: Rng,
) -> tuple[SDEStats, SDEStats]:
    theta_b = np.full(base.n_traj, base.theta0, dtype=float)
    theta_t = np.full(transferred.n_traj, transferred.theta0, dtype=float)
    drift_b = base.eta * (base.gbar / base.sigma_exp)
    drift_t = transferred.eta * (transferred.gbar / transferred.sigma_exp)
    gen = rng.gen
    root = math.sqrt(kappa)
    for _ in range(transferred.T):
        acc = np.zeros(base.n_traj)
        for _ in range(kappa):
            xi = gen.standard_normal(base.n_traj)
            theta_b = theta_b - drift_b - base.eta * xi - base.eta * base.lam * theta_b
            acc += xi
        xi_t = acc / root
        theta_t = theta_t - drift_t - transferred.eta * xi_t - transferred.eta * transferred.lam * theta_t
    return _stats(theta_b), _stats(theta_t)


@dataclass(frozen=True)
class Case2Result:
    """Fixed-iteration batch transfer: the preserved horizon and the residual sigma0 shift."""

    sigma0_ratio: float
    horizon_ratio: float
    base: SDEStats
    transferred: SDEStats


def case2_fixed_iterations(base: DiscreteConfig, kappa_B: float, rng: Rng) -> Case2Result:
    """Scale the batch by kappa_B at fixed steps: eta and lam stay put, sigma0 shifts.

    The transferred run keeps eta, lam, T and takes sigma_exp' = sigma_exp
    / sqrt(kappa); the horizon ratio is exactly one while sigma0 drops by
    1 / sqrt(kappa), strengthening drift relative to diffusion.
    """
    if not kappa_B > 0:
        raise ValueError("kappa_B must be positive")
    root = math.sqrt(kappa_B)
    transferred = replace(base, sigma_exp=base.sigma_exp / root)
    sigma0_ratio = 1.0 / root
    measured = transferred.sigma0 / base.sigma0
    if abs(measured - sigma0_ratio) > _TRIPLE_TOL:
        raise AssertionError("sigma0 bookkeeping drifted from 1/sqrt(kappa_B)")
    horizon_ratio = transferred.horizon / base.horizon
    base_rng, trans_rng = rng.split(2)
    return Case2Result(
        sigma0_ratio=sigma0_ratio,
        horizon_ratio=horizon_ratio,
        base=simulate_discrete(base, base_rng),
        transferred=simulate_discrete(transferred, trans_rng),
    )


@dataclass(frozen=True)
class ActivatedTransferResult:
    """Activated-expert transfer: unchanged optimizer scalars, shifted expert noise."""

    eta_ratio: float
    sigma0_ratio: float
    base: SDEStats
    transferred: SDEStats
    per_expert_eta_ratio: np.ndarray | None = None
    per_expert_sigma0_ratio: np.ndarray | None = None


def activated_expert_transfer(
    base: DiscreteConfig,
    a: int,
    a_prime: int,
    N: int,
    B: int,
    rng: Rng,
    loads: Sequence[float] | None = None,
    loads_prime: Sequence[float] | None = None,
) -> ActivatedTransferResult:
    """Change the activated-expert count at fixed eta, lam, T and track the noise shift.

    Each side's expert noise scale is sqrt(N / (B * a)); since batch and
    duration seen by one expert move together when a changes, the combined
    learning-rate correction is exactly one, and the only residual effect
    is sigma0' = sigma0 * sqrt(a / a'). With time-averaged per-expert
    loads, the expert duration ratio equals the batch ratio identically
    (duration is T times the average batch at fixed T), so the cancellation
    holds expert by expert.
    """
    if not (1 <= a <= N and 1 <= a_prime <= N):
        raise ValueError("activated counts must lie in [1, N]")
    if B < 1:
        raise ValueError("batch must be positive")
    sigma_a = math.sqrt(N / (B * a))
    sigma_a_prime = math.sqrt(N / (B * a_prime))
    cfg = replace(base, sigma_exp=sigma_a)
    cfg_prime = replace(base, sigma_exp=sigma_a_prime)

    eta_ratio = cfg_prime.eta / cfg.eta
    sigma0_ratio = math.sqrt(a / a_prime)
    measured = cfg_prime.sigma0 / cfg.sigma0
    if abs(measured - sigma0_ratio) > _TRIPLE_TOL:
        raise AssertionError("sigma0 bookkeeping drifted from sqrt(a/a')")

    per_eta = per_sigma = None
    if loads is not None or loads_prime is not None:
        if loads is None or loads_prime is None:
            raise ValueError("imbalanced transfer needs loads for both sides")
        load_a = np.asarray(loads, dtype=float)
        load_a_prime = np.asarray(loads_prime, dtype=float)
        if load_a.shape != (N,) or load_a_prime.shape != (N,):
            raise ValueError(f"loads must have shape ({N},)")
        if (load_a <= 0).any() or (load_a_prime <= 0).any():
            raise ValueError("per-expert loads must be positive")
        batch_ratio = load_a_prime / load_a
        # Duration is T times the time-averaged batch with T held fixed, so
        # the per-expert duration ratio IS the batch ratio.
        duration_ratio = batch_ratio
        per_eta = np.sqrt(batch_ratio / duration_ratio)
        per_sigma = np.sqrt(load_a / load_a_prime)

    base_rng, trans_rng = rng.split(2)
    return ActivatedTransferResult(
        eta_ratio=eta_ratio,
        sigma0_ratio=sigma0_ratio,
        base=simulate_discrete(cfg, base_rng),
        transferred=simulate_discrete(cfg_prime, trans_rng),
        per_expert_eta_ratio=per_eta,
        per_expert_sigma0_ratio=per_sigma,
    )


# ---------------------------------------------------------------------------
# Config / stats serialization for the CLI.
# ---------------------------------------------------------------------------


def discrete_config_from_dict(node: Mapping[str, Any], path: str = "config") -> DiscreteConfig:
    try:
        return DiscreteConfig(
            eta=float(node["eta"]),
            lam=float(node["lam"]),
            sigma_exp=float(node["sigma_exp"]),
            gbar=float(node.get("gbar", 0.0)),
            T=int(node["T"]),
            n_traj=int(node["n_traj"]),
            theta0=float(node.get("theta0", 0.0)),
        )
    except KeyError as exc:
        from .config import ConfigError

        raise ConfigError(f"{path}.{exc.args[0]}", "missing field") from None


def sde_config_from_dict(node: Mapping[str, Any], path: str = "config") -> SDEConfig:
    try:
        return SDEConfig(
            sigma0=float(node["sigma0"]),
            lambda_tilde=float(node["lambda_tilde"]),
            horizon=float(node["horizon"]),
            gbar=float(node.get("gbar", 0.0)),
            n_steps=int(node["n_steps"]),
            n_traj=int(node["n_traj"]),
            theta0=float(node.get("theta0", 0.0)),
        )
    except KeyError as exc:
        from .config import ConfigError

        raise ConfigError(f"{path}.{exc.args[0]}", "missing field") from None


def sde_config_to_dict(cfg: SDEConfig) -> dict[str, Any]:
    return {
        "sigma0": cfg.sigma0,
        "lambda_tilde": cfg.lambda_tilde,
        "horizon": cfg.horizon,
        "gbar": cfg.gbar,
        "n_steps": cfg.n_steps,
        "n_traj": cfg.n_traj,
        "theta0": cfg.theta0,
    }


def stats_to_dict(stats: SDEStats) -> dict[str, Any]:
    return {
        "terminal_mean": stats.terminal_mean,
        "terminal_var": stats.terminal_var,
        "mean_std_error": stats.mean_std_error,
        "var_std_error": stats.var_std_error,
        "n_traj": stats.n_traj,
    }
