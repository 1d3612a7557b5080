"""Noisy log-likelihood sources.

Three ways to obtain a noisy evaluation of a log joint: exact values
with emulated observation noise, synthetic likelihood from repeated
simulation, and an external worker process speaking a small line
protocol over stdin/stdout.
"""

from __future__ import annotations

import select
import shlex
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np

from vbmc.spaces import DomainError

_COV_RIDGE = 1e-8


@dataclass(frozen=True)
class NoisyEvaluation:
    """One target evaluation: value, noise-SD estimate, bookkeeping."""

    y: float
    sigma_est: float
    wall_time: float = 0.0
    failed: bool = False
    message: str = ""


class TargetError(RuntimeError):
    """An evaluation source failed in a way the caller must handle."""


class ProtocolError(TargetError):
    """The external worker violated the line protocol."""


def emulated_noisy(exact_loglik, sigma_obs: float, sigma_sigma: float,
                   rng: np.random.Generator):
    """Wrap an exact log density with Gaussian observation noise.

    The returned callable reports ``sigma_obs`` as its noise estimate;
    with ``sigma_sigma > 0`` the report is itself jittered log-normally,
    modelling an imperfect noise estimate.
    """
    if sigma_obs < 0 or sigma_sigma < 0:
        raise DomainError("noise magnitudes must be nonnegative")

    def evaluate(x) -> NoisyEvaluation:
        t0 = time.perf_counter()
        y = float(exact_loglik(np.asarray(x, float)))
        if sigma_obs > 0:
            y += sigma_obs * rng.standard_normal()
        sd = sigma_obs
        if sigma_sigma > 0 and sigma_obs > 0:
            sd = float(np.exp(np.log(sigma_obs)
                              + sigma_sigma * rng.standard_normal()))
        return NoisyEvaluation(y=y, sigma_est=sd,
                               wall_time=time.perf_counter() - t0)

    return evaluate


def synthetic_loglik(observed_summaries, simulate_summaries, theta,
                     n_sim: int, rng: np.random.Generator,
                     b_boot: int = 100) -> NoisyEvaluation:
    """Synthetic log likelihood with a bootstrap noise estimate.

    ``simulate_summaries(theta, n_sim, rng)`` must return an
    ``(n_sim, d)`` array of summary vectors.  The value is the Gaussian
    log density of the observed summaries under the simulated sample
    mean and covariance; ``sigma_est`` is the SD of that value across
    ``b_boot`` bootstrap resamples of the simulated summaries.
    """
    t0 = time.perf_counter()
    obs = np.asarray(observed_summaries, float).ravel()
    d = obs.size
    if n_sim < d + 2:
        raise DomainError(
            f"n_sim={n_sim} too small for {d} summaries (need >= {d + 2})")
    S = np.asarray(simulate_summaries(theta, n_sim, rng), float)
    if S.shape != (n_sim, d):
        raise DomainError(f"simulator returned shape {S.shape}, "
                          f"expected {(n_sim, d)}")
    if not np.all(np.isfinite(S)):
        return NoisyEvaluation(0.0, 0.0, time.perf_counter() - t0,
                               failed=True,
                               message="non-finite simulated summaries")
    y = _gauss_logpdf(obs, S)
    idx = rng.integers(0, n_sim, size=(b_boot, n_sim))
    reps = np.array([_gauss_logpdf(obs, S[i]) for i in idx])
    reps = reps[np.isfinite(reps)]
    sd = float(np.std(reps, ddof=1)) if reps.size > 1 else 1.0
    if not np.isfinite(y):
        return NoisyEvaluation(0.0, 0.0, time.perf_counter() - t0,
                               failed=True,
                               message="non-finite synthetic log density")
    return NoisyEvaluation(float(y), max(sd, 1e-6),
                           time.perf_counter() - t0)


def _gauss_logpdf(obs, S):
    d = obs.size
    mu = S.mean(axis=0)
    C = np.cov(S.T, ddof=1).reshape(d, d)
    sign, logdet = np.linalg.slogdet(C)
    if sign <= 0 or not np.isfinite(logdet):
        C = C + (_COV_RIDGE * np.trace(C) / d + 1e-300) * np.eye(d)
        sign, logdet = np.linalg.slogdet(C)
        if sign <= 0:
            return np.nan
    r = obs - mu
    try:
        sol = np.linalg.solve(C, r)
    except np.linalg.LinAlgError:
        return np.nan
    return -0.5 * (d * np.log(2 * np.pi) + logdet + r @ sol)


class ExternalTarget:
    """Client for a worker process evaluating the target.

    Protocol (one line per message, stdin/stdout of the worker):
      client: ``HELLO v1 <D>``            worker: ``READY``
      client: ``EVAL v1 <run_id> <x...>`` worker: ``RET <y> <sd>`` or
                                                  ``FAIL <message>``
    Coordinates are sent in the original parameter space with 17
    significant digits.  Three consecutive failures abort the run.
    """

    def __init__(self, cmd, D: int, run_id: str = "run0",
                 timeout: float = 60.0, max_consecutive_failures: int = 3):
        self.D = int(D)
        self.run_id = run_id
        self.timeout = timeout
        self.max_consecutive_failures = max_consecutive_failures
        self._consecutive_failures = 0
        if isinstance(cmd, str):
            cmd = shlex.split(cmd)
        self._proc = subprocess.Popen(
            cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1)
        self._send(f"HELLO v1 {self.D}")
        line = self._recv()
        if line != "READY":
            self.close()
            raise ProtocolError(f"expected READY, got {line!r}")

    def _send(self, line: str):
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise ProtocolError(f"worker pipe closed: {exc}") from exc

    def _recv(self) -> str:
        ready, _, _ = select.select([self._proc.stdout], [], [],
                                    self.timeout)
        if not ready:
            self._proc.kill()
            raise TargetError(
                f"worker did not reply within {self.timeout:g} s")
        line = self._proc.stdout.readline()
        if line == "":
            raise ProtocolError("worker closed its output stream")
        return line.strip()

    def __call__(self, x) -> NoisyEvaluation:
        x = np.asarray(x, float).ravel()
        if x.size != self.D:
            raise DomainError(f"expected {self.D} coordinates, got {x.size}")
        t0 = time.perf_counter()
        coords = " ".join(format(v, ".17g") for v in x)
        self._send(f"EVAL v1 {self.run_id} {coords}")
        line = self._recv()
        wall = time.perf_counter() - t0
        if line.startswith("RET "):
            parts = line.split()
            if len(parts) != 3:
                raise ProtocolError(f"malformed RET line: {line!r}")
            try:
                y, sd = float(parts[1]), float(parts[2])
            except ValueError as exc:
                raise ProtocolError(f"malformed RET line: {line!r}") from exc
            self._consecutive_failures = 0
            return NoisyEvaluation(y=y, sigma_est=sd, wall_time=wall)
        if line.startswith("FAIL"):
            self._consecutive_failures += 1
            msg = line[4:].strip()
            if self._consecutive_failures >= self.max_consecutive_failures:
                raise TargetError(
                    f"{self._consecutive_failures} consecutive worker "
                    f"failures; last message: {msg!r}")
            return NoisyEvaluation(0.0, 0.0, wall, failed=True, message=msg)
        raise ProtocolError(f"unexpected worker reply: {line!r}")

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
