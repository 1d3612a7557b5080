"""Main inference loop: active sampling, surrogate refits, adaptation.

The engine alternates acquisition-driven evaluation of the noisy target,
GP hyperparameter refits, and variational optimization, with warm-up,
reliability-based termination, component-count adaptation, and periodic
variational whitening.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from vbmc.acquisition import ACQ_KINDS, AcquisitionState, optimize_acq
from vbmc.gp import GpModel, StateError, TrainingSet, _factorize, fit_gp
from vbmc.metrics import gskl
from vbmc.quadrature import ElboEstimate, optimize_vp
from vbmc.spaces import DomainError, ParamSpace
from vbmc.targets import NoisyEvaluation, TargetError
from vbmc.variational import VariationalPosterior, compute_whitening

_WARMUP_K = 2
_ELBO_IMPROVEMENT_TOL = 1.0
_R_STABLE = 1.0
_R_UNRELIABLE = 3.0
_KL_SCALE = 0.01


@dataclass
class EngineOptions:
    """Knobs of the inference loop; defaults follow the reference setup."""

    budget: int | None = None  # target evaluations; None means 50 * (D + 2)
    n_init: int = 10
    n_active: int = 5
    acq: str = "viqr"
    seed: int = 0
    k_max: int = 50
    tau_vw: int = 5
    whitening: bool = True
    vp_steps: int = 500
    vp_steps_final: int = 2000
    vp_steps_fast: int = 100
    n_entropy: int = 64
    n_entropy_eval: int = 2**10  # candidate ranking during the loop
    n_entropy_final: int = 2**14  # final polish only
    n_viqr: int = 100
    n_imiqr: int = 400
    n_gp_mcmc: int = 8
    termination_window: int = 3
    max_iterations: int = 500
    x0: object = None  # optional starting point, original space


@dataclass
class IterationRecord:
    """Per-iteration diagnostics; serializable as a plain dict."""

    t: int
    evals: int
    elbo: float
    elbo_sd: float
    K: int
    r: float
    r1: float
    r2: float
    r3: float
    whitened: bool
    warmup: bool
    wall_s: float
    rolled_back: bool = False

    def as_dict(self) -> dict:
        return {"t": self.t, "evals": self.evals, "elbo": self.elbo,
                "elbo_sd": self.elbo_sd, "K": self.K, "r": self.r,
                "r1": self.r1, "r2": self.r2, "r3": self.r3,
                "whitened": self.whitened, "warmup": self.warmup,
                "wall_s": self.wall_s}


@dataclass
class VbmcResult:
    """Final posterior approximation plus run history."""

    vp: VariationalPosterior
    space: ParamSpace
    elbo: ElboEstimate
    gp: GpModel
    iterations: list
    n_evals: int
    success: bool
    message: str
    raw_x: np.ndarray = None
    raw_y: np.ndarray = None
    raw_sigma: np.ndarray = None


def hpd_noise_sd(training: TrainingSet, frac: float = 0.2) -> float:
    """Median noise SD among the top fraction of points by value."""
    n = max(1, int(np.ceil(frac * len(training))))
    top = np.argsort(training.values)[-n:]
    return float(np.median(training.noise_sd[top]))


def uncertainty_scale(training: TrainingSet) -> float:
    """Reliability unit Delta_SD, clamped to [0.1, 1]."""
    return float(np.clip(np.sqrt(0.1 * hpd_noise_sd(training)), 0.1, 1.0))


def reliability_index(elbo_t: float, elbo_prev: float, elbo_sd: float,
                      kl_prev: float, delta_sd: float, D: int):
    """Three-part reliability index r = (r1 + r2 + r3) / 3.

    ``kl_prev`` is the symmetrized KL between moment-matched Gaussians of
    the current and previous variational posteriors, in a shared space.
    """
    if not np.isfinite(elbo_prev):
        # No previous posterior to compare against: maximally unreliable.
        return np.inf, np.inf, np.inf, np.inf
    r1 = abs(elbo_t - elbo_prev) / delta_sd
    r2 = elbo_sd / delta_sd
    r3 = kl_prev / (_KL_SCALE * np.sqrt(D))
    r = (r1 + r2 + r3) / 3.0
    return r, r1, r2, r3


def initial_design(space: ParamSpace, n: int,
                   rng: np.random.Generator, x0=None) -> np.ndarray:
    """Start points in inference space: box center, optional user start,
    uniform fill of the plausible box."""
    if n < 2:
        raise DomainError("initial design needs at least 2 points")
    lo, hi = space.plausible_box_inference()
    pts = [0.5 * (lo + hi)]
    if x0 is not None:
        pts.append(space.to_inference(np.asarray(x0, float)))
    while len(pts) < n:
        pts.append(rng.uniform(lo, hi))
    return np.array(pts[:n])


class _Run:
    """Mutable state of one inference run."""

    def __init__(self, target, space: ParamSpace, options: EngineOptions):
        if options.acq not in ACQ_KINDS:
            raise ValueError(f"unknown acquisition {options.acq!r}")
        self.target = target
        self.base_space = space.without_whitening()
        self.space = self.base_space
        self.options = options
        self.rng = np.random.default_rng(options.seed)
        self.budget = (options.budget if options.budget is not None
                       else 50 * (space.D + 2))
        self.raw_x: list[np.ndarray] = []
        self.raw_y: list[float] = []
        self.raw_sigma: list[float] = []
        self.n_evals = 0
        self.consecutive_failures = 0
        self.training = TrainingSet(space.D)
        self.gp: GpModel = None
        self.vp: VariationalPosterior = None
        self.estimate: ElboEstimate = None
        self.prev_psi = None
        self.records: list[IterationRecord] = []
        self.snapshots: list[tuple] = []  # (vp, space, estimate)
        self.in_warmup = True
        self.warmup_end_t = None
        self.n_whitenings = 0
        self.next_whitening_t = None
        self.prev_moments = None  # (mean, cov) in current space
        self.best_y_history: list[float] = []
        self.stable_streak = 0
        self.message = ""

    # -- evaluation --------------------------------------------------------

    def evaluate(self, x_orig) -> NoisyEvaluation | None:
        """Evaluate the target with a single retry; count every call."""
        for _ in range(2):
            if self.n_evals >= self.budget:
                return None
            ev = self.target(np.asarray(x_orig, float))
            self.n_evals += 1
            if not ev.failed and np.isfinite(ev.y):
                self.consecutive_failures = 0
                return ev
        self.consecutive_failures += 1
        if self.consecutive_failures >= 3:
            raise TargetError(
                "three consecutive failed evaluations; aborting")
        return None

    def record_eval(self, u, ev: NoisyEvaluation):
        x = self.space.from_inference(u)
        self.raw_x.append(x)
        self.raw_y.append(ev.y)
        self.raw_sigma.append(ev.sigma_est)
        self.training.add(u, ev.y + self.space.log_jacobian_correction(u),
                          ev.sigma_est)

    def rebuild_training(self):
        """Re-derive the training set after a change of inference space."""
        ts = TrainingSet(self.space.D)
        for x, y, sd in zip(self.raw_x, self.raw_y, self.raw_sigma):
            u = self.space.to_inference(x)
            ts.add(u, y + self.space.log_jacobian_correction(u), sd)
        self.training = ts

    # -- model fitting -----------------------------------------------------

    def fit_surrogate(self, quick: bool = False, mode: str = None):
        if mode is None:
            mode = "mcmc" if (self.in_warmup and not quick) else "map"
        self.gp = fit_gp(
            self.training, mode, self.rng,
            self.space.plausible_ranges_inference(),
            n_mcmc=self.options.n_gp_mcmc,
            n_starts=1 if quick else 2,
            init_psi=self.prev_psi,
            max_iter=50 if quick else 200)
        self.prev_psi = self.gp.samples[0].psi.vec

    def refresh_factorization(self):
        """Refactorize the surrogate on the current training set with the
        hyperparameters kept fixed (cheap update after new evaluations)."""
        self.gp = GpModel(self.training,
                          [_factorize(self.training, c.psi)
                           for c in self.gp.samples])

    def optimize_posterior(self, n_steps: int, n_starts: int = 1,
                           final: bool = False):
        res = optimize_vp(self.gp, self.vp, n_steps, self.rng,
                          n_entropy=self.options.n_entropy,
                          n_entropy_final=(self.options.n_entropy_final
                                           if final
                                           else self.options.n_entropy_eval),
                          n_starts=n_starts)
        if np.isfinite(res.estimate.elbo_mean):
            self.vp = res.vp
            self.estimate = res.estimate
            return True
        return False

    # -- structural adaptation --------------------------------------------

    def _underweighted_point(self) -> np.ndarray:
        """Training point where the surrogate sees mass the mixture lacks."""
        pts = self.training.points
        fbar, _ = self.gp.posterior_mean_var(pts)
        keep = fbar >= np.median(fbar)
        score = fbar[keep] - self.vp.log_pdf(pts[keep])
        return pts[keep][int(np.argmax(score))]

    def adapt_components(self, delta_sd: float):
        for attempt in range(2):
            if self.vp.K >= self.options.k_max:
                return
            base = self.estimate.elbo_mean
            k_top = int(np.argmax(self.vp.w))
            if attempt == 0:
                # Seed where the mixture undercovers the surrogate; jitter
                # breaks exact coincidence with the training point.
                mu_new = (self._underweighted_point()
                          + 0.1 * self.vp.sigma[k_top] * self.vp.lam
                          * self.rng.standard_normal(self.space.D))
            else:
                mu_new = (self.vp.mu[k_top]
                          + 0.5 * self.vp.sigma[k_top] * self.vp.lam
                          * self.rng.standard_normal(self.space.D))
            w = np.append(self.vp.w, self.vp.w[k_top] / 2)
            w[k_top] /= 2
            cand = VariationalPosterior(
                w / w.sum(), np.vstack([self.vp.mu, mu_new]),
                np.append(self.vp.sigma, self.vp.sigma[k_top]), self.vp.lam)
            res = optimize_vp(self.gp, cand, self.options.vp_steps_fast,
                              self.rng, n_entropy=self.options.n_entropy,
                              n_entropy_final=self.options.n_entropy,
                              n_starts=1)
            if (np.isfinite(res.estimate.elbo_mean)
                    and res.estimate.elbo_mean > base + 0.05 * delta_sd):
                self.vp = res.vp
                self.estimate = res.estimate
            else:
                return

    def apply_whitening(self):
        wm = compute_whitening(self.vp)
        W1, b1 = wm.W, wm.b
        if self.space.whitened:
            W_tot = W1 @ self.space.W
            b_tot = W1 @ self.space.b + b1
        else:
            W_tot, b_tot = W1, b1
        new_space = self.base_space.with_whitening(W_tot, b_tot)
        self.space = new_space
        mu = self.vp.mu @ W1.T + b1
        lam = np.sqrt(np.maximum(
            np.diag(W1 @ np.diag(self.vp.lam**2) @ W1.T), 1e-12))
        self.vp = VariationalPosterior(self.vp.w, mu, self.vp.sigma, lam)
        if self.prev_moments is not None:
            m, C = self.prev_moments
            self.prev_moments = (W1 @ m + b1, W1 @ C @ W1.T)
        self.rebuild_training()
        self.prev_psi = None
        self.fit_surrogate(quick=True)
        self.n_whitenings += 1

    # -- warm-up -----------------------------------------------------------

    def check_warmup_end(self) -> bool:
        best = float(np.max(self.training.values))
        self.best_y_history.append(best)
        if self.n_evals >= 10 * self.space.D:
            return True
        if len(self.best_y_history) >= 4:
            gain = self.best_y_history[-1] - self.best_y_history[-4]
            if gain < _ELBO_IMPROVEMENT_TOL:
                return True
        return False


def run_vbmc(target, space: ParamSpace, options: EngineOptions = None,
             callback=None) -> VbmcResult:
    """Run the full inference loop on a noisy log-joint target.

    ``target`` maps an original-space point to a
    :class:`~vbmc.targets.NoisyEvaluation`.  ``callback``, if given, is
    called after every iteration as ``callback(record, vp, space,
    estimate)``.
    """
    options = options or EngineOptions()
    run = _Run(target, space, options)
    rng = run.rng

    # Initial design.
    for u in initial_design(run.space, options.n_init, rng, options.x0):
        ev = run.evaluate(run.space.from_inference(u))
        if ev is not None:
            run.record_eval(u, ev)
    if len(run.training) < 2:
        raise TargetError("initial design produced fewer than 2 usable "
                          "evaluations")

    run.fit_surrogate()
    lo, hi = run.space.plausible_box_inference()
    mu0 = run.training.points[np.argsort(run.training.values)[-_WARMUP_K:]]
    run.vp = VariationalPosterior(
        np.full(_WARMUP_K, 1.0 / _WARMUP_K), mu0,
        np.full(_WARMUP_K, 0.3), np.maximum(hi - lo, 1e-3) / 2.0)
    run.optimize_posterior(options.vp_steps)

    success = False
    for t in range(1, options.max_iterations + 1):
        t_start = time.perf_counter()
        # The pre-loop posterior is not a comparable baseline: treat the
        # first iteration as maximally unreliable.
        prev_elbo = (run.estimate.elbo_mean
                     if (run.estimate is not None and t > 1) else np.nan)
        run.prev_moments = run.vp.moments()
        prev_vp, prev_estimate = run.vp, run.estimate
        prev_r = run.records[-1].r if run.records else np.inf

        # Active sampling.
        for _ in range(options.n_active):
            if run.n_evals >= run.budget:
                break
            state = AcquisitionState.create(
                run.gp, run.vp, run.space, rng,
                n_viqr=options.n_viqr, n_imiqr=options.n_imiqr,
                kind=options.acq)
            theta_star, _ = optimize_acq(state, options.acq, rng)
            ev = run.evaluate(run.space.from_inference(theta_star))
            if ev is None:
                continue
            run.record_eval(theta_star, ev)
            if run.in_warmup or prev_r > _R_UNRELIABLE:
                run.fit_surrogate(quick=True)
                run.optimize_posterior(options.vp_steps_fast)
            else:
                run.refresh_factorization()

        # Full refit and variational optimization.
        run.fit_surrogate()
        ok = run.optimize_posterior(options.vp_steps)
        rolled_back = False
        if not ok:
            run.vp, run.estimate = prev_vp, prev_estimate
            rolled_back = True

        delta_sd = uncertainty_scale(run.training)
        mean_t, cov_t = run.vp.moments()
        kl_prev = gskl(mean_t, cov_t, *run.prev_moments)
        r, r1, r2, r3 = reliability_index(
            run.estimate.elbo_mean, prev_elbo, run.estimate.elbo_sd,
            kl_prev, delta_sd, run.space.D)

        if run.in_warmup and run.check_warmup_end():
            run.in_warmup = False
            run.warmup_end_t = t
            if options.whitening:
                run.next_whitening_t = t + options.tau_vw
            run.vp = run.vp.prune()

        if not run.in_warmup and not rolled_back:
            run.adapt_components(delta_sd)

        if (options.whitening and not run.in_warmup
                and run.next_whitening_t is not None
                and t >= run.next_whitening_t):
            if r < _R_UNRELIABLE:
                run.apply_whitening()
                run.optimize_posterior(options.vp_steps)
                run.next_whitening_t = t + (run.n_whitenings + 1) * options.tau_vw
            # else: postponed; retry next iteration.

        record = IterationRecord(
            t=t, evals=run.n_evals, elbo=float(run.estimate.elbo_mean),
            elbo_sd=float(run.estimate.elbo_sd), K=run.vp.K,
            r=float(r), r1=float(r1), r2=float(r2), r3=float(r3),
            whitened=run.space.whitened, warmup=run.in_warmup,
            wall_s=time.perf_counter() - t_start, rolled_back=rolled_back)
        run.records.append(record)
        run.snapshots.append((run.vp, run.space, run.estimate))
        if callback is not None:
            callback(record, run.vp, run.space, run.estimate)

        if not run.in_warmup and r < _R_STABLE:
            run.stable_streak += 1
        else:
            run.stable_streak = 0
        if run.stable_streak >= options.termination_window:
            success = True
            run.message = "converged: reliability index stable"
            break
        if run.n_evals >= run.budget:
            run.message = "evaluation budget exhausted"
            success = run.stable_streak > 0 or not run.in_warmup
            break
    else:
        run.message = "iteration limit reached"

    # Pick the best recent stable iteration and polish its posterior.
    idx = _select_best(run.records)
    best_vp, best_space, _ = run.snapshots[idx]
    run.space = best_space
    run.vp = best_vp
    run.rebuild_training()
    # Hyperparameter averaging smooths the surrogate where observation
    # noise leaves it genuinely uncertain; worth one MCMC fit at the end.
    run.fit_surrogate(mode="mcmc")
    run.optimize_posterior(options.vp_steps_final, final=True)
    run.vp = run.vp.prune()

    return VbmcResult(
        vp=run.vp, space=run.space, elbo=run.estimate, gp=run.gp,
        iterations=run.records, n_evals=run.n_evals, success=success,
        message=run.message,
        raw_x=np.array(run.raw_x), raw_y=np.array(run.raw_y),
        raw_sigma=np.array(run.raw_sigma))


def _select_best(records: list[IterationRecord], window: int = 5) -> int:
    """Index of the best iteration by ELBO lower bound among the last
    ``window`` stable iterations (falling back to all recent ones)."""
    n = len(records)
    recent = list(range(max(0, n - window), n))
    stable = [i for i in recent if records[i].r < _R_UNRELIABLE
              and not records[i].rolled_back]
    pool = stable or recent
    scores = [records[i].elbo - records[i].elbo_sd for i in pool]
    return pool[int(np.argmax(scores))]
