"""Bounded-to-unbounded parameter transforms with Jacobian corrections.

Model parameters live in a box ``[lb, ub]``; inference (the GP surrogate
and the variational posterior) happens in an unbounded space obtained by
a shifted and rescaled logit transform, optionally followed by an
invertible affine whitening map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Reject points within this relative distance of a hard bound instead of
# silently clamping them; the engine never proposes such points.
_BOUNDARY_REL_TOL = 1e-12


class DomainError(ValueError):
    """Raised when an input violates a transform's domain."""


def _as_vector(x, D: int, name: str) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (D,):
        raise DomainError(f"{name} must have shape ({D},), got {x.shape}")
    return x


@dataclass(frozen=True)
class ParamSpace:
    """Parameter box with the transform to and from inference space.

    Parameters
    ----------
    lb, ub : array-like, shape (D,)
        Hard bounds, ``lb < ub`` elementwise.
    plb, pub : array-like, shape (D,)
        Plausible bounds, ``lb < plb < pub < ub`` elementwise. The
        logit image of ``[plb, pub]`` is rescaled to roughly unit width,
        so plausible ranges set the natural length scale of inference
        space.
    scale, offset : array-like, shape (D,), optional
        Standardization constants applied after the logit: the
        unwhitened coordinate is ``(logit(z) - offset) / scale``. When
        omitted they are derived from the plausible bounds. Stored
        explicitly so transforms are self-describing.
    W, b : array-like, optional
        Whitening map applied after standardization: ``y = W u + b``.
        ``W`` must be invertible.
    """

    lb: np.ndarray
    ub: np.ndarray
    plb: np.ndarray
    pub: np.ndarray
    scale: np.ndarray = None
    offset: np.ndarray = None
    W: np.ndarray = None
    b: np.ndarray = None
    # Derived, filled in __post_init__.
    D: int = field(init=False)

    def __post_init__(self):
        lb = np.atleast_1d(np.asarray(self.lb, dtype=float))
        D = lb.size
        object.__setattr__(self, "D", D)
        for name in ("lb", "ub", "plb", "pub"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), D, name))
        if not np.all(self.lb < self.plb):
            raise DomainError("need lb < plb elementwise")
        if not np.all(self.plb < self.pub):
            raise DomainError("need plb < pub elementwise")
        if not np.all(self.pub < self.ub):
            raise DomainError("need pub < ub elementwise")

        if self.scale is None or self.offset is None:
            t_lo = _logit((self.plb - self.lb) / (self.ub - self.lb))
            t_hi = _logit((self.pub - self.lb) / (self.ub - self.lb))
            object.__setattr__(self, "scale", t_hi - t_lo)
            object.__setattr__(self, "offset", 0.5 * (t_hi + t_lo))
        else:
            object.__setattr__(self, "scale", _as_vector(self.scale, D, "scale"))
            object.__setattr__(self, "offset", _as_vector(self.offset, D, "offset"))
        if np.any(self.scale <= 0):
            raise DomainError("standardization scale must be positive")

        if self.W is not None:
            W = np.asarray(self.W, dtype=float)
            if W.shape != (D, D):
                raise DomainError(f"W must be {D}x{D}")
            b = np.zeros(D) if self.b is None else _as_vector(self.b, D, "b")
            if not np.isfinite(np.linalg.cond(W)):
                raise DomainError("whitening matrix is singular")
            object.__setattr__(self, "W", W)
            object.__setattr__(self, "b", b)
            object.__setattr__(self, "_Winv", np.linalg.inv(W))
            sign, logdet = np.linalg.slogdet(W)
            if sign == 0:
                raise DomainError("whitening matrix is singular")
            object.__setattr__(self, "_logdet_W", logdet)

    @property
    def whitened(self) -> bool:
        return self.W is not None

    def with_whitening(self, W, b=None) -> "ParamSpace":
        """Return a copy with whitening ``y = W u + b`` composed after the
        logit map, replacing any existing whitening."""
        return ParamSpace(self.lb, self.ub, self.plb, self.pub,
                          scale=self.scale, offset=self.offset, W=W, b=b)

    def without_whitening(self) -> "ParamSpace":
        return ParamSpace(self.lb, self.ub, self.plb, self.pub,
                          scale=self.scale, offset=self.offset)

    def to_dict(self) -> dict:
        """Plain-type representation for JSON round-tripping."""
        out = {"lb": self.lb.tolist(), "ub": self.ub.tolist(),
               "plb": self.plb.tolist(), "pub": self.pub.tolist(),
               "scale": self.scale.tolist(), "offset": self.offset.tolist()}
        if self.whitened:
            out["W"] = self.W.tolist()
            out["b"] = self.b.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpace":
        return cls(np.asarray(d["lb"], float), np.asarray(d["ub"], float),
                   np.asarray(d["plb"], float), np.asarray(d["pub"], float),
                   scale=np.asarray(d["scale"], float),
                   offset=np.asarray(d["offset"], float),
                   W=(np.asarray(d["W"], float) if "W" in d else None),
                   b=(np.asarray(d["b"], float) if "b" in d else None))

    # -- forward / inverse ------------------------------------------------

    def to_inference(self, x) -> np.ndarray:
        """Map ``x`` strictly inside ``(lb, ub)`` to inference space."""
        single = np.ndim(x) <= 1
        x = (_as_vector(x, self.D, "x") if single
             else np.asarray(x, float))
        tol = _BOUNDARY_REL_TOL * (self.ub - self.lb)
        bad = (x <= self.lb + tol) | (x >= self.ub - tol)
        if np.any(bad):
            i = int(np.argmax(np.any(np.atleast_2d(bad), axis=0)))
            v = np.atleast_2d(x)[:, i][np.atleast_2d(bad)[:, i]][0]
            raise DomainError(
                f"coordinate {i}: value {v!r} is out of bounds or on the "
                f"boundary of [{self.lb[i]}, {self.ub[i]}]")
        z = (x - self.lb) / (self.ub - self.lb)
        u = (_logit(z) - self.offset) / self.scale
        if self.whitened:
            u = u @ self.W.T + self.b
        return u

    def from_inference(self, y) -> np.ndarray:
        """Inverse of :meth:`to_inference`; output strictly inside the box."""
        single = np.ndim(y) <= 1
        y = (_as_vector(y, self.D, "y") if single
             else np.asarray(y, float))
        if not np.all(np.isfinite(y)):
            raise DomainError("non-finite inference-space point")
        u = (y - self.b) @ self._Winv.T if self.whitened else y
        t = self.offset + self.scale * u
        z = _logistic(t)
        x = self.lb + (self.ub - self.lb) * z
        # Keep a margin from the hard bounds wide enough that the result
        # always round-trips through the forward map.
        eps = 2.0 * _BOUNDARY_REL_TOL * (self.ub - self.lb)
        return np.clip(x, self.lb + eps, self.ub - eps)

    def log_jacobian_correction(self, y) -> float:
        """Log |det d(original)/d(inference)| at inference point ``y``.

        Adding the returned value to a log-density in the original
        space gives the matching log-density in inference space.
        """
        y = _as_vector(y, self.D, "y")
        if not np.all(np.isfinite(y)):
            raise DomainError("non-finite inference-space point")
        u = self._unwhiten(y)
        t = self.offset + self.scale * u
        # d x_i / d u_i = (ub-lb) * z(1-z) * scale; log z(1-z) computed stably.
        a = np.abs(t)
        log_zz = -a - 2.0 * np.log1p(np.exp(-a))
        corr = float(np.sum(np.log(self.ub - self.lb) + np.log(self.scale) + log_zz))
        if self.whitened:
            corr -= self._logdet_W
        return corr

    def _unwhiten(self, y: np.ndarray) -> np.ndarray:
        if self.whitened:
            return self._Winv @ (y - self.b)
        return y

    # -- helpers ----------------------------------------------------------

    def plausible_box_inference(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the plausible box image in
        inference space."""
        if not self.whitened:
            return self.to_inference(self.plb), self.to_inference(self.pub)
        corners = _box_corners(self.plb, self.pub)
        mapped = np.array([self.to_inference(c) for c in corners])
        return mapped.min(axis=0), mapped.max(axis=0)

    def plausible_ranges_inference(self) -> np.ndarray:
        """Plausible range per inference-space coordinate (GP hyperprior
        length scale ``L``)."""
        lo, hi = self.plausible_box_inference()
        return hi - lo


def _logit(z: np.ndarray) -> np.ndarray:
    return np.log(z) - np.log1p(-z)


def _logistic(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _box_corners(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """All corners for small D; a deterministic subsample above 12."""
    D = lo.size
    if D <= 12:
        grid = np.stack(np.meshgrid(*[[l, h] for l, h in zip(lo, hi)],
                                    indexing="ij"), axis=-1)
        return grid.reshape(-1, D)
    rng = np.random.default_rng(0)
    mask = rng.integers(0, 2, size=(4096, D)).astype(bool)
    return np.where(mask, hi, lo)
