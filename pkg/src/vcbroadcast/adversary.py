"""Byzantine behaviour: forged delay telemetry, forged coordinates, black holes."""
from dataclasses import dataclass

import numpy as np

from ._rng import derive_rng
from ._validation import check_fraction

MODES = ("none", "inflate", "deflate", "oscillate", "blackhole", "combined")
FORGERIES = ("inflate", "deflate", "oscillate")
TAU_MAX = 0.49


class AdversaryConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdversaryConfig:
    tau: float = 0.0
    mode: str = "none"
    magnitude_ms: float = 300.0
    period_windows: int = 2
    theta: float = 0.0
    seed: int = 0
    forgery: str = "deflate"  # forgery used by mode="combined"
    start_ms: float = 0.0
    floor_ms: float = 1.0

    def __post_init__(self):
        check_fraction("tau", self.tau, TAU_MAX)
        check_fraction("theta", self.theta)
        if self.mode not in MODES:
            raise AdversaryConfigError(f"unknown adversary mode {self.mode!r}")
        if self.forgery not in FORGERIES:
            raise AdversaryConfigError(f"unknown forgery {self.forgery!r}")
        if self.period_windows < 1:
            raise AdversaryConfigError("period_windows must be >= 1")
        if self.magnitude_ms < 0:
            raise AdversaryConfigError("magnitude_ms must be >= 0")

    @property
    def forgery_mode(self):
        """The telemetry forgery in effect, or None."""
        if self.tau == 0:
            return None
        if self.mode == "combined":
            return self.forgery
        return self.mode if self.mode in FORGERIES else None

    @property
    def drops(self):
        return self.tau > 0 and self.theta > 0 and self.mode in ("blackhole", "combined")

    def active(self, t_ms):
        return self.tau > 0 and self.mode != "none" and t_ms >= self.start_ms


def compromised_set(cfg, n):
    """Sorted ids of ``round(tau * n)`` nodes drawn uniformly with ``cfg.seed``."""
    m = int(round(cfg.tau * n))
    if m == 0:
        return np.empty(0, dtype=np.int64)
    rng = derive_rng(cfg.seed, "adversary", "compromised", n)
    return np.sort(rng.choice(n, size=m, replace=False)).astype(np.int64)


def compromised_mask(cfg, n):
    mask = np.zeros(n, dtype=bool)
    mask[compromised_set(cfg, n)] = True
    return mask


def _sign(cfg, window):
    half = cfg.period_windows / 2
    return 1.0 if (window % cfg.period_windows) < half else -1.0


def forge_delay(cfg, true_delay, window=0, mode=None):
    """Delay reported by a compromised telemetry path (works on arrays too)."""
    mode = cfg.forgery_mode if mode is None else mode
    true_delay = np.asarray(true_delay, dtype=float)
    m = cfg.magnitude_ms
    if mode is None or mode in ("none", "blackhole"):
        out = true_delay
    elif mode == "inflate":
        out = true_delay + m
    elif mode == "deflate":
        out = np.maximum(cfg.floor_ms, true_delay - m)
    elif mode == "oscillate":
        out = np.maximum(cfg.floor_ms, true_delay + _sign(cfg, window) * m)
    else:
        raise AdversaryConfigError(f"no delay forgery for mode {mode!r}")
    return float(out) if out.ndim == 0 else out


def forge_telemetry(cfg, mask, I, J, delays, window, t_ms):
    """Apply delay forgery to samples on edges touching a compromised node."""
    mode = cfg.forgery_mode
    if mode is None or not cfg.active(t_ms):
        return delays
    hit = mask[I] | mask[J]
    if not hit.any():
        return delays
    out = np.array(delays, dtype=float, copy=True)
    out[hit] = forge_delay(cfg, out[hit], window)
    return out


def blackhole_filter(cfg, sender, compromised, rng, t_ms=0.0, self_originated=False):
    """True to deliver, False to drop one relayed send.

    Only compromised senders drop, never their own submissions, and only
    once the attack is active.  Randomness is drawn only when a drop is
    possible, so honest runs consume none.
    """
    if self_originated or not cfg.drops or not compromised[sender] or not cfg.active(t_ms):
        return True
    return bool(rng.random() >= cfg.theta)


def forge_coordinate(cfg, true_coord, target=None, window=0, scheme="mercury"):
    """Coordinate a compromised node claims to an honest Vivaldi neighbour.

    ``target`` is the victim's coordinate (origin if omitted).  Deflation
    claims to sit up to ``magnitude_ms`` closer to the victim, inflation
    that much farther away, oscillation alternates per period.
    """
    if str(scheme).startswith("blocksdnvc"):
        raise AdversaryConfigError(
            "coordinate forgery needs self-reported coordinates; "
            "controller-measured schemes have none")
    x = np.asarray(true_coord, dtype=float)
    mode = cfg.forgery_mode if cfg.forgery_mode is not None else cfg.mode
    m = cfg.magnitude_ms
    if m == 0 or mode not in FORGERIES:
        return x.copy()
    t = np.zeros_like(x) if target is None else np.asarray(target, dtype=float)
    gap = t - x
    dist = float(np.linalg.norm(gap))
    u = gap / dist if dist > 0 else np.eye(len(x))[0]
    if mode == "oscillate":
        mode = "deflate" if _sign(cfg, window) < 0 else "inflate"
    if mode == "deflate":
        return x + u * min(m, dist)
    return x - u * m
