"""Neuron models: state transitions, outputs, and analytic Jacobians.

Four models are supported.  Spiking models carry the spike as an explicit
state coordinate so that the output function is an exact extraction and
every surrogate derivative lives inside the state-to-state Jacobian and
the input derivative:

* ``brf`` -- resonate-and-fire with balanced damping and a spike-driven
  adaptation variable; state (u, v, q), k = 3.  The adaptation row plays
  the role of the spike coordinate: q_t = decay * q_{t-1} + z_t, so the
  unit spike contribution is read from the q row and the cached output.
* ``se_adlif`` -- adaptive leaky integrate-and-fire with symplectic-Euler
  coupling and a same-step hard reset; state (u, w, z), k = 3.
* ``alif`` -- adaptive-threshold LIF with previous-step reset;
  state (u, a, z), k = 3.
* ``li`` -- leaky integrator readout; state (u,), k = 1, output u.

Conventions baked into the Jacobians (shared by the engine and every
oracle so that equivalence checks isolate algorithmic differences, not
convention differences):

* hard-reset factors -- the multiplicative (1 - z) in se_adlif and the
  subtractive threshold * z_{t-1} in alif -- are treated as constants
  (detached);
* spikes fire on strictly positive threshold distance;
* the spike state coordinate is exactly 0.0 or 1.0 in forward values.

All functions are vectorized over arbitrary leading axes; the last state
axis has length k and per-neuron parameter arrays broadcast against the
neuron axis.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ConfigError
from .surrogates import Surrogate


class ModelKind(str, Enum):
    BRF = "brf"
    SE_ADLIF = "se_adlif"
    ALIF = "alif"
    LI = "li"


STATE_DIM = {
    ModelKind.BRF: 3,
    ModelKind.SE_ADLIF: 3,
    ModelKind.ALIF: 3,
    ModelKind.LI: 1,
}

# state coordinate extracted as the layer output
OUTPUT_ROW = {
    ModelKind.BRF: 2,
    ModelKind.SE_ADLIF: 2,
    ModelKind.ALIF: 2,
    ModelKind.LI: 0,
}

# trainable per-neuron constants (eligibility columns beyond the weights)
TRAINABLE_CONSTS = {
    ModelKind.BRF: ("omega", "b_offset"),
    ModelKind.SE_ADLIF: ("a_hat", "b_hat", "tau_u_raw", "tau_w_raw"),
    ModelKind.ALIF: (),
    ModelKind.LI: (),
}


def state_dim(kind: ModelKind) -> int:
    return STATE_DIM[kind]


def output_row(kind: ModelKind) -> int:
    return OUTPUT_ROW[kind]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def tau_from_raw(raw, lo: float, hi: float):
    """Squash an unconstrained scalar into the time-constant range."""
    return lo + (hi - lo) * _sigmoid(raw)


def raw_from_tau(tau, lo: float, hi: float):
    frac = np.clip((np.asarray(tau, dtype=np.float64) - lo) / (hi - lo), 1e-9, 1 - 1e-9)
    return np.log(frac / (1.0 - frac))


def decay_from_raw(raw, lo: float, hi: float):
    """decay = exp(-1/tau) and its derivative w.r.t. the raw parameter."""
    sig = _sigmoid(raw)
    tau = lo + (hi - lo) * sig
    decay = np.exp(-1.0 / tau)
    ddecay = decay / tau**2 * (hi - lo) * sig * (1.0 - sig)
    return decay, ddecay


def validate_constants(kind: ModelKind, consts: dict, fixed: dict) -> None:
    """Reject parameterizations outside the models' validity domain."""
    if kind == ModelKind.BRF:
        dt = float(fixed["dt"])
        if dt <= 0:
            raise ConfigError(f"brf dt must be positive, got {dt}")
        if np.any(dt * np.asarray(consts["omega"]) >= 1.0):
            raise ConfigError(
                "brf requires dt * omega < 1 (real damping branch); "
                f"max dt*omega = {float(np.max(dt * np.asarray(consts['omega'])))}"
            )
    if kind == ModelKind.SE_ADLIF:
        lo_u, hi_u = fixed["tau_u_range"]
        lo_w, hi_w = fixed["tau_w_range"]
        if not (0 < lo_u < hi_u and 0 < lo_w < hi_w):
            raise ConfigError("se_adlif time-constant ranges must be positive and ordered")
    for key in ("alpha", "rho"):
        if key in fixed and np.any(np.asarray(fixed[key]) <= 0):
            raise ConfigError(f"decay factor {key} must be positive")


def _brf_pieces(layer):
    dt = float(layer.fixed["dt"])
    omega = layer.consts["omega"]
    p_omega = (-1.0 + np.sqrt(1.0 - (dt * omega) ** 2)) / dt
    return dt, omega, p_omega


def _se_pieces(layer):
    lo_u, hi_u = layer.fixed["tau_u_range"]
    lo_w, hi_w = layer.fixed["tau_w_range"]
    alpha, dalpha = decay_from_raw(layer.consts["tau_u_raw"], lo_u, hi_u)
    beta, dbeta = decay_from_raw(layer.consts["tau_w_raw"], lo_w, hi_w)
    rho = float(layer.fixed["rho"])
    a = rho * layer.consts["a_hat"]
    b = rho * layer.consts["b_hat"]
    return alpha, dalpha, beta, dbeta, rho, a, b


def step(layer, s_prev: np.ndarray, current: np.ndarray):
    """One state transition; returns (s_new, y_new).

    ``s_prev``: (..., m, k); ``current``: (..., m).  The spike coordinate
    of ``s_new`` is exactly 0.0 or 1.0; ``y_new`` is the output value used
    by the recurrent input of the next step and by downstream layers.
    """
    kind = layer.kind
    theta = layer.fixed.get("theta", 1.0)
    if kind == ModelKind.BRF:
        dt, omega, p_omega = _brf_pieces(layer)
        u_p, v_p, q_p = s_prev[..., 0], s_prev[..., 1], s_prev[..., 2]
        damp = p_omega - layer.consts["b_offset"] - q_p
        u = u_p + dt * (damp * u_p - omega * v_p + current)
        v = v_p + dt * (omega * u_p + damp * v_p)
        z = (u - theta - q_p > 0).astype(s_prev.dtype)
        q = layer.fixed["q_decay"] * q_p + z
        s_new = np.stack([u, v, q], axis=-1)
        return s_new, z
    if kind == ModelKind.SE_ADLIF:
        alpha, _, beta, _, _, a, b = _se_pieces(layer)
        u_p, w_p = s_prev[..., 0], s_prev[..., 1]
        u_hat = alpha * u_p + (1.0 - alpha) * (current - w_p)
        z = (u_hat - theta > 0).astype(s_prev.dtype)
        u = u_hat * (1.0 - z)
        w = beta * w_p + (1.0 - beta) * (a * u + b * z)
        s_new = np.stack([u, w, z], axis=-1)
        return s_new, z
    if kind == ModelKind.ALIF:
        alpha = layer.fixed["alpha"]
        rho = layer.fixed["rho"]
        u_p, a_p, z_p = s_prev[..., 0], s_prev[..., 1], s_prev[..., 2]
        a = rho * a_p + (1.0 - rho) * z_p
        thresh = layer.fixed["b_0"] + layer.fixed["beta"] * a
        u = alpha * u_p + (1.0 - alpha) * current - thresh * z_p
        z = (u - thresh > 0).astype(s_prev.dtype)
        s_new = np.stack([u, a, z], axis=-1)
        return s_new, z
    if kind == ModelKind.LI:
        alpha = layer.fixed["alpha"]
        u = alpha * s_prev[..., 0] + (1.0 - alpha) * current
        return u[..., None], u
    raise ConfigError(f"unknown model kind {kind}")


def threshold_distance(layer, s_prev: np.ndarray, current: np.ndarray):
    """Argument of this step's Heaviside (inf for the linear readout)."""
    kind = layer.kind
    theta = layer.fixed.get("theta", 1.0)
    if kind == ModelKind.LI:
        return np.full(s_prev.shape[:-1], np.inf, dtype=s_prev.dtype)
    if kind == ModelKind.BRF:
        s_new, _ = step(layer, s_prev, current)
        return s_new[..., 0] - theta - s_prev[..., 2]
    if kind == ModelKind.SE_ADLIF:
        alpha, _, _, _, _, _, _ = _se_pieces(layer)
        u_hat = alpha * s_prev[..., 0] + (1.0 - alpha) * (current - s_prev[..., 1])
        return u_hat - theta
    if kind == ModelKind.ALIF:
        s_new, _ = step(layer, s_prev, current)
        rho = layer.fixed["rho"]
        a = rho * s_prev[..., 1] + (1.0 - rho) * s_prev[..., 2]
        thresh = layer.fixed["b_0"] + layer.fixed["beta"] * a
        return s_new[..., 0] - thresh
    raise ConfigError(f"unknown model kind {kind}")


def jacobians(layer, s_prev: np.ndarray, current: np.ndarray, out=None):
    """Analytic A = ds_t/ds_{t-1} (..., m, k, k) and D = ds_t/dI_t (..., m, k).

    Every Heaviside inside the transition is differentiated with the
    layer's surrogate; reset pathways are detached as documented in the
    module docstring.  ``out`` may supply preallocated (A, D) arrays.
    """
    kind = layer.kind
    sg: Surrogate = layer.surrogate
    theta = layer.fixed.get("theta", 1.0)
    lead = s_prev.shape[:-1]
    k = STATE_DIM[kind]
    if out is None:
        A = np.zeros(lead + (k, k), dtype=s_prev.dtype)
        D = np.zeros(lead + (k,), dtype=s_prev.dtype)
    else:
        A, D = out
        A[...] = 0.0
        D[...] = 0.0
    if kind == ModelKind.BRF:
        dt, omega, p_omega = _brf_pieces(layer)
        u_p, v_p, q_p = s_prev[..., 0], s_prev[..., 1], s_prev[..., 2]
        damp = p_omega - layer.consts["b_offset"] - q_p
        u = u_p + dt * (damp * u_p - omega * v_p + current)
        psi = sg(u - theta - q_p)
        A[..., 0, 0] = 1.0 + dt * damp
        A[..., 0, 1] = -dt * omega
        A[..., 0, 2] = -dt * u_p
        A[..., 1, 0] = dt * omega
        A[..., 1, 1] = 1.0 + dt * damp
        A[..., 1, 2] = -dt * v_p
        A[..., 2, 0] = psi * A[..., 0, 0]
        A[..., 2, 1] = psi * A[..., 0, 1]
        A[..., 2, 2] = layer.fixed["q_decay"] + psi * (A[..., 0, 2] - 1.0)
        D[..., 0] = dt
        D[..., 2] = psi * dt
        return A, D
    if kind == ModelKind.SE_ADLIF:
        alpha, _, beta, _, _, a, b = _se_pieces(layer)
        u_p, w_p = s_prev[..., 0], s_prev[..., 1]
        u_hat = alpha * u_p + (1.0 - alpha) * (current - w_p)
        z = (u_hat - theta > 0).astype(s_prev.dtype)
        psi = sg(u_hat - theta)
        keep = 1.0 - z  # detached reset factor
        A[..., 0, 0] = keep * alpha
        A[..., 0, 1] = -keep * (1.0 - alpha)
        A[..., 1, 0] = (1.0 - beta) * (a * keep + b * psi) * alpha
        A[..., 1, 1] = beta - (1.0 - beta) * (a * keep + b * psi) * (1.0 - alpha)
        A[..., 2, 0] = psi * alpha
        A[..., 2, 1] = -psi * (1.0 - alpha)
        D[..., 0] = keep * (1.0 - alpha)
        D[..., 1] = (1.0 - beta) * (a * keep + b * psi) * (1.0 - alpha)
        D[..., 2] = psi * (1.0 - alpha)
        return A, D
    if kind == ModelKind.ALIF:
        alpha = layer.fixed["alpha"]
        rho = layer.fixed["rho"]
        beta_ad = layer.fixed["beta"]
        u_p, a_p, z_p = s_prev[..., 0], s_prev[..., 1], s_prev[..., 2]
        a = rho * a_p + (1.0 - rho) * z_p
        thresh = layer.fixed["b_0"] + beta_ad * a
        u = alpha * u_p + (1.0 - alpha) * current - thresh * z_p
        psi = sg(u - thresh)
        A[..., 0, 0] = alpha  # reset term detached
        A[..., 1, 1] = rho
        A[..., 1, 2] = (1.0 - rho) * np.ones_like(u_p)
        A[..., 2, 0] = psi * alpha
        A[..., 2, 1] = -psi * beta_ad * rho
        A[..., 2, 2] = -psi * beta_ad * (1.0 - rho)
        D[..., 0] = 1.0 - alpha
        D[..., 2] = psi * (1.0 - alpha)
        return A, D
    if kind == ModelKind.LI:
        alpha = layer.fixed["alpha"]
        A[..., 0, 0] = alpha * np.ones(lead, dtype=s_prev.dtype)
        D[..., 0] = 1.0 - alpha
        return A, D
    raise ConfigError(f"unknown model kind {kind}")


def const_grads(layer, s_prev: np.ndarray, current: np.ndarray, out=None) -> dict:
    """Direct partials ds_t/dc for each trainable per-neuron constant c.

    Returned arrays have shape (..., m, k); keys follow TRAINABLE_CONSTS.
    ``out`` may supply a dict of preallocated arrays keyed by constant.
    """
    kind = layer.kind
    sg: Surrogate = layer.surrogate
    theta = layer.fixed.get("theta", 1.0)
    lead = s_prev.shape[:-1]
    k = STATE_DIM[kind]

    def buf(name):
        if out is not None:
            arr = out[name]
            arr[...] = 0.0
            return arr
        return np.zeros(lead + (k,), dtype=s_prev.dtype)

    res: dict[str, np.ndarray] = {}
    if kind == ModelKind.BRF:
        dt, omega, p_omega = _brf_pieces(layer)
        u_p, v_p, q_p = s_prev[..., 0], s_prev[..., 1], s_prev[..., 2]
        damp = p_omega - layer.consts["b_offset"] - q_p
        u = u_p + dt * (damp * u_p - omega * v_p + current)
        psi = sg(u - theta - q_p)
        dp_dom = -dt * omega / np.sqrt(1.0 - (dt * omega) ** 2)
        g_om = buf("omega")
        g_om[..., 0] = dt * (dp_dom * u_p - v_p)
        g_om[..., 1] = dt * (u_p + dp_dom * v_p)
        g_om[..., 2] = psi * g_om[..., 0]
        g_bo = buf("b_offset")
        g_bo[..., 0] = -dt * u_p
        g_bo[..., 1] = -dt * v_p
        g_bo[..., 2] = psi * g_bo[..., 0]
        res["omega"] = g_om
        res["b_offset"] = g_bo
        return res
    if kind == ModelKind.SE_ADLIF:
        alpha, dalpha, beta, dbeta, rho, a, b = _se_pieces(layer)
        u_p, w_p = s_prev[..., 0], s_prev[..., 1]
        u_hat = alpha * u_p + (1.0 - alpha) * (current - w_p)
        z = (u_hat - theta > 0).astype(s_prev.dtype)
        psi = sg(u_hat - theta)
        keep = 1.0 - z
        u = u_hat * keep
        g_a = buf("a_hat")
        g_a[..., 1] = (1.0 - beta) * rho * u
        g_b = buf("b_hat")
        g_b[..., 1] = (1.0 - beta) * rho * z
        du_hat = dalpha * (u_p - (current - w_p))
        g_tu = buf("tau_u_raw")
        g_tu[..., 0] = keep * du_hat
        g_tu[..., 1] = (1.0 - beta) * (a * keep + b * psi) * du_hat
        g_tu[..., 2] = psi * du_hat
        g_tw = buf("tau_w_raw")
        g_tw[..., 1] = dbeta * (w_p - (a * u + b * z))
        res["a_hat"] = g_a
        res["b_hat"] = g_b
        res["tau_u_raw"] = g_tu
        res["tau_w_raw"] = g_tw
        return res
    if kind in (ModelKind.ALIF, ModelKind.LI):
        return res
    raise ConfigError(f"unknown model kind {kind}")


def frozen_step_closure(layer, index: int, s0: np.ndarray, i0: float):
    """Single-neuron step with detached pathways frozen at the base point.

    Returns ``fn(x)`` over the packed vector x = [s_prev, I] suitable for
    finite differencing: reset factors and, for se_adlif, the spike input
    to the adaptation current use the unperturbed forward spike, exactly
    mirroring the detachment conventions of :func:`jacobians`.
    """
    kind = layer.kind
    theta = float(np.ravel(layer.fixed.get("theta", 1.0))[0])

    def pick(arr):
        a = np.asarray(arr, dtype=np.float64)
        return float(a.ravel()[index % a.size]) if a.ndim else float(a)

    if kind == ModelKind.BRF:
        dt = float(layer.fixed["dt"])
        omega = pick(layer.consts["omega"])
        b_off = pick(layer.consts["b_offset"])
        p_omega = (-1.0 + np.sqrt(1.0 - (dt * omega) ** 2)) / dt
        decay = float(layer.fixed["q_decay"])

        def fn(x):
            u_p, v_p, q_p, cur = x
            damp = p_omega - b_off - q_p
            u = u_p + dt * (damp * u_p - omega * v_p + cur)
            v = v_p + dt * (omega * u_p + damp * v_p)
            z = 1.0 if (u - theta - q_p) > 0 else 0.0
            return np.array([u, v, decay * q_p + z])

        return fn
    if kind == ModelKind.SE_ADLIF:
        lo_u, hi_u = layer.fixed["tau_u_range"]
        lo_w, hi_w = layer.fixed["tau_w_range"]
        alpha = float(decay_from_raw(pick(layer.consts["tau_u_raw"]), lo_u, hi_u)[0])
        beta = float(decay_from_raw(pick(layer.consts["tau_w_raw"]), lo_w, hi_w)[0])
        rho = float(layer.fixed["rho"])
        a = rho * pick(layer.consts["a_hat"])
        b = rho * pick(layer.consts["b_hat"])
        u_hat0 = alpha * s0[0] + (1.0 - alpha) * (i0 - s0[1])
        z0 = 1.0 if (u_hat0 - theta) > 0 else 0.0

        def fn(x):
            u_p, w_p, _, cur = x
            u_hat = alpha * u_p + (1.0 - alpha) * (cur - w_p)
            u = u_hat * (1.0 - z0)
            w = beta * w_p + (1.0 - beta) * (a * u + b * z0)
            return np.array([u, w, z0])

        return fn
    if kind == ModelKind.ALIF:
        alpha = pick(layer.fixed["alpha"])
        rho = pick(layer.fixed["rho"])
        beta_ad = pick(layer.fixed["beta"])
        b_0 = pick(layer.fixed["b_0"])
        a0 = rho * s0[1] + (1.0 - rho) * s0[2]
        reset0 = (b_0 + beta_ad * a0) * s0[2]

        def fn(x):
            u_p, a_p, z_p, cur = x
            a = rho * a_p + (1.0 - rho) * z_p
            u = alpha * u_p + (1.0 - alpha) * cur - reset0
            z = 1.0 if (u - (b_0 + beta_ad * a)) > 0 else 0.0
            return np.array([u, a, z])

        return fn
    if kind == ModelKind.LI:
        alpha = pick(layer.fixed["alpha"])

        def fn(x):
            u_p, cur = x
            return np.array([alpha * u_p + (1.0 - alpha) * cur])

        return fn
    raise ConfigError(f"unknown model kind {kind}")
