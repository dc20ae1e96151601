"""Oracle-equivalence suites behind the ``verify`` command.

Each suite returns a :class:`SuiteResult` with the worst relative error
observed; the CLI prints one line per suite and fails if any tolerance
is breached.  The sequential recursions used as references here are
deliberately plain loops, independent of the scan kernels and of the
window driver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import HyprEngine
from .errors import ConfigError
from .losses import LossSpec
from .network import LayerSpec, NetworkConfig, init_params
from .neurons import ModelKind, TRAINABLE_CONSTS, frozen_step_closure, threshold_distance
from .oracles import eprop_reference, rtrl_reference
from .scan import combine_pairs, finite_difference_jacobian, reverse_scan_q, scan_matprod_suffix

HIDDEN_MODELS = (ModelKind.BRF, ModelKind.SE_ADLIF, ModelKind.ALIF)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tol: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return (
            f"[{mark}] {self.name:<28} worst {self.worst:.3e}  tol {self.tol:.0e}"
            f"  ({self.seconds:.1f}s){'  ' + self.detail if self.detail else ''}"
        )


def rel_error(test, ref) -> float:
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = max(float(np.max(np.abs(ref))), 1e-300)
    return float(np.max(np.abs(test - ref)) / scale)


def grads_rel_error(test, ref) -> float:
    worst = 0.0
    for gt, gr in zip(test, ref):
        for key in gr:
            worst = max(worst, rel_error(gt[key], gr[key]))
    return worst


def _seq_suffix(a):
    lam, k = a.shape[0], a.shape[-1]
    out = np.empty_like(a)
    acc = np.eye(k)
    for t in range(lam, 0, -1):
        acc = acc @ a[t - 1]
        out[t - 1] = acc
    return out


def _seq_q(a, ell):
    lam, k = a.shape[0], a.shape[-1]
    q = np.zeros((lam + 1, k))
    q[lam] = ell[lam - 1]
    for t in range(lam - 1, 0, -1):
        q[t] = q[t + 1] @ a[t] + ell[t - 1]
    q[0] = q[1] @ a[0]
    return q


def scan_suite(
    n_instances: int = 1000,
    n_triples: int = 300,
    max_lam: int = 256,
    tol: float = 1e-12,
    seed: int = 0,
    fault: str | None = None,
) -> SuiteResult:
    """Parallel scans vs sequential recursions plus operator associativity.

    ``fault='q_sign'`` deliberately flips a sign on the parallel side;
    it exists only so the harness itself can be shown to catch defects.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        k = int(rng.integers(1, 4))
        lam = int(rng.integers(1, max_lam + 1))
        a = rng.normal(size=(lam, k, k)) * 0.9
        ell = rng.normal(size=(lam, k))
        worst = max(worst, rel_error(scan_matprod_suffix(a), _seq_suffix(a)))
        ell_in = -ell if fault == "q_sign" else ell
        worst = max(worst, rel_error(reverse_scan_q(a, ell_in), _seq_q(a, ell)))
    for _ in range(n_triples):
        k = int(rng.integers(1, 4))
        trip = [(rng.normal(size=(k, k)), rng.normal(size=k)) for _ in range(3)]
        left = combine_pairs(combine_pairs(trip[0], trip[1]), trip[2])
        right = combine_pairs(trip[0], combine_pairs(trip[1], trip[2]))
        worst = max(worst, float(np.max(np.abs(left[0] - right[0]))))
        worst = max(worst, float(np.max(np.abs(left[1] - right[1]))))
    return SuiteResult(
        "scan-vs-sequential", worst <= tol, worst, tol,
        detail=f"{n_instances} instances", seconds=time.perf_counter() - t_start,
    )


def _random_layer(kind: ModelKind, rng, m=5, d_in=4):
    from .network import init_layer

    return init_layer(kind, m, d_in, rng, recurrent=True)


def _spike_row_reference(layer, s_prev, cur):
    """Closed-form spike row of A and D from the surrogate value."""
    kind = layer.kind
    psi = layer.surrogate(threshold_distance(layer, s_prev, cur))
    m = s_prev.shape[-2]
    row_a = np.zeros((m, 3))
    if kind == ModelKind.BRF:
        from .neurons import _brf_pieces

        dt, omega, p_omega = _brf_pieces(layer)
        damp = p_omega - layer.consts["b_offset"] - s_prev[..., 2]
        row_a[:, 0] = psi * (1.0 + dt * damp)
        row_a[:, 1] = psi * (-dt * omega)
        row_a[:, 2] = layer.fixed["q_decay"] + psi * (-dt * s_prev[..., 0] - 1.0)
        row_d = psi * dt
    elif kind == ModelKind.SE_ADLIF:
        from .neurons import _se_pieces

        alpha = _se_pieces(layer)[0]
        row_a[:, 0] = psi * alpha
        row_a[:, 1] = -psi * (1.0 - alpha)
        row_d = psi * (1.0 - alpha)
    elif kind == ModelKind.ALIF:
        alpha = layer.fixed["alpha"]
        rho = layer.fixed["rho"]
        beta = layer.fixed["beta"]
        row_a[:, 0] = psi * alpha
        row_a[:, 1] = -psi * beta * rho
        row_a[:, 2] = -psi * beta * (1.0 - rho)
        row_d = psi * (1.0 - alpha)
    else:
        raise ConfigError(f"no spike row for {kind}")
    return row_a, row_d


def _se_spike_correction(layer, s_prev, cur, i):
    """Surrogate part of the se_adlif adaptation row (absent from the
    frozen-spike finite difference)."""
    from .neurons import _se_pieces

    alpha, _, beta, _, _, _, b = _se_pieces(layer)
    psi = layer.surrogate(threshold_distance(layer, s_prev, cur))
    alpha_i = float(np.ravel(np.broadcast_to(alpha, (layer.m,)))[i])
    b_i = float(np.ravel(np.broadcast_to(b, (layer.m,)))[i])
    beta_i = float(np.ravel(np.broadcast_to(beta, (layer.m,)))[i])
    fac = (1.0 - beta_i) * b_i * float(psi[i])
    return np.array([fac * alpha_i, -fac * (1.0 - alpha_i), 0.0, fac * (1.0 - alpha_i)])


def jacobian_suite(
    n_points: int = 100,
    tol_fd: float = 1e-5,
    tol_spike: float = 1e-12,
    h: float = 1e-5,
    seed: int = 0,
    models=HIDDEN_MODELS + (ModelKind.LI,),
) -> SuiteResult:
    """Analytic Jacobians vs central differences on smooth coordinates,
    spike rows vs closed-form surrogate values."""
    from . import neurons

    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_fd = 0.0
    worst_spike = 0.0
    for kind in models:
        kind = ModelKind(kind)
        layer = _random_layer(kind, rng)
        k = layer.k
        accepted = 0
        while accepted < n_points:
            s_prev = rng.normal(size=(layer.m, k)).astype(np.float64)
            if k == 3:  # spike coordinate must be a forward value
                s_prev[:, 2] = rng.integers(0, 2, size=layer.m)
            if kind == ModelKind.BRF:
                s_prev[:, 2] = np.abs(s_prev[:, 2])  # adaptation is non-negative
            cur = rng.normal(size=layer.m) * 2.0
            dist = threshold_distance(layer, s_prev, cur)
            sel = np.abs(dist) > 0.1 if k == 3 else np.ones(layer.m, bool)
            if not sel.any():
                continue
            a_an, d_an = neurons.jacobians(layer, s_prev, cur)
            if k == 3:
                row_a, row_d = _spike_row_reference(layer, s_prev, cur)
                worst_spike = max(
                    worst_spike,
                    float(np.max(np.abs(a_an[sel, 2, :] - row_a[sel]))),
                    float(np.max(np.abs(d_an[sel, 2] - row_d[sel]))),
                )
            smooth_rows = {  # rows free of surrogate terms given frozen spikes
                ModelKind.BRF: [0, 1],
                ModelKind.SE_ADLIF: [0],
                ModelKind.ALIF: [0, 1],
                ModelKind.LI: [0],
            }[kind]
            for i in np.flatnonzero(sel)[:4]:
                fn = frozen_step_closure(layer, int(i), s_prev[i], float(cur[i]))
                jac = finite_difference_jacobian(
                    fn, np.concatenate([s_prev[i], [cur[i]]]), h=h
                )
                an = np.concatenate(
                    [a_an[i], d_an[i][:, None]], axis=1
                )  # (k, k+1)
                if kind == ModelKind.SE_ADLIF:
                    jac = jac.astype(np.float64).copy()
                    jac[1, [0, 1, 3]] += _se_spike_correction(layer, s_prev, cur, int(i))[
                        [0, 1, 3]
                    ]
                    worst_fd = max(worst_fd, rel_error(an[1], jac[1]))
                for r in smooth_rows:
                    worst_fd = max(worst_fd, rel_error(an[r], jac[r]))
                accepted += 1
    worst = max(worst_fd, worst_spike)
    passed = worst_fd <= tol_fd and worst_spike <= tol_spike
    return SuiteResult(
        "jacobian-vs-fd", passed, worst, tol_fd,
        detail=f"spike rows {worst_spike:.1e} (tol {tol_spike:.0e})",
        seconds=time.perf_counter() - t_start,
    )


def _random_net(model, m, d, n_hidden, classes, seed, recurrent=True):
    cfg = NetworkConfig(
        input_dim=d,
        hidden=[LayerSpec(ModelKind(model), m, recurrent) for _ in range(n_hidden)],
        classes=classes,
        seed=seed,
    )
    return init_params(cfg)


def lambda_suite(
    models=HIDDEN_MODELS,
    lam_list=(1, 2, 8, 32, 128),
    total_steps: int = 128,
    m: int = 12,
    d: int = 6,
    n_hidden: int = 1,
    classes: int = 3,
    batch: int = 2,
    tol: float = 1e-10,
    seed: int = 0,
) -> SuiteResult:
    """Cumulative gradients identical across window lengths.

    The window-length-1 reference is the sequential eligibility
    recursion, coded independently of the engine.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    spec = LossSpec(n_classes=classes)
    worst = 0.0
    for model in models:
        params = _random_net(model, m, d, n_hidden, classes, seed + 17)
        x = rng.normal(size=(batch, total_steps, d))
        targets = rng.integers(0, classes, size=batch)
        ref, _ = eprop_reference(params, x, targets, spec)
        for lam in lam_list:
            eng = HyprEngine(params, lam=lam, batch=batch, loss_spec=spec)
            res = eng.train_sequence(params, x, targets)
            worst = max(worst, grads_rel_error(res.apg, ref))
    return SuiteResult(
        f"lambda-equivalence-{n_hidden}L", worst <= tol, worst, tol,
        detail=f"lams {list(lam_list)}", seconds=time.perf_counter() - t_start,
    )


def rtrl_suite(
    models=HIDDEN_MODELS,
    m: int = 8,
    d: int = 5,
    total_steps: int = 64,
    classes: int = 2,
    lam: int = 16,
    tol: float = 1e-9,
    gap_floor: float = 1e-8,
    seed: int = 0,
) -> SuiteResult:
    """Engine gradient equals the exact sensitivity recursion when
    recurrence is off; differs from it when recurrence is on."""
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    spec = LossSpec(n_classes=classes)
    worst = 0.0
    min_gap = np.inf
    for model in models:
        x = rng.normal(size=(1, total_steps, d))
        targets = rng.integers(0, classes, size=1)
        params = _random_net(model, m, d, 1, classes, seed + 3, recurrent=False)
        eng = HyprEngine(params, lam=lam, batch=1, loss_spec=spec)
        res = eng.train_sequence(params, x, targets)
        exact = rtrl_reference(params, x[0], targets[0], spec)
        hypr_grads = [{k: v[0] for k, v in layer.items()} for layer in res.apg]
        worst = max(worst, grads_rel_error(hypr_grads, exact))
        params_rec = _random_net(model, m, d, 1, classes, seed + 3, recurrent=True)
        eng = HyprEngine(params_rec, lam=lam, batch=1, loss_spec=spec)
        res = eng.train_sequence(params_rec, x, targets)
        exact_rec = rtrl_reference(params_rec, x[0], targets[0], spec)
        hypr_rec = [{k: v[0] for k, v in layer.items()} for layer in res.apg]
        min_gap = min(min_gap, grads_rel_error(hypr_rec, exact_rec))
    passed = worst <= tol and min_gap > gap_floor
    return SuiteResult(
        "rtrl-exactness-boundary", passed, worst, tol,
        detail=f"recurrent gap {min_gap:.2e} (must exceed {gap_floor:.0e})",
        seconds=time.perf_counter() - t_start,
    )


def default_suites(fault: str | None = None, models=None, lam_list=None, tol=None):
    """The suite set run by ``verify`` with spec-level defaults."""
    models = tuple(ModelKind(m) for m in models) if models else HIDDEN_MODELS
    lams = tuple(lam_list) if lam_list else (1, 2, 8, 32, 128)
    kw = {}
    results = [
        scan_suite(fault=fault, **({"tol": tol} if tol else {})),
        jacobian_suite(),
        lambda_suite(models=models, lam_list=lams, **({"tol": tol} if tol else {})),
        lambda_suite(models=models, lam_list=lams, n_hidden=2,
                     **({"tol": tol} if tol else {})),
        rtrl_suite(models=models, **({"tol": tol} if tol else {})),
    ]
    return results
