"""Independent gradient references for the engine.

``eprop_reference`` is the fully sequential eligibility recursion: the
dense per-neuron eligibility matrix is loaded, advanced one step, and
contracted with the loss gradient at every step.  It shares the neuron
primitives and the spatial loss-gradient chain with the engine (those
conventions are deliberately identical) but none of the window/scan
machinery, so agreement between the two isolates the subsequence
parallelization.

``rtrl_reference`` tracks the full per-layer sensitivity of every
neuron's state to every same-layer parameter, including the cross-neuron
pathways through the recurrent weights that the eligibility recursion
drops.  With recurrence disabled those pathways vanish and the two
references coincide; with recurrence enabled their difference measures
the approximation gap.

``exact_state_loss_grads`` runs a linear adjoint (full backpropagation
through the relaxed computation graph) to expose the temporal
deeper-layer pathways that the same-step spatial chain discards.
"""

from __future__ import annotations

import numpy as np

from . import network, neurons
from .engine import ColumnLayout
from .errors import ConfigError
from .losses import LossSpec, window_loss
from .network import CarryState, LayerParams

RTRL_MAX_NEURONS = 16
RTRL_MAX_STEPS = 256


def _cast_params(params, dtype):
    return [p.astype(dtype) for p in params]


def _single_sample_targets(targets, loss_spec: LossSpec) -> np.ndarray:
    arr = np.asarray(targets)
    return arr.reshape(1, -1) if loss_spec.per_step_targets else arr.reshape(1)


def eprop_reference(
    params: list[LayerParams],
    x: np.ndarray,
    targets: np.ndarray,
    loss_spec: LossSpec,
    dtype=np.float64,
):
    """Step-by-step eligibility recursion; returns (apg, seq_loss).

    ``x``: (B, T, d).  ``apg`` is one dict of (B, ...) arrays per layer,
    matching the engine's cumulative gradients for any window length.
    """
    x = np.asarray(x, dtype=dtype)
    batch, total_steps, _ = x.shape
    params = _cast_params(params, dtype)
    targets = np.asarray(targets)
    layouts = [ColumnLayout.of(p) for p in params]
    carry = CarryState.zeros(params, batch, dtype)
    elig = [
        np.zeros((batch, p.m, p.k, lo.total), dtype=dtype)
        for p, lo in zip(params, layouts)
    ]
    apg = [p.grad_template(dtype, batch=(batch,)) for p in params]
    seq_loss = np.zeros(batch, dtype=dtype)
    states = carry.states
    outputs = carry.outputs
    for t in range(1, total_steps + 1):
        x_in = x[:, t - 1]
        d_inps = []
        ells_shape = []
        new_states = []
        new_outputs = []
        for li, layer in enumerate(params):
            cur = network.input_current(layer, x_in, outputs[li])
            a_jac, d_inp = neurons.jacobians(layer, states[li], cur)
            g_consts = neurons.const_grads(layer, states[li], cur)
            e = np.matmul(a_jac, elig[li])
            elig[li] = e
            lo = layouts[li]
            e[..., lo.ff] += d_inp[..., None] * x_in[:, None, None, :]
            if lo.recurrent:
                e[..., lo.rec] += d_inp[..., None] * outputs[li][:, None, None, :]
            e[..., lo.bias] += d_inp
            for name, g in g_consts.items():
                e[..., lo.const(name)] += g
            s_new, y_new = neurons.step(layer, states[li], cur)
            d_inps.append(d_inp[:, :, None, :])  # (B, m, 1, k) window view
            new_states.append(s_new)
            new_outputs.append(y_new)
            x_in = y_new
        u_t = new_states[-1][:, :, 0][:, None, :]  # (B, 1, C)
        loss, dl_du = window_loss(loss_spec, u_t, targets, t - 1, total_steps)
        seq_loss += loss[:, 0]
        ells = network.spatial_loss_grads(params, d_inps, dl_du)
        for li in range(len(params)):
            ell_t = ells[li][:, :, 0, :]  # (B, m, k)
            contrib = np.einsum("bmk,bmkp->bmp", ell_t, elig[li])
            lo = layouts[li]
            apg[li]["w_ff"] += contrib[..., lo.ff]
            if lo.recurrent:
                apg[li]["w_rec"] += contrib[..., lo.rec]
            apg[li]["bias"] += contrib[..., lo.bias]
            for name in lo.const_names:
                apg[li][name] += contrib[..., lo.const(name)]
        states = new_states
        outputs = new_outputs
    return apg, seq_loss


def _check_rtrl_size(params, total_steps):
    if total_steps > RTRL_MAX_STEPS:
        raise ConfigError(
            f"rtrl reference limited to T <= {RTRL_MAX_STEPS}, got {total_steps}"
        )
    for p in params:
        if p.m > RTRL_MAX_NEURONS:
            raise ConfigError(
                f"rtrl reference limited to m <= {RTRL_MAX_NEURONS}, got {p.m}"
            )


def rtrl_reference(
    params: list[LayerParams],
    x: np.ndarray,
    targets: np.ndarray,
    loss_spec: LossSpec,
    dtype=np.float64,
):
    """Exact per-layer forward sensitivities (single sample).

    ``x``: (T, d).  Tracks ds_j/dtheta_i for all same-layer neuron pairs
    (j, i), i.e. the dense sensitivity including cross-neuron recurrent
    pathways; loss gradients are injected through the same same-step
    spatial chain used everywhere else.  Returns one gradient dict per
    layer.
    """
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 2:
        raise ConfigError(f"rtrl reference takes one sample (T, d), got {x.shape}")
    total_steps = x.shape[0]
    _check_rtrl_size(params, total_steps)
    params = _cast_params(params, dtype)
    targets = _single_sample_targets(targets, loss_spec)
    layouts = [ColumnLayout.of(p) for p in params]
    # sens[li][j, :, i, :] = d s_j / d theta_i for same-layer neurons
    sens = [
        np.zeros((p.m, p.k, p.m, lo.total), dtype=dtype)
        for p, lo in zip(params, layouts)
    ]
    grads = [p.grad_template(dtype) for p in params]
    states = [np.zeros((p.m, p.k), dtype=dtype) for p in params]
    outputs = [np.zeros(p.m, dtype=dtype) for p in params]
    idx = [np.arange(p.m) for p in params]
    for t in range(1, total_steps + 1):
        x_in = x[t - 1]
        d_inps = []
        new_states = []
        new_outputs = []
        for li, layer in enumerate(params):
            lo = layouts[li]
            cur = network.input_current(layer, x_in[None], outputs[li][None])[0]
            a_jac, d_inp = neurons.jacobians(layer, states[li], cur)
            g_consts = neurons.const_grads(layer, states[li], cur)
            row = neurons.output_row(layer.kind)
            # parameter sensitivity of this step's input current
            i_sens = np.zeros((layer.m, layer.m, lo.total), dtype=dtype)
            if lo.recurrent:
                y_sens = sens[li][:, row, :, :]  # (n, i, p)
                i_sens += np.einsum("jn,nip->jip", layer.w_rec, y_sens)
                i_sens[idx[li], idx[li], lo.rec] += outputs[li]
            i_sens[idx[li], idx[li], lo.ff] += x_in
            i_sens[idx[li], idx[li], lo.bias] += 1.0
            new_sens = np.einsum("jkl,jlip->jkip", a_jac, sens[li]) + np.einsum(
                "jk,jip->jkip", d_inp, i_sens
            )
            for name, g in g_consts.items():
                new_sens[idx[li], :, idx[li], lo.const(name)] += g
            sens[li] = new_sens
            s_new, y_new = neurons.step(layer, states[li], cur)
            d_inps.append(d_inp[None, :, None, :])
            new_states.append(s_new)
            new_outputs.append(y_new)
            x_in = y_new
        u_t = new_states[-1][None, None, :, 0]
        _, dl_du = window_loss(loss_spec, u_t, targets, t - 1, total_steps)
        ells = network.spatial_loss_grads(params, d_inps, dl_du)
        for li in range(len(params)):
            lo = layouts[li]
            ell_t = ells[li][0, :, 0, :]  # (m, k)
            contrib = np.einsum("jk,jkip->ip", ell_t, sens[li])
            grads[li]["w_ff"] += contrib[:, lo.ff]
            if lo.recurrent:
                grads[li]["w_rec"] += contrib[:, lo.rec]
            grads[li]["bias"] += contrib[:, lo.bias]
            for name in lo.const_names:
                grads[li][name] += contrib[:, lo.const(name)]
        states = new_states
        outputs = new_outputs
    return grads


def exact_state_loss_grads(
    params: list[LayerParams],
    x: np.ndarray,
    targets: np.ndarray,
    loss_spec: LossSpec,
    dtype=np.float64,
):
    """Exact dL/ds_l^t of the relaxed graph via a linear adjoint pass.

    Single sample; sizes are guarded like the rtrl reference.  Includes
    the temporal pathways through deeper layers that the same-step
    spatial chain drops, so comparing against
    :func:`network.spatial_loss_grads` exposes that approximation.
    Returns one (m_l, T, k_l) array per layer.
    """
    x = np.asarray(x, dtype=dtype)
    total_steps = x.shape[0]
    _check_rtrl_size(params, total_steps)
    params = _cast_params(params, dtype)
    targets = _single_sample_targets(targets, loss_spec)
    n_layers = len(params)
    a_all = [np.zeros((p.m, total_steps, p.k, p.k), dtype=dtype) for p in params]
    d_all = [np.zeros((p.m, total_steps, p.k), dtype=dtype) for p in params]
    dl_du = np.zeros((total_steps, params[-1].m), dtype=dtype)
    states = [np.zeros((p.m, p.k), dtype=dtype) for p in params]
    outputs = [np.zeros(p.m, dtype=dtype) for p in params]
    for t in range(1, total_steps + 1):
        x_in = x[t - 1]
        for li, layer in enumerate(params):
            cur = network.input_current(layer, x_in[None], outputs[li][None])[0]
            a_jac, d_inp = neurons.jacobians(layer, states[li], cur)
            a_all[li][:, t - 1] = a_jac
            d_all[li][:, t - 1] = d_inp
            s_new, y_new = neurons.step(layer, states[li], cur)
            states[li] = s_new
            outputs[li] = y_new
            x_in = y_new
        u_t = states[-1][None, None, :, 0]
        _, g = window_loss(loss_spec, u_t, targets, t - 1, total_steps)
        dl_du[t - 1] = g[0, 0]
    adj = [np.zeros((p.m, total_steps, p.k), dtype=dtype) for p in params]
    rows = [neurons.output_row(p.kind) for p in params]
    for t in range(total_steps, 0, -1):
        for li in range(n_layers - 1, -1, -1):
            layer = params[li]
            acc = np.zeros((layer.m, layer.k), dtype=dtype)
            if li == n_layers - 1:
                acc[:, 0] += dl_du[t - 1]
            if t < total_steps:
                # own next-step state pathway
                acc += np.einsum(
                    "mkl,mk->ml", a_all[li][:, t], adj[li][:, t]
                )
                # own recurrent output pathway y_l^t -> I_l^{t+1}
                if layer.recurrent:
                    g_next = np.einsum(
                        "mk,mk->m", d_all[li][:, t], adj[li][:, t]
                    )
                    acc[:, rows[li]] += layer.w_rec.T @ g_next
            if li < n_layers - 1:
                # same-step feed-forward pathway y_l^t -> I_{l+1}^t
                upper = params[li + 1]
                g_up = np.einsum(
                    "mk,mk->m", d_all[li + 1][:, t - 1], adj[li + 1][:, t - 1]
                )
                acc[:, rows[li]] += upper.w_ff.T @ g_up
            adj[li][:, t - 1] = acc
    return adj
