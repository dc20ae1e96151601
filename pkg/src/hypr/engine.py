"""Subsequence-parallel gradient engine.

A sequence is processed window by window.  Each window runs a sequential
forward rollout (S-stage) that caches states, outputs, and input
currents, followed by a parallel gradient stage (P-stage) that

1. evaluates all per-step Jacobians at once from the cache,
2. computes cumulative transition matrices ``phi`` with a suffix-product
   scan and backward coefficient vectors ``q`` with a reverse pair scan,
3. contracts ``q`` against the low-rank per-step parameter derivatives
   (input-derivative columns times the layer input / previous outputs)
   to accumulate the window's parameter gradient, plus the carry credit
   ``q^0 . e^0`` from the eligibility matrices of earlier windows,
4. advances the eligibility carry ``e`` to the end of the window without
   ever forming intermediate eligibility matrices or a dense per-step
   parameter-derivative tensor.

Gradients accumulated this way are mathematically identical to running
the step-by-step eligibility recursion with per-step accumulation (the
window length only changes floating-point association), while the peak
buffer footprint depends on the window length and layer sizes only,
never on the total sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as losses_mod
from . import network, neurons
from .accounting import BufferLedger
from .errors import ConfigError
from .losses import LossSpec, softmax, window_loss
from .network import CarryState, LayerParams
from .scan import _backward_coeffs_kernel, _suffix_products_kernel, pow2_at_least
from .workers import apply_workers


@dataclass(frozen=True)
class ColumnLayout:
    """Eligibility-column layout of one layer: [ff | rec | bias | consts]."""

    d: int
    m: int
    recurrent: bool
    const_names: tuple

    @property
    def ff(self) -> slice:
        return slice(0, self.d)

    @property
    def rec(self) -> slice:
        if not self.recurrent:
            raise ConfigError("layer has no recurrent columns")
        return slice(self.d, self.d + self.m)

    @property
    def bias(self) -> int:
        return self.d + (self.m if self.recurrent else 0)

    def const(self, name: str) -> int:
        return self.bias + 1 + self.const_names.index(name)

    @property
    def total(self) -> int:
        return self.bias + 1 + len(self.const_names)

    @staticmethod
    def of(layer: LayerParams) -> "ColumnLayout":
        return ColumnLayout(
            d=layer.d_in,
            m=layer.m,
            recurrent=layer.recurrent,
            const_names=tuple(neurons.TRAINABLE_CONSTS[layer.kind]),
        )


@dataclass
class DeltaFactors:
    """Low-rank factors of the per-step parameter derivatives.

    ``d_inp``: (B, m, lam, k) input derivatives; ``x_seq``: (B, lam, d)
    layer inputs; ``y_prev``: (B, lam, m) previous-step own outputs (None
    without recurrence); ``const_cols``: per-constant (B, m, lam, k)
    direct state partials.  The dense per-step derivative (an outer
    product over these factors) is never formed.
    """

    d_inp: np.ndarray
    x_seq: np.ndarray
    y_prev: np.ndarray | None
    const_cols: dict = field(default_factory=dict)


def delta_factors(layer, d_inp, x_seq, y_prev, const_cols) -> DeltaFactors:
    if layer.recurrent and y_prev is None:
        raise ConfigError("recurrent layer needs previous-output factors")
    return DeltaFactors(d_inp=d_inp, x_seq=x_seq, y_prev=y_prev, const_cols=const_cols)


def _pushed_columns(phi: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """sum_t phi^{lam:t+1} g^t for per-neuron column sequences (B,m,lam,k)."""
    lam = cols.shape[2]
    out = cols[:, :, lam - 1].copy()
    if lam > 1:
        out += np.einsum(
            "bmtij,bmtj->bmi", phi[:, :, 1:lam], cols[:, :, : lam - 1], optimize=True
        )
    return out


def propagate_eligibility(
    e0: np.ndarray,
    phi: np.ndarray,
    factors: DeltaFactors,
    layout: ColumnLayout,
    out: np.ndarray | None = None,
    u_buf: np.ndarray | None = None,
) -> np.ndarray:
    """Eligibility carry at the end of the window, in factored form.

    ``e0``: (B, m, k, P); ``phi``: (B, m, lam, k, k) cumulative
    transitions.  Computes
    ``e_lam = delta_lam + sum_t phi^{lam:t+1} delta_t + phi^{lam:1} e0``
    with every delta applied through its low-rank factors.
    """
    lam = factors.d_inp.shape[2]
    e_new = np.matmul(phi[:, :, 0], e0, out=out)
    u = u_buf if u_buf is not None else np.empty_like(factors.d_inp)
    u = u[:, :, :lam]
    u[:, :, lam - 1] = factors.d_inp[:, :, lam - 1]
    if lam > 1:
        u[:, :, : lam - 1] = np.matmul(
            phi[:, :, 1:lam], factors.d_inp[:, :, : lam - 1, :, None]
        )[..., 0]
    e_new[..., layout.ff] += np.einsum(
        "bmtk,btd->bmkd", u, factors.x_seq, optimize=True
    )
    if layout.recurrent:
        e_new[..., layout.rec] += np.einsum(
            "bmtk,btn->bmkn", u, factors.y_prev, optimize=True
        )
    e_new[..., layout.bias] += u.sum(axis=2)
    for name, cols in factors.const_cols.items():
        e_new[..., layout.const(name)] += _pushed_columns(phi, cols)
    return e_new


def cumulative_apg(
    q: np.ndarray,
    factors: DeltaFactors,
    e0: np.ndarray,
    layout: ColumnLayout,
    out: dict,
) -> dict:
    """Accumulate the window's parameter gradient into ``out`` (+=).

    ``q``: (B, m, lam+1, k) backward coefficients; the window gradient is
    ``q^0 . e^0 + sum_t q^t . delta_t`` with the per-step terms expanded
    through the low-rank factors.
    """
    lam = factors.d_inp.shape[2]
    q_in = q[:, :, 1 : lam + 1]
    c = np.einsum("bmtk,bmtk->bmt", q_in, factors.d_inp, optimize=True)
    out["w_ff"] += np.matmul(c, factors.x_seq)
    if layout.recurrent:
        out["w_rec"] += np.matmul(c, factors.y_prev)
    out["bias"] += c.sum(axis=-1)
    for name, cols in factors.const_cols.items():
        out[name] += np.einsum("bmtk,bmtk->bm", q_in, cols, optimize=True)
    carry = np.matmul(q[:, :, 0][:, :, None, :], e0)[:, :, 0, :]
    out["w_ff"] += carry[..., layout.ff]
    if layout.recurrent:
        out["w_rec"] += carry[..., layout.rec]
    out["bias"] += carry[..., layout.bias]
    for name in layout.const_names:
        out[name] += carry[..., layout.const(name)]
    return out


@dataclass
class SequenceResult:
    """Per-sample gradients and streaming evaluation aggregates."""

    apg: list
    seq_loss: np.ndarray
    sum_u: np.ndarray
    sum_softmax: np.ndarray
    per_step_correct: np.ndarray
    n_active: int

    def accuracy(self, mode: str, targets_seq=None) -> float:
        return losses_mod.accuracy_from_aggregates(
            mode, self.sum_u, self.sum_softmax, self.per_step_correct,
            self.n_active, targets_seq,
        )

    def mean_apg(self) -> list:
        # numpy's pairwise reduction keeps batch sums order-stable
        return [
            {key: arr.mean(axis=0) for key, arr in layer.items()} for layer in self.apg
        ]


class _LayerWorkspace:
    """Preallocated per-layer buffers for one window size."""

    def __init__(self, layer: LayerParams, batch, lam, n_classes, dtype, ledger, tag):
        m, k = layer.m, layer.k
        cols = batch * m
        pad = pow2_at_least(lam)
        self.layout = ColumnLayout.of(layer)
        al = ledger.alloc
        self.a_cols = al((cols, lam, k, k), dtype, f"{tag}/jac_a")
        self.a_view = self.a_cols.reshape(batch, m, lam, k, k)
        self.d_inp = al((batch, m, lam, k), dtype, f"{tag}/jac_d")
        self.const_g = {
            name: al((batch, m, lam, k), dtype, f"{tag}/g_{name}")
            for name in self.layout.const_names
        }
        self.ell_cols = al((cols, lam, k), dtype, f"{tag}/loss_grad")
        self.ell_view = self.ell_cols.reshape(batch, m, lam, k)
        self.phi_cols = al((cols, lam, k, k), dtype, f"{tag}/phi")
        self.phi_view = self.phi_cols.reshape(batch, m, lam, k, k)
        self.work_m = al((cols, pad, k, k), dtype, f"{tag}/scan_work_m")
        self.work_v = al((cols, pad, k), dtype, f"{tag}/scan_work_v")
        self.q_cols = al((cols, lam + 1, k), dtype, f"{tag}/q")
        self.q_view = self.q_cols.reshape(batch, m, lam + 1, k)
        self.u_buf = al((batch, m, lam, k), dtype, f"{tag}/u_push")
        self.e_carry = al((batch, m, k, self.layout.total), dtype, f"{tag}/e_carry")
        self.e_next = al((batch, m, k, self.layout.total), dtype, f"{tag}/e_next")


class HyprEngine:
    """Window driver owning all rollout and gradient workspaces.

    One engine instance serves one (network shape, window length, batch,
    dtype) combination; all buffers are allocated once through the
    ledger, so the accounted peak is independent of sequence length.  A
    single instance must not be driven concurrently.
    """

    def __init__(
        self,
        params: list[LayerParams],
        lam: int,
        batch: int,
        loss_spec: LossSpec,
        dtype=np.float64,
        workers: int | None = None,
        ledger: BufferLedger | None = None,
    ):
        if lam < 1:
            raise ConfigError(f"subsequence length must be >= 1, got {lam}")
        if batch < 1:
            raise ConfigError(f"batch must be >= 1, got {batch}")
        if params[-1].kind != neurons.ModelKind.LI:
            raise ConfigError("last layer must be the li readout")
        if params[-1].m != loss_spec.n_classes:
            raise ConfigError(
                f"readout width {params[-1].m} != {loss_spec.n_classes} classes"
            )
        apply_workers(workers)
        self.lam = lam
        self.batch = batch
        self.loss_spec = loss_spec
        self.dtype = np.dtype(dtype)
        self.ledger = ledger if ledger is not None else BufferLedger()
        self.n_classes = params[-1].m
        self.cache = network.alloc_cache(params, batch, lam, self.dtype, self.ledger)
        self.work = [
            _LayerWorkspace(p, batch, lam, self.n_classes, self.dtype, self.ledger,
                            f"layer{li}")
            for li, p in enumerate(params)
        ]
        self.loss_buf = self.ledger.alloc((batch, lam), self.dtype, "loss")
        self.dl_du = self.ledger.alloc((batch, lam, self.n_classes), self.dtype,
                                       "loss_grad_readout")
        self.apg = [
            {
                key: self.ledger.alloc((batch,) + arr.shape, self.dtype,
                                       f"layer{li}/apg_{key}")
                for key, arr in p.trainable_arrays().items()
            }
            for li, p in enumerate(params)
        ]

    @property
    def peak_bytes(self) -> int:
        return self.ledger.peak_bytes

    def _reset(self, params):
        for li in range(len(params)):
            self.work[li].e_carry[...] = 0.0
            for arr in self.apg[li].values():
                arr[...] = 0.0

    def _sliced_cache(self, lam_w):
        if lam_w == self.lam:
            return self.cache
        return [
            network.LayerCache(
                states=c.states[:, :, : lam_w + 1],
                outputs=c.outputs[:, :, : lam_w + 1],
                currents=c.currents[:, :, :lam_w],
            )
            for c in self.cache
        ]

    def process_subsequence(
        self,
        params: list[LayerParams],
        x_block: np.ndarray,
        targets: np.ndarray,
        t_offset: int,
        total_steps: int,
        carry: CarryState,
        with_grads: bool = True,
    ) -> CarryState:
        """Run one window: S-stage, loss, and (optionally) the P-stage."""
        lam_w = x_block.shape[1]
        if lam_w > self.lam:
            raise ConfigError(f"window of {lam_w} exceeds engine lam {self.lam}")
        cache = self._sliced_cache(lam_w)
        carry_out = network.run_s_stage(params, x_block, carry, cache, t_offset)
        # per-step readout loss over the whole window at once
        ro = cache[-1]
        u_win = np.ascontiguousarray(ro.states[:, :, 1:, 0].transpose(0, 2, 1))
        window_loss(
            self.loss_spec, u_win, targets, t_offset, total_steps,
            out_loss=self.loss_buf[:, :lam_w], out_grad=self.dl_du[:, :lam_w],
        )
        if not with_grads:
            return carry_out
        for li, layer in enumerate(params):
            w = self.work[li]
            s_prev = cache[li].states[:, :, :lam_w].transpose(0, 2, 1, 3)
            cur = cache[li].currents[:, :, :lam_w].transpose(0, 2, 1)
            a_t = w.a_view[:, :, :lam_w].transpose(0, 2, 1, 3, 4)
            d_t = w.d_inp[:, :, :lam_w].transpose(0, 2, 1, 3)
            neurons.jacobians(layer, s_prev, cur, out=(a_t, d_t))
            if w.layout.const_names:
                g_t = {
                    name: w.const_g[name][:, :, :lam_w].transpose(0, 2, 1, 3)
                    for name in w.layout.const_names
                }
                neurons.const_grads(layer, s_prev, cur, out=g_t)
        network.spatial_loss_grads(
            params,
            [w.d_inp[:, :, :lam_w] for w in self.work],
            self.dl_du[:, :lam_w],
            out=[w.ell_view[:, :, :lam_w] for w in self.work],
        )
        pad_w = pow2_at_least(lam_w)
        for li, layer in enumerate(params):
            w = self.work[li]
            _suffix_products_kernel(
                w.a_cols[:, :lam_w], w.work_m[:, :pad_w], w.phi_cols[:, :lam_w]
            )
            _backward_coeffs_kernel(
                w.a_cols[:, :lam_w], w.ell_cols[:, :lam_w],
                w.work_m[:, :pad_w], w.work_v[:, :pad_w],
                w.q_cols[:, : lam_w + 1],
            )
            if li == 0:
                x_seq = x_block
            else:
                x_seq = cache[li - 1].outputs[:, :, 1:].transpose(0, 2, 1)
            y_prev = None
            if layer.recurrent:
                y_prev = cache[li].outputs[:, :, :lam_w].transpose(0, 2, 1)
            factors = delta_factors(
                layer,
                w.d_inp[:, :, :lam_w],
                x_seq,
                y_prev,
                {name: g[:, :, :lam_w] for name, g in w.const_g.items()},
            )
            phi = w.phi_view[:, :, :lam_w]
            q = w.q_view[:, :, : lam_w + 1]
            cumulative_apg(q, factors, w.e_carry, w.layout, self.apg[li])
            propagate_eligibility(
                w.e_carry, phi, factors, w.layout,
                out=w.e_next, u_buf=w.u_buf,
            )
            w.e_carry, w.e_next = w.e_next, w.e_carry
        return carry_out

    def train_sequence(
        self,
        params: list[LayerParams],
        x: np.ndarray,
        targets: np.ndarray,
        with_grads: bool = True,
    ) -> SequenceResult:
        """Whole-sequence pass: cumulative gradients plus loss/accuracy
        aggregates.  ``x``: (B, T, d); peak memory is set by the window
        length, not by T."""
        if x.ndim != 3 or x.shape[0] != self.batch:
            raise ConfigError(
                f"expected input of shape ({self.batch}, T, d), got {x.shape}"
            )
        total_steps = x.shape[1]
        if total_steps < 1:
            raise ConfigError("empty sequence")
        x = np.asarray(x, dtype=self.dtype)
        targets = np.asarray(targets)
        params = [p.astype(self.dtype) for p in params]
        self._reset(params)
        carry = CarryState.zeros(params, self.batch, self.dtype)
        active = self.loss_spec.active_steps(total_steps)
        n_active = int(active.sum())
        seq_loss = np.zeros(self.batch, dtype=self.dtype)
        sum_u = np.zeros((self.batch, self.n_classes), dtype=self.dtype)
        sum_sm = np.zeros((self.batch, self.n_classes), dtype=self.dtype)
        correct = np.zeros(self.batch, dtype=np.int64)
        for off in range(0, total_steps, self.lam):
            lam_w = min(self.lam, total_steps - off)
            carry = self.process_subsequence(
                params, x[:, off : off + lam_w], targets, off, total_steps, carry,
                with_grads=with_grads,
            )
            seq_loss += self.loss_buf[:, :lam_w].sum(axis=1)
            ro = self.cache[-1]
            u_win = ro.states[:, :, 1 : lam_w + 1, 0].transpose(0, 2, 1)
            act_w = active[off : off + lam_w]
            if act_w.any():
                u_act = u_win[:, act_w, :]
                sum_u += u_act.sum(axis=1)
                sum_sm += softmax(u_act).sum(axis=1)
                if self.loss_spec.per_step_targets:
                    tgt = targets[:, off : off + lam_w][:, act_w]
                else:
                    tgt = targets[:, None]
                correct += (np.argmax(u_act, axis=-1) == tgt).sum(axis=1)
        return SequenceResult(
            apg=self.apg if with_grads else [],
            seq_loss=seq_loss,
            sum_u=sum_u,
            sum_softmax=sum_sm,
            per_step_correct=correct,
            n_active=n_active,
        )
