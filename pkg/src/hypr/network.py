"""Layer stacking, parameter containers, and the sequential forward stage.

A network is an ordered list of hidden spiking layers followed by one
leaky-integrator readout.  Within a time step, layer l consumes the
same-step output of layer l-1 (feed-forward) and its own previous-step
output (recurrence), so the whole stack advances one step at a time;
states, outputs, and input currents for a subsequence are cached for the
parallel gradient stage.

Loss gradients are injected per step and propagated spatially: the
readout gradient is pushed through each layer's input derivative and
feed-forward weights into the output coordinate of the layer below,
same time step only.  Temporal pathways through deeper layers are
deliberately dropped; that approximation is shared by the engine and the
sequential oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import neurons
from .errors import ConfigError, NumericError
from .neurons import ModelKind, STATE_DIM, TRAINABLE_CONSTS
from .surrogates import Surrogate


@dataclass
class LayerSpec:
    kind: ModelKind
    m: int
    recurrent: bool = True


@dataclass
class NetworkConfig:
    input_dim: int
    hidden: list[LayerSpec]
    classes: int
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.classes < 1:
            raise ConfigError("input_dim and classes must be positive")
        if len(self.hidden) < 1:
            raise ConfigError("at least one hidden layer is required")
        for spec in self.hidden:
            spec.kind = ModelKind(spec.kind)
            if spec.kind == ModelKind.LI:
                raise ConfigError("li is a readout model, not a hidden-layer model")
            if spec.m < 1:
                raise ConfigError("layer width must be positive")


@dataclass
class LayerParams:
    """Weights and per-neuron constants of one layer.

    ``consts`` holds the trainable per-neuron model constants (these get
    eligibility columns); ``fixed`` holds non-trainable constants.  The
    recurrent weight matrix is None when recurrence is disabled.
    """

    kind: ModelKind
    w_ff: np.ndarray
    w_rec: np.ndarray | None
    bias: np.ndarray
    consts: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    surrogate: Surrogate = field(default_factory=Surrogate)

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        neurons.validate_constants(self.kind, self.consts, self.fixed)
        if self.w_rec is not None and self.w_rec.shape != (self.m, self.m):
            raise ConfigError(
                f"recurrent weights must be ({self.m}, {self.m}), got {self.w_rec.shape}"
            )
        for name in TRAINABLE_CONSTS[self.kind]:
            if name not in self.consts:
                raise ConfigError(f"{self.kind.value} layer missing constant {name!r}")

    @property
    def m(self) -> int:
        return self.w_ff.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_ff.shape[1]

    @property
    def k(self) -> int:
        return STATE_DIM[self.kind]

    @property
    def recurrent(self) -> bool:
        return self.w_rec is not None

    def trainable_arrays(self) -> dict:
        out = {"w_ff": self.w_ff, "bias": self.bias}
        if self.w_rec is not None:
            out["w_rec"] = self.w_rec
        for name in TRAINABLE_CONSTS[self.kind]:
            out[name] = self.consts[name]
        return out

    def grad_template(self, dtype=np.float64, batch: tuple = ()) -> dict:
        return {
            key: np.zeros(batch + arr.shape, dtype=dtype)
            for key, arr in self.trainable_arrays().items()
        }

    def astype(self, dtype) -> "LayerParams":
        def cast(v):
            return np.asarray(v, dtype=dtype) if isinstance(v, np.ndarray) else v

        return LayerParams(
            kind=self.kind,
            w_ff=cast(self.w_ff),
            w_rec=None if self.w_rec is None else cast(self.w_rec),
            bias=cast(self.bias),
            consts={k: cast(v) for k, v in self.consts.items()},
            fixed={k: cast(v) for k, v in self.fixed.items()},
            surrogate=self.surrogate,
        )


# default initialization draws for per-neuron constants; entries are
# (distribution, arg1, arg2) with distribution in {uniform, normal}
DEFAULT_INIT = {
    ModelKind.BRF: {"omega": ("uniform", 5.0, 10.0), "b_offset": ("uniform", 0.1, 1.0)},
    ModelKind.SE_ADLIF: {
        "a_hat": ("uniform", 0.0, 1.0),
        "b_hat": ("uniform", 0.0, 1.0),
        "tau_u": ("uniform", 5.0, 25.0),
        "tau_w": ("uniform", 60.0, 300.0),
    },
    ModelKind.ALIF: {"tau_u": ("normal", 20.0, 5.0), "tau_a": ("normal", 150.0, 10.0)},
    ModelKind.LI: {"tau_out": ("uniform", 15.0, 25.0)},
}

SE_TAU_U_RANGE = (5.0, 25.0)
SE_TAU_W_RANGE = (60.0, 300.0)


def _draw(rng, spec, size):
    dist, a, b = spec
    if dist == "uniform":
        return rng.uniform(a, b, size=size)
    if dist == "normal":
        return rng.normal(a, b, size=size)
    raise ConfigError(f"unknown init distribution {dist!r}")


def _weight(rng, m, d):
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, size=(m, d))


def init_layer(
    kind: ModelKind,
    m: int,
    d_in: int,
    rng: np.random.Generator,
    recurrent: bool = True,
    surrogate: Surrogate | None = None,
    init: dict | None = None,
    fixed_overrides: dict | None = None,
) -> LayerParams:
    """Draw fresh parameters for one layer."""
    kind = ModelKind(kind)
    draws = dict(DEFAULT_INIT[kind])
    draws.update(init or {})
    surrogate = surrogate or Surrogate()
    w_ff = _weight(rng, m, d_in)
    w_rec = _weight(rng, m, m) if recurrent else None
    bias = np.zeros(m)
    consts: dict = {}
    fixed: dict = {"theta": 1.0}
    if kind == ModelKind.BRF:
        consts["omega"] = _draw(rng, draws["omega"], m)
        consts["b_offset"] = _draw(rng, draws["b_offset"], m)
        fixed.update(dt=0.01, q_decay=0.9)
    elif kind == ModelKind.SE_ADLIF:
        consts["a_hat"] = _draw(rng, draws["a_hat"], m)
        consts["b_hat"] = _draw(rng, draws["b_hat"], m)
        consts["tau_u_raw"] = neurons.raw_from_tau(
            _draw(rng, draws["tau_u"], m), *SE_TAU_U_RANGE
        )
        consts["tau_w_raw"] = neurons.raw_from_tau(
            _draw(rng, draws["tau_w"], m), *SE_TAU_W_RANGE
        )
        fixed.update(rho=120.0, tau_u_range=SE_TAU_U_RANGE, tau_w_range=SE_TAU_W_RANGE)
    elif kind == ModelKind.ALIF:
        tau_u = np.clip(_draw(rng, draws["tau_u"], m), 1.5, None)
        tau_a = np.clip(_draw(rng, draws["tau_a"], m), 1.5, None)
        fixed.update(
            alpha=np.exp(-1.0 / tau_u),
            rho=np.exp(-1.0 / tau_a),
            beta=1.8,
            b_0=1.0,
        )
    elif kind == ModelKind.LI:
        tau_out = np.clip(_draw(rng, draws["tau_out"], m), 1.5, None)
        fixed.update(alpha=np.exp(-1.0 / tau_out))
        fixed.pop("theta")
    if fixed_overrides:
        fixed.update(fixed_overrides)
    return LayerParams(kind, w_ff, w_rec, bias, consts, fixed, surrogate)


def init_params(
    cfg: NetworkConfig,
    surrogate: Surrogate | None = None,
    init: dict | None = None,
    fixed_overrides: dict | None = None,
) -> list[LayerParams]:
    """Draw parameters for the whole stack (hidden layers + LI readout)."""
    rng = np.random.default_rng(cfg.seed)
    layers = []
    d = cfg.input_dim
    for spec in cfg.hidden:
        layers.append(
            init_layer(
                spec.kind, spec.m, d, rng, spec.recurrent, surrogate, init, fixed_overrides
            )
        )
        d = spec.m
    layers.append(
        init_layer(ModelKind.LI, cfg.classes, d, rng, recurrent=False, init=init)
    )
    return layers


def clip_constants(params: list[LayerParams]) -> None:
    """Post-update clamp of bounded constants (adaptation couplings)."""
    for layer in params:
        if layer.kind == ModelKind.SE_ADLIF:
            np.clip(layer.consts["a_hat"], 0.0, 1.0, out=layer.consts["a_hat"])
            np.clip(layer.consts["b_hat"], 0.0, 1.0, out=layer.consts["b_hat"])


def input_current(
    layer: LayerParams, x_t: np.ndarray, y_prev: np.ndarray | None
) -> np.ndarray:
    """I_t = W_ff x_t + W_rec y_{t-1} + b for one step (batched)."""
    if x_t.shape[-1] != layer.d_in:
        raise ConfigError(
            f"layer expects input dim {layer.d_in}, got {x_t.shape[-1]}"
        )
    cur = x_t @ layer.w_ff.T + layer.bias
    if layer.w_rec is not None:
        if y_prev is None or y_prev.shape[-1] != layer.m:
            raise ConfigError("recurrent layer needs previous outputs of width m")
        cur = cur + y_prev @ layer.w_rec.T
    return cur


@dataclass
class CarryState:
    """Final states/outputs of one subsequence, seeding the next."""

    states: list
    outputs: list

    @staticmethod
    def zeros(params: list[LayerParams], batch: int, dtype=np.float64) -> "CarryState":
        return CarryState(
            states=[np.zeros((batch, p.m, p.k), dtype=dtype) for p in params],
            outputs=[np.zeros((batch, p.m), dtype=dtype) for p in params],
        )


@dataclass
class LayerCache:
    """Neuron-major per-window record for one layer.

    ``states``: (B, m, lam+1, k) with slot 0 holding the carry state;
    ``outputs``: (B, m, lam+1) likewise; ``currents``: (B, m, lam).
    """

    states: np.ndarray
    outputs: np.ndarray
    currents: np.ndarray


def alloc_cache(
    params: list[LayerParams], batch: int, lam: int, dtype, ledger=None
) -> list[LayerCache]:
    caches = []
    for li, p in enumerate(params):
        def mk(shape, tag):
            if ledger is None:
                return np.zeros(shape, dtype=dtype)
            return ledger.alloc(shape, dtype, tag=f"layer{li}/{tag}")

        caches.append(
            LayerCache(
                states=mk((batch, p.m, lam + 1, p.k), "states"),
                outputs=mk((batch, p.m, lam + 1), "outputs"),
                currents=mk((batch, p.m, lam), "currents"),
            )
        )
    return caches


def run_s_stage(
    params: list[LayerParams],
    x_block: np.ndarray,
    carry: CarryState,
    cache: list[LayerCache],
    t_offset: int = 0,
) -> CarryState:
    """Sequential rollout of one subsequence into ``cache``.

    ``x_block``: (B, lam, d).  Returns the carry for the next window.
    The rollout is deterministic and independent of how the sequence is
    partitioned into windows.
    """
    batch, lam = x_block.shape[0], x_block.shape[1]
    for li, layer in enumerate(params):
        cache[li].states[:, :, 0, :] = carry.states[li]
        cache[li].outputs[:, :, 0] = carry.outputs[li]
    for t in range(1, lam + 1):
        x_in = x_block[:, t - 1]
        for li, layer in enumerate(params):
            y_own_prev = cache[li].outputs[:, :, t - 1]
            cur = input_current(layer, x_in, y_own_prev)
            s_prev = cache[li].states[:, :, t - 1, :]
            s_new, y_new = neurons.step(layer, s_prev, cur)
            if not np.all(np.isfinite(s_new)):
                bad = np.argwhere(~np.isfinite(s_new))[0]
                raise NumericError(
                    f"non-finite state in layer {li} at step {t_offset + t}, "
                    f"neuron {int(bad[1])}"
                )
            cache[li].states[:, :, t, :] = s_new
            cache[li].outputs[:, :, t] = y_new
            cache[li].currents[:, :, t - 1] = cur
            x_in = y_new
    return CarryState(
        states=[cache[li].states[:, :, lam, :].copy() for li in range(len(params))],
        outputs=[cache[li].outputs[:, :, lam].copy() for li in range(len(params))],
    )


def spatial_loss_grads(
    params: list[LayerParams],
    d_inp: list[np.ndarray],
    dl_du: np.ndarray,
    out: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Per-layer, per-step loss gradients dL_t/ds_t (same-step chain only).

    ``d_inp[l]``: (B, m_l, lam, k_l) input derivatives from the Jacobian
    pass; ``dl_du``: (B, lam, C) readout loss gradient.  Returns one
    (B, m_l, lam, k_l) array per layer with the gradient placed in the
    output coordinate; deeper-layer temporal pathways are dropped.
    """
    n = len(params)
    if out is None:
        out = [
            np.zeros(d_inp[li].shape, dtype=dl_du.dtype) for li in range(n)
        ]
    ell = out
    ro = params[-1]
    ell[-1][..., 0] = np.moveaxis(dl_du, -1, 1)  # (B, C, lam)
    for li in range(n - 2, -1, -1):
        upper = params[li + 1]
        # scalar per upper neuron: ell_{l+1} . dS/dI
        gamma = np.einsum("bmtk,bmtk->bmt", ell[li + 1], d_inp[li + 1])
        dl_dy = np.einsum("bmt,md->bdt", gamma, upper.w_ff)
        row = neurons.output_row(params[li].kind)
        ell[li][...] = 0.0
        ell[li][..., row] = dl_dy
    return ell
