"""Recurrent cells, masked unrolling, back-propagation through time, and Adam.

All sequence functions are batched: inputs are ``(B, T, F)`` with a per-row
``lengths`` vector. Steps at or beyond a row's length leave its state
untouched, so padding never influences the final hidden state.

Gate layouts (columns of ``w_input`` / ``w_hidden`` / ``bias``, each block
of width ``d``):

* rnn:  ``[a]``           h' = tanh(a)
* gru:  ``[z, r, n]``     h' = z*h + (1-z)*n,  n = tanh(x Wn + (r*h) Un + bn)
* lstm: ``[i, f, g, o]``  c' = f*c + i*g,      h' = o*tanh(c')
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

GATES = {"rnn": 1, "gru": 3, "lstm": 4}
INIT_SCALE = 0.05

DEBUG = bool(os.environ.get("SEER_DEBUG"))


@dataclass
class CellParams:
    cell_type: str
    w_input: np.ndarray      # (n_in, G*d)
    w_hidden: np.ndarray     # (d, G*d)
    bias: np.ndarray         # (G*d,)

    def __post_init__(self):
        if self.cell_type not in GATES:
            raise ValueError(f"unknown cell type {self.cell_type!r}")
        g = GATES[self.cell_type]
        d = self.w_hidden.shape[0]
        if self.w_hidden.shape != (d, g * d) or self.w_input.shape[1] != g * d or self.bias.shape != (g * d,):
            raise ValueError(
                f"inconsistent {self.cell_type} shapes: w_input {self.w_input.shape}, "
                f"w_hidden {self.w_hidden.shape}, bias {self.bias.shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_input.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w_input": self.w_input, "w_hidden": self.w_hidden, "bias": self.bias}


def init_cell(cell_type: str, input_size: int, hidden_size: int, rng: np.random.Generator,
              dtype=np.float32) -> CellParams:
    """Uniform(-0.05, 0.05) weights, zero biases (LSTM forget bias 1)."""
    g = GATES[cell_type]
    d = hidden_size
    w_in = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(input_size, g * d)).astype(dtype)
    w_h = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(d, g * d)).astype(dtype)
    bias = np.zeros(g * d, dtype=dtype)
    if cell_type == "lstm":
        bias[d:2 * d] = 1.0
    return CellParams(cell_type, w_in, w_h, bias)


@dataclass
class SequenceState:
    h: np.ndarray
    c: np.ndarray | None = None


def _sigmoid(a):
    # split by sign to stay finite for large |a|
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# single step
# ---------------------------------------------------------------------------

def _step(p: CellParams, x, h, c):
    """One step; returns (h', c', cache). ``x``: (B, n_in), ``h``/``c``: (B, d)."""
    d = p.hidden_size
    kind = p.cell_type
    if kind == "rnn":
        h_new = np.tanh(x @ p.w_input + h @ p.w_hidden + p.bias)
        return h_new, None, (x, h, h_new)
    if kind == "gru":
        ax = x @ p.w_input + p.bias
        ah = h @ p.w_hidden[:, :2 * d]
        zr = _sigmoid(ax[:, :2 * d] + ah)
        z, r = zr[:, :d], zr[:, d:]
        rh = r * h
        n = np.tanh(ax[:, 2 * d:] + rh @ p.w_hidden[:, 2 * d:])
        h_new = z * h + (1.0 - z) * n
        return h_new, None, (x, h, z, r, rh, n)
    a = x @ p.w_input + h @ p.w_hidden + p.bias
    ifo = _sigmoid(a[:, [*range(0, 2 * d), *range(3 * d, 4 * d)]])
    i, f, o = ifo[:, :d], ifo[:, d:2 * d], ifo[:, 2 * d:]
    g = np.tanh(a[:, 2 * d:3 * d])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc)


def _step_backward(p: CellParams, cache, dh, dc, grads):
    """Accumulate parameter grads into ``grads``; returns (dx, dh_prev, dc_prev)."""
    d = p.hidden_size
    kind = p.cell_type
    if kind == "rnn":
        x, h, h_new = cache
        da = dh * (1.0 - h_new * h_new)
        grads["w_input"] += x.T @ da
        grads["w_hidden"] += h.T @ da
        grads["bias"] += da.sum(axis=0)
        return da @ p.w_input.T, da @ p.w_hidden.T, None
    if kind == "gru":
        x, h, z, r, rh, n = cache
        dz = dh * (h - n)
        dn = dh * (1.0 - z)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        drh = dan @ p.w_hidden[:, 2 * d:].T
        dr = drh * h
        dh_prev = dh_prev + drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dazr = np.concatenate([daz, dar], axis=1)
        da = np.concatenate([dazr, dan], axis=1)
        grads["w_input"] += x.T @ da
        grads["w_hidden"][:, :2 * d] += h.T @ dazr
        grads["w_hidden"][:, 2 * d:] += rh.T @ dan
        grads["bias"] += da.sum(axis=0)
        dh_prev = dh_prev + dazr @ p.w_hidden[:, :2 * d].T
        return da @ p.w_input.T, dh_prev, None
    x, h, c, i, f, g, o, tc = cache
    do = dh * tc
    dcc = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate([
        dcc * g * i * (1.0 - i),
        dcc * c * f * (1.0 - f),
        dcc * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=1)
    grads["w_input"] += x.T @ da
    grads["w_hidden"] += h.T @ da
    grads["bias"] += da.sum(axis=0)
    return da @ p.w_input.T, da @ p.w_hidden.T, dcc * f


def cell_step(params: CellParams, x_t, state: SequenceState) -> SequenceState:
    """Advance one step. Accepts a single row (n_in,) or a batch (B, n_in)."""
    x = np.asarray(x_t, dtype=params.w_input.dtype)
    single = x.ndim == 1
    h = np.atleast_2d(state.h)
    if x.shape[-1] != params.input_size or h.shape[-1] != params.hidden_size:
        raise ValueError(f"shape mismatch: x {x.shape}, h {h.shape} for cell "
                         f"{params.input_size}->{params.hidden_size}")
    c = None
    if params.cell_type == "lstm":
        c = np.atleast_2d(state.c if state.c is not None else np.zeros_like(h))
    h_new, c_new, _ = _step(params, np.atleast_2d(x), h, c)
    if single:
        return SequenceState(h_new[0], None if c_new is None else c_new[0])
    return SequenceState(h_new, c_new)


# ---------------------------------------------------------------------------
# unrolling
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Recorded forward pass: per-layer step caches plus the step masks."""
    layers: list[CellParams]
    masks: list[np.ndarray]
    caches: list[list] = field(default_factory=list)
    batch: int = 0


def sequence_forward(layers, series, lengths=None, record: bool = False, check_finite: bool | None = None):
    """Unroll a stack of cells from a zero state; returns the top layer's final h.

    ``series``: (T, F) or (B, T, F). ``lengths``: per-row valid steps (default: all).
    With ``record=True`` returns ``(h, tape)`` for :func:`backward`.
    """
    if isinstance(layers, CellParams):
        layers = [layers]
    x = np.asarray(series)
    single = x.ndim == 2
    if single:
        x = x[None]
    B, T, _ = x.shape
    if lengths is None:
        lengths = np.full(B, T)
    lengths = np.broadcast_to(np.asarray(lengths, dtype=np.int64), (B,))
    if np.any(lengths > T) or np.any(lengths < 0):
        raise ValueError(f"lengths must lie in [0, {T}]")
    dtype = layers[0].w_input.dtype
    x = x.astype(dtype, copy=False)
    steps = int(lengths.max()) if B else 0
    check = DEBUG if check_finite is None else check_finite

    masks = [(t < lengths)[:, None] for t in range(steps)]
    tape = Tape(list(layers), masks, batch=B) if record else None
    inputs = [x[:, t] for t in range(steps)]
    h = None
    for p in layers:
        d = p.hidden_size
        h = np.zeros((B, d), dtype=dtype)
        c = np.zeros((B, d), dtype=dtype) if p.cell_type == "lstm" else None
        outputs = []
        caches = []
        for t in range(steps):
            h_new, c_new, cache = _step(p, inputs[t], h, c)
            m = masks[t]
            h = np.where(m, h_new, h)
            if c is not None:
                c = np.where(m, c_new, c)
            if check and not np.all(np.isfinite(h)):
                raise FloatingPointError(f"non-finite hidden state at step {t}")
            outputs.append(h)
            if record:
                caches.append(cache)
        if record:
            tape.caches.append(caches)
        inputs = outputs
    out = h[0] if single else h
    return (out, tape) if record else out


def backward(tape: Tape, dh_final) -> list[dict[str, np.ndarray]]:
    """Reverse-mode gradients of a scalar loss given dL/dh_final; one dict per layer."""
    dh_final = np.atleast_2d(dh_final)
    grads = [{k: np.zeros_like(v) for k, v in p.tensors().items()} for p in tape.layers]
    steps = len(tape.masks)
    d_out = None
    for li in range(len(tape.layers) - 1, -1, -1):
        p = tape.layers[li]
        caches = tape.caches[li]
        dtype = p.w_input.dtype
        dh = dh_final.astype(dtype) if d_out is None else np.zeros((tape.batch, p.hidden_size), dtype=dtype)
        dc = np.zeros_like(dh) if p.cell_type == "lstm" else None
        dxs = [None] * steps
        for t in range(steps - 1, -1, -1):
            if d_out is not None:
                dh = dh + d_out[t]
            m = tape.masks[t]
            keep = ~m
            dx, dh_prev, dc_prev = _step_backward(
                p, caches[t], dh * m, None if dc is None else dc * m, grads[li])
            dxs[t] = dx
            dh = dh * keep + dh_prev
            if dc is not None:
                dc = dc * keep + dc_prev
        d_out = dxs
    return grads


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam, applied in place in sorted-name order."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the original norm."""
    total = float(np.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for _, g in sorted(grads.items()))))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def embedding_grad(n_rows: int, rows, row_grads) -> np.ndarray:
    """Scatter per-example gradients into a dense zero matrix (duplicate rows accumulate)."""
    out = np.zeros((n_rows, row_grads.shape[1]), dtype=row_grads.dtype)
    np.add.at(out, np.asarray(rows), row_grads)
    return out
