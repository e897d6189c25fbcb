"""LSTM and GRU cells and the stacked recurrent encoder, with exact BPTT.

Each gate matrix acts on the concatenation ``[x_t, h_{t-1}]``.  The public
step functions operate on single vectors; training and embedding go through
the batched ``*_batch`` functions, which pad variable-length sequences and
mask the padded steps (the hidden state is carried through unchanged past a
sequence's end, so the value at the last padded step equals the true final
hidden state).
"""

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .numeric import affine, dropout_mask

__all__ = [
    "LstmParams",
    "GruParams",
    "CellState",
    "StackedRnnParams",
    "lstm_step",
    "gru_step",
    "stacked_forward",
    "stacked_forward_batch",
    "stacked_backward_batch",
]


@dataclass
class LstmParams:
    """One LSTM layer: input/forget/output gates plus the candidate cell."""

    w_in: np.ndarray  # each weight is (H, D_in + H)
    w_forget: np.ndarray
    w_cell: np.ndarray
    w_out: np.ndarray
    b_in: np.ndarray  # each bias is (H,)
    b_forget: np.ndarray
    b_cell: np.ndarray
    b_out: np.ndarray

    @property
    def hidden_dim(self):
        return self.b_in.shape[0]

    @property
    def input_dim(self):
        return self.w_in.shape[1] - self.hidden_dim


@dataclass
class GruParams:
    """One GRU layer: reset and update gates plus the candidate hidden state."""

    w_reset: np.ndarray
    w_update: np.ndarray
    w_cand: np.ndarray
    b_reset: np.ndarray
    b_update: np.ndarray
    b_cand: np.ndarray

    @property
    def hidden_dim(self):
        return self.b_reset.shape[0]

    @property
    def input_dim(self):
        return self.w_reset.shape[1] - self.hidden_dim


@dataclass
class CellState:
    """Recurrent state: hidden vector ``h``, and cell vector ``c`` for LSTM."""

    h: np.ndarray
    c: np.ndarray | None = None


@dataclass
class StackedRnnParams:
    """A homogeneous stack of LSTM or GRU layers."""

    layers: list
    inter_layer_dropout: float = 0.3

    @property
    def kind(self):
        return "lstm" if isinstance(self.layers[0], LstmParams) else "gru"

    @property
    def hidden_dim(self):
        return self.layers[0].hidden_dim


def layer_param_fields(layer):
    """Field names of a layer's parameter arrays, in canonical order."""
    return [f.name for f in fields(layer)]


def lstm_step(p, x_t, prev):
    """One LSTM update; ``prev`` must carry both ``h`` and ``c``."""
    x_t = np.asarray(x_t)
    if prev.c is None:
        raise ShapeError("lstm_step requires a cell vector in the previous state")
    joint = np.concatenate([x_t, prev.h])
    gate_in = expit(affine(p.w_in, joint, p.b_in))
    gate_forget = expit(affine(p.w_forget, joint, p.b_forget))
    candidate = np.tanh(affine(p.w_cell, joint, p.b_cell))
    gate_out = expit(affine(p.w_out, joint, p.b_out))
    c = gate_in * candidate + gate_forget * prev.c
    h = gate_out * np.tanh(c)
    return CellState(h=h, c=c)


def gru_step(p, x_t, prev):
    """One GRU update; the new state is a convex mix of old and candidate."""
    x_t = np.asarray(x_t)
    joint = np.concatenate([x_t, prev.h])
    reset = expit(affine(p.w_reset, joint, p.b_reset))
    update = expit(affine(p.w_update, joint, p.b_update))
    gated = np.concatenate([x_t, reset * prev.h])
    candidate = np.tanh(affine(p.w_cand, gated, p.b_cand))
    h = update * prev.h + (1.0 - update) * candidate
    return CellState(h=h)


# ---------------------------------------------------------------------------
# Batched layer passes.  Shapes: inputs (B, T, D_in), mask (B, T), hidden
# sequences (B, T, H).  Gate activations are cached raw (pre-mask); masking
# zeroes their gradient contributions at padded steps.
# ---------------------------------------------------------------------------


@dataclass
class _LstmLayerCache:
    inputs: np.ndarray
    mask: np.ndarray
    gates: np.ndarray  # (B, T, 4H): sigmoid(i), sigmoid(f), tanh candidate, sigmoid(o)
    tanh_cell: np.ndarray  # (B, T, H) tanh of the raw cell value
    h_seq: np.ndarray
    c_seq: np.ndarray
    w_joint: np.ndarray  # (4H, D_in + H) stacked [in, forget, cell, out]


@dataclass
class _GruLayerCache:
    inputs: np.ndarray
    mask: np.ndarray
    gates: np.ndarray  # (B, T, 2H): sigmoid(r), sigmoid(u)
    cand: np.ndarray  # (B, T, H) tanh candidate
    h_seq: np.ndarray
    w_gates: np.ndarray  # (2H, D_in + H) stacked [reset, update]


def _lstm_layer_forward(p, inputs, mask):
    batch, steps, d_in = inputs.shape
    hid = p.hidden_dim
    if d_in != p.input_dim:
        raise ShapeError(f"layer expects input dim {p.input_dim}, got {d_in}")
    dtype = p.w_in.dtype
    w_joint = np.concatenate([p.w_in, p.w_forget, p.w_cell, p.w_out], axis=0)
    b_joint = np.concatenate([p.b_in, p.b_forget, p.b_cell, p.b_out])
    gates = np.empty((batch, steps, 4 * hid), dtype=dtype)
    tanh_cell = np.empty((batch, steps, hid), dtype=dtype)
    h_seq = np.empty((batch, steps, hid), dtype=dtype)
    c_seq = np.empty((batch, steps, hid), dtype=dtype)
    h = np.zeros((batch, hid), dtype=dtype)
    c = np.zeros((batch, hid), dtype=dtype)
    for t in range(steps):
        joint = np.concatenate([inputs[:, t], h], axis=1)
        z = joint @ w_joint.T + b_joint
        gi = expit(z[:, :hid])
        gf = expit(z[:, hid : 2 * hid])
        cand = np.tanh(z[:, 2 * hid : 3 * hid])
        go = expit(z[:, 3 * hid :])
        c_raw = gi * cand + gf * c
        tc = np.tanh(c_raw)
        h_raw = go * tc
        m = mask[:, t : t + 1]
        h = np.where(m > 0, h_raw, h)
        c = np.where(m > 0, c_raw, c)
        gates[:, t, :hid] = gi
        gates[:, t, hid : 2 * hid] = gf
        gates[:, t, 2 * hid : 3 * hid] = cand
        gates[:, t, 3 * hid :] = go
        tanh_cell[:, t] = tc
        h_seq[:, t] = h
        c_seq[:, t] = c
    return _LstmLayerCache(inputs, mask, gates, tanh_cell, h_seq, c_seq, w_joint)


def _lstm_layer_backward(cache, d_h_seq, d_h_final):
    inputs, mask = cache.inputs, cache.mask
    batch, steps, d_in = inputs.shape
    hid = cache.h_seq.shape[2]
    dtype = cache.w_joint.dtype
    d_w_joint = np.zeros_like(cache.w_joint)
    d_b_joint = np.zeros(4 * hid, dtype=dtype)
    d_inputs = np.zeros_like(inputs)
    dh = np.zeros((batch, hid), dtype=dtype)
    dc = np.zeros((batch, hid), dtype=dtype)
    if d_h_final is not None:
        dh += d_h_final
    for t in range(steps - 1, -1, -1):
        if d_h_seq is not None:
            dh = dh + d_h_seq[:, t]
        m = mask[:, t : t + 1]
        dh_raw = dh * m
        dc_raw = dc * m
        dh_pass = dh * (1.0 - m)
        dc_pass = dc * (1.0 - m)
        gi = cache.gates[:, t, :hid]
        gf = cache.gates[:, t, hid : 2 * hid]
        cand = cache.gates[:, t, 2 * hid : 3 * hid]
        go = cache.gates[:, t, 3 * hid :]
        tc = cache.tanh_cell[:, t]
        if t > 0:
            h_prev = cache.h_seq[:, t - 1]
            c_prev = cache.c_seq[:, t - 1]
        else:
            h_prev = np.zeros((batch, hid), dtype=dtype)
            c_prev = np.zeros((batch, hid), dtype=dtype)
        d_go = dh_raw * tc
        dc_raw = dc_raw + dh_raw * go * (1.0 - tc * tc)
        d_gi = dc_raw * cand
        d_cand = dc_raw * gi
        d_gf = dc_raw * c_prev
        dz = np.concatenate(
            [
                d_gi * gi * (1.0 - gi),
                d_gf * gf * (1.0 - gf),
                d_cand * (1.0 - cand * cand),
                d_go * go * (1.0 - go),
            ],
            axis=1,
        )
        joint = np.concatenate([inputs[:, t], h_prev], axis=1)
        d_w_joint += dz.T @ joint
        d_b_joint += dz.sum(axis=0)
        d_joint = dz @ cache.w_joint
        d_inputs[:, t] = d_joint[:, :d_in]
        dh = d_joint[:, d_in:] + dh_pass
        dc = dc_raw * gf + dc_pass
    grads = LstmParams(
        w_in=d_w_joint[:hid],
        w_forget=d_w_joint[hid : 2 * hid],
        w_cell=d_w_joint[2 * hid : 3 * hid],
        w_out=d_w_joint[3 * hid :],
        b_in=d_b_joint[:hid],
        b_forget=d_b_joint[hid : 2 * hid],
        b_cell=d_b_joint[2 * hid : 3 * hid],
        b_out=d_b_joint[3 * hid :],
    )
    return grads, d_inputs


def _gru_layer_forward(p, inputs, mask):
    batch, steps, d_in = inputs.shape
    hid = p.hidden_dim
    if d_in != p.input_dim:
        raise ShapeError(f"layer expects input dim {p.input_dim}, got {d_in}")
    dtype = p.w_reset.dtype
    w_gates = np.concatenate([p.w_reset, p.w_update], axis=0)
    b_gates = np.concatenate([p.b_reset, p.b_update])
    gates = np.empty((batch, steps, 2 * hid), dtype=dtype)
    cand_seq = np.empty((batch, steps, hid), dtype=dtype)
    h_seq = np.empty((batch, steps, hid), dtype=dtype)
    h = np.zeros((batch, hid), dtype=dtype)
    for t in range(steps):
        joint = np.concatenate([inputs[:, t], h], axis=1)
        z = joint @ w_gates.T + b_gates
        reset = expit(z[:, :hid])
        update = expit(z[:, hid:])
        gated = np.concatenate([inputs[:, t], reset * h], axis=1)
        cand = np.tanh(gated @ p.w_cand.T + p.b_cand)
        h_raw = update * h + (1.0 - update) * cand
        m = mask[:, t : t + 1]
        h = np.where(m > 0, h_raw, h)
        gates[:, t, :hid] = reset
        gates[:, t, hid:] = update
        cand_seq[:, t] = cand
        h_seq[:, t] = h
    return _GruLayerCache(inputs, mask, gates, cand_seq, h_seq, w_gates)


def _gru_layer_backward(p, cache, d_h_seq, d_h_final):
    inputs, mask = cache.inputs, cache.mask
    batch, steps, d_in = inputs.shape
    hid = cache.h_seq.shape[2]
    dtype = cache.w_gates.dtype
    d_w_gates = np.zeros_like(cache.w_gates)
    d_b_gates = np.zeros(2 * hid, dtype=dtype)
    d_w_cand = np.zeros_like(p.w_cand)
    d_b_cand = np.zeros(hid, dtype=dtype)
    d_inputs = np.zeros_like(inputs)
    dh = np.zeros((batch, hid), dtype=dtype)
    if d_h_final is not None:
        dh = dh + d_h_final
    for t in range(steps - 1, -1, -1):
        if d_h_seq is not None:
            dh = dh + d_h_seq[:, t]
        m = mask[:, t : t + 1]
        dh_raw = dh * m
        dh_pass = dh * (1.0 - m)
        reset = cache.gates[:, t, :hid]
        update = cache.gates[:, t, hid:]
        cand = cache.cand[:, t]
        if t > 0:
            h_prev = cache.h_seq[:, t - 1]
        else:
            h_prev = np.zeros((batch, hid), dtype=dtype)
        d_update = dh_raw * (h_prev - cand)
        d_cand = dh_raw * (1.0 - update)
        dh_prev = dh_raw * update
        da = d_cand * (1.0 - cand * cand)
        gated = np.concatenate([inputs[:, t], reset * h_prev], axis=1)
        d_w_cand += da.T @ gated
        d_b_cand += da.sum(axis=0)
        d_gated = da @ p.w_cand
        d_inputs[:, t] = d_gated[:, :d_in]
        d_reset_h = d_gated[:, d_in:]
        d_reset = d_reset_h * h_prev
        dh_prev = dh_prev + d_reset_h * reset
        dz = np.concatenate(
            [d_reset * reset * (1.0 - reset), d_update * update * (1.0 - update)],
            axis=1,
        )
        joint = np.concatenate([inputs[:, t], h_prev], axis=1)
        d_w_gates += dz.T @ joint
        d_b_gates += dz.sum(axis=0)
        d_joint = dz @ cache.w_gates
        d_inputs[:, t] += d_joint[:, :d_in]
        dh = dh_prev + d_joint[:, d_in:] + dh_pass
    grads = GruParams(
        w_reset=d_w_gates[:hid],
        w_update=d_w_gates[hid:],
        w_cand=d_w_cand,
        b_reset=d_b_gates[:hid],
        b_update=d_b_gates[hid:],
        b_cand=d_b_cand,
    )
    return grads, d_inputs


@dataclass
class StackCache:
    layer_caches: list
    dropout_masks: list  # one per gap between stacked layers; None in eval mode
    h_final: np.ndarray  # (B, H)


def stacked_forward_batch(params, padded, lengths, mode="eval", rng=None):
    """Run the stack over a padded batch.

    ``padded`` is (B, T_max, D), ``lengths`` the true frame counts.  Returns
    the final hidden state of the top layer, (B, H), plus the cache needed
    for :func:`stacked_backward_batch`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    lengths = np.asarray(lengths)
    batch, steps, _ = padded.shape
    if steps == 0 or np.any(lengths < 1):
        raise ShapeError("every sequence must have at least one frame")
    dtype = params.layers[0].w_in.dtype if params.kind == "lstm" else params.layers[0].w_reset.dtype
    padded = np.ascontiguousarray(padded, dtype=dtype)
    mask = (np.arange(steps)[None, :] < lengths[:, None]).astype(dtype)
    is_lstm = params.kind == "lstm"
    drop_p = params.inter_layer_dropout
    if mode == "train" and drop_p > 0.0 and len(params.layers) > 1 and rng is None:
        raise ValueError("train mode with dropout requires an rng")

    caches = []
    drop_masks = []
    feed = padded
    for depth, layer in enumerate(params.layers):
        if is_lstm:
            cache = _lstm_layer_forward(layer, feed, mask)
        else:
            cache = _gru_layer_forward(layer, feed, mask)
        caches.append(cache)
        if depth < len(params.layers) - 1:
            h_seq = cache.h_seq
            if mode == "train" and drop_p > 0.0:
                dm = dropout_mask(rng, h_seq.shape, drop_p, dtype=dtype)
                drop_masks.append(dm)
                feed = h_seq * dm
            else:
                drop_masks.append(None)
                feed = h_seq
    h_final = caches[-1].h_seq[:, -1].copy()
    return h_final, StackCache(caches, drop_masks, h_final)


def stacked_backward_batch(params, cache, d_h_final):
    """Exact BPTT through the stack; returns per-layer grads and d_inputs."""
    is_lstm = params.kind == "lstm"
    grads = [None] * len(params.layers)
    d_upper = None
    for depth in range(len(params.layers) - 1, -1, -1):
        layer_cache = cache.layer_caches[depth]
        seed = d_h_final if depth == len(params.layers) - 1 else None
        if is_lstm:
            layer_grads, d_inputs = _lstm_layer_backward(layer_cache, d_upper, seed)
        else:
            layer_grads, d_inputs = _gru_layer_backward(
                params.layers[depth], layer_cache, d_upper, seed
            )
        grads[depth] = layer_grads
        if depth > 0:
            dm = cache.dropout_masks[depth - 1]
            d_upper = d_inputs if dm is None else d_inputs * dm
    return grads, d_inputs


def stacked_forward(params, frames, mode="eval", rng=None):
    """Single-sequence stack pass: frames (T, D) to the final hidden vector."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ShapeError("stacked_forward expects a nonempty (T, D) sequence")
    h_final, cache = stacked_forward_batch(
        params, frames[None, :, :], np.array([frames.shape[0]]), mode=mode, rng=rng
    )
    return h_final[0], cache
