"""The embedding network g(X): stacked RNN, fully connected head, I/O.

A segment's frames run through the recurrent stack; the final hidden state
feeds the first fully connected layer directly (no nonlinearity or dropout
on that edge).  ReLU and dropout sit between fully connected layers, and the
final layer is either a log-softmax (word classifier) or a plain linear
embedding layer.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import cells
from .errors import CheckpointError, ConfigError, ShapeError
from .numeric import Precision, dropout_mask, log_softmax

__all__ = [
    "NetworkConfig",
    "NetworkParams",
    "Checkpoint",
    "init_params",
    "embed",
    "embed_batch",
    "embed_batch_backward",
    "log_softmax_backward",
    "eval_embeddings",
    "param_items",
    "flatten_params",
    "unflatten_params",
    "zeros_like_params",
    "copy_params",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"AWCK"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    cell_kind: str  # "lstm" | "gru"
    stacked_layers: int
    fc_layers: int
    input_dim: int
    output_dim: int
    hidden_dim: int = 512
    fc_dim: int = 1024
    head: str = "log_softmax"  # "log_softmax" | "linear"
    dropout_recurrent: float = 0.3
    dropout_fc: float = 0.5
    # Classifier evaluation normally embeds with the log-softmax outputs;
    # set this to rank with the pre-softmax activations instead.
    eval_embedding_from_logits: bool = False

    def validate(self):
        if self.cell_kind not in ("lstm", "gru"):
            raise ConfigError(f"cell_kind must be lstm or gru, got {self.cell_kind!r}")
        if self.head not in ("log_softmax", "linear"):
            raise ConfigError(f"head must be log_softmax or linear, got {self.head!r}")
        for name in ("stacked_layers", "fc_layers", "input_dim", "output_dim", "hidden_dim", "fc_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("dropout_recurrent", "dropout_fc"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")
        return self

    def fc_shapes(self):
        """(in_dim, out_dim) of each fully connected layer, in order."""
        if self.fc_layers == 1:
            return [(self.hidden_dim, self.output_dim)]
        shapes = [(self.hidden_dim, self.fc_dim)]
        shapes += [(self.fc_dim, self.fc_dim)] * (self.fc_layers - 2)
        shapes.append((self.fc_dim, self.output_dim))
        return shapes


@dataclass
class NetworkParams:
    rnn: cells.StackedRnnParams
    fc: list = field(default_factory=list)  # list of (weights, bias) pairs


def param_items(params):
    """All (name, array) pairs in canonical traversal order."""
    items = []
    for depth, layer in enumerate(params.rnn.layers):
        for name in cells.layer_param_fields(layer):
            items.append((f"rnn{depth}.{name}", getattr(layer, name)))
    for k, (w, b) in enumerate(params.fc):
        items.append((f"fc{k}.w", w))
        items.append((f"fc{k}.b", b))
    return items


def _map_params(params, fn):
    layers = []
    for layer in params.rnn.layers:
        kwargs = {name: fn(getattr(layer, name)) for name in cells.layer_param_fields(layer)}
        layers.append(type(layer)(**kwargs))
    rnn = cells.StackedRnnParams(layers, params.rnn.inter_layer_dropout)
    fc = [(fn(w), fn(b)) for w, b in params.fc]
    return NetworkParams(rnn=rnn, fc=fc)


def zeros_like_params(params):
    return _map_params(params, np.zeros_like)


def copy_params(params):
    return _map_params(params, np.copy)


def flatten_params(params):
    return np.concatenate([arr.ravel() for _, arr in param_items(params)])


def unflatten_params(vector, template):
    """Pack a flat vector back into the structure of ``template``."""
    vector = np.asarray(vector)
    out = copy_params(template)
    offset = 0
    for _, arr in param_items(out):
        n = arr.size
        arr[...] = vector[offset : offset + n].reshape(arr.shape).astype(arr.dtype)
        offset += n
    if offset != vector.size:
        raise ShapeError(f"flat vector has {vector.size} entries, template needs {offset}")
    return out


def parameter_count(config):
    """Closed-form parameter census for a configuration."""
    h = config.hidden_dim
    gates = 4 if config.cell_kind == "lstm" else 3
    total = 0
    d_in = config.input_dim
    for _ in range(config.stacked_layers):
        total += gates * (h * (d_in + h) + h)
        d_in = h
    for fan_in, fan_out in config.fc_shapes():
        total += fan_out * fan_in + fan_out
    return total


def init_params(config, rng, precision=Precision.single):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    config.validate()
    dtype = precision.dtype
    h = config.hidden_dim

    def matrix(rows, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (rows, fan_in)).astype(dtype)

    layers = []
    d_in = config.input_dim
    for _ in range(config.stacked_layers):
        cols = d_in + h
        if config.cell_kind == "lstm":
            layers.append(
                cells.LstmParams(
                    w_in=matrix(h, cols),
                    w_forget=matrix(h, cols),
                    w_cell=matrix(h, cols),
                    w_out=matrix(h, cols),
                    b_in=np.zeros(h, dtype=dtype),
                    b_forget=np.zeros(h, dtype=dtype),
                    b_cell=np.zeros(h, dtype=dtype),
                    b_out=np.zeros(h, dtype=dtype),
                )
            )
        else:
            layers.append(
                cells.GruParams(
                    w_reset=matrix(h, cols),
                    w_update=matrix(h, cols),
                    w_cand=matrix(h, cols),
                    b_reset=np.zeros(h, dtype=dtype),
                    b_update=np.zeros(h, dtype=dtype),
                    b_cand=np.zeros(h, dtype=dtype),
                )
            )
        d_in = h
    fc = []
    for fan_in, fan_out in config.fc_shapes():
        fc.append((matrix(fan_out, fan_in), np.zeros(fan_out, dtype=dtype)))
    rnn = cells.StackedRnnParams(layers, config.dropout_recurrent)
    return NetworkParams(rnn=rnn, fc=fc)


def pad_frames(frame_list, dtype):
    """Stack variable-length (T_i, D) arrays into (B, T_max, D) plus lengths."""
    lengths = np.array([f.shape[0] for f in frame_list])
    t_max = int(lengths.max())
    d = frame_list[0].shape[1]
    padded = np.zeros((len(frame_list), t_max, d), dtype=dtype)
    for i, f in enumerate(frame_list):
        if f.ndim != 2 or f.shape[1] != d:
            raise ShapeError(f"segment {i} has frame dim {f.shape}, expected (*, {d})")
        padded[i, : f.shape[0]] = f
    return padded, lengths


@dataclass
class EmbedCache:
    rnn_cache: cells.StackCache
    fc_inputs: list  # actual input fed to each fc layer
    fc_preacts: list  # affine outputs of each fc layer
    relu_drop_masks: list  # dropout masks between fc layers (None in eval)
    output: np.ndarray


def embed_batch(params, config, frame_list, mode="eval", rng=None):
    """Embed a batch of segments; returns (B, output_dim) and a cache."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = params.fc[0][0].dtype
    for i, f in enumerate(frame_list):
        if f.ndim != 2 or f.shape[1] != config.input_dim:
            raise ShapeError(
                f"segment {i}: frames shaped {f.shape}, expected (*, {config.input_dim})"
            )
    padded, lengths = pad_frames([np.asarray(f) for f in frame_list], dtype)
    drop_rng = rng if mode == "train" else None
    h_final, rnn_cache = stacked = cells.stacked_forward_batch(
        params.rnn, padded, lengths, mode=mode, rng=drop_rng
    )
    x = h_final
    fc_inputs = []
    fc_preacts = []
    masks = []
    for k, (w, b) in enumerate(params.fc):
        if k > 0:
            x = np.maximum(fc_preacts[-1], 0)
            if mode == "train" and config.dropout_fc > 0.0:
                dm = dropout_mask(rng, x.shape, config.dropout_fc, dtype=dtype)
                masks.append(dm)
                x = x * dm
            else:
                masks.append(None)
        fc_inputs.append(x)
        x = x @ w.T + b
        fc_preacts.append(x)
    output = log_softmax(x) if config.head == "log_softmax" else x
    return output, EmbedCache(rnn_cache, fc_inputs, fc_preacts, masks, output)


def embed_batch_backward(params, config, cache, d_preact):
    """Backward pass seeded at the final affine output (before the head).

    For a log-softmax head and cross-entropy loss, seed with
    ``softmax - one_hot``; for other losses on the head output, convert with
    :func:`log_softmax_backward` first.  Returns a NetworkParams of grads.
    """
    da = np.asarray(d_preact, dtype=cache.fc_preacts[-1].dtype)
    fc_grads = [None] * len(params.fc)
    for k in range(len(params.fc) - 1, -1, -1):
        w, _ = params.fc[k]
        x = cache.fc_inputs[k]
        fc_grads[k] = (da.T @ x, da.sum(axis=0))
        dx = da @ w
        if k > 0:
            dm = cache.relu_drop_masks[k - 1]
            if dm is not None:
                dx = dx * dm
            da = dx * (cache.fc_preacts[k - 1] > 0)
        else:
            d_h_final = dx
    rnn_grads, _ = cells.stacked_backward_batch(params.rnn, cache.rnn_cache, d_h_final)
    rnn = cells.StackedRnnParams(rnn_grads, params.rnn.inter_layer_dropout)
    return NetworkParams(rnn=rnn, fc=fc_grads)


def log_softmax_backward(log_probs, d_output):
    """Jacobian-vector product of log-softmax: grads at output -> at logits."""
    probs = np.exp(log_probs)
    return d_output - probs * np.sum(d_output, axis=-1, keepdims=True)


def embed(params, config, frames, mode="eval", rng=None):
    """Embed a single segment; returns the output vector."""
    out, _ = embed_batch(params, config, [np.asarray(frames)], mode=mode, rng=rng)
    return out[0]


def eval_embeddings(params, config, frame_list, batch_size=64):
    """Deterministic eval-mode embeddings, order-aligned with the input.

    Honors ``config.eval_embedding_from_logits`` for log-softmax heads.
    """
    rows = []
    for start in range(0, len(frame_list), batch_size):
        chunk = frame_list[start : start + batch_size]
        out, cache = embed_batch(params, config, chunk, mode="eval")
        if config.head == "log_softmax" and config.eval_embedding_from_logits:
            out = cache.fc_preacts[-1]
        rows.append(out)
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# Checkpoint serialization: magic, version, two length-prefixed JSON blocks
# (metadata, vocabulary), raw little-endian array payload, trailing 64-bit
# checksum over everything after the version field.
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: NetworkParams
    epoch: int
    dev_ap: float
    label_vocabulary: list | None = None
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None


def _checkpoint_arrays(ckpt):
    items = list(param_items(ckpt.params))
    if ckpt.feature_mean is not None:
        items.append(("feature.mean", ckpt.feature_mean))
        items.append(("feature.std", ckpt.feature_std))
    return items


def _le_dtype(dtype):
    d = np.dtype(dtype)
    if d == np.float32:
        return "<f4"
    if d == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported parameter dtype {d}")


def checkpoint_bytes(ckpt):
    arrays = _checkpoint_arrays(ckpt)
    meta = {
        "config": ckpt.config.__dict__,
        "epoch": int(ckpt.epoch),
        "dev_ap": float(ckpt.dev_ap),
        "dropout_recurrent": float(ckpt.params.rnn.inter_layer_dropout),
        "arrays": [
            [name, list(arr.shape), _le_dtype(arr.dtype)] for name, arr in arrays
        ],
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    vocab_blob = json.dumps(ckpt.label_vocabulary, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += struct.pack("<I", len(meta_blob))
    payload += meta_blob
    payload += struct.pack("<I", len(vocab_blob))
    payload += vocab_blob
    for name, arr in arrays:
        payload += np.ascontiguousarray(arr).astype(_le_dtype(arr.dtype)).tobytes()
    checksum = hashlib.blake2b(bytes(payload), digest_size=8).digest()
    return CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + bytes(payload) + checksum


def save_checkpoint(ckpt, path):
    from .util import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def checkpoint_from_bytes(blob):
    if len(blob) < 14:
        raise CheckpointError("file too short to be a checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic bytes {blob[:4]!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload, trailer = blob[6:-8], blob[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != trailer:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    cursor = 0

    def take(n, what):
        nonlocal cursor
        if cursor + n > len(payload):
            raise CheckpointError(f"truncated while reading {what}")
        out = payload[cursor : cursor + n]
        cursor += n
        return out

    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    (vocab_len,) = struct.unpack("<I", take(4, "vocabulary length"))
    vocab = json.loads(take(vocab_len, "vocabulary").decode("utf-8"))
    try:
        config = NetworkConfig(**meta["config"])
    except TypeError as exc:
        raise CheckpointError(f"unrecognized configuration block: {exc}") from exc
    arrays = {}
    for name, shape, dtype in meta["arrays"]:
        n_bytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        raw = take(n_bytes, f"array {name}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if cursor != len(payload):
        raise CheckpointError(f"{len(payload) - cursor} trailing payload bytes")

    template = init_params(
        config,
        _ZeroRng(),
        precision=Precision.single
        if meta["arrays"][0][2] == "<f4"
        else Precision.double,
    )
    template.rnn.inter_layer_dropout = meta.get(
        "dropout_recurrent", config.dropout_recurrent
    )
    for name, arr in param_items(template):
        if name not in arrays:
            raise CheckpointError(f"missing array {name}")
        if arrays[name].shape != arr.shape:
            raise CheckpointError(
                f"array {name} shaped {arrays[name].shape}, expected {arr.shape}"
            )
        arr[...] = arrays[name]
    return Checkpoint(
        config=config,
        params=template,
        epoch=int(meta["epoch"]),
        dev_ap=float(meta["dev_ap"]),
        label_vocabulary=vocab,
        feature_mean=arrays.get("feature.mean"),
        feature_std=arrays.get("feature.std"),
    )


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


class _ZeroRng:
    """Placeholder stream for building parameter templates to overwrite."""

    def uniform(self, low, high, size=None):
        return np.zeros(size)


def siamese_config_from(classifier_config, embed_dim):
    """Derive the Siamese network configuration from a classifier's."""
    return replace(
        classifier_config,
        output_dim=embed_dim,
        head="linear",
        eval_embedding_from_logits=False,
    )
