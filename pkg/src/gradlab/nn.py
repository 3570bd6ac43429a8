"""Affine+ReLU classifiers with hand-written reverse-mode gradients.

A network with widths ``[d, h1, ..., hk, C]`` is the layer stack
``affine, relu, affine, relu, ..., affine``. The last hidden ReLU output is
the feature layer used by FIA and by neuron pruning. An optional prune mask
multiplies the feature activations, either one mask for all examples
(``(width,)``) or one per example (``(B, width)``).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"GLNW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Network:
    weights: tuple  # weights[i] has shape (in_i, out_i)
    biases: tuple
    prune_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ValueError("need at least one hidden layer and matching biases")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} does not match "
                                 f"previous output {self.weights[i - 1].shape[1]}")
        if self.prune_mask is not None:
            m = self.prune_mask
            if m.shape[-1] != self.feature_width or m.ndim > 2:
                raise ValueError(f"prune mask shape {m.shape} does not fit feature width "
                                 f"{self.feature_width}")
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("prune mask entries must be 0 or 1")

    @classmethod
    def from_arrays(cls, weights, biases, **meta) -> "Network":
        return cls(tuple(np.asarray(w, dtype=np.float64) for w in weights),
                   tuple(np.asarray(b, dtype=np.float64) for b in biases), meta=dict(meta))

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def feature_width(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_kinds(self) -> list[str]:
        kinds = []
        for i in range(len(self.weights)):
            kinds.append("affine")
            if i < len(self.weights) - 1:
                kinds.append("relu")
        return kinds

    @property
    def feature_layer_index(self) -> int:
        """Position of the last hidden ReLU in ``layer_kinds``."""
        return len(self.layer_kinds) - 2

    def with_mask(self, mask) -> "Network":
        """View sharing parameters with ``self`` but carrying ``mask``."""
        mask = None if mask is None else np.asarray(mask, dtype=np.float64)
        return dataclasses.replace(self, prune_mask=mask)

    def zero_masked_weights(self) -> "Network":
        """Copy with outgoing weights of masked feature neurons set to zero."""
        if self.prune_mask is None:
            return self
        if self.prune_mask.ndim != 1:
            raise ValueError("weight surgery needs a single shared mask")
        weights = list(self.weights)
        weights[-1] = weights[-1] * self.prune_mask[:, None]
        return Network(tuple(weights), self.biases, None, dict(self.meta))


@dataclass
class ForwardTape:
    inputs: np.ndarray
    pre: list  # pre-activations of every affine layer
    post: list  # hidden activations after ReLU (feature layer unmasked)
    mask: np.ndarray | None
    logits: np.ndarray

    @property
    def features(self) -> np.ndarray:
        """Feature activations as seen by the classifier head (mask applied)."""
        f = self.post[-1]
        return f if self.mask is None else f * self.mask


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    # (d,) is one example; (B, d) and (B, h, w) are batches
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    flat = x.reshape(1 if single else x.shape[0], -1)
    if flat.shape[1] != net.input_width:
        raise ValueError(f"input width {flat.shape[1]} does not match network input "
                         f"{net.input_width}")
    return flat, single


def _mask_for(net: Network, batch: int):
    m = net.prune_mask
    if m is None or m.ndim == 1:
        return m
    if m.shape[0] != batch:
        if batch % m.shape[0]:
            raise ValueError(f"per-example mask rows {m.shape[0]} do not divide batch {batch}")
        m = np.repeat(m, batch // m.shape[0], axis=0)
    return m


def forward(net: Network, x) -> tuple[np.ndarray, ForwardTape]:
    """Logits for ``x`` (a single example or a batch) plus the replay tape."""
    a, single = _as_batch(net, x)
    inputs = a
    mask = _mask_for(net, a.shape[0])
    pre, post = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        pre.append(z)
        if i == last:
            break
        a = np.maximum(z, 0.0)
        post.append(a)
        if i == last - 1 and mask is not None:
            a = a * mask
    logits = pre[-1]
    tape = ForwardTape(inputs, pre, post, mask, logits)
    return (logits[0] if single else logits), tape


def replay(net: Network, tape: ForwardTape) -> np.ndarray:
    return forward(net.with_mask(tape.mask), tape.inputs)[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def loss_ce(logits, y):
    """Softmax cross-entropy, per example for batched logits."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    if logits.ndim == 1:
        return float(-log_softmax(logits)[int(y)])
    return -np.take_along_axis(log_softmax(logits), y.reshape(-1, 1), axis=1)[:, 0]


def fia_loss_from_tape(tape: ForwardTape, delta: np.ndarray) -> np.ndarray:
    return np.sum(np.broadcast_to(delta, tape.features.shape) * tape.features, axis=-1)


def backward(net: Network, tape: ForwardTape, d_logits=None, d_features=None):
    """Push upstream gradients back to the input.

    ``d_logits`` is dL/dlogits; ``d_features`` is dL/d(masked feature
    activation). Returns ``(d_input, d_feature_activation)`` where the second
    is the gradient with respect to the unmasked ReLU output of the feature
    layer.
    """
    batch = tape.inputs.shape[0]
    last = len(net.weights) - 1
    if d_logits is None:
        d_logits = np.zeros((batch, net.class_count))
    d_h = d_logits @ net.weights[last].T  # wrt masked features
    if d_features is not None:
        d_h = d_h + d_features
    d_feat = d_h if tape.mask is None else d_h * tape.mask
    d_a = d_feat
    for i in range(last - 1, -1, -1):
        d_z = d_a * (tape.pre[i] > 0)
        d_a = d_z @ net.weights[i].T
    return d_a, d_feat


def _ce_upstream(tape: ForwardTape, y) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    p = softmax(tape.logits)
    p[np.arange(len(p)), y] -= 1.0
    return p


def grad_input(net: Network, x, y, loss_kind: str = "ce", delta=None) -> np.ndarray:
    """Exact d(loss)/dx, same shape as ``x``.

    ``loss_kind`` is ``"ce"`` (cross-entropy with labels ``y``) or ``"fia"``
    (sum of ``delta * features``; ``y`` unused).
    """
    x_arr = np.asarray(x, dtype=np.float64)
    _, tape = forward(net, x_arr)
    if loss_kind == "ce":
        dx, _ = backward(net, tape, d_logits=_ce_upstream(tape, y))
    elif loss_kind == "fia":
        if delta is None:
            raise ValueError("fia loss needs delta")
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape[-1] != net.feature_width:
            raise ValueError(f"delta width {delta.shape[-1]} != feature width {net.feature_width}")
        d_feat = np.broadcast_to(delta, tape.features.shape)
        dx, _ = backward(net, tape, d_features=d_feat)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return dx.reshape(x_arr.shape)


def loss_value(net: Network, x, y, loss_kind: str = "ce", delta=None):
    logits, tape = forward(net, x)
    if loss_kind == "ce":
        return loss_ce(logits, y)
    out = fia_loss_from_tape(tape, np.asarray(delta, dtype=np.float64))
    return float(out[0]) if np.ndim(logits) == 1 else out


def grad_feature(net: Network, x, y) -> np.ndarray:
    """d(CE loss)/d(feature activation), one value per feature neuron.

    The derivative is taken through the feature ReLU, so an inactive unit
    (whose removal cannot change the loss) reports 0.
    """
    logits, tape = forward(net, x)
    _, d_feat = backward(net, tape, d_logits=_ce_upstream(tape, y))
    d_feat = d_feat * (tape.pre[-2] > 0)
    return d_feat[0] if np.ndim(logits) == 1 else d_feat


def grad_feature_logit(net: Network, x, y) -> np.ndarray:
    """d(true-class logit)/d(feature activation)."""
    logits, tape = forward(net, x)
    y = np.asarray(y).reshape(-1)
    up = np.zeros_like(tape.logits)
    up[np.arange(len(up)), y] = 1.0
    _, d_feat = backward(net, tape, d_logits=up)
    return d_feat[0] if np.ndim(logits) == 1 else d_feat


def predict(net: Network, x) -> np.ndarray:
    x = np.asarray(x)
    logits, _ = forward(net, x.reshape(len(x), -1))
    return logits.argmax(axis=1)


def accuracy(net: Network, images, labels) -> float:
    return float(np.mean(predict(net, images) == np.asarray(labels)))


def he_init(widths, rng: np.random.Generator) -> Network:
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return Network.from_arrays(weights, biases)


# -- checkpoint container --------------------------------------------------
#
# magic (4 bytes) | version u32 LE | header length u32 LE | UTF-8 JSON header
# | float64 LE blocks in header order.

def write_container(path, magic: bytes, header: dict, arrays) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    return header, raw[12 + hlen:]


def take_blocks(payload: bytes, shapes) -> list[np.ndarray]:
    out, offset = [], 0
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(payload):
            raise ValueError("truncated parameter payload")
        out.append(np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
                   .astype(np.float64).reshape(shape))
        offset += 8 * count
    if offset != len(payload):
        raise ValueError(f"{len(payload) - offset} trailing payload bytes")
    return out


def save_network(net: Network, path) -> None:
    layers = []
    for kind in net.layer_kinds:
        layers.append({"kind": kind})
    shapes = []
    for w, b in zip(net.weights, net.biases):
        shapes += [list(w.shape), list(b.shape)]
    header = {
        "layers": layers,
        "widths": net.widths,
        "class_count": net.class_count,
        "feature_layer_index": net.feature_layer_index,
        "blocks": shapes,
        "meta": net.meta,
    }
    arrays = [a for pair in zip(net.weights, net.biases) for a in pair]
    write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_network(path) -> Network:
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    blocks = take_blocks(payload, [tuple(s) for s in header["blocks"]])
    net = Network(tuple(blocks[0::2]), tuple(blocks[1::2]), meta=header.get("meta", {}))
    if net.widths != header["widths"] or net.feature_layer_index != header["feature_layer_index"]:
        raise ValueError(f"{path}: header does not match parameter blocks")
    return net
