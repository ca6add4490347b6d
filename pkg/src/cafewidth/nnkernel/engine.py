"""Forward, reverse-mode backward and masked SGD over a weight-sharing supernet.

Sub-networks are addressed by a *channel assignment*: a mapping from width
group to the 0-based supernet channels it uses. Each layer gathers the
rows of its output group and the columns of its input group from the full
weight tensor, so a sub-network never owns weights of its own.

Activation flow
    * activations are ``(N, C, H, W)``; dense layers see ``(N, C, 1, 1)``;
    * a conv layer whose declared resolution is smaller than its input
      average-pools the input by the integer factor first;
    * a dense layer global-average-pools its input;
    * ReLU after every layer except the last;
    * a non-depthwise layer writing a group that already holds an
      activation of the same shape adds to it (skip connection).
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from ..archgraph import INPUT_GROUP, LayerKind, NetworkGraph
from ..errors import InvalidWidthError, TrainingError
from . import kernels

ChannelAssignment = Mapping[str, np.ndarray]


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None, None]
        if x.ndim != 4:
            raise ValueError(f"inputs must be 2-D or 4-D, got shape {x.shape}")
        self.inputs = np.ascontiguousarray(x)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.inputs):
            raise ValueError("inputs and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])

    def batches(self, size: int, rng: np.random.Generator | None = None) -> Iterator["Batch"]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for s in range(0, len(self), size):
            yield self.take(order[s:s + size])


class SupernetState:
    """Full-size weights, biases and momentum buffers for every layer."""

    def __init__(self, graph: NetworkGraph, weights, biases, mom_w=None, mom_b=None, step: int = 0):
        self.graph = graph
        self.weights = weights
        self.biases = biases
        self.mom_w = mom_w if mom_w is not None else {k: np.zeros_like(v) for k, v in weights.items()}
        self.mom_b = mom_b if mom_b is not None else {k: np.zeros_like(v) for k, v in biases.items()}
        self.step = step

    @classmethod
    def init(cls, graph: NetworkGraph, seed: int = 0) -> "SupernetState":
        rng = np.random.default_rng(seed)
        weights, biases = {}, {}
        n = graph.max_width
        for layer in graph.layers:
            shape = weight_shape(layer, n(layer.input_group))
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            weights[layer.id] = rng.uniform(-bound, bound, size=shape)
            biases[layer.id] = np.zeros(layer.max_width)
        return cls(graph, weights, biases)

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for lid in sorted(self.weights):
            yield f"L{lid}.weight", self.weights[lid]
            yield f"L{lid}.bias", self.biases[lid]
            yield f"L{lid}.weight.momentum", self.mom_w[lid]
            yield f"L{lid}.bias.momentum", self.mom_b[lid]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.step).encode())
        return h.hexdigest()

    def copy(self) -> "SupernetState":
        c = lambda d: {k: v.copy() for k, v in d.items()}
        return SupernetState(self.graph, c(self.weights), c(self.biases), c(self.mom_w), c(self.mom_b), self.step)


def weight_shape(layer, n_in: int) -> tuple[int, ...]:
    if layer.kind is LayerKind.DENSE:
        return (layer.max_width, n_in)
    if layer.kind is LayerKind.DEPTHWISE:
        return (layer.max_width, layer.kernel, layer.kernel)
    return (layer.max_width, n_in, layer.kernel, layer.kernel)


def full_assignment(graph: NetworkGraph) -> dict[str, np.ndarray]:
    return {g: np.arange(graph.max_width(g)) for g in graph.searchable_groups}


def _resolve(graph: NetworkGraph, assignment: ChannelAssignment | None) -> dict[str, np.ndarray]:
    chans = {INPUT_GROUP: np.arange(graph.input_channels), graph.output_group: np.arange(graph.num_classes)}
    assignment = assignment if assignment is not None else full_assignment(graph)
    for g in graph.searchable_groups:
        if g not in assignment:
            raise InvalidWidthError(f"assignment is missing group {g!r}")
        idx = np.asarray(assignment[g], dtype=np.intp)
        n = graph.max_width(g)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
            raise InvalidWidthError(f"group {g!r}: channel indices outside [0, {n})")
        chans[g] = idx
    return chans


class MacCounter:
    """Accumulates multiply-accumulates actually issued by the kernels."""

    def __init__(self):
        self.total = 0
        self.samples = 0

    def add(self, n: int) -> None:
        self.total += int(n)

    @property
    def per_sample(self) -> int:
        return self.total // max(self.samples, 1)


def _pool(a: np.ndarray, fh: int, fw: int) -> np.ndarray:
    # summing strided views is several times faster than a reshaped mean
    out = None
    for i in range(fh):
        for j in range(fw):
            v = a[:, :, i::fh, j::fw]
            out = v.copy() if out is None else out + v
    return out / (fh * fw)


def _unpool(g: np.ndarray, fh: int, fw: int) -> np.ndarray:
    return np.repeat(np.repeat(g, fh, axis=2), fw, axis=3) / (fh * fw)


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    probs = e / s
    probs[np.arange(n), labels] -= 1.0
    return float(loss), probs / n


def _forward(state, chans, x, macs=None, record=False):
    graph = state.graph
    N = x.shape[0]
    acts = {INPUT_GROUP: (0, x)}
    next_vid = 1
    tape = []
    last = graph.layers[-1]
    for layer in graph.layers:
        O, I = chans[layer.width_group], chans[layer.input_group]
        vin, a = acts[layer.input_group]
        if a.shape[1] != len(I):
            raise InvalidWidthError(f"layer {layer.id}: input has {a.shape[1]} channels, expected {len(I)}")
        W, b = state.weights[layer.id], state.biases[layer.id]
        rec = {"layer": layer, "vin": vin, "in_shape": a.shape}
        if layer.kind is LayerKind.DENSE:
            xin = a.mean(axis=(2, 3))
            w = W[np.ix_(O, I)]
            z = xin @ w.T + b[O]
            if macs is not None:
                macs.add(N * w.shape[0] * w.shape[1])
            z = z[:, :, None, None]
            rec.update(xin=xin, w=w)
        else:
            H, Wd = a.shape[2], a.shape[3]
            if H % layer.out_h or Wd % layer.out_w:
                raise InvalidWidthError(
                    f"layer {layer.id}: input resolution {H}x{Wd} not divisible into {layer.out_h}x{layer.out_w}"
                )
            fh, fw = H // layer.out_h, Wd // layer.out_w
            xin = _pool(a, fh, fw) if fh > 1 or fw > 1 else a
            xin = np.ascontiguousarray(xin)
            rec.update(fh=fh, fw=fw)
            K = layer.kernel
            n_, _, h_, w_ = xin.shape
            if layer.kind is LayerKind.DEPTHWISE:
                if len(O) != len(I) or not np.array_equal(O, I):
                    raise InvalidWidthError(f"layer {layer.id}: depthwise input/output channels differ")
                w = np.ascontiguousarray(W[O])
                z = kernels.dw_forward(xin, w) + b[O][None, :, None, None]
                if macs is not None:
                    macs.add(n_ * h_ * w_ * len(O) * K * K)
                rec.update(xin=xin, w=w)
            else:
                w = W[np.ix_(O, I)]
                wmat = w.reshape(len(O), -1)
                cols = kernels.im2col(xin, K)
                z = (cols @ wmat.T + b[O]).reshape(n_, h_, w_, len(O)).transpose(0, 3, 1, 2)
                if macs is not None:
                    macs.add(cols.shape[0] * cols.shape[1] * wmat.shape[0])
                rec.update(cols=cols, wmat=wmat, xshape=xin.shape)
        if layer is last:
            out = z
        else:
            out = np.maximum(z, 0.0)
            if record:
                rec["mask"] = z > 0
        prev = acts.get(layer.width_group)
        if (
            layer is not last and layer.kind is not LayerKind.DEPTHWISE
            and prev is not None and prev[1].shape == out.shape
        ):
            out = prev[1] + out
            rec["merged"] = prev[0]
        acts[layer.width_group] = (next_vid, out)
        rec["vout"] = next_vid
        next_vid += 1
        if record:
            tape.append(rec)
    out = acts[graph.output_group][1]
    logits = out.mean(axis=(2, 3)) if out.shape[2:] != (1, 1) else out[:, :, 0, 0]
    if macs is not None:
        macs.samples += N
    return logits, tape


def _backward(state, chans, tape, dlogits):
    grads: dict[int, np.ndarray] = {}
    # a conv classifier is spatially averaged; its branch below broadcasts back
    grads[tape[-1]["vout"]] = dlogits[:, :, None, None]
    param_grads = {}
    for rec in reversed(tape):
        layer = rec["layer"]
        g = grads.pop(rec["vout"], None)
        if g is None:
            continue
        if g.shape[2:] == (1, 1) and "cols" in rec:
            n_, _, h_, w_ = rec["xshape"]
            g = np.broadcast_to(g, (g.shape[0], g.shape[1], h_, w_)) / (h_ * w_)
        if "merged" in rec:
            _acc(grads, rec["merged"], g)
        dz = g * rec["mask"] if "mask" in rec else g
        if layer.kind is LayerKind.DENSE:
            dz2 = dz[:, :, 0, 0]
            dw = dz2.T @ rec["xin"]
            db = dz2.sum(axis=0)
            dxin = dz2 @ rec["w"]
            N, C, H, W = rec["in_shape"]
            da = np.broadcast_to((dxin / (H * W))[:, :, None, None], (N, C, H, W))
        else:
            if layer.kind is LayerKind.DEPTHWISE:
                dxin, dw = kernels.dw_backward(rec["xin"], rec["w"], np.ascontiguousarray(dz))
                db = dz.sum(axis=(0, 2, 3))
            else:
                n_, c_, h_, w_ = rec["xshape"]
                dz2 = dz.transpose(0, 2, 3, 1).reshape(-1, dz.shape[1])
                dw = (dz2.T @ rec["cols"]).reshape(dz.shape[1], c_, layer.kernel, layer.kernel)
                db = dz2.sum(axis=0)
                dcols = np.ascontiguousarray(dz2 @ rec["wmat"])
                dxin = kernels.col2im(dcols, n_, c_, h_, w_, layer.kernel)
            fh, fw = rec["fh"], rec["fw"]
            da = _unpool(dxin, fh, fw) if fh > 1 or fw > 1 else dxin
        param_grads[layer.id] = (dw, db)
        if rec["vin"] != 0:
            _acc(grads, rec["vin"], da)
    return param_grads


def _acc(grads, vid, g):
    if vid in grads:
        grads[vid] = grads[vid] + g
    else:
        grads[vid] = g


def masked_forward(
    state: SupernetState,
    graph: NetworkGraph,
    assignment: ChannelAssignment | None,
    batch: Batch,
    macs: MacCounter | None = None,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and logits of a sub-network. Read-only on ``state``."""
    chans = _resolve(graph, assignment)
    logits, _ = _forward(state, chans, batch.inputs, macs)
    if not np.all(np.isfinite(logits)):
        raise TrainingError("non-finite activations in forward pass")
    loss, _ = _softmax_xent(logits, batch.labels)
    return loss, logits


def gradients(state, graph, assignment, batch):
    """Loss and per-layer gradients of the gathered (compact) weights."""
    chans = _resolve(graph, assignment)
    logits, tape = _forward(state, chans, batch.inputs, record=True)
    if not np.all(np.isfinite(logits)):
        raise TrainingError("non-finite activations in forward pass")
    loss, dlogits = _softmax_xent(logits, batch.labels)
    return loss, _backward(state, chans, tape, dlogits), chans


def _layer_index(layer, chans):
    O, I = chans[layer.width_group], chans[layer.input_group]
    if layer.kind is LayerKind.DEPTHWISE:
        return (O,)
    return np.ix_(O, I)


def backward_and_step(
    state: SupernetState,
    graph: NetworkGraph,
    assignment: ChannelAssignment | None,
    batch: Batch,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> float:
    """One SGD-with-momentum step touching only the sub-network's weights.

    Returns the batch loss evaluated before the update. ``lr == 0`` leaves
    the whole state, momentum included, untouched.
    """
    if lr < 0 or not 0 <= momentum < 1 or weight_decay < 0:
        raise ValueError("need lr >= 0, 0 <= momentum < 1, weight_decay >= 0")
    loss, pgrads, chans = gradients(state, graph, assignment, batch)
    if lr == 0:
        return loss
    for layer in graph.layers:
        if layer.id not in pgrads:
            continue
        dw, db = pgrads[layer.id]
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise TrainingError(f"non-finite gradient in layer {layer.id}")
        idx = _layer_index(layer, chans)
        O = chans[layer.width_group]
        for P, V, grad, ix in (
            (state.weights[layer.id], state.mom_w[layer.id], dw, idx),
            (state.biases[layer.id], state.mom_b[layer.id], db, (O,)),
        ):
            p = P[ix]
            v = momentum * V[ix] + grad + weight_decay * p
            V[ix] = v
            P[ix] = p - lr * v
    state.step += 1
    return loss


def predict(state, graph, assignment, data: Batch, chunk: int = 128) -> np.ndarray:
    chans = _resolve(graph, assignment)
    out = []
    for s in range(0, len(data), chunk):
        logits, _ = _forward(state, chans, data.inputs[s:s + chunk])
        out.append(logits)
    return np.concatenate(out)


def evaluate(state, graph, assignment, dataset: Batch) -> float:
    """Top-1 accuracy of the sub-network on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    logits = predict(state, graph, assignment, dataset)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
