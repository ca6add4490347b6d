"""Network description, width vectors and analytic FLOPs accounting.

A network is an ordered list of layers. Every layer writes into a *width
group*; layers that must share a width (skip connections, depthwise
pairs) name the same group, so the search variable lives on the group and
not on the layer. The reserved group ``"input"`` denotes the network
input, whose width is fixed. The group written by the last layer is the
classifier output and is fixed as well.
"""

from __future__ import annotations

import enum
import json
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .errors import GraphError, InvalidWidthError

INPUT_GROUP = "input"


class LayerKind(str, enum.Enum):
    CONV = "Conv"
    DEPTHWISE = "DepthwiseConv"
    DENSE = "Dense"


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: LayerKind
    out_h: int
    out_w: int
    kernel: int
    max_width: int
    width_group: str
    input_group: str

    @property
    def spatial(self) -> int:
        return self.out_h * self.out_w * self.kernel * self.kernel


def layer_flops(c_in: int, c_out: int, layer: LayerSpec) -> int:
    """Multiply-accumulate count of one layer at the given widths.

    Standard conv and dense layers cost ``c_in * c_out * H * W * K^2``; a
    depthwise layer has one filter per channel and costs ``c * H * W * K^2``.
    """
    if c_in < 0 or c_out < 0:
        raise InvalidWidthError(f"layer {layer.id}: negative width ({c_in}, {c_out})")
    if layer.kind is LayerKind.DEPTHWISE:
        if c_in != c_out:
            raise InvalidWidthError(
                f"layer {layer.id}: depthwise layer needs c_in == c_out, got {c_in} != {c_out}"
            )
        return c_out * layer.spatial
    return c_in * c_out * layer.spatial


class WidthVector(Mapping):
    """Immutable, hashable mapping ``width_group -> channel count``."""

    __slots__ = ("_items",)

    def __init__(self, group_widths: Mapping[str, int] | None = None, **kw: int):
        d = dict(group_widths or {})
        d.update(kw)
        self._items = tuple(sorted((str(k), int(v)) for k, v in d.items()))

    def __getitem__(self, key: str) -> int:
        for k, v in self._items:
            if k == key:
                return v
        raise KeyError(key)

    def __iter__(self) -> Iterator[str]:
        return (k for k, _ in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __hash__(self) -> int:
        return hash(self._items)

    def __eq__(self, other) -> bool:
        if isinstance(other, WidthVector):
            return self._items == other._items
        if isinstance(other, Mapping):
            return dict(self._items) == dict(other)
        return NotImplemented

    def __repr__(self) -> str:
        return f"WidthVector({dict(self._items)!r})"

    def replace(self, **changes: int) -> "WidthVector":
        d = dict(self._items)
        d.update(changes)
        return WidthVector(d)

    def to_dict(self) -> dict[str, int]:
        return dict(self._items)


@dataclass(frozen=True)
class NetworkGraph:
    layers: tuple[LayerSpec, ...]
    input_channels: int
    num_classes: int
    _max: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self._validate()
        maxima = {INPUT_GROUP: self.input_channels}
        for layer in self.layers:
            maxima.setdefault(layer.width_group, layer.max_width)
        object.__setattr__(self, "_max", maxima)

    def _validate(self) -> None:
        if self.input_channels < 1:
            raise GraphError("input_channels must be >= 1")
        if self.num_classes < 1:
            raise GraphError("num_classes must be >= 1")
        if not self.layers:
            raise GraphError("graph has no layers")
        seen: dict[str, int] = {}
        for pos, layer in enumerate(self.layers, start=1):
            where = f"layer {layer.id}"
            if layer.id != pos:
                raise GraphError(f"{where}: ids must run 1..L in order (expected {pos})")
            if not isinstance(layer.kind, LayerKind):
                raise GraphError(f"{where}: unknown kind {layer.kind!r}")
            if layer.max_width < 1:
                raise GraphError(f"{where}: max_width must be >= 1")
            if layer.kernel < 1 or layer.kernel % 2 == 0:
                raise GraphError(f"{where}: kernel must be odd and >= 1")
            if layer.out_h < 1 or layer.out_w < 1:
                raise GraphError(f"{where}: out_h/out_w must be >= 1")
            if layer.kind is LayerKind.DENSE and (layer.out_h, layer.out_w, layer.kernel) != (1, 1, 1):
                raise GraphError(f"{where}: Dense layers have out_h = out_w = kernel = 1")
            if layer.width_group == INPUT_GROUP:
                raise GraphError(f"{where}: '{INPUT_GROUP}' is reserved for the network input")
            if layer.input_group != INPUT_GROUP and layer.input_group not in seen:
                raise GraphError(
                    f"{where}: input_group {layer.input_group!r} is not produced by an earlier layer"
                )
            if layer.kind is LayerKind.DEPTHWISE and layer.input_group != layer.width_group:
                raise GraphError(f"{where}: DepthwiseConv needs input_group == width_group")
            if layer.width_group in seen and seen[layer.width_group] != layer.max_width:
                raise GraphError(
                    f"{where}: group {layer.width_group!r} already has max_width "
                    f"{seen[layer.width_group]}, got {layer.max_width}"
                )
            seen[layer.width_group] = layer.max_width
        last = self.layers[-1]
        if last.max_width != self.num_classes:
            raise GraphError(f"layer {last.id}: final layer width must equal num_classes")
        for layer in self.layers[:-1]:
            if layer.width_group == last.width_group:
                raise GraphError(f"layer {layer.id}: classifier group is written by a non-final layer")
            if layer.input_group == last.width_group:
                raise GraphError(f"layer {layer.id}: classifier group cannot feed another layer")
        if last.kind is LayerKind.DEPTHWISE:
            raise GraphError(f"layer {last.id}: final layer cannot be depthwise")

    # --- accessors -----------------------------------------------------

    @property
    def output_group(self) -> str:
        return self.layers[-1].width_group

    @property
    def searchable_groups(self) -> tuple[str, ...]:
        out, groups = self.output_group, []
        for layer in self.layers:
            if layer.width_group != out and layer.width_group not in groups:
                groups.append(layer.width_group)
        return tuple(groups)

    def max_width(self, group: str) -> int:
        return self._max[group]

    def full_widths(self) -> WidthVector:
        return WidthVector({g: self._max[g] for g in self.searchable_groups})

    def producers(self, group: str) -> list[LayerSpec]:
        return [l for l in self.layers if l.width_group == group]

    def consumers(self, group: str) -> list[LayerSpec]:
        return [l for l in self.layers if l.input_group == group]

    def resolve(self, widths: Mapping[str, int]) -> dict[str, int]:
        """Widths for every group, fixed ones included, after validation."""
        check_widths(self, widths)
        full = {INPUT_GROUP: self.input_channels, self.output_group: self.num_classes}
        full.update({g: int(widths[g]) for g in self.searchable_groups})
        return full

    def with_max_widths(self, widths: Mapping[str, int]) -> "NetworkGraph":
        """Copy of the graph whose searchable maxima are ``widths``."""
        check_widths(self, widths)
        layers = [
            LayerSpec(
                l.id, l.kind, l.out_h, l.out_w, l.kernel,
                l.max_width if l.width_group == self.output_group else int(widths[l.width_group]),
                l.width_group, l.input_group,
            )
            for l in self.layers
        ]
        return NetworkGraph(tuple(layers), self.input_channels, self.num_classes)

    # --- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "layers": [
                {
                    "kind": l.kind.value, "out_h": l.out_h, "out_w": l.out_w,
                    "kernel": l.kernel, "max_width": l.max_width,
                    "width_group": l.width_group, "input_group": l.input_group,
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "NetworkGraph":
        try:
            raw_layers = doc["layers"]
            input_channels = int(doc["input_channels"])
            num_classes = int(doc["num_classes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"architecture document missing field: {exc}") from None
        layers = []
        for i, item in enumerate(raw_layers, start=1):
            try:
                kind = LayerKind(item["kind"])
            except (KeyError, ValueError):
                raise GraphError(f"layer {i}: unknown kind {item.get('kind')!r}") from None
            dense = kind is LayerKind.DENSE
            try:
                layers.append(LayerSpec(
                    id=i, kind=kind,
                    out_h=int(item.get("out_h", 1 if dense else 0)),
                    out_w=int(item.get("out_w", 1 if dense else 0)),
                    kernel=int(item.get("kernel", 1)),
                    max_width=int(item["max_width"]),
                    width_group=str(item["width_group"]),
                    input_group=str(item["input_group"]),
                ))
            except KeyError as exc:
                raise GraphError(f"layer {i}: missing field {exc}") from None
        return cls(tuple(layers), input_channels, num_classes)

    @classmethod
    def load(cls, path: str | Path) -> "NetworkGraph":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def check_widths(graph: NetworkGraph, widths: Mapping[str, int]) -> None:
    for g in graph.searchable_groups:
        if g not in widths:
            raise InvalidWidthError(f"width vector is missing group {g!r}")
        c = widths[g]
        if not 1 <= c <= graph.max_width(g):
            raise InvalidWidthError(f"group {g!r}: width {c} outside [1, {graph.max_width(g)}]")
    extra = set(widths) - set(graph.searchable_groups)
    if extra:
        raise InvalidWidthError(f"width vector names unknown groups {sorted(extra)}")


def network_flops(graph: NetworkGraph, widths: Mapping[str, int]) -> int:
    full = graph.resolve(widths)
    return sum(layer_flops(full[l.input_group], full[l.width_group], l) for l in graph.layers)


def supernet_flops(graph: NetworkGraph) -> int:
    return network_flops(graph, graph.full_widths())


def sensitivity(graph: NetworkGraph, group: str) -> int:
    """FLOPs carried by a single channel of ``group`` with neighbours at full width.

    The channel is the output of every layer writing the group and the
    input of every layer reading it. A depthwise layer does both at once
    and contributes its per-channel cost once.
    """
    if group not in graph.searchable_groups:
        raise InvalidWidthError(f"group {group!r} is not searchable")
    n = graph.max_width
    eps = 0
    for layer in graph.layers:
        if layer.kind is LayerKind.DEPTHWISE:
            if layer.width_group == group:
                eps += layer_flops(1, 1, layer)
            continue
        if layer.width_group == group:
            eps += layer_flops(n(layer.input_group), 1, layer)
        if layer.input_group == group:
            eps += layer_flops(1, n(layer.width_group), layer)
    return eps


def sensitivities(graph: NetworkGraph) -> dict[str, int]:
    return {g: sensitivity(graph, g) for g in graph.searchable_groups}


def chain(
    widths: list[int],
    *,
    input_channels: int = 3,
    num_classes: int = 10,
    resolution: int | list[int] = 8,
    kernel: int = 3,
    kinds: list[str] | None = None,
) -> NetworkGraph:
    """Convenience builder: a straight chain of conv layers plus a dense head.

    ``widths`` are the searchable maxima; the classifier is appended.
    """
    res = [resolution] * len(widths) if isinstance(resolution, int) else list(resolution)
    kinds = kinds or ["Conv"] * len(widths)
    layers, prev = [], INPUT_GROUP
    for i, (n, h, kind) in enumerate(zip(widths, res, kinds), start=1):
        kind = LayerKind(kind)
        if kind is LayerKind.DEPTHWISE:
            group = prev
        else:
            group = f"g{i}"
        k = 1 if kind is LayerKind.DENSE else kernel
        hw = 1 if kind is LayerKind.DENSE else h
        layers.append(LayerSpec(i, kind, hw, hw, k, n, group, prev))
        prev = group
    layers.append(LayerSpec(len(layers) + 1, LayerKind.DENSE, 1, 1, 1, num_classes, "logits", prev))
    return NetworkGraph(tuple(layers), input_channels, num_classes)
