"""Multi-scale residual / dense super-resolution networks.

A network is described declaratively by :class:`NetworkSpec` and compiled by
:func:`build_network` into a :class:`ComputationGraph`: an ordered list of
named layer nodes plus the convolution parameters they reference.

Topology of the multi-scale variants, all branches fed by the input image:

* DS0: 3x3 head conv to ``filters[0]``, then the body (if any blocks).
* DS2: stride-2 conv to ``downscale[0]``, body, sub-pixel upscale x2.
* DS4: two stride-2 convs (``downscale[1]``) with a ReLU between, body,
  two sub-pixel x2 stages.
* merge: one channel concatenation of the three branch outputs, then a 3x3
  conv to 3 channels. There is no global skip connection.

A residual block is conv-ReLU-conv plus an identity addition; a dense block
is conv-ReLU-conv producing ``growth`` channels concatenated onto its input.
A dense body holds 12 blocks where the output of block j (j = 1..3) is also
concatenated into the input of block 13 - j, followed by a 1x1 fusion conv.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as te
from .data import SeededRng
from .tensor import ConvParams, Tensor

PRESETS = ("baseline_r", "msrn", "baseline_d", "msdn")
DENSE_CROSS_LINKS = 3


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    block: str  # "residual" or "dense"
    blocks_per_space: tuple[int | None, int | None, int | None]
    filters_per_space: tuple[int | None, int | None, int | None]
    downscale_filters: tuple[int, tuple[int, int]] | None = None
    upscale_channel_plan: tuple[tuple[int], tuple[int, int]] = ((48,), (48, 24))
    output_channels: int = 3
    input_channels: int = 3

    @property
    def multiscale(self) -> bool:
        return self.filters_per_space[1] is not None or self.filters_per_space[2] is not None

    @property
    def size_divisor(self) -> int:
        if self.filters_per_space[2] is not None:
            return 4
        return 2 if self.filters_per_space[1] is not None else 1

    def replace(self, **changes) -> "NetworkSpec":
        changes.setdefault("kind", "custom")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, (list, tuple)) else v

        d = dict(d)
        for key in ("blocks_per_space", "filters_per_space", "downscale_filters", "upscale_channel_plan"):
            if d.get(key) is not None:
                d[key] = tup(d[key])
        return cls(**d)


def preset(name: str) -> NetworkSpec:
    """Table settings for the two baselines and the two multi-scale networks."""
    key = name.lower().replace("-", "_")
    if key == "baseline_r":
        return NetworkSpec("baseline_r", "residual", (32, None, None), (16, None, None))
    if key == "msrn":
        return NetworkSpec("msrn", "residual", (0, 32, 32), (3, 96, 96), (96, (48, 96)))
    if key == "baseline_d":
        return NetworkSpec("baseline_d", "dense", (12, None, None), (16, None, None))
    if key == "msdn":
        return NetworkSpec("msdn", "dense", (12, 12, 12), (12, 48, 96), (48, (48, 96)))
    raise SpecError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def tiny_msrn(blocks: int = 2, filters: int = 8, upscale: tuple[int, int, int] = (8, 8, 4)) -> NetworkSpec:
    """Scaled-down MsRN used for desk-scale training and tests."""
    return preset("msrn").replace(
        blocks_per_space=(0, blocks, blocks),
        filters_per_space=(3, filters, filters),
        downscale_filters=(filters, (filters, filters)),
        upscale_channel_plan=((upscale[0],), (upscale[1], upscale[2])),
    )


def tiny_msdn(blocks: int = 12, filters: tuple[int, int, int] = (2, 2, 2)) -> NetworkSpec:
    return preset("msdn").replace(
        blocks_per_space=(blocks, blocks, blocks),
        filters_per_space=filters,
        downscale_filters=(filters[1], (filters[1], filters[2])),
        upscale_channel_plan=((4,), (4, 2)),
    )


def validate(spec: NetworkSpec) -> None:
    if spec.block not in ("residual", "dense"):
        raise SpecError(f"block must be 'residual' or 'dense', got {spec.block!r}")
    blocks, filters = spec.blocks_per_space, spec.filters_per_space
    if len(blocks) != 3 or len(filters) != 3:
        raise SpecError("blocks_per_space and filters_per_space must be triples")
    if filters[0] is None or filters[0] < 1:
        raise SpecError("DS0 needs a positive filter count")
    for i in range(3):
        if (filters[i] is None) != (blocks[i] is None):
            raise SpecError(f"space DS{2 * i}: blocks and filters must both be set or both be absent")
        if filters[i] is not None and (filters[i] < 1 or blocks[i] < 0):
            raise SpecError(f"space DS{2 * i}: need filters >= 1 and blocks >= 0")
    if spec.block == "dense" and any(b not in (None, 0) and b < 2 * DENSE_CROSS_LINKS for b in blocks):
        raise SpecError(f"a dense body needs at least {2 * DENSE_CROSS_LINKS} blocks")
    if spec.multiscale:
        if spec.downscale_filters is None:
            raise SpecError("multi-scale networks need downscale filters")
        d2, (d4a, d4b) = spec.downscale_filters
        if filters[1] is not None and d2 != filters[1]:
            raise SpecError(f"DS2 downscale emits {d2} channels but the DS2 body uses {filters[1]}")
        if filters[2] is not None and d4b != filters[2]:
            raise SpecError(f"DS4 downscale emits {d4b} channels but the DS4 body uses {filters[2]}")
        up2, up4 = spec.upscale_channel_plan
        if len(up2) != 1 or len(up4) != 2 or min(*up2, *up4) < 1:
            raise SpecError("upscale plan must be ((c2,), (c4a, c4b)) with positive counts")
    if spec.output_channels < 1 or spec.input_channels < 1:
        raise SpecError("channel counts must be positive")


# ---------------------------------------------------------------------------
# graph


@dataclass
class Node:
    name: str
    kind: str  # input | conv2d | relu | add | concat | depth_to_space
    inputs: tuple[str, ...] = ()
    channels: int = 0
    attrs: dict = field(default_factory=dict)


@dataclass
class ComputationGraph:
    nodes: list[Node]
    params: dict[str, ConvParams]
    spec: NetworkSpec | None = None
    output: str = ""

    def __post_init__(self):
        self._index = {n.name: n for n in self.nodes}
        if len(self._index) != len(self.nodes):
            raise te.GraphError("duplicate node names")
        if not self.output and self.nodes:
            self.output = self.nodes[-1].name
        self.order = _static_topo(self.nodes)

    def node(self, name: str) -> Node:
        return self._index[name]

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield f"{name}.weight", p.weight
            yield f"{name}.bias", p.bias

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def forward(self, image: Tensor | np.ndarray) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(image, dtype=self.dtype)
        div = self.spec.size_divisor if self.spec is not None else 1
        if x.shape[2] % div or x.shape[3] % div:
            raise te.ShapeError(
                f"input size {x.shape[2]}x{x.shape[3]} must be divisible by {div}; pad the image first"
            )
        env: dict[str, Tensor] = {}
        for node in self.order:
            k = node.kind
            if k == "input":
                if x.shape[1] != node.channels:
                    raise te.ShapeError(f"expected {node.channels} input channels, got {x.shape[1]}")
                env[node.name] = x
            elif k == "conv2d":
                env[node.name] = te.conv2d(env[node.inputs[0]], self.params[node.name])
            elif k == "relu":
                env[node.name] = te.relu(env[node.inputs[0]])
            elif k == "add":
                env[node.name] = te.add([env[i] for i in node.inputs])
            elif k == "concat":
                env[node.name] = te.concat_channels([env[i] for i in node.inputs])
            elif k == "depth_to_space":
                env[node.name] = te.depth_to_space(env[node.inputs[0]], node.attrs.get("factor", 2))
            else:
                raise te.GraphError(f"unknown node kind {k!r}")
        return env[self.output]

    def __call__(self, image: np.ndarray) -> np.ndarray:
        """Inference on a raw array; no gradient bookkeeping."""
        with te.no_grad():
            return self.forward(np.asarray(image, dtype=self.dtype)).data

    @property
    def dtype(self):
        for p in self.params.values():
            return p.weight.dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "ComputationGraph":
        params = {
            name: ConvParams(
                Tensor(p.weight.data.astype(dtype), requires_grad=True, dtype=dtype),
                Tensor(p.bias.data.astype(dtype), requires_grad=True, dtype=dtype),
                p.stride,
            )
            for name, p in self.params.items()
        }
        return ComputationGraph(list(self.nodes), params, self.spec, self.output)

    def copy(self) -> "ComputationGraph":
        return self.astype(self.dtype)


def _static_topo(nodes: list[Node]) -> list[Node]:
    index = {n.name: n for n in nodes}
    state: dict[str, int] = {}
    order: list[Node] = []

    def visit(name: str, path: tuple[str, ...]):
        s = state.get(name)
        if s == 2:
            return
        if s == 1:
            raise te.GraphError(f"cycle detected through {' -> '.join(path + (name,))}")
        if name not in index:
            raise te.GraphError(f"node {path[-1] if path else '?'} references unknown input {name!r}")
        state[name] = 1
        for i in index[name].inputs:
            visit(i, path + (name,))
        state[name] = 2
        order.append(index[name])

    for n in nodes:
        visit(n.name, ())
    return order


class GraphBuilder:
    """Incremental graph assembly; convolution weights are He-normal when an rng is given."""

    def __init__(self, rng: SeededRng | None = None, dtype=np.float32):
        self.nodes: list[Node] = []
        self.params: dict[str, ConvParams] = {}
        self.channels: dict[str, int] = {}
        self.rng = rng
        self.dtype = dtype

    def finish(self, output: str, spec: NetworkSpec | None = None) -> ComputationGraph:
        return ComputationGraph(list(self.nodes), dict(self.params), spec, output)

    def _push(self, node: Node) -> str:
        self.nodes.append(node)
        self.channels[node.name] = node.channels
        return node.name

    def input(self, channels: int) -> str:
        return self._push(Node("input", "input", (), channels))

    def conv(self, name: str, src: str, out_c: int, k: int = 3, stride: int = 1) -> str:
        in_c = self.channels[src]
        p = ConvParams.create(in_c, out_c, k, stride, self.dtype)
        if self.rng is not None:
            std = np.sqrt(2.0 / (k * k * in_c))
            p.weight.data[...] = self.rng.normal(p.weight.shape, std)
        self.params[name] = p
        return self._push(Node(name, "conv2d", (src,), out_c, {"k": k, "stride": stride, "in_c": in_c}))

    def relu(self, name: str, src: str) -> str:
        return self._push(Node(name, "relu", (src,), self.channels[src]))

    def add(self, name: str, *srcs: str) -> str:
        chans = {self.channels[s] for s in srcs}
        if len(chans) != 1:
            raise SpecError(f"{name}: addition inputs disagree on channels {sorted(chans)}")
        return self._push(Node(name, "add", srcs, chans.pop()))

    def concat(self, name: str, *srcs: str) -> str:
        return self._push(Node(name, "concat", srcs, sum(self.channels[s] for s in srcs)))

    def d2s(self, name: str, src: str) -> str:
        c = self.channels[src]
        if c % 4:
            raise SpecError(f"{name}: {c} channels cannot be rearranged by a factor of 2")
        return self._push(Node(name, "depth_to_space", (src,), c // 4, {"factor": 2}))

    # composite pieces

    def residual_block(self, prefix: str, src: str) -> str:
        c = self.channels[src]
        h = self.conv(f"{prefix}.conv1", src, c)
        h = self.relu(f"{prefix}.relu", h)
        h = self.conv(f"{prefix}.conv2", h, c)
        return self.add(f"{prefix}.add", src, h)

    def dense_block(self, prefix: str, src: str, growth: int) -> str:
        h = self.conv(f"{prefix}.conv1", src, growth)
        h = self.relu(f"{prefix}.relu", h)
        h = self.conv(f"{prefix}.conv2", h, growth)
        return self.concat(f"{prefix}.cat", src, h)

    def residual_body(self, prefix: str, src: str, blocks: int) -> str:
        for b in range(1, blocks + 1):
            src = self.residual_block(f"{prefix}.block{b:02d}", src)
        return src

    def dense_body(self, prefix: str, src: str, blocks: int) -> str:
        base = self.channels[src]
        outputs: dict[int, str] = {}
        h = src
        for b in range(1, blocks + 1):
            partner = blocks + 1 - b
            if partner <= DENSE_CROSS_LINKS and partner < b:
                h = self.concat(f"{prefix}.cross{partner:02d}", h, outputs[partner])
            h = self.dense_block(f"{prefix}.block{b:02d}", h, base)
            outputs[b] = h
        return self.conv(f"{prefix}.fuse", h, base, k=1)

    def body(self, block: str, prefix: str, src: str, blocks: int) -> str:
        if blocks == 0:
            return src
        if block == "residual":
            return self.residual_body(prefix, src, blocks)
        return self.dense_body(prefix, src, blocks)


def build_network(spec: NetworkSpec, seed: int | SeededRng | None = 0, dtype=np.float32) -> ComputationGraph:
    """Compile ``spec`` into a graph; weights are He-normal from the ``init`` stream (zeros if seed is None)."""
    validate(spec)
    if seed is None:
        rng = None
    elif isinstance(seed, SeededRng):
        rng = seed.derive("init")
    else:
        rng = SeededRng(seed, "init")
    b = GraphBuilder(rng, dtype)
    blocks, filters = spec.blocks_per_space, spec.filters_per_space
    x = b.input(spec.input_channels)

    h0 = b.conv("ds0.head", x, filters[0])
    h0 = b.body(spec.block, "ds0", h0, blocks[0])
    if not spec.multiscale:
        out = b.conv("tail", h0, spec.output_channels)
        return ComputationGraph(b.nodes, b.params, spec, out)

    branches = [h0]
    d2, (d4a, d4b) = spec.downscale_filters
    (u2,), (u4a, u4b) = spec.upscale_channel_plan
    if filters[1] is not None:
        h = b.conv("ds2.down", x, d2, stride=2)
        h = b.body(spec.block, "ds2", h, blocks[1])
        h = b.conv("ds2.up1", h, 4 * u2)
        branches.append(b.d2s("ds2.shuffle1", h))
    if filters[2] is not None:
        h = b.conv("ds4.down1", x, d4a, stride=2)
        h = b.relu("ds4.down1.relu", h)
        h = b.conv("ds4.down2", h, d4b, stride=2)
        h = b.body(spec.block, "ds4", h, blocks[2])
        h = b.conv("ds4.up1", h, 4 * u4a)
        h = b.d2s("ds4.shuffle1", h)
        h = b.conv("ds4.up2", h, 4 * u4b)
        branches.append(b.d2s("ds4.shuffle2", h))
    merged = b.concat("merge", *branches)
    out = b.conv("tail", merged, spec.output_channels)
    return ComputationGraph(b.nodes, b.params, spec, out)


def build_preset(name: str, seed: int | None = 0) -> ComputationGraph:
    return build_network(preset(name), seed)


# ---------------------------------------------------------------------------
# inspection


def audit_graph(graph: ComputationGraph) -> dict[str, int]:
    kinds = Counter(n.kind for n in graph.nodes)
    return {"additions": kinds["add"], "concatenations": kinds["concat"]}


def count_parameters(graph: ComputationGraph) -> tuple[int, dict[str, int]]:
    """Total and per-layer parameter counts from layer shapes: out*in*k^2 + out."""
    per_layer = {}
    for n in graph.nodes:
        if n.kind == "conv2d":
            per_layer[n.name] = n.channels * n.attrs["in_c"] * n.attrs["k"] ** 2 + n.channels
    return sum(per_layer.values()), per_layer


def receptive_field_radius(graph: ComputationGraph) -> float:
    """Largest distance (input pixels) from an output pixel to any pixel influencing it.

    Tracks per node the radius and the sampling step in input pixels. A
    stride-s conv with kernel k adds ``(k // 2) * step``; a depth-to-space
    rearrangement halves the step and adds half the coarse step for the
    sub-cell offset. Joins take the maximum over inputs.
    """
    radius: dict[str, float] = {}
    step: dict[str, float] = {}
    for n in graph.order:
        if n.kind == "input":
            radius[n.name], step[n.name] = 0.0, 1.0
            continue
        r = max(radius[i] for i in n.inputs)
        j = step[n.inputs[0]]
        if n.kind in ("add", "concat") and len({step[i] for i in n.inputs}) != 1:
            raise te.GraphError(f"{n.name}: inputs live on different grids")
        if n.kind == "conv2d":
            r += (n.attrs["k"] // 2) * j
            j *= n.attrs["stride"]
        elif n.kind == "depth_to_space":
            r += j / 2
            j /= n.attrs.get("factor", 2)
        radius[n.name], step[n.name] = r, j
    return radius.get(graph.output, 0.0)


def receptive_field(graph: ComputationGraph) -> int:
    """Receptive field width in input pixels (``2 * radius + 1``)."""
    return int(np.ceil(2 * receptive_field_radius(graph))) + 1
