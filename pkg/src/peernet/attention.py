"""Weighted-sum fusion and channel-wise attention on block connections.

Every connection (j -> i) carries a gate logit ``w`` and an
:class:`AttentionBinding`. The destination input is

    x_i = sum_j sigmoid(w_ji) * A_ji * x_j

where ``A_ji`` is a per-frame channel vector in (0, 1) (or 1 for mode
``none``). Attention modes:

- ``none``: no attention.
- ``static``: ``sigmoid(static_logits)``, independent of the input.
- ``self``: ``sigmoid(f(GAP(x_j)))``.
- ``peer``: ``sigmoid(f(GAP(x_k)))`` for a bound peer block ``k``.
- ``oneshot``: ``sigmoid(f(sum_k softmax(h)_k P_k GAP(x_k)))`` over the whole
  peer set, where ``P_k`` projects peer ``k``'s width to the destination width.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from peernet import tensor as tn
from peernet.tensor import Tensor

MODES = ("none", "static", "self", "peer", "oneshot")

HEAD_INIT_STD = 0.01


@dataclass
class AttentionHead:
    """One fully connected layer followed by a sigmoid."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, cin: int, cout: int, name: str = "") -> "AttentionHead":
        return cls(
            tn.parameter(rng.standard_normal((cin, cout)) * HEAD_INIT_STD, f"{name}/w"),
            tn.parameter(np.zeros(cout), f"{name}/b"),
        )

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]

    def clone(self) -> "AttentionHead":
        return AttentionHead(self.weight.clone(), self.bias.clone())

    def __call__(self, pooled: Tensor) -> Tensor:
        return tn.sigmoid(tn.linear(pooled, self.weight, self.bias))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class AttentionBinding:
    mode: str = "none"
    peer: int | None = None
    peers: tuple[int, ...] = ()
    head: AttentionHead | None = None
    static_logits: Tensor | None = None
    h: Tensor | None = None
    projectors: tuple[Tensor, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.mode == "peer" and self.peer is None:
            raise ValueError("peer mode needs a bound peer block")
        if self.mode == "oneshot":
            m = len(self.peers)
            if m == 0:
                raise ValueError("oneshot binding needs a non-empty peer set")
            if self.h is None or self.h.shape != (m,):
                raise ValueError(f"oneshot binding needs h of length {m}")
            if len(self.projectors) != m:
                raise ValueError("oneshot binding needs one projector per peer")

    def clone(self) -> "AttentionBinding":
        return replace(
            self,
            head=None if self.head is None else self.head.clone(),
            static_logits=None if self.static_logits is None else self.static_logits.clone(),
            h=None if self.h is None else self.h.clone(),
            projectors=tuple(p.clone() for p in self.projectors),
        )

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if self.static_logits is not None:
            params.append(self.static_logits)
        if self.h is not None:
            params.append(self.h)
        params.extend(self.projectors)
        if self.head is not None:
            params.extend(self.head.parameters())
        return params

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if self.static_logits is not None:
            out.append((f"{prefix}/static", self.static_logits))
        if self.h is not None:
            out.append((f"{prefix}/h", self.h))
        for k, p in zip(self.peers, self.projectors):
            out.append((f"{prefix}/proj{k}", p))
        if self.head is not None:
            out.append((f"{prefix}/head/w", self.head.weight))
            out.append((f"{prefix}/head/b", self.head.bias))
        return out

    def source_blocks(self, src: int) -> tuple[int, ...]:
        """Blocks whose outputs this binding reads."""
        if self.mode == "self":
            return (src,)
        if self.mode == "peer":
            return (self.peer,)
        if self.mode == "oneshot":
            return self.peers
        return ()

    def describe(self) -> dict:
        d: dict = {"mode": self.mode}
        if self.mode == "peer":
            d["peer"] = self.peer
        if self.mode == "oneshot":
            d["peers"] = list(self.peers)
        return d

    def vector(self, src: int, pooled: Callable[[int], Tensor]) -> Tensor | None:
        """Attention vector for an edge out of ``src``.

        ``pooled(k)`` is the GAP of block ``k``; given a tuple of blocks it
        returns their pooled vectors concatenated along channels.
        """
        if self.mode == "none":
            return None
        if self.mode == "static":
            a = tn.sigmoid(self.static_logits)
            return tn.reshape(a, (1, 1, 1, 1, a.shape[0]))
        if self.mode == "self":
            return self.head(pooled(src))
        if self.mode == "peer":
            return self.head(pooled(self.peer))
        mixed = tn.mix_projected(self.h, pooled(self.peers), self.projectors)
        return self.head(mixed)


def make_binding(
    mode: str,
    src: int,
    dst_width: int,
    peer_widths: Mapping[int, int],
    rng: np.random.Generator,
    name: str = "",
    peer: int | None = None,
) -> AttentionBinding:
    """Fresh binding for edge ``src -> dst``.

    ``peer_widths`` maps every legal peer of the edge to its output width.
    """
    if mode == "none":
        return AttentionBinding("none")
    if mode == "static":
        return AttentionBinding(
            "static", static_logits=tn.parameter(np.zeros(dst_width), f"{name}/static")
        )
    if mode == "self":
        head = AttentionHead.create(rng, peer_widths[src], dst_width, f"{name}/head")
        return AttentionBinding("self", head=head)
    if mode == "peer":
        if peer not in peer_widths:
            raise ValueError(f"peer {peer} is not in the peer set of edge from {src}")
        head = AttentionHead.create(rng, peer_widths[peer], dst_width, f"{name}/head")
        return AttentionBinding("peer", peer=peer, head=head)
    if mode == "oneshot":
        peers = tuple(sorted(peer_widths))
        projectors = tuple(
            tn.parameter(
                rng.standard_normal((peer_widths[k], dst_width)) / np.sqrt(peer_widths[k]),
                f"{name}/proj{k}",
            )
            for k in peers
        )
        head = AttentionHead.create(rng, dst_width, dst_width, f"{name}/head")
        return AttentionBinding(
            "oneshot",
            peers=peers,
            head=head,
            h=tn.parameter(np.zeros(len(peers)), f"{name}/h"),
            projectors=projectors,
        )
    raise ValueError(f"unknown attention mode {mode!r}")


def select_peer(binding: AttentionBinding) -> AttentionBinding:
    """Collapse a oneshot binding onto its argmax peer.

    The selected projector is folded into the head, so the resulting peer
    binding reads the peer's native width and reproduces the one-hot limit of
    the softmax mix exactly. Ties go to the lowest block index.
    """
    if binding.mode != "oneshot":
        return binding
    k = int(np.argmax(binding.h.data))
    proj = binding.projectors[k]
    folded = AttentionHead(
        tn.parameter(proj.data @ binding.head.weight.data),
        tn.parameter(binding.head.bias.data.copy()),
    )
    return AttentionBinding("peer", peer=binding.peers[k], head=folded)


def attention_vector(head: AttentionHead, x: Tensor) -> Tensor:
    """``sigmoid(f(GAP(x)))``, one vector per frame."""
    if x.shape[-1] != head.in_width:
        raise ValueError(f"attention head expects width {head.in_width}, got {x.shape[-1]}")
    return head(tn.gap_spatial(x))


def one_shot_peer_mix(h: Tensor, peer_outputs: Sequence[Tensor]) -> Tensor:
    return tn.one_shot_peer_mix(h, peer_outputs)


def fuse_inputs(
    edges: Sequence,
    sources: Mapping[int, Tensor],
    pooled: Callable[[int], Tensor],
) -> Tensor:
    """Weighted, attention-modulated sum of the incoming connections.

    ``edges`` are the connections into one block, ``sources[j]`` the output
    of block ``j`` already matched to the destination's shape, and
    ``pooled(k)`` the spatially pooled native output of block ``k``.
    """
    if not edges:
        raise ValueError("fuse_inputs needs at least one incoming edge")
    xs, vectors = [], []
    for edge in edges:
        x = sources[edge.src]
        if xs and x.shape != xs[0].shape:
            raise ValueError(f"edge {edge.src}->{edge.dst}: shape {x.shape} != {xs[0].shape}")
        with tn.flop_scope("attention_heads"):
            vectors.append(edge.attention.vector(edge.src, pooled))
        xs.append(x)
    return tn.gated_sum(xs, [e.weight for e in edges], vectors)
