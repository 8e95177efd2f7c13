"""Toy attention stack whose query and value projections carry adapters.

Each block is single-head attention without norms or biases::

    Q, K, V = W_q X, W_k X, W_v X            (columns are tokens)
    H = V softmax(Q^T K / sqrt(d))^T
    X <- X + W_o H
    X <- X + W_down relu(W_up X)             (only when the block has an MLP)

The readout is ``mean_tokens(X) @ head``.  Internally activations use the
column layout ``(batch, d_model, tokens)`` so every projection is an adapter
call on a stacked column batch.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .adapt import AdapterLayer, make_adapter, split_adapter_tensors, init_frozen
from .errors import (
    DimensionMismatch,
    InvalidInput,
    MissingTensor,
    NonFiniteActivation,
    StaleTrace,
)

ATTN = ("w_q", "w_k", "w_v", "w_o")
MLP = ("w_up", "w_down")
ADAPTED = ("w_q", "w_v")
_BLOCK_NAME = re.compile(r"^blocks\.(\d+)\.(w_\w+)$")


def _softmax(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    version: int
    blocks: list[dict[str, np.ndarray]]
    pooled: np.ndarray
    tokens: int
    consumed: bool = False


@dataclass
class ToyBlockStack:
    """Blocks of named :class:`AdapterLayer` projections plus a dense head."""

    blocks: list[dict[str, AdapterLayer]]
    head: np.ndarray
    train_head: bool = True
    version: int = field(default=0, compare=False)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def d_model(self) -> int:
        return self.head.shape[0]

    @property
    def classes(self) -> int:
        return self.head.shape[1]

    @property
    def has_mlp(self) -> bool:
        return bool(self.blocks) and "w_up" in self.blocks[0]

    def adapters(self) -> dict[str, AdapterLayer]:
        """Layers on the adaptation surface: Q and V, plus MLP layers when adapted."""
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.items():
                if name in ADAPTED or (name in MLP and layer.method != "frozen"):
                    out[f"blocks.{i}.{name}"] = layer
        return out

    def layers(self) -> dict[str, AdapterLayer]:
        return {f"blocks.{i}.{n}": layer for i, blk in enumerate(self.blocks)
                for n, layer in blk.items()}

    def adapter_param_count(self) -> int:
        return sum(layer.param_count() for layer in self.adapters().values())

    def trainable_buffers(self) -> dict[str, np.ndarray]:
        """Every trainable array, keyed ``blocks.<i>.<layer>.<part>`` and ``head``."""
        out = {}
        for prefix, layer in self.layers().items():
            for part, arr in layer.trainable.items():
                out[f"{prefix}.{part}"] = arr
        if self.train_head:
            out["head"] = self.head
        return out

    def touch(self) -> None:
        """Record that trainable buffers changed; outstanding traces go stale."""
        self.version += 1

    def frozen_snapshot(self) -> dict[str, bytes]:
        return {f"{prefix}.{part}": arr.tobytes()
                for prefix, layer in self.layers().items()
                for part, arr in layer.frozen.items()}

    # -- serialization ------------------------------------------------------

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.layers().items():
            out.update(layer.to_tensors(prefix))
        out["head"] = self.head.copy()
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], train_head: bool = True
                     ) -> "ToyBlockStack":
        layers, rest = split_adapter_tensors(tensors)
        if "head" not in rest:
            raise MissingTensor("checkpoint has no head tensor")
        blocks: dict[int, dict[str, AdapterLayer]] = {}
        for prefix, layer in layers.items():
            match = _BLOCK_NAME.match(prefix)
            if match is None:
                raise InvalidInput(f"unexpected layer name {prefix!r}")
            blocks.setdefault(int(match[1]), {})[match[2]] = layer
        ordered = _ordered_blocks(blocks)
        stack = cls(ordered, np.array(rest["head"], dtype=np.float64), train_head)
        _check_dims(stack)
        return stack


def _ordered_blocks(blocks: dict[int, dict]) -> list[dict]:
    if not blocks:
        raise MissingTensor("no block tensors found")
    n = max(blocks) + 1
    out = []
    for i in range(n):
        blk = blocks.get(i, {})
        names = ATTN + (MLP if "w_up" in blk or "w_down" in blk else ())
        missing = [f"blocks.{i}.{name}" for name in names if name not in blk]
        if missing:
            raise MissingTensor(f"missing {', '.join(missing)}")
        out.append({name: blk[name] for name in names})
    return out


def _check_dims(stack: ToyBlockStack) -> None:
    d = stack.d_model
    for prefix, layer in stack.layers().items():
        if (layer.d1, layer.d2) != (d, d):
            raise DimensionMismatch(f"{prefix} is {layer.d1}x{layer.d2}, expected {d}x{d}")
    if stack.has_mlp and any("w_up" not in blk for blk in stack.blocks):
        raise DimensionMismatch("either every block or no block has an MLP")


def pretrained_blocks(pretrained: dict[str, np.ndarray]) -> list[dict[str, np.ndarray]]:
    """Group dense ``blocks.<i>.<w_*>`` tensors of a pre-trained checkpoint."""
    blocks: dict[int, dict[str, np.ndarray]] = {}
    for name, value in pretrained.items():
        match = _BLOCK_NAME.match(name)
        if match is not None:
            blocks.setdefault(int(match[1]), {})[match[2]] = np.asarray(value, dtype=np.float64)
    return _ordered_blocks(blocks)


def init_head(seed, d_model: int, classes: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x4EAD])
    return rng.standard_normal((d_model, classes)) / np.sqrt(d_model)


def random_weights(seed, n_blocks: int, d_model: int, mlp: bool = False
                   ) -> dict[str, np.ndarray]:
    """Untrained dense weights in the pre-trained checkpoint layout."""
    rng = np.random.default_rng(seed)
    names = ATTN + (MLP if mlp else ())
    return {f"blocks.{i}.{name}": rng.standard_normal((d_model, d_model)) / np.sqrt(d_model)
            for i in range(n_blocks) for name in names}


def build_stack(pretrained: dict[str, np.ndarray], method: str, r: int, seed,
                classes: int | None = None, *, adapt_mlp: bool = False,
                other_method: str = "frozen", train_head: bool = True) -> ToyBlockStack:
    """Wrap Q/V of every pre-trained block in ``method`` adapters.

    K, O (and MLP weights unless ``adapt_mlp``) use ``other_method``, which is
    ``"frozen"`` except while pre-training.  A ``head`` tensor in
    ``pretrained`` is ignored; the head is freshly drawn from ``seed``.
    """
    dense = pretrained_blocks(pretrained)
    d = dense[0]["w_q"].shape[0]
    for i, blk in enumerate(dense):
        for name, w in blk.items():
            if w.shape != (d, d):
                raise DimensionMismatch(f"blocks.{i}.{name} is {w.shape}, expected {(d, d)}")
    if classes is None:
        if "head" not in pretrained:
            raise MissingTensor("classes not given and checkpoint has no head")
        classes = pretrained["head"].shape[1]
    blocks = []
    for i, blk in enumerate(dense):
        layers = {}
        for slot, (name, w) in enumerate(blk.items()):
            adapted = name in ADAPTED or (adapt_mlp and name in MLP)
            kind = method if adapted else other_method
            layers[name] = make_adapter(kind, w, r, seed=[seed, i, slot])
        blocks.append(layers)
    stack = ToyBlockStack(blocks, init_head(seed, d, classes), train_head)
    _check_dims(stack)
    return stack


def stack_forward(stack: ToyBlockStack, x) -> tuple[np.ndarray, ForwardTrace]:
    """Run a batch of token matrices ``x`` shaped (batch, tokens, d_model).

    Returns logits shaped (batch, classes) and the trace needed by
    :func:`stack_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != stack.d_model:
        raise DimensionMismatch(f"expected (batch, tokens, {stack.d_model}), got {x.shape}")
    scale = 1.0 / np.sqrt(stack.d_model)
    h = np.ascontiguousarray(x.transpose(0, 2, 1))
    caches = []
    for blk in stack.blocks:
        c = {"x": h}
        q = blk["w_q"].forward(h)
        k = blk["w_k"].forward(h)
        v = blk["w_v"].forward(h)
        p = _softmax((q.transpose(0, 2, 1) @ k) * scale)
        attn = v @ p.transpose(0, 2, 1)
        h = h + blk["w_o"].forward(attn)
        c.update(q=q, k=k, v=v, p=p, attn=attn)
        if "w_up" in blk:
            c["mid"] = h
            z = blk["w_up"].forward(h)
            c["z"] = z
            c["act"] = np.maximum(z, 0.0)
            h = h + blk["w_down"].forward(c["act"])
        caches.append(c)
    pooled = h.mean(axis=2)
    out = (pooled[:, None, :] @ stack.head)[:, 0, :]
    if not np.isfinite(out).all():
        raise NonFiniteActivation("stack output is not finite")
    return out, ForwardTrace(stack.version, caches, pooled, x.shape[1])


def stack_backward(stack: ToyBlockStack, trace: ForwardTrace, grad_out
                   ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of every trainable buffer plus the input gradient.

    Returns ``(grads, d_x)`` with ``grads`` keyed like
    :meth:`ToyBlockStack.trainable_buffers` and ``d_x`` shaped like the input.
    The trace is consumed.
    """
    if trace.consumed:
        raise StaleTrace("trace was already used by a backward pass")
    if trace.version != stack.version:
        raise StaleTrace("stack parameters changed since this trace was recorded")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (trace.pooled.shape[0], stack.classes):
        raise DimensionMismatch(f"grad_out shape {g.shape} does not match output")
    grads: dict[str, np.ndarray] = {}
    scale = 1.0 / np.sqrt(stack.d_model)

    def collect(i, name, layer, x, dy):
        res = layer.backward(x, dy)
        for part, value in res.params.items():
            grads[f"blocks.{i}.{name}.{part}"] = value
        return res.d_input

    d_pooled = (g[:, None, :] @ stack.head.T)[:, 0, :]
    head_grad = trace.pooled.T @ g
    dh = np.repeat(d_pooled[:, :, None] / trace.tokens, trace.tokens, axis=2)
    for i in reversed(range(stack.n_blocks)):
        blk, c = stack.blocks[i], trace.blocks[i]
        if "w_up" in blk:
            d_act = collect(i, "w_down", blk["w_down"], c["act"], dh)
            dz = d_act * (c["z"] > 0.0)
            dh = dh + collect(i, "w_up", blk["w_up"], c["mid"], dz)
        d_attn = collect(i, "w_o", blk["w_o"], c["attn"], dh)
        p = c["p"]
        dv = d_attn @ p
        dp = d_attn.transpose(0, 2, 1) @ c["v"]
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (c["k"] @ ds.transpose(0, 2, 1)) * scale
        dk = (c["q"] @ ds) * scale
        dx = dh
        dx = dx + collect(i, "w_q", blk["w_q"], c["x"], dq)
        dx = dx + collect(i, "w_k", blk["w_k"], c["x"], dk)
        dx = dx + collect(i, "w_v", blk["w_v"], c["x"], dv)
        dh = dx
    if stack.train_head:
        grads["head"] = head_grad
    trace.consumed = True
    trace.blocks = []
    ordered = {name: grads[name] for name in stack.trainable_buffers()}
    return ordered, np.ascontiguousarray(dh.transpose(0, 2, 1))


def dense_stack(pretrained: dict[str, np.ndarray], head: np.ndarray) -> ToyBlockStack:
    """All-frozen stack over dense weights (used as the merge/init reference)."""
    blocks = [{name: init_frozen(w) for name, w in blk.items()}
              for blk in pretrained_blocks(pretrained)]
    return ToyBlockStack(blocks, np.array(head, dtype=np.float64), train_head=False)
