"""Adapter layers over a frozen pre-trained matrix.

A layer maps a batch of column vectors ``x`` (d2 x n) to ``W' x`` (d1 x n).
Five methods share one container:

========  ==============================  ======================
method    frozen state                    trainable state
========  ==============================  ======================
svfit     u_r, v_r, w_e                   sigma_r (length r)
lora      w                               a (d1 x r), b (r x d2)
pissa     w_res                           a (d1 x r), b (r x d2)
full      (none)                          w
frozen    w                               (none)
========  ==============================  ======================

Frozen arrays are marked read-only so accidental in-place updates fail loudly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DimensionMismatch, InvalidInput, MissingTensor
from .linalg import SvdFactors

METHODS = ("svfit", "lora", "pissa", "full", "frozen")
LOW_RANK = ("svfit", "lora", "pissa")

_PARTS = {
    "svfit": (("sigma_r",), ("u_r", "v_r", "w_e")),
    "lora": (("a", "b"), ("w",)),
    "pissa": (("a", "b"), ("w_res",)),
    "full": (("w",), ()),
    "frozen": ((), ("w",)),
}


def trainable_count(method: str, d1: int, d2: int, r: int = 0) -> int:
    """Trainable scalars of one adapted d1 x d2 matrix, without building it."""
    if method == "svfit":
        return r
    if method in ("lora", "pissa"):
        return r * (d1 + d2)
    if method == "full":
        return d1 * d2
    if method == "frozen":
        return 0
    raise InvalidInput(f"unknown method {method!r}; expected one of {METHODS}")


def _flat(a: np.ndarray) -> np.ndarray:
    """(batch, rows, n) -> (rows, batch * n); 2-D input passes through."""
    if a.ndim == 3:
        return a.transpose(1, 0, 2).reshape(a.shape[1], -1)
    return a


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C")
    a.setflags(write=False)
    return a


@dataclass
class LayerGradients:
    params: dict[str, np.ndarray]
    d_input: np.ndarray


@dataclass
class AdapterLayer:
    """One adapted linear map.

    ``forward`` and ``backward`` take column batches, either ``(d2, n)`` or
    stacked as ``(batch, d2, n)``; stacked slices are computed independently.
    """

    method: str
    d1: int
    d2: int
    rank: int
    trainable: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, np.ndarray] = field(default_factory=dict)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (2, 3) or x.shape[-2] != self.d2:
            raise DimensionMismatch(f"expected input with {self.d2} rows, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        t, f = self.trainable, self.frozen
        if self.method == "svfit":
            return f["u_r"] @ (t["sigma_r"][:, None] * (f["v_r"].T @ x)) + f["w_e"] @ x
        if self.method == "lora":
            return f["w"] @ x + t["a"] @ (t["b"] @ x)
        if self.method == "pissa":
            return f["w_res"] @ x + t["a"] @ (t["b"] @ x)
        if self.method == "full":
            return t["w"] @ x
        return f["w"] @ x

    def backward(self, x, grad_out) -> LayerGradients:
        """Gradients of a scalar loss given ``grad_out = dL/d(forward(x))``."""
        x = self._check_input(x)
        g = np.asarray(grad_out, dtype=np.float64)
        expected = x.shape[:-2] + (self.d1, x.shape[-1])
        if g.shape != expected:
            raise DimensionMismatch(f"grad_out shape {g.shape} does not match output {expected}")
        t, f = self.trainable, self.frozen
        if self.method == "svfit":
            proj_in = f["v_r"].T @ x
            proj_out = f["u_r"].T @ g
            d_sigma = np.einsum("ij,ij->i", _flat(proj_out), _flat(proj_in))
            d_x = f["v_r"] @ (t["sigma_r"][:, None] * proj_out) + f["w_e"].T @ g
            return LayerGradients({"sigma_r": d_sigma}, d_x)
        if self.method in ("lora", "pissa"):
            base = f["w"] if self.method == "lora" else f["w_res"]
            bx = t["b"] @ x
            atg = t["a"].T @ g
            return LayerGradients(
                {"a": _flat(g) @ _flat(bx).T, "b": _flat(atg) @ _flat(x).T},
                base.T @ g + t["b"].T @ atg,
            )
        if self.method == "full":
            return LayerGradients({"w": _flat(g) @ _flat(x).T}, t["w"].T @ g)
        return LayerGradients({}, f["w"].T @ g)

    def merge(self) -> np.ndarray:
        """Fold the adapter into one dense d1 x d2 matrix."""
        t, f = self.trainable, self.frozen
        if self.method == "svfit":
            return (f["u_r"] * t["sigma_r"]) @ f["v_r"].T + f["w_e"]
        if self.method == "lora":
            return f["w"] + t["a"] @ t["b"]
        if self.method == "pissa":
            return f["w_res"] + t["a"] @ t["b"]
        if self.method == "full":
            return t["w"].copy()
        return f["w"].copy()

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.trainable.values())

    def to_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        """Name every buffer ``<prefix>.<method>.<part>``; vectors become 1 x n."""
        out = {}
        for part, value in {**self.trainable, **self.frozen}.items():
            out[f"{prefix}.{self.method}.{part}"] = np.atleast_2d(value)
        return out


def from_tensors(method: str, parts: dict[str, np.ndarray]) -> AdapterLayer:
    """Rebuild a layer from the ``part -> array`` map written by :meth:`to_tensors`."""
    if method not in METHODS:
        raise InvalidInput(f"unknown method {method!r}")
    train_names, frozen_names = _PARTS[method]
    missing = [p for p in train_names + frozen_names if p not in parts]
    if missing:
        raise MissingTensor(f"{method} adapter is missing {', '.join(missing)}")
    extra = set(parts) - set(train_names + frozen_names)
    if extra:
        raise InvalidInput(f"unexpected {method} buffers: {sorted(extra)}")
    trainable = {p: np.array(parts[p], dtype=np.float64) for p in train_names}
    frozen = {p: _readonly(parts[p]) for p in frozen_names}
    if method == "svfit":
        trainable["sigma_r"] = trainable["sigma_r"].ravel()
        d1, d2, r = frozen["u_r"].shape[0], frozen["v_r"].shape[0], frozen["u_r"].shape[1]
        shapes_ok = (frozen["v_r"].shape[1] == r and trainable["sigma_r"].size == r
                     and frozen["w_e"].shape == (d1, d2))
    elif method in ("lora", "pissa"):
        base = frozen["w" if method == "lora" else "w_res"]
        (d1, d2), r = base.shape, trainable["a"].shape[1]
        shapes_ok = trainable["a"].shape == (d1, r) and trainable["b"].shape == (r, d2)
    else:
        w = trainable.get("w", frozen.get("w"))
        (d1, d2), r, shapes_ok = w.shape, 0, True
    if not shapes_ok:
        raise DimensionMismatch(f"inconsistent {method} buffer shapes")
    return AdapterLayer(method, d1, d2, r, trainable, frozen)


def init_svfit(w, r: int, factors: SvdFactors | None = None) -> AdapterLayer:
    """Freeze the singular bases of ``w`` and train its top-``r`` singular values.

    The residual is formed by subtraction, so ``U_r diag(sigma_r) V_r^T + w_e``
    reproduces ``w`` to rounding.
    """
    w = linalg.as_matrix(w, "w")
    f = factors if factors is not None else linalg.svd(w)
    sub = linalg.split_subspaces(f, r)
    w_e = w - sub.approx()
    return AdapterLayer(
        "svfit", w.shape[0], w.shape[1], sub.cut_rank,
        trainable={"sigma_r": sub.sigma_r.copy()},
        frozen={"u_r": _readonly(sub.u_r), "v_r": _readonly(sub.v_r), "w_e": _readonly(w_e)},
    )


def init_lora(w, r: int, seed) -> AdapterLayer:
    """``a ~ N(0, 1/r)`` from the seeded generator, ``b = 0``."""
    w = linalg.as_matrix(w, "w")
    d1, d2 = w.shape
    r = linalg._check_rank(r, min(d1, d2))
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d1, r)) / np.sqrt(r)
    return AdapterLayer(
        "lora", d1, d2, r,
        trainable={"a": a, "b": np.zeros((r, d2))},
        frozen={"w": _readonly(w)},
    )


def init_pissa(w, r: int, factors: SvdFactors | None = None) -> AdapterLayer:
    """Principal-triple init: ``a = U_r sqrt(S_r)``, ``b = sqrt(S_r) V_r^T``."""
    w = linalg.as_matrix(w, "w")
    f = factors if factors is not None else linalg.svd(w)
    sub = linalg.split_subspaces(f, r)
    root = np.sqrt(sub.sigma_r)
    a = np.ascontiguousarray(sub.u_r * root)
    b = np.ascontiguousarray(root[:, None] * sub.v_r.T)
    return AdapterLayer(
        "pissa", w.shape[0], w.shape[1], sub.cut_rank,
        trainable={"a": a, "b": b},
        frozen={"w_res": _readonly(w - a @ b)},
    )


def init_full(w) -> AdapterLayer:
    w = linalg.as_matrix(w, "w")
    return AdapterLayer("full", w.shape[0], w.shape[1], 0, trainable={"w": w.copy()})


def init_frozen(w) -> AdapterLayer:
    w = linalg.as_matrix(w, "w")
    return AdapterLayer("frozen", w.shape[0], w.shape[1], 0, frozen={"w": _readonly(w)})


def make_adapter(method: str, w, r: int = 0, seed: int = 0,
                 factors: SvdFactors | None = None) -> AdapterLayer:
    if method == "svfit":
        return init_svfit(w, r, factors)
    if method == "lora":
        return init_lora(w, r, seed)
    if method == "pissa":
        return init_pissa(w, r, factors)
    if method == "full":
        return init_full(w)
    if method == "frozen":
        return init_frozen(w)
    raise InvalidInput(f"unknown method {method!r}; expected one of {METHODS}")


_TENSOR_NAME = re.compile(r"^(?P<prefix>.+)\.(?P<method>svfit|lora|pissa|full|frozen)\.(?P<part>\w+)$")


def split_adapter_tensors(tensors: dict[str, np.ndarray]
                          ) -> tuple[dict[str, AdapterLayer], dict[str, np.ndarray]]:
    """Group ``<prefix>.<method>.<part>`` tensors into layers keyed by prefix.

    Returns ``(layers, rest)``; ``rest`` holds every tensor that is not part
    of an adapter, in original order.
    """
    groups: dict[str, tuple[str, dict[str, np.ndarray]]] = {}
    rest: dict[str, np.ndarray] = {}
    for name, value in tensors.items():
        match = _TENSOR_NAME.match(name)
        if match is None:
            rest[name] = value
            continue
        prefix, method = match["prefix"], match["method"]
        seen_method, parts = groups.setdefault(prefix, (method, {}))
        if seen_method != method:
            raise InvalidInput(f"{prefix} mixes {seen_method} and {method} buffers")
        parts[match["part"]] = value
    layers = {prefix: from_tensors(method, parts) for prefix, (method, parts) in groups.items()}
    return layers, rest
