"""Weight-entangled supernet: shared store, prefix slicing, forward/backward.

The store holds one tensor per name, sized for the architecture it was built
for (the space maximum for a supernet, the subnet itself for a standalone
network). A subnet reads the leading block of every tensor:

=================  ==========================  =======================
tensor             shape in the store          region used by ``arch``
=================  ==========================  =======================
embed.w / .b       (in, E) / (E,)              [:in, :e] / [:e]
blocks.i.ln1.*     (E,)                        [:e]
blocks.i.attn.wq   (E, H_i*dh)  (same wk, wv)  [:e, :h_i*dh]
blocks.i.attn.bq   (H_i*dh,)    (same bk, bv)  [:h_i*dh]
blocks.i.attn.wo   (H_i*dh, E)                 [:h_i*dh, :e]
blocks.i.attn.bo   (E,)                        [:e]
blocks.i.ln2.*     (E,)                        [:e]
blocks.i.mlp.w1    (E, M_i) / b1 (M_i,)        [:e, :m_i] / [:m_i]
blocks.i.mlp.w2    (M_i, E) / b2 (E,)          [:m_i, :e] / [:e]
norm.g / .b        (E,)                        [:e]
head.w / .b        (E, C) / (C,)               [:e, :C] / [:C]
=================  ==========================  =======================

with ``m_i = ceil(r_i * e)`` and heads taken as contiguous leading blocks.
Blocks ``i >= depth`` are inactive. A block computes
``h + attn(ln1(h))`` then ``h + mlp(ln2(h))``; the classifier reads the
token mean of ``norm(h)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .data import Dataset
from .errors import InputError, NumericError
from .rng import SeededRng, positional_trunc_normal
from .space import Architecture, SearchSpace

PROJECTIONS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2")
LN_EPS = 1e-5


@dataclass
class OptimConfig:
    lr: float = 1e-3
    min_lr: float = 2e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 32


def tensor_shapes(arch: Architecture, head_dim: int, input_dim: int, num_classes: int) -> dict:
    """Ordered ``name -> shape`` table for a store (or slice) built for ``arch``."""
    e = arch.embed_dim
    shapes = {"embed.w": (input_dim, e), "embed.b": (e,)}
    for i in range(arch.depth):
        inner = arch.head_nums[i] * head_dim
        m = arch.hidden(i)
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (e,), p + "ln1.b": (e,),
            p + "attn.wq": (e, inner), p + "attn.bq": (inner,),
            p + "attn.wk": (e, inner), p + "attn.bk": (inner,),
            p + "attn.wv": (e, inner), p + "attn.bv": (inner,),
            p + "attn.wo": (inner, e), p + "attn.bo": (e,),
            p + "ln2.g": (e,), p + "ln2.b": (e,),
            p + "mlp.w1": (e, m), p + "mlp.b1": (m,),
            p + "mlp.w2": (m, e), p + "mlp.b2": (e,),
        })
    shapes.update({"norm.g": (e,), "norm.b": (e,), "head.w": (e, num_classes), "head.b": (num_classes,)})
    return shapes


def _kind(name: str) -> str:
    if name.endswith(".g"):
        return "gain"
    if name == "embed.w" or name == "head.w" or any(name.endswith(p) for p in PROJECTIONS):
        return "weight"
    return "bias"


class SliceMap:
    """Leading-prefix regions an architecture occupies, per tensor name."""

    def __init__(self, regions: dict):
        self.regions = regions

    def __getitem__(self, name):
        return self.regions[name]

    def __contains__(self, name):
        return name in self.regions

    def extents(self, name) -> tuple:
        return tuple(s.stop for s in self.regions[name])

    def issubset(self, other: "SliceMap") -> bool:
        for name in self.regions:
            if name not in other.regions:
                return False
            if any(a > b for a, b in zip(self.extents(name), other.extents(name))):
                return False
        return True

    def mask(self, name, shape) -> np.ndarray:
        """Boolean array of ``shape``, True inside this map's region for ``name``."""
        out = np.zeros(shape, dtype=np.bool_)
        if name in self.regions:
            out[tuple(slice(0, min(s.stop, n)) for s, n in zip(self.regions[name], shape))] = True
        return out


def slice_map(arch: Architecture, head_dim: int, input_dim: int, num_classes: int) -> SliceMap:
    shapes = tensor_shapes(arch, head_dim, input_dim, num_classes)
    return SliceMap({n: tuple(slice(0, s) for s in shp) for n, shp in shapes.items()})


class SupernetWeights:
    """Shared parameter store plus AdamW state, sized for ``shape_arch``."""

    def __init__(self, shape_arch: Architecture, head_dim: int, input_dim: int, num_classes: int,
                 params: dict, state: dict | None = None, epoch: int = 0):
        self.shape_arch = shape_arch
        self.head_dim = int(head_dim)
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.params = params
        self.state = state if state is not None else {n: K.AdamState(p.shape) for n, p in params.items()}
        self.epoch = epoch

    @property
    def names(self):
        return list(self.params)

    def shapes(self) -> dict:
        return tensor_shapes(self.shape_arch, self.head_dim, self.input_dim, self.num_classes)

    def slice(self, arch: Architecture) -> SliceMap:
        if not arch.dominated_by(self.shape_arch):
            raise InputError(f"architecture {arch} does not fit in a store shaped for {self.shape_arch}")
        return slice_map(arch, self.head_dim, self.input_dim, self.num_classes)

    def view(self, arch: Architecture) -> dict:
        """``name -> view`` of the active region for every tensor ``arch`` uses."""
        sm = self.slice(arch)
        return {n: self.params[n][r] for n, r in sm.regions.items()}

    def copy(self) -> "SupernetWeights":
        state = {}
        for n, s in self.state.items():
            c = K.AdamState(s.m.shape)
            c.m[...], c.v[...], c.steps[...] = s.m, s.v, s.steps
            state[n] = c
        return SupernetWeights(self.shape_arch, self.head_dim, self.input_dim, self.num_classes,
                               {n: p.copy() for n, p in self.params.items()}, state, self.epoch)

    def arrays(self):
        """Every array in the store (params then m, v, steps), in a fixed order."""
        for n in self.params:
            yield "param/" + n, self.params[n]
        for n in self.params:
            s = self.state[n]
            yield "m/" + n, s.m
            yield "v/" + n, s.v
            yield "steps/" + n, s.steps

    def equals(self, other: "SupernetWeights") -> bool:
        """Bit-exact equality of shapes, parameters and optimizer state."""
        mine, theirs = dict(self.arrays()), dict(other.arrays())
        if mine.keys() != theirs.keys():
            return False
        return all(a.shape == theirs[k].shape and a.tobytes() == theirs[k].tobytes() for k, a in mine.items())


def _fresh_tensor(name, shape, seed, init_scale, mode):
    kind = _kind(name)
    if kind == "gain":
        return np.ones(shape)
    if kind == "bias" or mode == "zeros" or init_scale == 0:
        return np.zeros(shape)
    return positional_trunc_normal(seed, name, shape, init_scale)


def init_weights(space: SearchSpace, seed: int | SeededRng, init_scale: float = 0.02,
                 arch: Architecture | None = None) -> SupernetWeights:
    """Fresh store for ``arch`` (default: the space maximum).

    Projection weights are truncated normals with std ``init_scale`` keyed by
    ``(seed, name, row, col)``; biases are zero, layernorm gains one. Because
    values are keyed by position, ``init_weights(.., arch=a)`` equals the
    ``a``-prefix of ``init_weights(..)`` with the same seed.
    """
    if isinstance(seed, SeededRng):
        seed = seed.child_seed()
    arch = space.max_arch if arch is None else arch
    shapes = tensor_shapes(arch, space.head_dim, space.input_dim, space.num_classes)
    params = {n: _fresh_tensor(n, shp, seed, init_scale, "random") for n, shp in shapes.items()}
    return SupernetWeights(arch, space.head_dim, space.input_dim, space.num_classes, params)


# --------------------------------------------------------------------- forward
def forward(weights: SupernetWeights, arch: Architecture, x: np.ndarray, keep_features: bool = False):
    """Logits for a batch ``x`` of shape (B, L, input_dim) using only ``slice(arch)``."""
    if x.ndim != 3 or x.shape[-1] != weights.input_dim:
        raise InputError(f"batch of shape {x.shape} does not match input_dim {weights.input_dim}")
    P = weights.view(arch)
    caches = []
    h = K.linear(x, P["embed.w"], P["embed.b"])
    features = []
    for i in range(arch.depth):
        p = f"blocks.{i}."
        a, c_ln1 = K.layernorm(h, P[p + "ln1.g"], P[p + "ln1.b"], LN_EPS)
        att, c_att = K.attention(a, P[p + "attn.wq"], P[p + "attn.wk"], P[p + "attn.wv"], P[p + "attn.wo"],
                                 arch.head_nums[i], P[p + "attn.bq"], P[p + "attn.bk"], P[p + "attn.bv"],
                                 P[p + "attn.bo"])
        h = h + att
        u, c_ln2 = K.layernorm(h, P[p + "ln2.g"], P[p + "ln2.b"], LN_EPS)
        z = K.linear(u, P[p + "mlp.w1"], P[p + "mlp.b1"])
        g, c_gelu = K.gelu(z)
        h = h + K.linear(g, P[p + "mlp.w2"], P[p + "mlp.b2"])
        caches.append((c_ln1, c_att, u, c_ln2, g, c_gelu))
        if keep_features:
            features.append(h)
    n, c_norm = K.layernorm(h, P["norm.g"], P["norm.b"], LN_EPS)
    pooled = n.mean(axis=1)
    logits = K.linear(pooled, P["head.w"], P["head.b"])
    cache = (arch, P, x, caches, c_norm, pooled, features)
    return logits, cache


def backward(glogits: np.ndarray, cache) -> dict:
    """Gradients (shaped like the active regions) for every tensor the subnet read."""
    arch, P, x, caches, c_norm, pooled, _ = cache
    G = {}
    gpooled, G["head.w"], G["head.b"] = K.linear_backward(glogits, pooled, P["head.w"])
    L = x.shape[1]
    gn = np.repeat(gpooled[:, None, :] / L, L, axis=1)
    gh, G["norm.g"], G["norm.b"] = K.layernorm_backward(gn, c_norm)
    for i in reversed(range(arch.depth)):
        p = f"blocks.{i}."
        c_ln1, c_att, u, c_ln2, g, c_gelu = caches[i]
        gg, G[p + "mlp.w2"], G[p + "mlp.b2"] = K.linear_backward(gh, g, P[p + "mlp.w2"])
        gz = K.gelu_backward(gg, c_gelu)
        gu, G[p + "mlp.w1"], G[p + "mlp.b1"] = K.linear_backward(gz, u, P[p + "mlp.w1"])
        gx2, G[p + "ln2.g"], G[p + "ln2.b"] = K.layernorm_backward(gu, c_ln2)
        gh = gh + gx2
        ga = K.attention_backward(gh, c_att)
        for key in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            G[p + "attn." + key] = ga[key]
        gx1, G[p + "ln1.g"], G[p + "ln1.b"] = K.layernorm_backward(ga["x"], c_ln1)
        gh = gh + gx1
    _, G["embed.w"], G["embed.b"] = K.linear_backward(gh, x, P["embed.w"])
    return G


def loss_and_grads(weights, arch, x, y):
    logits, cache = forward(weights, arch, x)
    loss, glogits = K.cross_entropy(logits, y)
    return loss, backward(glogits, cache)


def subnet_loss(weights, arch, x, y) -> float:
    logits, _ = forward(weights, arch, x)
    return K.cross_entropy(logits, y)[0]


def train_step(weights: SupernetWeights, arch: Architecture, x, y, opt: OptimConfig,
               lr: float | None = None, frozen: SliceMap | None = None) -> float:
    """One AdamW step on ``arch``'s slice; nothing outside the slice is written.

    ``frozen`` additionally pins a region (parameters and moments). Weight
    decay applies to 2-D weights only. A non-finite loss or gradient raises
    NumericError before any entry is modified.
    """
    lr = opt.lr if lr is None else lr
    sm = weights.slice(arch)
    loss, grads = loss_and_grads(weights, arch, x, y)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} for {arch}")
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {n} for {arch}")
    for n, g in grads.items():
        region = sm[n]
        mask = None
        if frozen is not None and n in frozen:
            mask = ~frozen.mask(n, g.shape)
        wd = opt.weight_decay if weights.params[n].ndim == 2 else 0.0
        K.adamw_step(weights.params[n], g, weights.state[n], lr, opt.betas, wd, opt.eps, region=region, mask=mask)
    return loss


def evaluate(weights: SupernetWeights, arch: Architecture, dataset: Dataset, batch_size: int = 256):
    """Top-1 accuracy and mean cross-entropy over ``dataset`` in index order.

    The mean loss is an exactly-rounded sum (``math.fsum``) of per-sample
    losses, so the result does not depend on how samples are grouped.
    """
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    correct = 0
    losses = []
    for xb, yb in dataset.batches(batch_size):
        logits, _ = forward(weights, arch, xb)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        losses.extend((-logp[np.arange(len(yb)), yb]).tolist())
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(dataset), math.fsum(losses) / len(dataset)


def block_features(weights: SupernetWeights, arch: Architecture, x: np.ndarray) -> list:
    """Post-residual hidden state (B, L, embed_dim) after every active block."""
    _, cache = forward(weights, arch, x, keep_features=True)
    return cache[-1]


# ------------------------------------------------------------------ grow / crop
def grow(weights: SupernetWeights, target: Architecture, seed: int | SeededRng | None = None,
         init_mode: str = "random", std: float = 0.02, source: Architecture | None = None) -> SupernetWeights:
    """Standalone store for ``target`` built on a trained smaller network.

    The ``source`` slice (default: the whole store) is copied bit-exactly into
    the leading region; everything else is fresh: ``random`` draws the
    supernet init scheme with ``std``, ``zeros`` zero-fills projections and
    biases. Layernorm gains start at one in both modes, so a zero-filled
    appended block is an identity map.
    """
    source = weights.shape_arch if source is None else source
    if not source.dominated_by(target):
        raise InputError(f"grow target {target} does not dominate source {source}")
    if init_mode not in ("random", "zeros"):
        raise InputError(f"unknown init_mode {init_mode!r}")
    if isinstance(seed, SeededRng):
        seed = seed.child_seed()
    seed = 0 if seed is None else seed
    src = weights.view(source)
    shapes = tensor_shapes(target, weights.head_dim, weights.input_dim, weights.num_classes)
    params = {}
    for n, shp in shapes.items():
        t = _fresh_tensor(n, shp, seed, std, init_mode)
        if n in src:
            t[tuple(slice(0, s) for s in src[n].shape)] = src[n]
        params[n] = t
    return SupernetWeights(target, weights.head_dim, weights.input_dim, weights.num_classes, params)


def crop(weights: SupernetWeights, target: Architecture) -> SupernetWeights:
    """Standalone store for ``target`` holding the prefix slice of ``weights``."""
    if not target.dominated_by(weights.shape_arch):
        raise InputError(f"crop target {target} is not dominated by {weights.shape_arch}")
    params = {n: v.copy() for n, v in weights.view(target).items()}
    return SupernetWeights(target, weights.head_dim, weights.input_dim, weights.num_classes, params)
