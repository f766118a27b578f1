"""Search space, architecture encoding, subspace partition and sampling."""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

from .errors import CapacityError, ConfigurationError, InputError


@dataclass(frozen=True)
class AttributeGrid:
    """Inclusive arithmetic grid ``min, min+step, ..., max``."""

    min: float
    max: float
    step: float

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigurationError(f"grid step must be positive, got {self.step}")
        if self.min > self.max:
            raise ConfigurationError(f"grid min {self.min} exceeds max {self.max}")
        n = (self.max - self.min) / self.step
        if abs(n - round(n)) > 1e-9:
            raise ConfigurationError(f"grid ({self.min}, {self.max}, {self.step}): range is not a multiple of step")

    @property
    def values(self) -> tuple:
        n = int(round((self.max - self.min) / self.step))
        vals = [round(self.min + i * self.step, 10) for i in range(n + 1)]
        if all(float(v).is_integer() for v in (self.min, self.max, self.step)):
            return tuple(int(v) for v in vals)
        return tuple(float(v) for v in vals)

    def __len__(self):
        return len(self.values)

    def __contains__(self, value):
        return any(abs(value - v) < 1e-9 for v in self.values)


def _grid(spec) -> AttributeGrid:
    return spec if isinstance(spec, AttributeGrid) else AttributeGrid(*spec)


@dataclass(frozen=True)
class SearchSpace:
    embed_dim: AttributeGrid
    mlp_ratio: AttributeGrid
    head_num: AttributeGrid
    depth: AttributeGrid
    head_dim: int
    input_dim: int
    num_classes: int
    seq_len: int

    def __post_init__(self):
        for name in ("embed_dim", "mlp_ratio", "head_num", "depth"):
            object.__setattr__(self, name, _grid(getattr(self, name)))
        for name in ("head_dim", "input_dim", "num_classes", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("embed_dim", "head_num", "depth"):
            g = getattr(self, name)
            if not all(float(v).is_integer() for v in (g.min, g.max, g.step)) or g.min < 1:
                raise ConfigurationError(f"{name} grid must hold positive integers")
        if self.mlp_ratio.min <= 0:
            raise ConfigurationError("mlp_ratio grid must be positive")

    @property
    def max_arch(self) -> "Architecture":
        d = self.depth.values[-1]
        return Architecture(self.embed_dim.values[-1], d,
                            (self.mlp_ratio.values[-1],) * d, (self.head_num.values[-1],) * d)

    @property
    def min_arch(self) -> "Architecture":
        d = self.depth.values[0]
        return Architecture(self.embed_dim.values[0], d,
                            (self.mlp_ratio.values[0],) * d, (self.head_num.values[0],) * d)

    def count(self) -> int:
        per_block = len(self.mlp_ratio) * len(self.head_num)
        return sum(len(self.embed_dim) * per_block**d for d in self.depth.values)

    def validate(self, arch: "Architecture") -> None:
        if arch.embed_dim not in self.embed_dim:
            raise InputError(f"embed_dim {arch.embed_dim} not on grid {self.embed_dim.values}")
        if arch.depth not in self.depth:
            raise InputError(f"depth {arch.depth} not on grid {self.depth.values}")
        if len(arch.mlp_ratios) != arch.depth or len(arch.head_nums) != arch.depth:
            raise InputError("per-block lists must have length depth")
        for r in arch.mlp_ratios:
            if r not in self.mlp_ratio:
                raise InputError(f"mlp ratio {r} not on grid {self.mlp_ratio.values}")
        for h in arch.head_nums:
            if h not in self.head_num:
                raise InputError(f"head count {h} not on grid {self.head_num.values}")


def hidden_width(ratio: float, embed_dim: int) -> int:
    """MLP hidden width ``ceil(ratio * embed_dim)``."""
    return int(math.ceil(round(ratio * embed_dim, 9)))


@dataclass(frozen=True)
class Architecture:
    embed_dim: int
    depth: int
    mlp_ratios: tuple = field(default=())
    head_nums: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "embed_dim", int(self.embed_dim))
        object.__setattr__(self, "depth", int(self.depth))
        object.__setattr__(self, "mlp_ratios", tuple(float(r) for r in self.mlp_ratios))
        object.__setattr__(self, "head_nums", tuple(int(h) for h in self.head_nums))
        if len(self.mlp_ratios) != self.depth or len(self.head_nums) != self.depth:
            raise InputError(f"architecture lists must have length depth={self.depth}")

    def hidden(self, i: int) -> int:
        return hidden_width(self.mlp_ratios[i], self.embed_dim)

    def encode(self) -> str:
        r = ",".join(f"{x:g}" for x in self.mlp_ratios)
        h = ",".join(str(x) for x in self.head_nums)
        return f"e{self.embed_dim}-d{self.depth}-r{r}-h{h}"

    @classmethod
    def decode(cls, text: str) -> "Architecture":
        try:
            e, d, r, h = text.split("-")
            depth = int(d[1:])
            return cls(int(e[1:]), depth,
                       tuple(float(x) for x in r[1:].split(",")) if depth else (),
                       tuple(int(x) for x in h[1:].split(",")) if depth else ())
        except (ValueError, IndexError) as exc:
            raise InputError(f"cannot decode architecture {text!r}") from exc

    def arch_hash(self) -> str:
        return hashlib.sha1(self.encode().encode()).hexdigest()[:12]

    def dominated_by(self, other: "Architecture") -> bool:
        """True if every attribute of ``self`` is <= the matching one of ``other``."""
        if self.embed_dim > other.embed_dim or self.depth > other.depth:
            return False
        return all(self.mlp_ratios[i] <= other.mlp_ratios[i] and self.head_nums[i] <= other.head_nums[i]
                   for i in range(self.depth))

    def __str__(self):
        return self.encode()


@dataclass(frozen=True)
class SubspacePartition:
    """Nested subspaces ``A_1 c ... c A_K`` bounded by embed-dim and mlp-ratio caps.

    Stage ``k`` (1-based) admits an architecture when its embed dim is at most
    ``embed_caps[k-1]`` and its largest per-block mlp ratio is at most
    ``ratio_caps[k-1]``. Head count and depth are never capped.
    """

    embed_caps: tuple
    ratio_caps: tuple

    def __post_init__(self):
        object.__setattr__(self, "embed_caps", tuple(int(x) for x in self.embed_caps))
        object.__setattr__(self, "ratio_caps", tuple(float(x) for x in self.ratio_caps))
        if not self.embed_caps or len(self.embed_caps) != len(self.ratio_caps):
            raise ConfigurationError("partition needs one embed cap and one ratio cap per stage")
        for caps in (self.embed_caps, self.ratio_caps):
            if any(b < a for a, b in zip(caps, caps[1:])):
                raise ConfigurationError(f"partition caps must be non-decreasing, got {caps}")

    @property
    def K(self) -> int:
        return len(self.embed_caps)

    @classmethod
    def single(cls, space: SearchSpace) -> "SubspacePartition":
        return cls((space.embed_dim.values[-1],), (space.mlp_ratio.values[-1],))

    def check(self, space: SearchSpace) -> None:
        if self.embed_caps[-1] != space.embed_dim.values[-1] or abs(self.ratio_caps[-1] - space.mlp_ratio.values[-1]) > 1e-9:
            raise ConfigurationError("the last stage's caps must equal the space maxima")

    def member(self, arch: Architecture, k: int) -> bool:
        if not 1 <= k <= self.K:
            raise InputError(f"stage {k} outside 1..{self.K}")
        return arch.embed_dim <= self.embed_caps[k - 1] and max(arch.mlp_ratios, default=0.0) <= self.ratio_caps[k - 1] + 1e-12

    def stage_max_arch(self, space: SearchSpace, k: int) -> Architecture:
        """Attribute-wise largest architecture of stage ``k``."""
        e = max((v for v in space.embed_dim.values if v <= self.embed_caps[k - 1]), default=None)
        r = max((v for v in space.mlp_ratio.values if v <= self.ratio_caps[k - 1] + 1e-12), default=None)
        if e is None or r is None:
            raise ConfigurationError(f"stage {k} is empty: caps below grid minima")
        d = space.depth.values[-1]
        return Architecture(e, d, (r,) * d, (space.head_num.values[-1],) * d)


def subspace_of(arch: Architecture, partition: SubspacePartition) -> int:
    """Smallest stage containing ``arch``."""
    for k in range(1, partition.K + 1):
        if partition.member(arch, k):
            return k
    return partition.K


def enumerate_space(space: SearchSpace, cap: int = 10**6):
    """Yield every grid-valid architecture once: depth, embed dim, then blocks in product order."""
    total = space.count()
    if total > cap:
        raise CapacityError(f"space holds {total} architectures, above the cap of {cap}")
    choices = list(itertools.product(space.mlp_ratio.values, space.head_num.values))
    for d in space.depth.values:
        for e in space.embed_dim.values:
            for blocks in itertools.product(choices, repeat=d):
                yield Architecture(e, d, tuple(b[0] for b in blocks), tuple(b[1] for b in blocks))


def stage_choices(space: SearchSpace, partition: SubspacePartition | None, k: int | None):
    if partition is None or k is None:
        return space.embed_dim.values, space.mlp_ratio.values
    if not 1 <= k <= partition.K:
        raise InputError(f"stage {k} outside 1..{partition.K}")
    embeds = tuple(v for v in space.embed_dim.values if v <= partition.embed_caps[k - 1])
    ratios = tuple(v for v in space.mlp_ratio.values if v <= partition.ratio_caps[k - 1] + 1e-12)
    if not embeds or not ratios:
        raise ConfigurationError(f"stage {k} is empty: caps below grid minima")
    return embeds, ratios


def sample_uniform(space: SearchSpace, partition: SubspacePartition | None, k: int | None, rng) -> Architecture:
    """Draw from ``U(A_k)``: embed dim, depth, then (ratio, heads) per block.

    Each attribute is uniform over the grid values the stage caps allow.
    ``partition=None`` or ``k=None`` samples the full space.
    """
    embeds, ratios = stage_choices(space, partition, k)
    heads = space.head_num.values
    e = rng.choice(embeds)
    d = rng.choice(space.depth.values)
    rs, hs = [], []
    for _ in range(d):
        rs.append(rng.choice(ratios))
        hs.append(rng.choice(heads))
    return Architecture(e, d, tuple(rs), tuple(hs))


def param_count(arch: Architecture, space: SearchSpace) -> int:
    """Exact parameter total with every bias and layernorm affine counted.

    input projection ``in*e + e``; per block: Q/K/V ``3*(e*h*dh + h*dh)``,
    output projection ``h*dh*e + e``, two layernorms ``4e``, MLP
    ``e*m + m + m*e + e`` with ``m = ceil(r*e)``; final layernorm ``2e``;
    classifier ``e*C + C``.
    """
    e, dh = arch.embed_dim, space.head_dim
    total = space.input_dim * e + e
    for i in range(arch.depth):
        inner = arch.head_nums[i] * dh
        m = arch.hidden(i)
        total += 3 * (e * inner + inner) + inner * e + e + 4 * e + e * m + m + m * e + e
    total += 2 * e + e * space.num_classes + space.num_classes
    return total


def autoformer_tiny() -> SearchSpace:
    """AutoFormer-T grids with ViT-T conventions (16x16x3 patches, 1000 classes)."""
    return SearchSpace((192, 240, 24), (3.5, 4, 0.5), (3, 4, 1), (12, 14, 1),
                       head_dim=64, input_dim=768, num_classes=1000, seq_len=196)


def toy_space(input_dim: int = 8, num_classes: int = 4, seq_len: int = 8) -> SearchSpace:
    """The 32-architecture toy space: embed {8,16}, ratio {1,2}, heads {1,2}, depth 2."""
    return SearchSpace((8, 16, 8), (1, 2, 1), (1, 2, 1), (2, 2, 1),
                       head_dim=4, input_dim=input_dim, num_classes=num_classes, seq_len=seq_len)


def toy_partition() -> SubspacePartition:
    return SubspacePartition((8, 16), (1, 2))


def mini_space(input_dim: int = 8, num_classes: int = 4, seq_len: int = 8) -> SearchSpace:
    """Desk-scale space with AutoFormer-T proportions (240 architectures).

    embed {16, 20, 24}, mlp ratio {1.5, 2}, heads {2, 3} of width 8, depth {2, 3}.
    """
    return SearchSpace((16, 24, 4), (1.5, 2, 0.5), (2, 3, 1), (2, 3, 1),
                       head_dim=8, input_dim=input_dim, num_classes=num_classes, seq_len=seq_len)


def mini_partition() -> SubspacePartition:
    return SubspacePartition((16, 24), (1.5, 2))
