from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

PLACEMENTS = ("none", "full", "skip1", "alternating", "back-half")
AC_ROUTINGS = ("ac", "ac-mix", "random-ablation")
TRANSFORMS = ("mad", "variance", "identity", "optimal")


def placement_mask(placement: Union[str, list], L: int) -> list:
    """Which of the L layers (0-based here) use adaptive routing.

    Layer 0 never does: it has no previous assignment to anchor on.
    ``skip1`` leaves one extra standard layer before the first adaptive one,
    ``back-half`` covers the last floor(L/2) layers.
    """
    if not isinstance(placement, str):
        mask = [bool(v) for v in placement]
        if len(mask) != L:
            raise ValueError(f"placement mask has length {len(mask)}, expected {L}")
        if mask and mask[0]:
            raise ValueError("the first MoE layer cannot use adaptive routing")
        return mask
    if placement == "none":
        return [False] * L
    if placement == "full":
        return [i >= 1 for i in range(L)]
    if placement == "skip1":
        return [i >= 2 for i in range(L)]
    if placement == "alternating":
        return [i >= 1 and i % 2 == 1 for i in range(L)]
    if placement == "back-half":
        return [i >= max(1, L - L // 2) for i in range(L)]
    raise ValueError(f"unknown placement {placement!r}; choose from {PLACEMENTS}")


@dataclass
class AdamConfig:
    lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 100


@dataclass
class ModelConfig:
    L: int = 4
    d: int = 16
    d_ff: int = 32
    E: int = 8
    k: int = 2
    p: Optional[float] = None  # top-p threshold; replaces top-k when set
    placement: Union[str, list] = "skip1"
    routing: str = "ac"
    transform: str = "mad"
    normalize: str = "inverse"
    lam: float = 1.0
    lambda_aux: float = 0.01
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = AdamConfig(**self.optimizer)
        if self.routing not in AC_ROUTINGS:
            raise ValueError(f"unknown routing {self.routing!r}; choose from {AC_ROUTINGS}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; choose from {TRANSFORMS}")
        if self.E < 2 or self.L < 1 or self.d < 1 or self.d_ff < 1:
            raise ValueError("need E >= 2 and positive L, d, d_ff")
        if self.p is None and not 1 <= self.k <= self.E:
            raise ValueError(f"k must satisfy 1 <= k <= E, got k={self.k}")
        if self.p is not None and not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        placement_mask(self.placement, self.L)

    def layer_modes(self) -> list:
        return [self.routing if ac else "standard" for ac in placement_mask(self.placement, self.L)]

    def to_dict(self) -> dict:
        return asdict(self)
