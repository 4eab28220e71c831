"""Network configuration, field-of-view arithmetic and stride rebasing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

HEADS = ("semantic", "localization")


@dataclass
class ConvSpec:
    kernel: int = 3
    stride: int = 2
    channels: int = 16


@dataclass
class StageSpec:
    blocks: int = 2
    channels: int = 16
    stride: int = 2


def _default_stages():
    return [StageSpec(2, 16, 2), StageSpec(2, 32, 2), StageSpec(2, 64, 2)]


@dataclass
class NetworkConfig:
    """Trunk layout plus head. ``classifier_dilation`` is in output-grid cells."""

    num_categories: int = 3
    head: str = "semantic"
    in_channels: int = 3
    stem: ConvSpec = field(default_factory=ConvSpec)
    stages: list[StageSpec] = field(default_factory=_default_stages)
    target_output_stride: int = 8
    classifier_kernel: int = 3
    classifier_dilation: int = 2
    multilayer_head: bool = False
    head_hidden: int = 64

    def __post_init__(self):
        if isinstance(self.stem, dict):
            self.stem = ConvSpec(**self.stem)
        self.stages = [StageSpec(**s) if isinstance(s, dict) else s for s in self.stages]

    @property
    def out_channels(self) -> int:
        if self.head == "semantic":
            return self.num_categories + 1
        return 4 * self.num_categories

    @property
    def nominal_stride(self) -> int:
        s = self.stem.stride
        for st in self.stages:
            s *= st.stride
        return s

    def validate(self) -> None:
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        k = self.classifier_kernel
        if k < 1 or k % 2 == 0:
            raise ValueError(f"classifier_kernel must be odd and >= 1, got {k}")
        if self.classifier_dilation < 1:
            raise ValueError("classifier_dilation must be >= 1")
        if self.stem.kernel < 1 or self.stem.kernel % 2 == 0:
            raise ValueError("stem kernel must be odd")
        chans = [self.in_channels, self.stem.channels, self.head_hidden]
        chans += [s.channels for s in self.stages]
        if min(chans) < 1 or any(s.blocks < 1 or s.stride < 1 for s in self.stages):
            raise ValueError("channel, block and stride counts must be >= 1")
        rebase_strides(self)

    @property
    def output_stride(self) -> int:
        return self.target_output_stride

    def fov(self) -> int:
        return compute_fov(self.target_output_stride, self.classifier_kernel, self.classifier_dilation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def compute_fov(output_stride: int, kernel: int, dilation: int) -> int:
    """Input-pixel footprint of a dilated classifier on a stride-``output_stride`` grid."""
    return ((kernel - 1) * dilation + 1) * output_stride


@dataclass(frozen=True)
class StageSchedule:
    stride: int  # realized stride of the stage's first conv
    entry_dilation: int  # dilation of that first conv
    dilation: int  # dilation of every later conv in the stage


def rebase_strides(config: NetworkConfig) -> tuple[int, list[StageSchedule]]:
    """Realize the target output stride by trading down-sampling for dilation.

    Walks the stages in order; a stage whose stride would overshoot the target
    runs at stride 1 and every later conv has its dilation multiplied by the
    skipped factor. Returns ``(stem_stride, per-stage schedule)``.
    """
    target = config.target_output_stride
    nominal = config.nominal_stride
    if target < 1 or nominal % target != 0:
        raise ValueError(f"target output stride {target} does not divide nominal stride {nominal}")
    cum = config.stem.stride
    if cum > target:
        raise ValueError(f"stem stride {cum} already exceeds target {target}")
    mult = 1
    sched = []
    for st in config.stages:
        if cum * st.stride <= target:
            cum *= st.stride
            sched.append(StageSchedule(st.stride, mult, mult))
        else:
            sched.append(StageSchedule(1, mult, mult * st.stride))
            mult *= st.stride
    if cum != target:
        raise ValueError(f"strides cannot realize output stride {target} (reached {cum})")
    return config.stem.stride, sched


def output_size(n: int, stride: int) -> int:
    return -(-n // stride)
