"""Model configuration and strict JSON (de)serialization."""
import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

REDUCTIONS = ("wavelet", "avg_pool", "linear_strided")
READOUTS = ("coarsest", "concat_all")
HEADS = ("token", "pooled", "none")
GATES = ("position", "channel", "global")


def default_dims(d1, levels, cap_factor=4):
    """Width schedule d_l = min(d1 * 2**(l-1), cap_factor * d1)."""
    return [min(d1 * 2 ** i, cap_factor * d1) for i in range(levels)]


@dataclass
class HrtConfig:
    vocab_size: int = 16
    max_len: int = 128
    levels: int = 3
    dims: list = field(default_factory=lambda: [32, 64, 128])
    heads: int = 4
    blocks_per_level: int = 2
    level_blocks: list = None
    reduction: str = "wavelet"
    cross_resolution: bool = True
    shared_scale_modules: bool = False
    readout: str = "coarsest"
    head: str = "token"
    num_classes: int = 0
    lambda_recon: float = 0.1
    dropout: float = 0.1
    scale_bias: bool = True
    bias_slope_init: float = 1.0
    gate: str = "position"
    cross_heads: int = 1
    ffn_ratio: int = 4
    pad_id: int = 0
    seed: int = 0

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if self.level_blocks is not None:
            self.level_blocks = [int(b) for b in self.level_blocks]
        self.validate()

    def validate(self):
        L = self.levels
        if L < 1:
            raise ConfigError(f"levels must be >= 1, got {L}")
        if len(self.dims) != L:
            raise ConfigError(f"dims has {len(self.dims)} entries but levels={L}")
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"dims must be positive: {self.dims}")
        if any(a > b for a, b in zip(self.dims, self.dims[1:])):
            raise ConfigError(f"dims must be non-decreasing: {self.dims}")
        if self.heads < 1 or any(d % self.heads for d in self.dims):
            raise ConfigError(f"every width in {self.dims} must be divisible by heads={self.heads}")
        for a, b in zip(self.dims, self.dims[1:]):
            if min(a, b) % self.cross_heads:
                raise ConfigError(f"cross attention width {min(a, b)} not divisible by cross_heads={self.cross_heads}")
        if self.max_len < 1 or self.max_len % 2 ** (L - 1):
            raise ConfigError(f"max_len={self.max_len} must be a positive multiple of 2**(levels-1)={2 ** (L - 1)}")
        if self.blocks_per_level < 0:
            raise ConfigError("blocks_per_level must be >= 0")
        if self.level_blocks is not None:
            if len(self.level_blocks) != L or any(int(b) < 0 for b in self.level_blocks):
                raise ConfigError(f"level_blocks must list {L} non-negative counts, got {self.level_blocks}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == "pooled" and self.num_classes < 2:
            raise ConfigError("pooled head needs num_classes >= 2")
        if self.gate not in GATES:
            raise ConfigError(f"gate must be one of {GATES}, got {self.gate!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lambda_recon < 0:
            raise ConfigError("lambda_recon must be >= 0")
        if self.bias_slope_init < 0:
            raise ConfigError("bias_slope_init must be >= 0")
        if self.shared_scale_modules and len(set(self.dims)) == len(self.dims):
            raise ConfigError("shared_scale_modules needs at least two levels of equal width to share")

    def blocks_at(self, i):
        """Number of blocks at 0-based level ``i``."""
        return self.blocks_per_level if self.level_blocks is None else self.level_blocks[i]

    @property
    def d_out(self):
        if self.readout == "concat_all":
            return sum(self.dims)
        return self.dims[-1]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def from_dict(cls, d, where=""):
    """Build dataclass ``cls`` from ``d``, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{where or cls.__name__}: {e}") from None


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
