"""Model / training configuration shared by every workflow."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

SCORERS = ("dot", "summax", "flatten_fc", "lss")
INTERACTIONS = ("din", "average_pool")


@dataclass
class TrainConfig:
    scorer: str = "lss"
    interaction: str = "din"
    use_mqm: bool = True
    use_user_id: bool = False
    n_queries: int = 64
    heads_user: int = 2
    heads_item: int = 2
    head_dim: int = 64
    embed_dim: int = 16
    widths: tuple = (300, 300, 128)
    attention_widths: tuple = (64, 16)
    scorer_dim: int = 16
    lr: float = 1e-3
    batch_size: int = 2048
    epochs: int = 3
    patience: int = 2
    seed: int = 0
    tau_threshold: int = 0  # 0 -> steps per epoch
    tau_floor: float = 1e-3
    embed_init_std: float = 0.05
    batch_norm: bool = True
    deterministic: bool = False
    # vocabulary sizes, filled in from the data
    n_users: int = 0
    n_items: int = 0
    n_categories: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.attention_widths = tuple(int(w) for w in self.attention_widths)
        self.validate()

    def validate(self) -> None:
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")
        if self.interaction not in INTERACTIONS:
            raise ValueError(f"interaction must be one of {INTERACTIONS}, got {self.interaction!r}")
        if not self.use_mqm and self.interaction != "average_pool":
            raise ValueError("use_mqm=false requires interaction=average_pool (no query to attend with)")
        if min(self.heads_user, self.heads_item, self.head_dim, self.n_queries) < 1:
            raise ValueError("heads, head_dim and n_queries must be >= 1")
        if self.n_queries > 65536:
            raise ValueError("query index is stored as u16: n_queries must be <= 65536")
        if not self.widths:
            raise ValueError("widths must name at least one FC layer")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid optimizer settings")
        if not 0 < self.tau_floor <= 1.0:
            raise ValueError("tau_floor must lie in (0, 1]")

    @property
    def item_width(self) -> int:
        """Width D of the concatenated item-attribute embedding (item id, category)."""
        return 2 * self.embed_dim

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


# the ablation lattice, as single-key diffs from the full model
VARIANTS = {
    "fit": {},
    "wo_mqm": {"use_mqm": False, "interaction": "average_pool"},
    "wo_lss": {"scorer": "dot"},
    "summax": {"scorer": "summax"},
    "flatten_fc": {"scorer": "flatten_fc"},
    "two_tower": {"use_mqm": False, "interaction": "average_pool", "scorer": "dot"},
}


def variant(base: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return base.replace(**VARIANTS[name])
