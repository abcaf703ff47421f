"""Pipeline configuration: one JSON file plus command-line overrides."""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .distances import DEFAULT_KL_EPS
from .propensity import DEFAULT_FORMULA

INPUT_FILES = ("trips", "incidents", "weather", "stations", "edges")


def _default_match():
    return {"method": "nearest_neighbour", "M": 2, "with_replacement": True,
            "caliper": None, "subclass_count": 10}


def _default_forest():
    return {"trees": 500, "mtry": 7, "min_node": 2, "n_jobs": 1, "folds": 5}


@dataclass
class PipelineConfig:
    """Everything a run needs.

    ``data_dir`` holds the five input CSVs (``<name>.csv``); individual files
    can be redirected through ``inputs``.  When ``scenario`` is set the
    ``generate`` stage writes a synthetic scenario into ``data_dir``.
    """
    out: str = "out"
    data_dir: str | None = None
    inputs: dict = field(default_factory=dict)
    seed: int = 0
    interval_min: int = 15
    threshold_min: int = 10
    formula: list = field(default_factory=lambda: list(DEFAULT_FORMULA))
    select: bool = False
    select_alpha: float = 0.05
    polynomial_degree: int = 1
    support_mode: str = "warn"
    support_bins: int = 20
    match: dict = field(default_factory=_default_match)
    kl_eps: float = DEFAULT_KL_EPS
    gross_ridership: str = "disrupted"
    forest: dict = field(default_factory=_default_forest)
    top_k: int = 15
    scenario: dict | None = None

    def __post_init__(self):
        self.match = {**_default_match(), **(self.match or {})}
        self.forest = {**_default_forest(), **(self.forest or {})}
        self.formula = list(self.formula)
        unknown = set(self.inputs) - set(INPUT_FILES)
        if unknown:
            raise ValueError(f"unknown input name(s): {', '.join(sorted(unknown))}")
        if self.support_mode not in ("warn", "trim"):
            raise ValueError("support_mode must be 'warn' or 'trim'")
        if self.gross_ridership not in ("disrupted", "baseline"):
            raise ValueError("gross_ridership must be 'disrupted' or 'baseline'")

    @property
    def out_dir(self):
        return Path(self.out)

    @property
    def data_path(self):
        return Path(self.data_dir) if self.data_dir else self.out_dir / "data"

    def input_path(self, name):
        return Path(self.inputs[name]) if name in self.inputs else self.data_path / f"{name}.csv"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(extra))}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing config file: {path}")
        return cls.from_dict(json.loads(path.read_text()))
