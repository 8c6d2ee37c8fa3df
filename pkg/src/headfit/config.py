"""Run configuration with strict key validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import FormatError
from .pose_refine import LMSettings

# JSON key -> LMSettings attribute (names match one to one).
_LM_KEYS = {
    "max_iterations", "initial_damping", "damping_increase", "damping_decrease",
    "gradient_tolerance", "step_tolerance", "jacobian", "fd_step",
}


@dataclass
class ProjectConfig:
    """Everything a fit or sweep run reads besides its input files.

    JSON spelling uses "lambda" for the regularization weight; the attribute
    is ``lam`` since "lambda" is reserved in Python.
    """

    lam: float = 100.0
    iterations: int = 9
    azimuth_step: float = 15.0
    elevation_limit: float = 30.0
    edge_factor: float = 8.0
    scalp_weight: float = 1.0
    seed: int = 0
    threads: int = 1
    lm: LMSettings = field(default_factory=LMSettings)

    def __post_init__(self):
        if self.lam < 0.0:
            raise FormatError(f"lambda must be >= 0, got {self.lam}")
        if self.iterations < 1:
            raise FormatError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 < self.azimuth_step <= 360.0:
            raise FormatError(f"azimuth_step must be in (0, 360], got {self.azimuth_step}")
        if not 0.0 <= self.elevation_limit <= 90.0:
            raise FormatError(f"elevation_limit must be in [0, 90], got {self.elevation_limit}")
        if self.edge_factor <= 0.0:
            raise FormatError(f"edge_factor must be positive, got {self.edge_factor}")
        if self.scalp_weight < 0.0:
            raise FormatError(f"scalp_weight must be >= 0, got {self.scalp_weight}")
        if self.threads < 1:
            raise FormatError(f"threads must be >= 1, got {self.threads}")

    @classmethod
    def from_dict(cls, data: dict) -> "ProjectConfig":
        if not isinstance(data, dict):
            raise FormatError("config must be a JSON object")
        data = dict(data)
        kwargs = {}
        if "lambda" in data:
            kwargs["lam"] = float(data.pop("lambda"))
        lm_data = data.pop("lm", {})
        if not isinstance(lm_data, dict):
            raise FormatError("config key 'lm' must be an object")
        unknown_lm = set(lm_data) - _LM_KEYS
        if unknown_lm:
            raise FormatError(f"unknown lm config keys: {sorted(unknown_lm)}")
        known = {f.name for f in fields(cls)} - {"lam", "lm"}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        kwargs.update(data)
        try:
            lm = LMSettings(**lm_data)
            return cls(lm=lm, **kwargs)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"invalid config value: {exc}") from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    def replace(self, **kwargs) -> "ProjectConfig":
        data = self.to_dict()
        lm = data.pop("lm")
        data.update({("lambda" if k == "lam" else k): v for k, v in kwargs.items() if k != "lm"})
        if "lm" in kwargs:
            lm = kwargs["lm"] if isinstance(kwargs["lm"], dict) else asdict(kwargs["lm"])
        data["lm"] = lm
        return ProjectConfig.from_dict(data)
