from dataclasses import dataclass, field
from typing import Dict


@dataclass
class GradReport:
    """
    Outcome of one finite-difference gradient check
    """
    name: str
    h: float
    tol: float
    errors: Dict[str, float] = field(default_factory=dict)
    passed: bool = False

    @property
    def max_rel_err(self) -> float:
        return max(self.errors.values(), default=0.0)

    def to_dict(self):
        return {
            "name": self.name,
            "max_rel_err": self.max_rel_err,
            "pass": self.passed,
        }
