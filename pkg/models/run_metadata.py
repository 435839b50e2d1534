"""
Run metadata model for the run registry
"""
from dataclasses import dataclass, asdict
from datetime import datetime, timezone
from typing import Dict, Any, Optional
import uuid

from dateutil import parser as date_parser


@dataclass
class RunMetadata:
    """
    Tracks one train or eval invocation; the only record that carries wall-clock time
    """
    run_id: str
    command: str
    start_time: str
    end_time: Optional[str] = None
    duration_seconds: float = 0.0
    tafe_version: str = "1.0.0"
    config: Dict[str, Any] = None
    output_dir: Optional[str] = None
    iterations_completed: int = 0
    final_loss: Optional[float] = None
    miou: Optional[float] = None
    mdice: Optional[float] = None
    error_summary: Dict[str, str] = None

    def __post_init__(self):
        """Initialize default values"""
        if self.config is None:
            self.config = {}
        if self.error_summary is None:
            self.error_summary = {}

    @staticmethod
    def create_new(command: str, tafe_version: str, config: Dict[str, Any], output_dir: Optional[str] = None):
        """Create a new run metadata instance"""
        return RunMetadata(
            run_id=str(uuid.uuid4()),
            command=command,
            start_time=datetime.now(timezone.utc).isoformat(),
            tafe_version=tafe_version,
            config=config,
            output_dir=output_dir
        )

    def finish(self):
        """Mark run as finished and calculate duration"""
        self.end_time = datetime.now(timezone.utc).isoformat()
        start = date_parser.isoparse(self.start_time)
        end = date_parser.isoparse(self.end_time)
        self.duration_seconds = (end - start).total_seconds()

    def to_dict(self):
        """Convert to dictionary"""
        return asdict(self)
