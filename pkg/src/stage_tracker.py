"""
Wall-clock accounting for pipeline stages.
Tracks how long each stage of a command took and how many items it handled.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterator, List


@dataclass
class StageRecord:
    """Represents one completed stage."""
    stage: str  # gen_hpc, train_regression, hpc_sweep, fine_tune, ...
    seconds: float
    items: int
    timestamp: datetime


@dataclass
class StageTracker:
    """Tracks cumulative stage timings for a session."""
    records: List[StageRecord] = field(default_factory=list)

    def add_stage(self, stage: str, seconds: float, items: int = 0) -> StageRecord:
        """
        Add a completed stage to tracking.

        Args:
            stage: Stage name
            seconds: Wall-clock duration
            items: Number of samples, models or spins processed

        Returns:
            StageRecord that was stored
        """
        record = StageRecord(stage=stage, seconds=seconds, items=items, timestamp=datetime.now())
        self.records.append(record)
        return record

    @contextmanager
    def track(self, stage: str, items: int = 0) -> Iterator[None]:
        """Time the enclosed block as one stage; recorded even if the block raises."""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.add_stage(stage, time.perf_counter() - start, items)

    @property
    def total_seconds(self) -> float:
        return sum(r.seconds for r in self.records)

    @property
    def total_stages(self) -> int:
        return len(self.records)

    def get_summary(self) -> Dict:
        """
        Get summary statistics grouped by stage name.

        Returns:
            Dictionary with the total time and per-stage seconds, items and runs
        """
        stages: Dict[str, Dict] = {}
        for r in self.records:
            entry = stages.setdefault(r.stage, {"seconds": 0.0, "items": 0, "runs": 0})
            entry["seconds"] += r.seconds
            entry["items"] += r.items
            entry["runs"] += 1

        return {
            "total_seconds": self.total_seconds,
            "total_stages": self.total_stages,
            "stages": stages,
        }

    def get_formatted_summary(self) -> str:
        summary = self.get_summary()

        if summary["total_stages"] == 0:
            return "No stages recorded."

        lines = [f"⏱️  Total time: {summary['total_seconds']:.1f} s"]
        lines.append("\n📋 By Stage:")
        for stage, stats in summary["stages"].items():
            items = f", {stats['items']:,} items" if stats["items"] else ""
            lines.append(f"  • {stage}: {stats['seconds']:.1f} s ({stats['runs']} runs{items})")
        return "\n".join(lines)


# Global stage tracker instance
_global_tracker = StageTracker()


def get_stage_tracker() -> StageTracker:
    """Get the global stage tracker instance."""
    return _global_tracker


def reset_stage_tracker():
    """Reset the global stage tracker."""
    global _global_tracker
    _global_tracker = StageTracker()
