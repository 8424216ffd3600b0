from collections import deque
from typing import Deque, Dict, List

_TIMING_BUFFER_SIZE = 200


def _percentile(values: List[float], p: float) -> float:
    if not values:
        return 0.0
    values_sorted = sorted(values)
    k = max(0, min(len(values_sorted) - 1, int(round((p / 100.0) * (len(values_sorted) - 1)))))
    return values_sorted[k]


class StepTimings:
    """Rolling per-step wall-clock samples for the training loop."""

    def __init__(self, maxlen: int = _TIMING_BUFFER_SIZE) -> None:
        self._samples: Deque[float] = deque(maxlen=maxlen)
        self._total_ms = 0.0
        self._count = 0

    def record(self, elapsed_ms: float) -> None:
        self._samples.append(float(elapsed_ms))
        self._total_ms += float(elapsed_ms)
        self._count += 1

    def snapshot(self) -> Dict[str, float]:
        """Return mean over all steps and p50/p95 over the last samples."""
        samples = list(self._samples)
        mean = self._total_ms / self._count if self._count else 0.0
        return {
            "steps": float(self._count),
            "mean_ms": mean,
            "p50_ms": _percentile(samples, 50.0),
            "p95_ms": _percentile(samples, 95.0),
        }
