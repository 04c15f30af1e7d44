"""
Phase timing for training and audit runs.
"""

import functools
import logging
import statistics
import threading
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import dataclass
from threading import Lock
from typing import Any, Dict, Iterator, List, Optional

logger = logging.getLogger(__name__)


@dataclass
class PhaseMetrics:
    """Timing of a single phase execution."""
    phase: str
    start_time: float
    end_time: Optional[float] = None
    success: bool = False
    error_message: Optional[str] = None
    thread_name: Optional[str] = None

    @property
    def duration(self) -> Optional[float]:
        """Get phase duration in seconds."""
        if self.end_time is None:
            return None
        return self.end_time - self.start_time


@dataclass
class PerformanceStats:
    """Aggregated statistics for one phase (or all phases)."""
    total_runs: int = 0
    failed_runs: int = 0
    total_duration: float = 0.0
    min_duration: float = 0.0
    max_duration: float = 0.0
    avg_duration: float = 0.0
    median_duration: float = 0.0
    p95_duration: float = 0.0


class PerformanceMonitor:
    """Thread-safe record of phase timings."""

    def __init__(self, max_history: int = 10000):
        self.max_history = max_history
        self._metrics: deque = deque(maxlen=max_history)
        self._lock = Lock()
        self._run_counts: Dict[str, int] = defaultdict(int)
        self._error_counts: Dict[str, int] = defaultdict(int)

    @contextmanager
    def track(self, phase: str) -> Iterator[PhaseMetrics]:
        metric = PhaseMetrics(phase=phase, start_time=time.perf_counter(), thread_name=threading.current_thread().name)
        try:
            yield metric
            metric.success = True
        except Exception as e:
            metric.error_message = str(e)
            raise
        finally:
            metric.end_time = time.perf_counter()
            with self._lock:
                self._metrics.append(metric)
                self._run_counts[phase] += 1
                if not metric.success:
                    self._error_counts[phase] += 1

    def get_stats(self, phase: Optional[str] = None) -> PerformanceStats:
        with self._lock:
            relevant = [m for m in self._metrics if phase is None or m.phase == phase]

        durations = sorted(m.duration for m in relevant if m.duration is not None)
        if not durations:
            return PerformanceStats(total_runs=len(relevant))

        p95_index = min(int(len(durations) * 0.95), len(durations) - 1)
        return PerformanceStats(
            total_runs=len(relevant),
            failed_runs=sum(1 for m in relevant if not m.success),
            total_duration=sum(durations),
            min_duration=durations[0],
            max_duration=durations[-1],
            avg_duration=statistics.mean(durations),
            median_duration=statistics.median(durations),
            p95_duration=durations[p95_index],
        )

    def get_summary(self) -> Dict[str, Any]:
        with self._lock:
            phases = sorted(self._run_counts)
            errors = dict(self._error_counts)
        summary: Dict[str, Any] = {"phases": {}, "error_counts": errors}
        for phase in phases:
            stats = self.get_stats(phase)
            summary["phases"][phase] = {
                "runs": stats.total_runs,
                "total_s": stats.total_duration,
                "avg_ms": stats.avg_duration * 1000,
                "p95_ms": stats.p95_duration * 1000,
            }
        return summary

    def log_summary(self) -> None:
        for phase, stats in self.get_summary()["phases"].items():
            logger.info(
                f"Phase {phase}: {stats['runs']} runs, {stats['total_s']:.2f}s total, "
                f"{stats['avg_ms']:.1f}ms avg, {stats['p95_ms']:.1f}ms p95"
            )

    def get_recent(self, limit: int = 10) -> List[PhaseMetrics]:
        with self._lock:
            return list(self._metrics)[-limit:]

    def clear_history(self) -> None:
        with self._lock:
            self._metrics.clear()
            self._run_counts.clear()
            self._error_counts.clear()


# Global performance monitor instance
_performance_monitor: Optional[PerformanceMonitor] = None


def get_performance_monitor() -> PerformanceMonitor:
    """Get the global performance monitor instance."""
    global _performance_monitor
    if _performance_monitor is None:
        _performance_monitor = PerformanceMonitor()
    return _performance_monitor


def track_operation(phase: str):
    """Decorator timing every call of the wrapped function under ``phase``."""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            with get_performance_monitor().track(phase):
                return func(*args, **kwargs)
        return wrapper
    return decorator
