"""
Tests for phase timing.
"""

import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from src import performance_monitor
from src.performance_monitor import PerformanceMonitor, get_performance_monitor, track_operation


class TestPerformanceMonitor:
    """Test cases for PerformanceMonitor."""

    @pytest.fixture
    def monitor(self):
        return PerformanceMonitor(max_history=50)

    def test_successful_phase(self, monitor):
        with monitor.track("forward") as metric:
            pass
        assert metric.success
        assert metric.duration >= 0
        stats = monitor.get_stats("forward")
        assert stats.total_runs == 1 and stats.failed_runs == 0

    def test_failed_phase_is_recorded(self, monitor):
        with pytest.raises(ValueError):
            with monitor.track("backward"):
                raise ValueError("boom")
        stats = monitor.get_stats("backward")
        assert stats.failed_runs == 1
        assert monitor.get_recent(1)[0].error_message == "boom"
        assert monitor.get_summary()["error_counts"] == {"backward": 1}

    def test_summary_groups_phases(self, monitor):
        for _ in range(3):
            with monitor.track("forward"):
                pass
        with monitor.track("audit"):
            pass
        summary = monitor.get_summary()
        assert list(summary["phases"]) == ["audit", "forward"]
        assert summary["phases"]["forward"]["runs"] == 3
        assert monitor.get_stats().total_runs == 4

    def test_history_is_bounded(self):
        monitor = PerformanceMonitor(max_history=5)
        for _ in range(8):
            with monitor.track("forward"):
                pass
        assert len(monitor.get_recent(100)) == 5

    def test_clear_history(self, monitor):
        with monitor.track("forward"):
            pass
        monitor.clear_history()
        assert monitor.get_stats().total_runs == 0
        assert monitor.get_summary()["phases"] == {}

    def test_thread_safety(self, monitor):
        def work(_):
            with monitor.track("shard"):
                pass

        with ThreadPoolExecutor(max_workers=4, thread_name_prefix="test-shard") as executor:
            list(executor.map(work, range(40)))
        assert monitor.get_stats("shard").total_runs == 40
        assert all(m.thread_name.startswith("test-shard") for m in monitor.get_recent(40))
        assert threading.current_thread().name not in {m.thread_name for m in monitor.get_recent(40)}

    def test_log_summary(self, monitor, caplog):
        with monitor.track("forward"):
            pass
        with caplog.at_level("INFO", logger="src.performance_monitor"):
            monitor.log_summary()
        assert "Phase forward: 1 runs" in caplog.text


class TestTrackOperation:
    """Test cases for the track_operation decorator."""

    def test_records_on_global_monitor(self, monkeypatch):
        monkeypatch.setattr(performance_monitor, "_performance_monitor", None)

        @track_operation("gen_data")
        def produce(n):
            return n * 2

        assert produce(4) == 8
        assert get_performance_monitor().get_stats("gen_data").total_runs == 1
        assert produce.__name__ == "produce"
