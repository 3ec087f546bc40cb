import pytest

from app.bench import POINTS_PER_INSTANCE, benchmark, synthetic_workload
from app.merging import timed_merge


def test_merge_step_meets_latency_budget():
    report = benchmark(prev=200, cur=50, channels=256, repeats=5)
    assert report.merging_ms == pytest.approx(report.similarity_ms + report.matching_ms + report.updating_ms)
    assert report.merging_ms <= 20.0
    assert report.decoder_ms is None


def test_workload_copies_merge_into_the_map():
    instance_map, current = synthetic_workload(prev=40, cur=10, channels=32)
    merged, _ = timed_merge(instance_map, current, 1.75, len(current) * POINTS_PER_INSTANCE)
    assert merged.point_count == 50 * POINTS_PER_INSTANCE
    assert 40 + 5 <= len(merged.records) < 40 + 10
    assert sum(r.point_ids.size for r in merged.records) == merged.point_count


def test_decoder_timing_is_optional():
    report = benchmark(prev=5, cur=4, channels=8, repeats=1, decoder_points=40)
    assert report.decoder_ms is not None and report.decoder_ms >= 0.0
