import math
from collections import Counter

import numpy as np
import pytest

from locsched.workload import (MB, WorkloadConfig, default_catalog, generate, read_trace, scenario_presets, write_trace,
                               zipf_weights)


@pytest.fixture(scope="module")
def cat():
    return default_catalog()


def roots(events):
    return sorted({ev.instance for ev in events})


def poisson_mass(lam, lo, hi):
    return sum(math.exp(k * math.log(lam) - lam - math.lgamma(k + 1)) for k in range(lo, hi + 1))


def test_poisson_count_bounds(cat):
    # closed form: P(70 <= N <= 130 | lambda=100) is well above 0.99
    assert poisson_mass(100.0, 70, 130) > 0.99
    counts = [len(roots(generate(WorkloadConfig(duration_ms=100_000, rate_rps=1.0, apps=("doc",), seed=s), cat)))
              for s in range(200)]
    inside = sum(70 <= c <= 130 for c in counts) / len(counts)
    assert inside >= 0.97
    assert abs(np.mean(counts) - 100) < 3


def test_concurrency_scales_arrivals(cat):
    def mean_roots(level):
        return np.mean([len(roots(generate(WorkloadConfig(duration_ms=100_000, rate_rps=1.0, apps=("doc",),
                                                          concurrency_level=level, seed=s), cat)))
                        for s in range(40)])
    assert mean_roots(3) / mean_roots(1) == pytest.approx(3.0, rel=0.05)


def test_zipf_popularity(cat):
    w = zipf_weights(3, 1.0)
    assert w == pytest.approx(np.array([1, 1 / 2, 1 / 3]) / (1 + 1 / 2 + 1 / 3))
    ev = generate(WorkloadConfig(duration_ms=1_000_000, rate_rps=10.0, apps=("doc", "ml", "video"), seed=1), cat)
    apps = Counter(e.workflow for e in ev if e.stage in ("validate", "normalize", "split"))
    n = sum(apps.values())
    assert n > 9000
    p = w[0]
    assert abs(apps["doc"] / n - p) < 4 * math.sqrt(p * (1 - p) / n)
    assert apps["doc"] > apps["ml"] > apps["video"]


def test_empirical_process_counts(cat):
    cfg = scenario_presets()["empirical"]
    ev = generate(cfg, cat)
    roots = ("validate", "normalize", "split")
    per_app = Counter(e.workflow for e in ev if e.stage in roots and e.invocation.index == 0)
    assert per_app == {"video": 100, "log": 100, "doc": 100, "ml": 100}


def test_arrivals_sorted_and_deterministic(cat):
    cfg = WorkloadConfig(duration_ms=200_000, rate_rps=2.0, apps=("video", "log"), concurrency_level=2, seed=9)
    a, b = generate(cfg, cat), generate(cfg, cat)
    times = [e.arrival for e in a]
    assert times == sorted(times)
    assert [e.invocation for e in a] == [e.invocation for e in b]


def test_only_roots_emitted(cat):
    ev = generate(WorkloadConfig(duration_ms=100_000, rate_rps=1.0, apps=("video",), seed=2), cat)
    assert {e.stage for e in ev} == {"split"}


def test_trace_roundtrip(cat, tmp_path):
    ev = generate(WorkloadConfig(duration_ms=60_000, rate_rps=2.0, apps=("video", "doc"), seed=4), cat)
    path = tmp_path / "t.jsonl"
    write_trace(path, ev)
    assert read_trace(path) == ev


def test_presets_match_application_shapes(cat):
    video = cat.workflows["video"]
    assert [s.name for s in video.stages] == ["split", "transcode", "merge"]
    assert video.stage("transcode").fan_out == 4
    median = cat.functions["video-split"].input_size.median_bytes
    assert 10 * MB <= median <= 5000 * MB
    assert len(cat.workflows["doc"].stages) == 2
    assert cat.functions["any2md-process"].dep_count == 34
    assert cat.functions["ml-process"].dep_count == 17


def test_config_validation(cat):
    with pytest.raises(ValueError):
        WorkloadConfig(rate_rps=60)
    with pytest.raises(ValueError):
        WorkloadConfig(rate_rps=0.05)
    with pytest.raises(ValueError):
        WorkloadConfig(process="empirical")
    with pytest.raises(ValueError):
        generate(WorkloadConfig(apps=("nope",)), cat)
