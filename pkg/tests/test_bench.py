import re

from appnet.bench import run_bench


def test_bench_local_beats_or_matches_hairpin():
    result = run_bench(size=65536, seconds=0.4)
    assert result.local_bps > 0
    assert result.hairpin_bps > 0
    assert result.local_bps >= result.hairpin_bps, (
        f"fast path {result.local_bps:.0f} B/s vs loopback {result.hairpin_bps:.0f} B/s"
    )


def test_bench_csv_row_shape():
    result = run_bench(size=4096, seconds=0.1)
    row = result.csv_row()
    assert re.fullmatch(r"4096,\d+,\d+,\d+\.\d{3}", row)
