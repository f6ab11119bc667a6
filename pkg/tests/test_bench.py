import pytest

from pvedit.bench import aux_bytes, bench_size, format_report, run_bench
from pvedit.errors import ConfigError


def test_bench_row_agrees_with_naive():
    row = bench_size(96, 80, d=16, dv=8, reps=1)
    assert row.deviation <= 1e-5 and row.naive_time > 0 and row.streaming_time > 0


def test_naive_memory_grows_streaming_flat():
    naive = [aux_bytes("naive", 64, m, 16, 16) for m in (128, 512, 2048)]
    stream = [aux_bytes("streaming", 64, m, 16, 16) for m in (128, 512, 2048)]
    assert naive[0] < naive[1] < naive[2]
    assert len(set(stream)) == 1
    # quadrupling m roughly quadruples the naive score buffers
    assert naive[2] / naive[1] > 3


def test_run_bench_report():
    rep = run_bench([16, 32], d=8, dv=8, reps=1, fixed_n=16)
    assert [r["n"] for r in rep["rows"]] == [16, 32]
    assert len(format_report(rep).splitlines()) == 3


@pytest.mark.parametrize("kw", [dict(sizes=[]), dict(sizes=[0]), dict(sizes=[8], reps=0), dict(sizes=[8], block=0)])
def test_invalid_grid(kw):
    with pytest.raises(ConfigError):
        run_bench(**kw)
