import pytest

from promptgad import tensor_core
from promptgad.selftest import (
    flipped_backward,
    format_results,
    gradient_suite,
    hungarian_suite,
    metric_suite,
    permutation_suite,
)


def _by_name(results):
    return {r.name: r for r in results}


def test_gradient_suite_passes_one_seed():
    results = gradient_suite(seeds=[0])
    assert results and all(r.passed for r in results), [r.line() for r in results if not r.passed]
    assert {"grad/composite/full_composite", "grad/primitive/gelu"} <= set(_by_name(results))


@pytest.mark.parametrize("cls,broken", [
    (tensor_core._GELU, "grad/primitive/gelu"),
    (tensor_core._Softmax, "grad/primitive/softmax"),
    (tensor_core._LayerNorm, "grad/primitive/layer_norm"),
])
def test_injected_sign_error_is_caught(cls, broken):
    with flipped_backward(cls):
        results = _by_name(gradient_suite(seeds=[0]))
    assert not results[broken].passed
    assert results[broken].max_error > 1e-2
    # the context manager restores the real backward
    assert _by_name(gradient_suite(seeds=[0]))[broken].passed


def test_quick_suites_pass():
    for r in (hungarian_suite(count=10), metric_suite(count=10), permutation_suite(seeds=range(2))):
        assert r.passed, r.line()


def test_report_lists_each_suite_with_max_error():
    results = [hungarian_suite(count=5), metric_suite(count=5)]
    text = format_results(results)
    lines = text.splitlines()
    assert lines[0].split("\t")[:5] == ["suite", "checks", "max_error", "tolerance", "status"]
    assert [ln.split("\t")[0] for ln in lines[1:3]] == ["hungarian", "metrics"]
    assert all(ln.split("\t")[4] == "PASS" for ln in lines[1:3])
    assert lines[-1] == "# 2/2 suites passed"
