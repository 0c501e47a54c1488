"""Tests for the 64-bit finite-difference gradient checks."""

import pytest
import torch

import ssmvdm.gradcheck as gradcheck
from ssmvdm import GradientCheckError, ValidationError
from ssmvdm._internal.scan import PrefixScan
from ssmvdm.gradcheck import (
    CHECK_NAMES,
    CheckResult,
    GradCheckReport,
    check_gradients,
    corrupted_scan_backward,
    run_gradcheck,
)
from ssmvdm.numerics import precision


class _DoubledBackward(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return 2 * g


class TestCheckGradients:
    def test_exact_gradient_passes(self):
        w = torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64)
        result = check_gradients("cube", lambda v: (v["w"] ** 3).sum(), {"w": w})
        assert result.passed
        assert result.evaluated == 3
        assert result.max_rel_error < 1e-8

    def test_wrong_backward_fails(self):
        w = torch.tensor([0.5, -1.5], dtype=torch.float64)
        result = check_gradients("doubled", lambda v: _DoubledBackward.apply(v["w"]).sum(), {"w": w})
        assert not result.passed
        assert result.max_rel_error == pytest.approx(0.5, rel=1e-6)
        assert result.worst_param == "w"

    def test_parameters_left_untouched(self):
        w = torch.tensor([1.0, 2.0], dtype=torch.float64)
        check_gradients("square", lambda v: (v["w"] ** 2).sum(), {"w": w})
        assert w.tolist() == [1.0, 2.0]

    def test_zero_gradient_with_rounding_noise_passes(self):
        x = torch.tensor([0.3, -1.2, 2.5, 0.7, -0.4], dtype=torch.float64)

        def centered(v):
            shifted = x + v["b"]
            return ((shifted - shifted.mean()) ** 2).sum()

        result = check_gradients("centered", centered, {"b": torch.tensor([0.25], dtype=torch.float64)})
        assert result.passed
        assert result.max_rel_error < 1e-4

    def test_requires_float64(self):
        with pytest.raises(ValidationError, match="float64"):
            check_gradients("f32", lambda v: v["w"].sum(), {"w": torch.ones(2)})


class TestReport:
    def test_lines_and_failures(self):
        report = GradCheckReport(
            [CheckResult("a", 1e-9, "w", 4), CheckResult("b", 0.02, "x", 6)]
        )
        assert not report.passed
        assert report.failures == ["b"]
        lines = report.lines()
        assert lines[0].startswith("PASS a max_rel_err=")
        assert lines[1].startswith("FAIL b max_rel_err=")
        assert lines[1].endswith("(6 entries)")
        with pytest.raises(GradientCheckError) as exc_info:
            report.raise_for_failures()
        assert exc_info.value.failures == ["b"]

    def test_empty_report_passes(self):
        GradCheckReport().raise_for_failures()


class TestSuite:
    def test_every_layer_is_covered(self):
        assert set(CHECK_NAMES) >= {
            "prefix_scan",
            "selective_scan",
            "selective_scan_exact",
            "mamba_block",
            "mamba_block_backward",
            "bidirectional_mamba",
            "temporal_attention",
            "spatial_linear_attention",
            "resnet_block",
            "time_embedding",
        }

    def test_full_suite_passes(self):
        report = run_gradcheck(seed=0)
        assert [r.name for r in report.results] == list(CHECK_NAMES)
        assert report.passed, report.lines()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_resnet_block_biases_checked(self, seed):
        (result,) = run_gradcheck(seed=seed, only=["resnet_block"]).results
        assert result.passed, result

    def test_subset(self, mocker):
        spy = mocker.spy(gradcheck, "check_gradients")
        report = run_gradcheck(seed=1, only=["prefix_scan", "time_embedding"])
        assert [r.name for r in report.results] == ["prefix_scan", "time_embedding"]
        assert spy.call_count == 2
        assert report.passed

    def test_default_precision_restored(self):
        run_gradcheck(only=["prefix_scan"])
        assert torch.get_default_dtype() == torch.float32

    @pytest.mark.parametrize("kwargs", [{"only": ["softmax"]}, {"corrupt": "conv"}])
    def test_unknown_names(self, kwargs):
        with pytest.raises(ValidationError):
            run_gradcheck(**kwargs)


class TestCorruption:
    def test_corrupted_scan_is_detected(self):
        report = run_gradcheck(only=["prefix_scan", "selective_scan", "temporal_attention"], corrupt="pscan")
        assert report.failures == ["prefix_scan", "selective_scan"]
        failed = {r.name: r for r in report.results}["prefix_scan"]
        assert failed.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-3)

    def test_hook_restores_backward(self):
        original = PrefixScan.backward
        with corrupted_scan_backward():
            assert PrefixScan.backward is not original
        assert PrefixScan.backward is original

    def test_hook_scales_gradients(self):
        with precision("float64"):
            A = torch.full((1, 4, 1, 1), 0.5, requires_grad=True)
            X = torch.ones(1, 4, 1, 1, requires_grad=True)
            with corrupted_scan_backward(scale=2.0):
                PrefixScan.apply(A, X).sum().backward()
            corrupted = X.grad.clone()
            X.grad = None
            A.grad = None
            PrefixScan.apply(A, X).sum().backward()
        assert torch.allclose(corrupted, 2 * X.grad)
