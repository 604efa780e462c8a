import numpy as np
import pytest

from geofuse import gradcheck as gc
from geofuse.gradcheck import PIPELINES, GradcheckReport, MicroConfig, gradcheck, relative_error
from geofuse.tensor import ContractError, Tensor


def corrupt(monkeypatch, op_name, factor=1.1):
    """Scale the backward rule of one op so its gradients come out wrong."""
    original = Tensor._make.__func__

    def make(cls, data, parents, op, rule):
        if op == op_name:
            inner = rule

            def rule(g):
                return tuple(None if r is None else r * factor for r in inner(g))

        return original(cls, data, parents, op, rule)

    monkeypatch.setattr(Tensor, "_make", classmethod(make))


class TestGradcheck:
    @pytest.mark.parametrize("pipeline", PIPELINES)
    def test_pipeline_passes(self, pipeline):
        report = gradcheck(pipeline)
        assert report.passed, report.to_dict()
        assert report.n_scalars > 0 and report.nonfinite_path is None

    @pytest.mark.parametrize("alias", ["static_pipeline", "dynamic_pipeline", "mlp_forward", "backbone_loss"])
    def test_aliases(self, alias):
        assert gc.ALIASES[alias] in PIPELINES

    def test_unknown_pipeline(self):
        with pytest.raises(ContractError):
            gradcheck("nope")

    @pytest.mark.parametrize("op,pipeline", [("softmax", "softmax"), ("softmax", "cross_attention"),
                                             ("layer_norm", "gated_fuse"), ("matmul", "mlp")])
    def test_corrupted_rule_fails(self, monkeypatch, op, pipeline):
        corrupt(monkeypatch, op)
        report = gradcheck(pipeline)
        assert not report.passed
        assert report.max_rel_err >= 1e-4

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_nonfinite_reports_path(self, monkeypatch):
        def build(pipeline, micro):
            x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
            return gc._Problem(lambda: x.log().sum(), [("x", x)])

        monkeypatch.setattr(gc, "_build", build)
        report = gradcheck("matmul")
        assert not report.passed
        assert report.nonfinite_path is not None and report.nonfinite_path.endswith("x")

    def test_rejects_float32(self, monkeypatch):
        def build(pipeline, micro):
            x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
            return gc._Problem(lambda: (x * x).sum(), [("x", x)])

        monkeypatch.setattr(gc, "_build", build)
        with pytest.raises(ContractError):
            gradcheck("matmul")

    def test_alternate_micro(self):
        micro = MicroConfig(vision_hw=(2, 3), geometry_hw=(2, 3), frames=1, bottleneck_len=1, prompt_len=1)
        assert gradcheck("dynamic", micro).passed

    def test_relative_error(self):
        assert relative_error(1e-9, 0.0) == 1e-9
        assert relative_error(100.0, 101.0) == pytest.approx(1 / 101)

    def test_report_dict(self):
        r = GradcheckReport("x", 0.5, "p", 3, 1e-4, False)
        assert set(r.to_dict()) == {"pipeline", "passed", "max_rel_err", "worst_path", "n_scalars", "tol",
                                    "nonfinite_path"}
