import pytest

from hdg_audit.inequalities import AuditResult
from hdg_audit.parallel import ParallelSweepRunner
from hdg_audit.utils import UnknownInequalityError


def _fake_audit(inequality, k, level, mode, samples, seed, gamma, null_tol):
    return AuditResult(inequality, k, level, 0.5 / 2 ** level, 10, mode, 2.0, True, float("nan"), samples, seed)


@pytest.fixture
def fake_audit(mocker):
    return mocker.patch("hdg_audit.parallel.audit_level", side_effect=_fake_audit)


class TestParallelSweepRunner:
    def test_results_keep_input_order(self, fake_audit):
        runner = ParallelSweepRunner(use_cache=False, max_workers=3, show_progress=False)
        ids = ["lift-bound", "simplex-trace", "brenner-mean"]
        sweeps = runner.run(ids, k=1, levels=3)
        assert [s.inequality for s in sweeps] == ids
        for sweep in sweeps:
            assert [r.level for r in sweep.results] == [0, 1, 2]
            assert sweep.verdict == "pass"
        assert fake_audit.call_count == 9

    def test_cache_is_reused(self, fake_audit, tmp_path):
        runner = ParallelSweepRunner(cache_dir=str(tmp_path), show_progress=False)
        runner.run(["lift-bound"], k=1, levels=2)
        runner.run(["lift-bound"], k=1, levels=2)
        assert fake_audit.call_count == 2

    def test_cache_can_be_cleared(self, fake_audit, tmp_path):
        runner = ParallelSweepRunner(cache_dir=str(tmp_path), show_progress=False)
        runner.run(["lift-bound"], k=1, levels=2)
        runner.clear_cache("lift-bound")
        runner.run(["lift-bound"], k=1, levels=2)
        assert fake_audit.call_count == 4

    def test_unknown_id_fails_before_work(self, fake_audit):
        runner = ParallelSweepRunner(use_cache=False, show_progress=False)
        with pytest.raises(UnknownInequalityError):
            runner.run(["lift-bound", "holder"], k=1, levels=2)
        fake_audit.assert_not_called()

    def test_worker_errors_propagate(self, mocker):
        mocker.patch("hdg_audit.parallel.audit_level", side_effect=RuntimeError("boom"))
        runner = ParallelSweepRunner(use_cache=False, show_progress=False)
        with pytest.raises(RuntimeError, match="boom"):
            runner.run(["lift-bound"], k=1, levels=1)

    def test_parameters_are_forwarded(self, fake_audit):
        runner = ParallelSweepRunner(use_cache=False, max_workers=1, show_progress=False)
        runner.run(["lift-bound"], k=2, levels=1, mode="sample", samples=40, seed=5, gamma="top", null_tol=1e-9)
        fake_audit.assert_called_once_with("lift-bound", 2, 0, "sample", 40, 5, "top", 1e-9)
