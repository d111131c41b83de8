import pytest

from tasdr.config import PipelineConfig
from tasdr.harness import run_trend_comparison


@pytest.fixture(scope="session")
def trend_summary(tmp_path_factory):
    """The 5-seed dual-supervision comparison, run once for the session.

    Feeds both the directional-ablation criterion and the robustness
    protocol criterion.
    """
    out_dir = str(tmp_path_factory.mktemp("trend"))
    config = PipelineConfig(synthetic=True)
    summary = run_trend_comparison(config, out_dir)
    summary["out_dir"] = out_dir
    return summary
