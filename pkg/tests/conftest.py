import pytest

from medaf.data import SplitSpec, SyntheticSpec
from medaf.experiment import DataConfig, ExperimentConfig, OptimizerConfig
from medaf.network import MedafConfig


def tiny_config(out_dir, **overrides) -> ExperimentConfig:
    """Few-second config: 16x16 images, narrow layers, 10 samples per class."""
    cfg = ExperimentConfig(
        model=MedafConfig(num_experts=3, num_classes=6, input_shape=(1, 16, 16), stem_channels=(4, 6),
                          branch_channels=(6, 8), gate_hidden=8),
        optimizer=OptimizerConfig(lr=0.02, milestones=[1]),
        data=DataConfig(synthetic=SyntheticSpec(size=16, jitter=1), n_per_class=10, split=SplitSpec(),
                        batch_size=16, epochs=2),
        out_dir=str(out_dir),
    )
    return cfg.replace(**overrides)


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path / "run")


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
