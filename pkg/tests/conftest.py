import pytest

from mfim import estimator, simulator


@pytest.fixture(scope="session")
def small_corpus():
    cfg = simulator.SimConfig(num_queries=300, seed=21)
    sessions, gt, annotations = simulator.gen_corpus(cfg)
    return cfg, sessions, gt, annotations


@pytest.fixture(scope="session")
def small_models(small_corpus):
    """Three quickly trained models differing in preset and seed."""
    cfg, sessions, _, annotations = small_corpus
    out = []
    for preset, seed in (("pbm", 0), ("mfim", 1), ("mfim-mtype-serph", 2)):
        tc = estimator.preset_config(preset, epochs=2, seed=seed)
        model, _ = estimator.train(sessions, tc, annotations, cfg.header)
        out.append(model)
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
