import numpy as np
import pytest

from ppmediator.features import SimilarityTable, layout_for
from ppmediator.harness.data import HypConfig, records_in_memory
from ppmediator.parser import default_grammar
from ppmediator.scenegen import GenConfig, generate_dataset


@pytest.fixture(scope="session")
def grammar():
    return default_grammar()


@pytest.fixture(scope="session")
def planted():
    """500 generated scenes, 32x32, unary noise 0.3, synonym noise 0.2, 10+10 hypotheses."""
    cfg = GenConfig(synonym_noise=0.2)
    scenes = generate_dataset(cfg, 500, seed=0)
    layout = layout_for(cfg.categories, cfg.prepositions)
    sims = SimilarityTable.from_categories(cfg.categories)
    records = records_in_memory(scenes, cfg.get_grammar(), layout, sims, HypConfig(k=10, M=10, noise=0.3))
    return {"cfg": cfg, "scenes": scenes, "layout": layout, "sims": sims, "records": records}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small():
    """A 40-scene dataset with 4 segmentations and 5 parses per scene, for fast harness tests."""
    cfg = GenConfig(synonym_noise=0.2)
    scenes = generate_dataset(cfg, 40, seed=100)
    layout = layout_for(cfg.categories, cfg.prepositions)
    sims = SimilarityTable.from_categories(cfg.categories)
    records = records_in_memory(scenes, cfg.get_grammar(), layout, sims, HypConfig(k=5, M=4))
    return {"cfg": cfg, "scenes": scenes, "layout": layout, "sims": sims, "records": records}


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
