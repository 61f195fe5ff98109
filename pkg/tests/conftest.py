import json
from pathlib import Path

import numpy as np
import pytest

from ovseg.metrics import evaluate_image, pq_scores
from ovseg.testkit import SceneSpec, gen_scene, synthetic_taxonomy

FIXTURES = Path(__file__).parent / "fixtures"


def scene_family(name):
    """Yield (seed, gt, candidates, taxonomy) for a committed scene family."""
    fam = json.loads((FIXTURES / "scene_families.json").read_text())[name]
    lo, hi = fam["seeds"]
    taxonomy = synthetic_taxonomy(fam["spec"]["num_classes"])
    for seed in range(lo, hi):
        gt, cands = gen_scene(SceneSpec(seed=seed, **fam["spec"]), taxonomy)
        yield seed, gt, cands, taxonomy


def pq_of(pred, gt, taxonomy):
    return pq_scores(evaluate_image(pred, gt, num_classes=len(taxonomy)), taxonomy)


def rect(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one verdict line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
