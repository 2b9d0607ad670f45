from __future__ import annotations

import numpy as np
import pytest

from pointdistill import synthgen


@pytest.fixture(scope="session")
def source_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpora") / "source"
    return synthgen.make_domain_corpus("source", 3, (96, 96), 24, 11, out)


@pytest.fixture(scope="session")
def target_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpora") / "target"
    return synthgen.make_domain_corpus("target", 3, (96, 96), 24, 12, out)


def textured(h=64, w=64, seed=0, sigma=1.5):
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((h, w)), sigma)
    img -= img.min()
    return img / img.max()


@pytest.fixture(scope="session")
def target_full(tmp_path_factory):
    """Full-size target videos (128 x 128, 64 frames) for occlusion statistics."""
    out = tmp_path_factory.mktemp("corpora") / "target_full"
    return synthgen.make_domain_corpus("target", 6, (128, 128), 64, 21, out)


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
