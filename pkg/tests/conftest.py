import numpy as np
import pytest

from semvqa.answer_space import AnnotationRecord


def make_record(qid, answers, tokens=("what", "is", "it"), scene="img0"):
    """Pad ``answers`` to ten annotators by repeating the last one."""
    answers = list(answers)
    answers += [answers[-1]] * (10 - len(answers))
    return AnnotationRecord(qid, tuple(tokens), scene, tuple(answers))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_data():
    """Default world, shifted split, 5000/2000 records (seed 0)."""
    from semvqa.harness import ExperimentConfig, build_seed_data
    return build_seed_data(ExperimentConfig(), 0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
