from __future__ import annotations

from pathlib import Path

import pytest
import torch

from qava import evalkit, toyvlm
from qava.numcore import RngStream
from qava.questions import Question

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
MAIN_FIXTURE = FIXTURES / "toy-a"
SECOND_FIXTURE = FIXTURES / "toy-b"

# evaluation corpus used against the fixtures: disjoint seed and id prefix
# from the training corpus
EVAL_SEED = 5
EVAL_IMAGES = 32
EVAL_QUESTIONS = 50


def q(qid: str, text: str, kind: str = "other", image_id: str | None = None) -> Question:
    return Question(question_id=qid, text=text, answer_type=kind, image_id=image_id)


@pytest.fixture(scope="session")
def fixture_model():
    if not (MAIN_FIXTURE / "manifest.json").exists():
        pytest.fail(f"fixture checkpoint missing at {MAIN_FIXTURE}; run scripts/make_fixtures.py")
    return toyvlm.load_checkpoint(MAIN_FIXTURE)


@pytest.fixture(scope="session")
def fixture_model64():
    return toyvlm.load_checkpoint(MAIN_FIXTURE, dtype=torch.float64)


@pytest.fixture(scope="session")
def eval_records():
    return evalkit.gen_synthetic(RngStream(EVAL_SEED), EVAL_IMAGES, EVAL_QUESTIONS, prefix="eval")


@pytest.fixture
def random_model64():
    return toyvlm.new_model(seed=11, dtype=torch.float64)


@pytest.fixture(scope="session")
def small_records():
    return evalkit.gen_synthetic(RngStream(3), 4, 6)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
