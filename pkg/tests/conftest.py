from pathlib import Path

import pytest

DATA = Path(__file__).resolve().parents[1] / "src" / "redpen" / "data"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def table1_source():
    words = (DATA / "table1.txt").read_text("utf-8").split()
    return ["<sos>"] + words
