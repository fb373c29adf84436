from __future__ import annotations

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))
sys.path.insert(0, str(Path(__file__).resolve().parent))

import helpers  # noqa: E402


@pytest.fixture(scope="session")
def synth_train_csv(tmp_path_factory) -> Path:
    docs = helpers.make_synthetic_docs(60, num_classes=4, seed=11, html_noise=True)
    return helpers.write_dataset_csv(tmp_path_factory.mktemp("data") / "train.csv", docs)


@pytest.fixture(scope="session")
def synth_test_csv(tmp_path_factory) -> Path:
    docs = helpers.make_synthetic_docs(20, num_classes=4, seed=12, html_noise=True)
    return helpers.write_dataset_csv(tmp_path_factory.mktemp("data") / "test.csv", docs)


@pytest.fixture(scope="session")
def synth_embeddings(tmp_path_factory) -> Path:
    tokens = sorted(
        {w for words in helpers.TOPIC_WORDS.values() for w in words}
        | set(helpers.FILLER_WORDS)
        | {"more", "amp"}
    )
    return helpers.write_embeddings_file(
        tmp_path_factory.mktemp("emb") / "vectors.txt", tokens, dim=100, seed=5
    )
