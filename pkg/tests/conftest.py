import importlib.util
import sys
from pathlib import Path

import numpy as np
import pytest

SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"


def _load_script(name):
    spec = importlib.util.spec_from_file_location(name, SCRIPTS / f"{name}.py")
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    spec.loader.exec_module(module)
    return module


make_corpus = _load_script("make_corpus")


@pytest.fixture(scope="session")
def corpus_text():
    return make_corpus.generate_text(400_000, seed=0)


@pytest.fixture(scope="session")
def corpus_tokens(corpus_text):
    return np.frombuffer(corpus_text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory, corpus_text):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_text(corpus_text, encoding="utf-8")
    return path
