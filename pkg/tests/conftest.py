import numpy as np
import pytest

from mctcap.config import desk_config
from mctcap.data import make_examples, toy_dataset
from mctcap.decoder import DecoderConfig
from mctcap.embedder import ElmoConfig, build_vocab
from mctcap.encoder import EncoderConfig
from mctcap.model import CaptionModel


@pytest.fixture(scope="session")
def toy():
    return toy_dataset(seed=7, n_images=64)


@pytest.fixture(scope="session")
def toy_vocab(toy):
    _, captions = toy
    return build_vocab([c for caps in captions.captions.values() for c in caps], min_count=1)


@pytest.fixture(scope="session")
def toy_examples(toy):
    features, captions = toy
    return make_examples(features, captions, features.image_ids)


def make_model(vocab, mode="MCT", seed=0, **dims):
    enc = EncoderConfig.desk(**dims)
    dec = DecoderConfig.desk(**{k: v for k, v in dims.items() if k != "d_feat"})
    return CaptionModel.initialize(enc, dec, ElmoConfig.desk(emb=dec.d_model), vocab, mode, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk():
    return desk_config()


# one PASS/FAIL line per acceptance criterion in the terminal summary

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None or report.skipped:
        return
    number, title = crit
    ok = _criteria.get(number, (title, True))[1]
    if report.failed or report.when == "call":
        ok = ok and report.passed
    _criteria[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}")
