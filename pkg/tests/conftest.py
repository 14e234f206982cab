import pytest
import torch

from osad import config as C

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("osad_cache")


@pytest.fixture(scope="session")
def toy_config_path():
    from importlib import resources
    return str(resources.files("osad").joinpath("configs/toy.yaml"))


@pytest.fixture
def toy_cfg(toy_config_path, toy_cache, tmp_path):
    def make(*overrides):
        return C.load_config(toy_config_path, [f"data.cache_dir={toy_cache}", f"output_dir={tmp_path / 'runs'}",
                                               *overrides])
    return make


@pytest.fixture(scope="session")
def small_data(toy_cache):
    from osad.data import DataConfig, prepare_data
    return prepare_data(DataConfig(cache_dir=str(toy_cache), toy_train_per_class=100, toy_test_per_class=20))


@pytest.fixture
def micro_model():
    from osad.networks import ModelConfig, OsdnModel
    torch.manual_seed(0)
    return OsdnModel(ModelConfig(num_classes=2, profile="micro"))


@pytest.fixture(scope="session")
def trained_classifier(small_data):
    """Encoder plus head only, a few clean epochs: enough for both classes to be predicted."""
    from osad.attacks import AttackConfig
    from osad.networks import ModelConfig, OsdnModel
    from osad.training import TrainConfig, fit
    torch.manual_seed(0)
    model = OsdnModel(ModelConfig(num_classes=2, profile="toy", dec=False, dadl=False, ssd=False, caml=False))
    fit(model, small_data, TrainConfig(epochs=4, batch_size=16, attack=AttackConfig("none"), val_attack=False))
    return model


# -- acceptance reporting ----------------------------------------------------------

_CRITERIA: list[tuple[int, bool, str, str]] = []


@pytest.fixture(scope="session")
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    import contextlib

    @contextlib.contextmanager
    def check(number: int, title: str):
        detail: dict = {}
        try:
            yield detail
        except BaseException as exc:
            _CRITERIA.append((number, False, title, f"{type(exc).__name__}: {exc}".splitlines()[0]))
            raise
        _CRITERIA.append((number, True, title, detail.get("msg", "")))
    return check


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, title, msg in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  {msg}".rstrip())
