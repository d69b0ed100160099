import numpy as np
import pytest
import torch
from hypothesis import settings

from raremed.ehr_data import CodeVocabulary, EhrDataset, PatientRecord

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def make_vocab(n_d=4, n_p=3, n_m=5) -> CodeVocabulary:
    return CodeVocabulary([f"D{i}" for i in range(n_d)], [f"P{i}" for i in range(n_p)], [f"M{i}" for i in range(n_m)])


def make_record(pid, diseases, procedures=(), meds=(0,), n_m=5) -> PatientRecord:
    vec = np.zeros(n_m, dtype=np.int8)
    vec[list(meds)] = 1
    return PatientRecord(pid, list(diseases), list(procedures), vec)


@pytest.fixture
def vocab():
    return make_vocab()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def small_cohort():
    from raremed.ehr_data import split_dataset
    from raremed.synth_cohort import SynthConfig, generate_cohort

    ds, ddi, truth = generate_cohort(SynthConfig(n_patients=120, seed=3))
    return split_dataset(ds, 3), ddi, truth


def dataset_of(records, vocab=None) -> EhrDataset:
    return EhrDataset(list(records), vocab or make_vocab())


# acceptance bookkeeping: criterion number -> [passed, details]
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None or (report.when != "call" and report.passed):
        return
    entry = _CRITERIA.setdefault(crit, [True, []])
    entry[0] = entry[0] and report.passed
    detail = dict(report.user_properties).get("detail")
    if detail and report.when == "call":
        entry[1].append(detail)


@pytest.fixture(autouse=True)
def _criterion_tag(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", mark.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, details = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {'; '.join(details)}")
