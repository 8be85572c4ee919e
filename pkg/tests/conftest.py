import pytest

from pimtl import data, model, synth, training


@pytest.fixture(scope="session")
def small_data():
    trials, subjects = synth.generate_dataset(synth.PopulationConfig(),
                                              synth.ExcitationProfile(duration=1.0), 3, 2, 21)
    env, _ = data.preprocess_trials(trials, subjects)
    return data.build_subject_data(env, subjects, 16)


@pytest.fixture(scope="session")
def tiny_cfg():
    return model.ModelConfig(conv_channels=8, hidden=8)


@pytest.fixture(scope="session")
def short_train():
    return training.TrainConfig(max_iter=60, eval_every=20, val_segments=8)


ACCEPTANCE: list[str] = []


@pytest.fixture()
def criterion():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(label: str, ok: bool, detail: str = ""):
        line = f"{label}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
