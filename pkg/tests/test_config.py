import json
import re
from pathlib import Path

import pytest

from pimtl import config as C
from pimtl.cli import build_parser

DOC = Path(__file__).resolve().parents[1] / "docs" / "config.md"


def test_defaults_build_module_configs():
    cfg = C.RunConfig()
    assert cfg.model_config().window == 16 and cfg.model_config().n_muscles == 5
    assert cfg.train_config().clip_norm == 5.0
    assert cfg.replace("training", clip_norm=0.0).train_config().clip_norm is None
    # 8 subjects x 5 trials x 2 s x 1000 Hz = 10,000 samples per subject
    assert cfg.synth.n_trials * cfg.synth.duration * cfg.synth.fs == 10_000


def test_toml_round_trip():
    cfg = C.loads("""
seed = 7
[synth]
n_subjects = 3
duration = 1
[experiment]
methods = ["CNN-1"]
fractions = [0.2, 0.4]
""")
    assert cfg.seed == 7 and cfg.synth.n_subjects == 3 and cfg.synth.duration == 1.0
    assert cfg.experiment.methods == ("CNN-1",) and cfg.experiment.fractions == (0.2, 0.4)
    assert C.from_dict(json.loads(cfg.to_json())) == cfg
    assert C.from_dict(json.loads(cfg.to_json())).digest() == cfg.digest()


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "[synth]\nsubjects = 3",
    "[training]\nlr = 'fast'",
    "[model]\nconv_channels = 1.5",
    "[model]\ndense_norm = 'window'",
    "[experiment]\nmethods = ['CNN-9']",
    "[experiment]\nfractions = [0.0]",
    "[sigproc]\nsplit = [0.5, 0.5, 0.5]",
    "[dynamics]\ninertia = -1",
    "not toml ===",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(C.ConfigError):
        C.loads(text)


def test_schema_version_mismatch():
    with pytest.raises(C.SchemaVersionError):
        C.loads("schema_version = 2")


def test_digest_tracks_content():
    a = C.RunConfig()
    assert a.digest() == C.RunConfig().digest()
    assert a.digest() != a.replace(seed=1).digest()


def doc_rows():
    rows = {}
    for line in DOC.read_text().splitlines():
        m = re.match(r"\|\s*(\w*)\s*\|\s*`(\w+)`\s*\|\s*`(.+?)`\s*\|", line)
        if m:
            rows[(m.group(1), m.group(2))] = m.group(3)
    return rows


def test_reference_doc_matches_defaults():
    documented = doc_rows()
    compiled = {(s, k): v for s, k, v in C.reference_rows()}
    assert set(documented) == set(compiled)
    for key, value in compiled.items():
        assert json.loads(documented[key]) == value, key


def help_flags():
    parser = build_parser()
    flags = {a for a in parser._option_string_actions if a.startswith("--")}
    for sub in parser._subparsers._group_actions[0].choices.values():
        flags |= {a for a in sub._option_string_actions if a.startswith("--")}
    return flags - {"--help"}


def test_doc_lists_every_cli_flag():
    doc_flags = set(re.findall(r"^\| `(--[a-z-]+)", DOC.read_text(), re.M))
    assert doc_flags == help_flags()
