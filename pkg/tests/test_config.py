"""Flat key-value experiment config: parsing, validation, round trips."""

from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scal import config
from scal.config import ExperimentConfig
from scal.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def problems(text):
    with pytest.raises(ConfigError) as e:
        config.loads(text)
    return e.value.problems


class TestParse:
    def test_minimal(self):
        cfg = config.loads("seed = 3\n")
        assert cfg.seed == 3 and cfg.dataset.name == "twin_moons"

    def test_sections_aliases_and_bare_strings(self):
        cfg = config.loads(
            "# comment\nseed = 1\ndataset.name = shifted_blobs\ndataset.k = 4\n"
            "training.lambda = 0.5\ntraining.ablation = no_conditions\nmodel.d_hidden = [8]\n"
        )
        assert cfg.dataset.params == {"k": 4}
        assert cfg.training.lam == 0.5 and cfg.training.ablation == "no_conditions"
        assert cfg.model.d_hidden == [8]

    def test_missing_seed_named(self):
        assert any(p.startswith("seed:") for p in problems("training.epochs = 3\n"))

    def test_reports_every_structural_problem(self):
        joined = "\n".join(problems("training.bogus = 1\nmodel.extra = 2\n"))
        for field in ("seed:", "training.bogus", "model.extra"):
            assert field in joined

    def test_reports_every_value_problem(self):
        joined = "\n".join(
            problems("seed = 0\ntraining.ablation = magic\ntraining.momentum = 1.5\ndataset.spin = 2\n")
        )
        for field in ("training.ablation", "training.momentum", "dataset.spin"):
            assert field in joined

    def test_malformed_lines(self):
        assert any("line 2" in p for p in problems("seed = 0\nnot a pair\n"))
        assert any("duplicate" in p for p in problems("seed = 0\nseed = 1\n"))

    @pytest.mark.parametrize(
        "line, field",
        [
            ("seed = -1", "seed"),
            ("training.lambda = -0.1", "training.lambda"),
            ("training.noise_level = 2", "training.noise_level"),
            ("training.epochs = 0", "training.epochs"),
            ("training.flow_through = 1", "training.flow_through"),
            ("model.num_classes = 1", "model.num_classes"),
            ("model.g_hidden = []", "model.g_hidden"),
            ("output.formats = [\"xml\"]", "output.formats"),
            ("dataset.name = spirals", "dataset.name"),
            ("training.predict_head = both", "training.predict_head"),
        ],
    )
    def test_field_level_validation(self, line, field):
        text = line if line.startswith("seed") else "seed = 0\n" + line
        assert any(p.startswith(field) for p in problems(text + "\n"))

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            config.load(tmp_path / "missing.cfg")


class TestRoundTrip:
    @pytest.mark.parametrize("name", ["moons.cfg", "blobs.cfg"])
    def test_shipped_configs(self, name):
        cfg = config.load(CONFIGS / name)
        assert config.loads(config.to_text(cfg)) == cfg

    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(0, 2**31),
        epochs=st.integers(1, 500),
        lam=st.floats(0, 10, allow_nan=False),
        lr0=st.floats(1e-6, 1.0),
        ablation=st.sampled_from(config.ABLATIONS),
        noise=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]),
        flow=st.booleans(),
        hidden=st.lists(st.integers(1, 64), min_size=1, max_size=3),
        directory=st.text(alphabet="abcxyz/_-. ", min_size=1, max_size=12).filter(lambda s: s.strip() == s and s),
        rotation=st.floats(-180, 180),
    )
    def test_parse_serialize_parse(self, seed, epochs, lam, lr0, ablation, noise, flow, hidden, directory, rotation):
        cfg = ExperimentConfig(seed=seed)
        cfg = cfg.replace(
            training={"epochs": epochs, "lam": lam, "lr0": lr0, "ablation": ablation, "noise_level": noise, "flow_through": flow},
            model={"g_hidden": hidden},
            dataset={"rotation": rotation},
            output={"directory": directory},
        )
        once = config.loads(config.to_text(cfg))
        assert once == cfg
        assert config.to_text(once) == config.to_text(cfg)

    def test_dump_and_load(self, tmp_path):
        cfg = ExperimentConfig(seed=9).replace(training={"lam": 0.0})
        config.dump(cfg, tmp_path / "c.cfg")
        assert config.load(tmp_path / "c.cfg") == cfg

    def test_replace_validates(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(seed=0).replace(training={"ablation": "nope"})

    def test_replace_does_not_mutate(self):
        cfg = ExperimentConfig(seed=0)
        cfg.replace(seed=5, training={"epochs": 3})
        assert cfg.seed == 0 and cfg.training.epochs == 100
