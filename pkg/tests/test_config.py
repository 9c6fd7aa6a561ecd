import json
from pathlib import Path
from textwrap import dedent

import pytest

from config import (SECTION_MODELS, TOP_LEVEL_KEYS, SamplerSection, load_config, load_manifest, parse_config,
                    schema_reference)
from coupling import ExchangeModel, ReactionSpec
from errors import ConfigError

CONFIGS = sorted((Path(__file__).resolve().parent.parent / "configs").glob("*.toml"))

MINIMAL = dedent("""
    [grid]
    cells = 4
    cell_width = 0.25

    [state]
    nmax = 4
""")


def _error(text, overrides=None):
    with pytest.raises(ConfigError) as info:
        parse_config(text, overrides)
    return info.value


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.name == "experiment"
    assert cfg.seed == 0
    assert cfg.mode == "diffusion"
    assert cfg.couplings == ()
    assert cfg.species == ("A",)
    assert cfg.solver["dt"] == pytest.approx(0.45 / 128)
    assert cfg.resolved["solver"]["dt"] == cfg.solver["dt"]
    assert cfg.resolved["exchange"] is None


def test_overrides_replace_values():
    cfg = parse_config(MINIMAL, {("", "seed"): 9, ("state", "nmax"): 2, ("solver", "dt"): 1e-3,
                                 ("sampler", "trajectories"): None})
    assert cfg.seed == 9
    assert cfg.nmax == 2
    assert cfg.solver["dt"] == 1e-3
    assert cfg.sampler["trajectories"] == SamplerSection.model_fields["trajectories"].default


def test_unknown_override():
    err = _error(MINIMAL, {("solver", "step"): 0.1})
    assert (err.section, err.key) == ("solver", "step")


def test_misspelled_key_names_section_and_key():
    err = _error(MINIMAL.replace("cells = 4", "cels = 4"))
    assert (err.section, err.key, err.reason) == ("grid", "cels", "unknown key")


def test_missing_required_key():
    err = _error(MINIMAL.replace("cell_width = 0.25", ""))
    assert (err.section, err.key) == ("grid", "cell_width")
    assert "missing" in err.reason


def test_unknown_section():
    err = _error(MINIMAL + "\n[solvr]\ndt = 0.1\n")
    assert (err.section, err.key, err.reason) == ("top-level", "solvr", "unknown section")


def test_wrong_type():
    err = _error(MINIMAL.replace("cells = 4", 'cells = "four"'))
    assert (err.section, err.key) == ("grid", "cells")


def test_missing_grid_section():
    err = _error("[state]\nnmax = 4\n")
    assert (err.section, err.key, err.reason) == ("grid", "*", "missing required section")


def test_field_constraints_name_section_and_key():
    err = _error(MINIMAL + "\n[sampler]\ndt = 0.0\n")
    assert (err.section, err.key) == ("sampler", "dt")
    assert "greater than 0" in err.reason


def test_unknown_choice_is_rejected():
    err = _error(MINIMAL + '\n[[reactions]]\ntemplate = "A->B"\nrate = 1.0\n')
    assert (err.section, err.key) == ("reactions[0]", "template")


def test_override_is_validated():
    err = _error(MINIMAL, {("sampler", "trajectories"): -5})
    assert (err.section, err.key) == ("sampler", "trajectories")


def test_invalid_toml():
    assert _error("[grid\ncells = 4").section == "document"


def test_reaction_errors_carry_the_index():
    text = MINIMAL + dedent("""
        [[reactions]]
        template = "A->0"
        rate = 1.0

        [[reactions]]
        templat = "AA->A"
        rate = 1.0
    """)
    err = _error(text)
    assert (err.section, err.key) == ("reactions[1]", "templat")


def test_dt_above_the_stability_bound():
    err = _error(MINIMAL + "\n[solver]\ndt = 0.1\n")
    assert (err.section, err.key) == ("solver", "dt")
    assert "stability bound" in err.reason


def test_implicit_euler_accepts_large_steps():
    cfg = parse_config(MINIMAL + '\n[solver]\ndt = 0.1\nscheme = "implicit-euler"\n')
    assert cfg.solver["dt"] == 0.1


def test_velocity_cutoff_too_small():
    text = MINIMAL.replace("cell_width = 0.25", "cell_width = 0.25\nvelocity_cells = 8\nvelocity_cutoff = 1.0")
    err = _error(text)
    assert (err.section, err.key) == ("grid", "velocity_cutoff")


def test_mean_field_needs_boundary_flux():
    err = _error(MINIMAL + "\n[transport]\nmean_field = true\n")
    assert (err.section, err.key) == ("transport", "mean_field")


def test_model_restricts_mode():
    err = _error(MINIMAL + '\n[transport]\nmodel = "cdme"\nmode = "liouville"\n')
    assert (err.section, err.key) == ("transport", "model")


def test_only_bl_kernel_is_balanced():
    text = MINIMAL.replace("cell_width = 0.25", 'cell_width = 0.25\nboundary = "open-with-reservoir"')
    err = _error(text + '\n[exchange]\nkind = "boundary-flux"\nbalanced = true\n')
    assert (err.section, err.key) == ("exchange", "balanced")


def test_nmax_per_species_must_match():
    err = _error(MINIMAL.replace("nmax = 4", 'nmax = [2, 2]\nspecies = ["A"]'))
    assert (err.section, err.key) == ("state", "nmax")


def test_seed_range():
    err = _error("seed = -1\n" + MINIMAL)
    assert err.key == "seed"


def test_couplings_are_built():
    text = MINIMAL + dedent("""
        [[reactions]]
        template = "AA->A"
        rate = 2.0
        form = "doi"
        radius = 0.25

        [exchange]
        kind = "bl-kernel"
        kappa_in = 0.5
        kappa_out = 1.0
    """)
    cfg = parse_config(text)
    rx, ex = cfg.couplings
    assert isinstance(rx, ReactionSpec) and rx.form == "doi" and rx.radius == 0.25
    assert isinstance(ex, ExchangeModel) and ex.kappa_in == 0.5


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.name.replace("-", "_") == path.stem
    assert cfg.solver["dt"] > 0
    assert cfg.initial.species == cfg.species


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_manifest_rebuilds_the_config(path, tmp_path):
    cfg = load_config(path)
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"config": cfg.resolved}), encoding="utf-8")
    again = load_manifest(manifest)
    assert again.resolved == json.loads(json.dumps(cfg.resolved))
    assert again.solver == cfg.solver
    assert again.couplings == cfg.couplings


def test_manifest_without_config(tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text("{}", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_manifest(manifest)
    assert info.value.key == "config"


def test_schema_reference_lists_every_key():
    text = schema_reference()
    assert "| grid | cells | required |" in text
    assert "| solver | dt | None | time |" in text
    rows = [line for line in text.splitlines()[2:]]
    assert len(rows) == len(TOP_LEVEL_KEYS) + sum(len(model.model_fields) for model in SECTION_MODELS.values())
