"""TOML run-config schema: strict keys, type checks, override plumbing."""

import json

import numpy as np
import pytest

from csoptics.config import RunConfig, load_config
from csoptics.errors import ConfigurationError, SchemaError
from csoptics.optics import inverse_spaced_depths


def test_default_config_is_optics_toy():
    cfg = RunConfig.default()
    assert cfg.system_kind == "optics"
    assert cfg.seed == 0
    assert cfg.object_dims() == (16, 16, 1)
    tc = cfg.train_config()
    assert tc.grid_n == 16
    assert tc.sensor_shape == (8, 8)
    assert tc.alpha_init is None


def test_unknown_section_and_key_are_both_reported():
    with pytest.raises(SchemaError) as exc:
        RunConfig.from_dict({"grid": {"n": 8, "turbo": 1}, "warp": {"x": 2}})
    diags = exc.value.diagnostics
    assert any("grid.turbo" in d for d in diags)
    assert any("[warp]" in d for d in diags)


def test_bool_is_not_an_int():
    with pytest.raises(SchemaError) as exc:
        RunConfig.from_dict({"grid": {"n": True}})
    assert any("bool" in d for d in exc.value.diagnostics)


def test_int_is_accepted_where_float_expected():
    cfg = RunConfig.from_dict({"noise": {"fraction": 0}})
    assert cfg.data["noise"]["fraction"] == 0


def test_wrong_type_reports_key_path():
    with pytest.raises(SchemaError) as exc:
        RunConfig.from_dict({"object": {"sparsity": "lots"}})
    assert any("object.sparsity" in d for d in exc.value.diagnostics)


def test_depth_list_and_triple_are_mutually_exclusive():
    with pytest.raises(SchemaError):
        RunConfig.from_dict({"grid": {"depths": [8e-6],
                                      "depth_near": 6e-6,
                                      "depth_far": 2e-5,
                                      "depth_count": 3}})


def test_partial_depth_triple_is_rejected():
    with pytest.raises(SchemaError):
        RunConfig.from_dict({"grid": {"depth_near": 6e-6, "depth_far": 2e-5}})


def test_depth_triple_expands_to_inverse_spacing():
    cfg = RunConfig.from_dict({"grid": {"depth_near": 6e-6,
                                        "depth_far": 2e-5,
                                        "depth_count": 4}})
    got = cfg.data["grid"]["depths"]
    want = inverse_spaced_depths(6e-6, 2e-5, 4)
    np.testing.assert_allclose(got, want, rtol=1e-12)
    assert all(type(z) is float for z in got)
    assert cfg.object_dims()[-1] == 4


def test_echo_is_json_serializable_and_detached():
    cfg = RunConfig.default()
    echo = cfg.echo()
    json.dumps(echo, sort_keys=True)
    echo["grid"]["n"] = 999
    assert cfg.data["grid"]["n"] == 16


def test_train_config_requires_optics_kind():
    cfg = RunConfig.from_dict({"system": {"kind": "identity"}})
    with pytest.raises(ConfigurationError):
        cfg.train_config()


def test_train_config_maps_sections():
    cfg = RunConfig.from_dict({
        "train": {"iterations": 7, "batch_size": 3, "lr_theta": 0.01,
                  "alpha_init": 0.5},
        "object": {"sparsity": 0.1, "kind": "unphysical"},
        "solver": {"tol": 1e-6},
        "geometry": {"init": "random", "freeze": True},
        "seed": 12,
    })
    tc = cfg.train_config()
    assert tc.iterations == 7
    assert tc.batch_size == 3
    assert tc.lr_theta == 0.01
    assert tc.alpha_init == 0.5
    assert tc.sparsity == 0.1
    assert tc.object_kind == "unphysical"
    assert tc.solver_tol == 1e-6
    assert tc.init_geometry == "random"
    assert tc.freeze_geometry is True
    assert tc.seed == 12


def test_overrides_touch_the_right_keys(tmp_path):
    cfg = RunConfig.default()
    cfg.apply_overrides(seed=5, out=str(tmp_path), threads=3, alpha=0.2,
                        beta=1.5, sparsity=0.08, noise=0.01)
    assert cfg.seed == 5
    assert cfg.out_dir == str(tmp_path)
    assert cfg.threads == 3
    assert cfg.data["train"]["alpha_init"] == 0.2
    assert cfg.data["train"]["beta_init"] == 1.5
    assert cfg.data["object"]["sparsity"] == 0.08
    assert cfg.data["sweep"]["sparsities"] == [0.08]
    assert cfg.data["noise"]["fraction"] == 0.01


def test_none_overrides_change_nothing():
    cfg = RunConfig.default()
    before = json.dumps(cfg.echo(), sort_keys=True)
    cfg.apply_overrides()
    assert json.dumps(cfg.echo(), sort_keys=True) == before


def test_load_config_reads_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('seed = 4\n[grid]\nn = 8\n[system]\nkind = "circulant"\n'
                    "circulant_m = 32\n")
    cfg = load_config(str(path))
    assert cfg.seed == 4
    assert cfg.data["grid"]["n"] == 8
    assert cfg.system_kind == "circulant"
    assert cfg.data["system"]["circulant_m"] == 32


def test_load_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[grid]\nn = 8\nzoom = 2\n")
    with pytest.raises(SchemaError):
        load_config(str(path))
