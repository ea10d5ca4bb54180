"""Run configuration: one TOML file, strictly schema-checked.

Every key is validated against the table below before any compute happens;
unknown sections or keys are rejected with a full diagnostic list rather
than silently ignored (a misspelled key should never turn into a silent
default). All physical quantities are SI: meters for lengths, fractions
for noise and sparsity.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigurationError, SchemaError
from .optics import inverse_spaced_depths
from .train import TrainConfig

# expected type per key; float accepts int, nothing accepts bool except bool
_SCHEMA = {
    "grid": {
        "n": int,
        "pitch": float,
        "wavelength": float,
        "sensor_distance": float,
        "depths": list,
        "depth_near": float,
        "depth_far": float,
        "depth_count": int,
    },
    "geometry": {
        "w_min": float,
        "w_max": float,
        "init": str,      # "uniform" | "random"
        "freeze": bool,
        "theta": str,     # optional .npy with latent widths
    },
    "surrogate": {
        "degree": int,
        "n_states": int,
        "turns": float,
        "csv": str,
    },
    "system": {
        "kind": str,      # "optics" | "circulant" | "identity"
        "circulant_m": int,
    },
    "object": {
        "shape": list,
        "sparsity": float,
        "kind": str,      # "physical" | "unphysical"
        "value_range": list,
    },
    "sensor": {
        "shape": list,
    },
    "noise": {
        "fraction": float,
    },
    "solver": {
        "tol": float,
        "max_iters": int,
    },
    "train": {
        "iterations": int,
        "batch_size": int,
        "lr_theta": float,
        "lr_hyper": float,
        "adam_beta1": float,
        "adam_beta2": float,
        "adam_eps": float,
        "alpha_init": float,
        "beta_init": float,
        "val_size": int,
        "val_every": int,
        "checkpoint_every": int,
    },
    "sweep": {
        "sparsities": list,
        "trials": int,
        "alpha_search_iters": int,
        "single_shot": bool,
    },
    "output": {
        "dir": str,
    },
}

_TOP_SCALARS = {"seed": int, "threads": int}

_DEFAULTS = {
    "grid": {"n": 16, "pitch": 275e-9, "wavelength": 550e-9,
             "sensor_distance": 12e-6, "depths": [8e-6]},
    "geometry": {"w_min": 60e-9, "w_max": 410e-9, "init": "uniform",
                 "freeze": False},
    "surrogate": {"degree": 24, "n_states": 1, "turns": 1.0},
    "system": {"kind": "optics"},
    "object": {"shape": [16, 16], "sparsity": 0.05, "kind": "physical",
               "value_range": [0.8, 1.2]},
    "sensor": {"shape": [8, 8]},
    "noise": {"fraction": 0.02},
    "solver": {"tol": 1e-8, "max_iters": 20000},
    "train": {"iterations": 200, "batch_size": 8, "lr_theta": 0.05,
              "lr_hyper": 0.1, "adam_beta1": 0.9, "adam_beta2": 0.999,
              "adam_eps": 1e-8, "val_size": 8, "val_every": 25,
              "checkpoint_every": 0},
    "sweep": {"sparsities": [0.04, 0.08, 0.16, 0.3], "trials": 20,
              "alpha_search_iters": 25, "single_shot": False},
    "output": {},
    "seed": 0,
    "threads": 1,
}


def _type_ok(value, expected) -> bool:
    if expected is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):  # bool is an int subclass; never coerce it
        return False
    if expected is float:
        return isinstance(value, (int, float))
    return isinstance(value, expected)


def validate(raw: dict) -> list:
    """All schema diagnostics for a parsed document (empty when clean)."""
    diagnostics = []
    for key, value in raw.items():
        if key in _TOP_SCALARS:
            if not _type_ok(value, _TOP_SCALARS[key]):
                diagnostics.append(
                    f"{key}: expected {_TOP_SCALARS[key].__name__}, "
                    f"got {type(value).__name__}")
            continue
        if key not in _SCHEMA:
            diagnostics.append(f"unknown section [{key}]")
            continue
        if not isinstance(value, dict):
            diagnostics.append(f"[{key}] must be a table")
            continue
        for sub, subval in value.items():
            if sub not in _SCHEMA[key]:
                diagnostics.append(f"unknown key {key}.{sub}")
            elif not _type_ok(subval, _SCHEMA[key][sub]):
                diagnostics.append(
                    f"{key}.{sub}: expected {_SCHEMA[key][sub].__name__}, "
                    f"got {type(subval).__name__}")
    grid = raw.get("grid", {})
    if isinstance(grid, dict):
        explicit = "depths" in grid
        spaced = any(k in grid for k in
                     ("depth_near", "depth_far", "depth_count"))
        if explicit and spaced:
            diagnostics.append(
                "grid: give either depths or depth_near/depth_far/depth_count,"
                " not both")
        if spaced and not all(k in grid for k in
                              ("depth_near", "depth_far", "depth_count")):
            diagnostics.append(
                "grid: depth_near, depth_far, depth_count must appear together")
    return diagnostics


def _merged(raw: dict) -> dict:
    data = copy.deepcopy(_DEFAULTS)
    for key, value in raw.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(copy.deepcopy(value))
        else:
            data[key] = value
    grid = data["grid"]
    if "depth_count" in grid:
        grid["depths"] = [float(z) for z in inverse_spaced_depths(
            grid.pop("depth_near"), grid.pop("depth_far"),
            grid.pop("depth_count"))]
    return data


@dataclass
class RunConfig:
    """Validated and default-filled configuration tree."""

    data: dict
    path: str | None = None

    @classmethod
    def from_dict(cls, raw: dict, path: str | None = None) -> "RunConfig":
        diagnostics = validate(raw)
        if diagnostics:
            raise SchemaError(diagnostics)
        return cls(data=_merged(raw), path=path)

    @classmethod
    def default(cls) -> "RunConfig":
        return cls.from_dict({})

    def echo(self) -> dict:
        return copy.deepcopy(self.data)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def threads(self) -> int:
        return int(self.data["threads"])

    @property
    def out_dir(self) -> str | None:
        return self.data["output"].get("dir")

    @property
    def system_kind(self) -> str:
        return str(self.data["system"]["kind"])

    def object_dims(self) -> tuple:
        shape = tuple(int(v) for v in self.data["object"]["shape"])
        return shape + (len(self.data["grid"]["depths"]),)

    def apply_overrides(self, seed=None, out=None, threads=None, alpha=None,
                        beta=None, sparsity=None, noise=None) -> None:
        """Command-line flags win over file values."""
        if seed is not None:
            self.data["seed"] = int(seed)
        if out is not None:
            self.data["output"]["dir"] = str(out)
        if threads is not None:
            self.data["threads"] = int(threads)
        if alpha is not None:
            self.data["train"]["alpha_init"] = float(alpha)
        if beta is not None:
            self.data["train"]["beta_init"] = float(beta)
        if sparsity is not None:
            self.data["object"]["sparsity"] = float(sparsity)
            self.data["sweep"]["sparsities"] = [float(sparsity)]
        if noise is not None:
            self.data["noise"]["fraction"] = float(noise)

    def train_config(self) -> TrainConfig:
        if self.system_kind != "optics":
            raise ConfigurationError(
                f"system kind {self.system_kind!r} has no geometry to train")
        d = self.data
        return TrainConfig(
            grid_n=d["grid"]["n"],
            pitch=d["grid"]["pitch"],
            wavelength=d["grid"]["wavelength"],
            sensor_distance=d["grid"]["sensor_distance"],
            depths=tuple(d["grid"]["depths"]),
            w_min=d["geometry"]["w_min"],
            w_max=d["geometry"]["w_max"],
            n_states=d["surrogate"]["n_states"],
            surrogate_degree=d["surrogate"]["degree"],
            surrogate_turns=d["surrogate"]["turns"],
            surrogate_csv=d["surrogate"].get("csv"),
            init_geometry=d["geometry"]["init"],
            freeze_geometry=d["geometry"]["freeze"],
            object_shape=tuple(d["object"]["shape"]),
            sensor_shape=tuple(d["sensor"]["shape"]),
            sparsity=d["object"]["sparsity"],
            object_kind=d["object"]["kind"],
            value_range=tuple(d["object"]["value_range"]),
            noise_fraction=d["noise"]["fraction"],
            iterations=d["train"]["iterations"],
            batch_size=d["train"]["batch_size"],
            lr_theta=d["train"]["lr_theta"],
            lr_hyper=d["train"]["lr_hyper"],
            adam_beta1=d["train"]["adam_beta1"],
            adam_beta2=d["train"]["adam_beta2"],
            adam_eps=d["train"]["adam_eps"],
            alpha_init=d["train"].get("alpha_init"),
            beta_init=d["train"].get("beta_init"),
            solver_tol=d["solver"]["tol"],
            solver_max_iters=d["solver"]["max_iters"],
            seed=self.seed,
            val_size=d["train"]["val_size"],
            val_every=d["train"]["val_every"],
            checkpoint_every=d["train"]["checkpoint_every"],
            out_dir=self.out_dir,
            threads=self.threads,
        )


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return RunConfig.from_dict(raw, path=path)
