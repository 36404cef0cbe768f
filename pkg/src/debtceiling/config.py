"""Scenario configuration: a single JSON document drives every stage.

Coefficient functions are picked from the named catalogue (arbitrary code in
configs is out of scope).  A discount rate of "auto" resolves to
max(1.1 * max(rho_o, 0), 0.5) after the floor is computed from the other
parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
import numpy as np

from . import coefficients as coeffs
from .errors import ModelValidationError
from .model import GeneratorMatrix, ModelParams, rho_floor, validate_params


@dataclass(frozen=True)
class GridConfig:
    n_u: int = 200
    n_y: int = 200
    y_lo: float = 1e-3
    y_hi: float = 0.999
    omega: float = 1.5
    tol_psor: float = 1e-9
    tol_comp: float = 1e-6
    max_sweeps: int = 100_000
    one_dim_nodes: int = 16_001

    def validated(self) -> "GridConfig":
        for name in ("tol_psor", "tol_comp"):
            if getattr(self, name) <= 0:
                raise ModelValidationError(f"{name} must be positive")
        if self.omega <= 0 or self.omega >= 2:
            raise ModelValidationError("relaxation factor must lie in (0, 2)")
        return self


@dataclass(frozen=True)
class MCConfig:
    n_paths: int = 10_000
    horizon: float = 1.0
    dt: float = 1e-3
    seed: int = 0
    x0: float = 1.0
    eta0: float = 0.0
    y0: tuple = (0.5, 0.5)

    def validated(self) -> "MCConfig":
        if self.dt <= 0 or self.horizon <= 0:
            raise ModelValidationError("dt and horizon must be positive")
        if self.n_paths < 1:
            raise ModelValidationError("n_paths must be at least 1")
        y0 = np.asarray(self.y0, dtype=float)
        if abs(y0.sum() - 1.0) > 1e-9 or np.any(y0 < 0):
            raise ModelValidationError("y0 must be a probability vector")
        return self


@dataclass(frozen=True)
class ScenarioConfig:
    params: ModelParams
    grid: GridConfig
    mc: MCConfig
    outputs_dir: str = "out"
    artifacts: tuple = ("paths", "filter", "surface", "boundary", "policy", "consistency")
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()


def params_from_dict(model: dict) -> ModelParams:
    """Build and validate ModelParams from the config's model section."""
    try:
        gen = GeneratorMatrix(np.asarray(model["generator"], dtype=float))
        q = gen.n_regimes
        indicator = coeffs.indicator_from_config(model["indicator"], q)
        jump = coeffs.jumps_from_config(model.get("jump", {"kind": "none"}), q)
        cost = coeffs.cost_from_config(model["cost"])
        raw = ModelParams(
            generator=gen,
            r=float(model["r"]),
            sigma=float(model["sigma"]),
            g=np.asarray(model["g"], dtype=float),
            indicator=indicator,
            c=jump,
            lambda_n=np.asarray(model["lambda_n"], dtype=float),
            rho=1.0,  # placeholder until "auto" is resolved
            cost=cost,
            assume_novikov=bool(model.get("assume_novikov", True)),
            alpha_warn_bound=float(model.get("alpha_warn_bound", 100.0)),
        )
    except KeyError as exc:
        raise ModelValidationError(f"missing config key: {exc}") from exc

    rho_spec = model["rho"]
    if rho_spec == "auto":
        floor = rho_floor(raw)
        rho = max(1.1 * max(floor, 0.0), 0.5)
    else:
        rho = float(rho_spec)
    from dataclasses import replace

    return validate_params(replace(raw, rho=rho))


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        doc = json.load(fh)
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> ScenarioConfig:
    params = params_from_dict(doc["model"])
    grid = GridConfig(**doc.get("grid", {})).validated()
    mc_doc = dict(doc.get("mc", {}))
    if "y0" in mc_doc:
        mc_doc["y0"] = tuple(mc_doc["y0"])
    mc = MCConfig(**mc_doc).validated()
    outputs = doc.get("outputs", {})
    return ScenarioConfig(
        params=params,
        grid=grid,
        mc=mc,
        outputs_dir=outputs.get("dir", "out"),
        artifacts=tuple(outputs.get("artifacts", ScenarioConfig.artifacts)),
        raw=doc,
    )


def benchmark_dict() -> dict:
    """Two-regime benchmark scenario used by the validation suite."""
    return {
        "model": {
            "generator": [[-0.5, 0.5], [0.5, -0.5]],
            "r": 0.02,
            "sigma": 0.1,
            "g": [0.04, 0.0],
            "indicator": {"kind": "arithmetic", "b1": [0.96, 0.0], "sigma1": 0.1, "sigma2": 1.0},
            "jump": {"kind": "none"},
            "lambda_n": [1.0, 1.0],
            "rho": "auto",
            "cost": {"kind": "quadratic", "curvature": 1.0},
        },
        "grid": {"n_u": 200, "n_y": 200},
        "mc": {
            "n_paths": 10_000,
            "horizon": 1.0,
            "dt": 1e-3,
            "seed": 20_240_817,
            "x0": 10.0,
            "eta0": 0.0,
            "y0": [0.7, 0.3],
        },
        "outputs": {"dir": "out"},
    }


def benchmark_config() -> ScenarioConfig:
    return config_from_dict(benchmark_dict())
