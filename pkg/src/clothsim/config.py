"""Scene configuration: a human-readable YAML schema with strict validation.

All physical quantities carry SI units in their field names.  Parsing is
strict: unknown keys and out-of-range values raise ConfigError with the
offending field path, and serialize(parse(text)) parses back to an
identical configuration.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import yaml

from .errors import ConfigError

__all__ = ["SceneConfig", "parse_config", "serialize_config", "apply_params"]

_SOLVER_DEFAULTS = {
    "forward_tol_m": 1e-6,
    "max_outer": 200,
    "contact_tol_m_s": 1e-6,
    "max_contact_iters": 400,
    "adjoint_epsilon": 1e-6,
    "adjoint_max_iters": 400,
    "detection_margin_m": 1e-3,
}

_TOP_KEYS = {
    "name",
    "mesh",
    "density_kg_m2",
    "stretch_weight",
    "bend_weight",
    "attach_weight",
    "attachments",
    "obstacles",
    "self_collision",
    "gravity_m_s2",
    "wind",
    "h_s",
    "steps",
    "initial_velocity_m_s",
    "solver",
    "frame_gradients",
    "seed",
}


def _req(d: dict, key: str, path: str) -> Any:
    if key not in d:
        raise ConfigError(f"{path}{key}: missing required field")
    return d[key]


def _num(v: Any, path: str, positive=False, nonneg=False) -> float:
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{path}: expected a number, got {type(v).__name__}")
    v = float(v)
    if positive and v <= 0:
        raise ConfigError(f"{path}: must be > 0")
    if nonneg and v < 0:
        raise ConfigError(f"{path}: must be >= 0")
    return v


def _int(v: Any, path: str, minimum: int | None = None) -> int:
    if not isinstance(v, int) or isinstance(v, bool):
        raise ConfigError(f"{path}: expected an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return v


def _vec3(v: Any, path: str) -> list[float]:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ConfigError(f"{path}: expected a 3-vector")
    return [_num(x, f"{path}[{i}]") for i, x in enumerate(v)]


@dataclass
class SceneConfig:
    """Validated scene description; `raw` is the canonical nested dict."""

    raw: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.raw.get("name", "scene")

    @property
    def steps(self) -> int:
        return self.raw["steps"]

    @property
    def h(self) -> float:
        return self.raw["h_s"]

    @property
    def seed(self) -> int:
        return self.raw.get("seed", 0)

    def copy(self) -> "SceneConfig":
        return SceneConfig(copy.deepcopy(self.raw))

    def __eq__(self, other) -> bool:
        return isinstance(other, SceneConfig) and self.raw == other.raw


def _validate_mesh(mesh: Any) -> dict:
    if not isinstance(mesh, dict):
        raise ConfigError("mesh: expected a mapping")
    allowed = {"grid", "obj", "rotate_deg", "translate_m"}
    for k in mesh:
        if k not in allowed:
            raise ConfigError(f"mesh.{k}: unknown field")
    has_grid = "grid" in mesh
    has_obj = "obj" in mesh
    if has_grid == has_obj:
        raise ConfigError("mesh: exactly one of 'grid' or 'obj' is required")
    out: dict = {}
    if has_grid:
        g = mesh["grid"]
        out["grid"] = {
            "nx": _int(_req(g, "nx", "mesh.grid."), "mesh.grid.nx", 2),
            "ny": _int(_req(g, "ny", "mesh.grid."), "mesh.grid.ny", 2),
            "spacing_m": _num(_req(g, "spacing_m", "mesh.grid."), "mesh.grid.spacing_m", positive=True),
        }
        if "layers" in g:
            out["grid"]["layers"] = _int(g["layers"], "mesh.grid.layers", 1)
            out["grid"]["layer_offset_m"] = _vec3(
                _req(g, "layer_offset_m", "mesh.grid."), "mesh.grid.layer_offset_m"
            )
    else:
        if not isinstance(mesh["obj"], str):
            raise ConfigError("mesh.obj: expected a path string")
        out["obj"] = mesh["obj"]
    if "rotate_deg" in mesh:
        r = mesh["rotate_deg"]
        out["rotate_deg"] = {
            "axis": _vec3(_req(r, "axis", "mesh.rotate_deg."), "mesh.rotate_deg.axis"),
            "angle": _num(_req(r, "angle", "mesh.rotate_deg."), "mesh.rotate_deg.angle"),
        }
    if "translate_m" in mesh:
        out["translate_m"] = _vec3(mesh["translate_m"], "mesh.translate_m")
    return out


def _validate_obstacle(ob: Any, path: str) -> dict:
    if not isinstance(ob, dict) or len(ob) != 1:
        raise ConfigError(f"{path}: expected a single-key mapping (halfspace or sphere)")
    kind, body = next(iter(ob.items()))
    if kind == "halfspace":
        normal = np.asarray(_vec3(_req(body, "normal", f"{path}.halfspace."), f"{path}.halfspace.normal"))
        if abs(np.linalg.norm(normal) - 1.0) > 1e-6:
            raise ConfigError(f"{path}.halfspace.normal: must be unit length")
        return {
            "halfspace": {
                "point_m": _vec3(_req(body, "point_m", f"{path}.halfspace."), f"{path}.halfspace.point_m"),
                "normal": [float(x) for x in normal],
                "mu": _num(body.get("mu", 0.0), f"{path}.halfspace.mu", nonneg=True),
            }
        }
    if kind == "sphere":
        side = body.get("side", "exterior")
        if side not in ("exterior", "interior"):
            raise ConfigError(f"{path}.sphere.side: must be 'exterior' or 'interior'")
        return {
            "sphere": {
                "center_m": _vec3(_req(body, "center_m", f"{path}.sphere."), f"{path}.sphere.center_m"),
                "radius_m": _num(_req(body, "radius_m", f"{path}.sphere."), f"{path}.sphere.radius_m", positive=True),
                "side": side,
                "mu": _num(body.get("mu", 0.0), f"{path}.sphere.mu", nonneg=True),
            }
        }
    raise ConfigError(f"{path}: unknown obstacle kind {kind!r}")


def _validate_attachment(at: Any, path: str) -> dict:
    if not isinstance(at, dict):
        raise ConfigError(f"{path}: expected a mapping")
    out = {"vertex": _int(_req(at, "vertex", f"{path}."), f"{path}.vertex", 0)}
    traj = at.get("trajectory", "fixed")
    if traj == "fixed":
        out["trajectory"] = "fixed"
    elif isinstance(traj, dict) and "waypoints" in traj:
        wps = traj["waypoints"]
        if not isinstance(wps, list) or len(wps) < 2:
            raise ConfigError(f"{path}.trajectory.waypoints: need at least two waypoints")
        parsed = []
        prev_t = -np.inf
        for i, wp in enumerate(wps):
            t = _num(_req(wp, "t_s", f"{path}.trajectory.waypoints[{i}]."), f"{path}.trajectory.waypoints[{i}].t_s")
            if t <= prev_t:
                raise ConfigError(f"{path}.trajectory.waypoints[{i}].t_s: times must increase")
            prev_t = t
            parsed.append(
                {"t_s": t, "position_m": _vec3(_req(wp, "position_m", f"{path}.trajectory.waypoints[{i}]."), f"{path}.trajectory.waypoints[{i}].position_m")}
            )
        out["trajectory"] = {"waypoints": parsed}
    else:
        raise ConfigError(f"{path}.trajectory: expected 'fixed' or a waypoints mapping")
    return out


def validate(raw: Any) -> SceneConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping")
    for k in raw:
        if k not in _TOP_KEYS:
            raise ConfigError(f"{k}: unknown field")
    out: dict = {}
    out["name"] = str(raw.get("name", "scene"))
    out["mesh"] = _validate_mesh(_req(raw, "mesh", ""))
    out["density_kg_m2"] = _num(_req(raw, "density_kg_m2", ""), "density_kg_m2", positive=True)
    out["stretch_weight"] = _num(_req(raw, "stretch_weight", ""), "stretch_weight", positive=True)
    out["bend_weight"] = _num(_req(raw, "bend_weight", ""), "bend_weight", positive=True)
    if raw.get("attach_weight") is not None:
        out["attach_weight"] = _num(raw["attach_weight"], "attach_weight", positive=True)
    out["attachments"] = [
        _validate_attachment(a, f"attachments[{i}]") for i, a in enumerate(raw.get("attachments", []))
    ]
    out["obstacles"] = [
        _validate_obstacle(o, f"obstacles[{i}]") for i, o in enumerate(raw.get("obstacles", []))
    ]
    sc = raw.get("self_collision", {"enabled": False})
    if not isinstance(sc, dict):
        raise ConfigError("self_collision: expected a mapping")
    enabled = bool(sc.get("enabled", False))
    out["self_collision"] = {
        "enabled": enabled,
        "radius_m": _num(sc.get("radius_m", 0.0), "self_collision.radius_m", nonneg=True),
        "mu": _num(sc.get("mu", 0.0), "self_collision.mu", nonneg=True),
    }
    if enabled and out["self_collision"]["radius_m"] <= 0:
        raise ConfigError("self_collision.radius_m: must be > 0 when enabled")
    out["gravity_m_s2"] = _vec3(raw.get("gravity_m_s2", [0.0, 0.0, -9.81]), "gravity_m_s2")
    if raw.get("wind") is not None:
        w = raw["wind"]
        out["wind"] = {
            "amplitude_n": _vec3(_req(w, "amplitude_n", "wind."), "wind.amplitude_n"),
            "frequency_hz": _num(_req(w, "frequency_hz", "wind."), "wind.frequency_hz"),
            "phase_rad": _num(_req(w, "phase_rad", "wind."), "wind.phase_rad"),
        }
    out["h_s"] = _num(_req(raw, "h_s", ""), "h_s", positive=True)
    out["steps"] = _int(_req(raw, "steps", ""), "steps", 1)
    out["initial_velocity_m_s"] = _vec3(
        raw.get("initial_velocity_m_s", [0.0, 0.0, 0.0]), "initial_velocity_m_s"
    )
    solver = dict(_SOLVER_DEFAULTS)
    int_keys = {"max_outer", "max_contact_iters", "adjoint_max_iters"}
    for k, v in (raw.get("solver") or {}).items():
        if k not in _SOLVER_DEFAULTS:
            raise ConfigError(f"solver.{k}: unknown field")
        solver[k] = (
            _int(v, f"solver.{k}", 1) if k in int_keys else _num(v, f"solver.{k}", positive=True)
        )
    out["solver"] = solver
    out["frame_gradients"] = bool(raw.get("frame_gradients", True))
    out["seed"] = _int(raw.get("seed", 0), "seed", 0)
    return SceneConfig(out)


def parse_config(text: str) -> SceneConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return validate(raw)


def serialize_config(config: SceneConfig) -> str:
    return yaml.safe_dump(config.raw, sort_keys=True, default_flow_style=None)


def apply_params(config: SceneConfig, params: dict[str, Any]) -> SceneConfig:
    """New config with named physical parameters overridden.

    Supported keys: stretch_weight, bend_weight, density, wind_amplitude,
    wind_frequency, wind_phase, mu_obstacle_<i>, mu_self.
    """
    out = config.copy()
    raw = out.raw
    for key, value in params.items():
        if key == "stretch_weight":
            raw["stretch_weight"] = float(value)
        elif key == "bend_weight":
            raw["bend_weight"] = float(value)
        elif key == "density":
            raw["density_kg_m2"] = float(value)
        elif key == "wind_amplitude":
            raw["wind"]["amplitude_n"] = [float(x) for x in np.atleast_1d(value)]
        elif key == "wind_frequency":
            raw["wind"]["frequency_hz"] = float(value)
        elif key == "wind_phase":
            raw["wind"]["phase_rad"] = float(value)
        elif key == "mu_self":
            raw["self_collision"]["mu"] = float(value)
        elif key.startswith("mu_obstacle_"):
            idx = int(key.rsplit("_", 1)[1])
            ob = raw["obstacles"][idx]
            kind = next(iter(ob))
            ob[kind]["mu"] = float(value)
        else:
            raise ConfigError(f"unknown parameter {key!r}")
    return validate(raw)
