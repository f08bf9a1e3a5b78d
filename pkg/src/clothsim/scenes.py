"""Bundled experiment scenes and the config-to-model compiler."""

from __future__ import annotations

import numpy as np

from .config import SceneConfig, validate
from .contact import HalfSpace, SelfCollisionConfig, SphereObstacle
from .energy import build_constraints
from .errors import ConfigError
from .forward import Model, SimState, SolverOptions, WindModel
from .mesh import TriMesh, load_obj, lumped_mass, make_grid

__all__ = ["build_model", "bundled_config", "bundled_scene_names", "gradcheck_scenes"]


def _rotation(axis: np.ndarray, angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ConfigError("mesh.rotate_deg.axis: zero axis")
    axis = axis / n
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return c * np.eye(3) + s * K + (1 - c) * np.outer(axis, axis)


def _build_mesh(cfg: dict) -> TriMesh:
    if "grid" in cfg:
        g = cfg["grid"]
        mesh = make_grid(g["nx"], g["ny"], g["spacing_m"])
        layers = g.get("layers", 1)
        if layers > 1:
            off = np.asarray(g["layer_offset_m"], dtype=np.float64)
            base_v, base_t = mesh.vertices, mesh.triangles
            verts = [base_v + k * off[None, :] for k in range(layers)]
            tris = [base_t + k * base_v.shape[0] for k in range(layers)]
            mesh = TriMesh.build(np.vstack(verts), np.vstack(tris))
    else:
        mesh = load_obj(cfg["obj"])
    verts = mesh.vertices
    if "rotate_deg" in cfg:
        R = _rotation(np.array(cfg["rotate_deg"]["axis"]), cfg["rotate_deg"]["angle"])
        verts = verts @ R.T
    if "translate_m" in cfg:
        verts = verts + np.asarray(cfg["translate_m"])[None, :]
    if "rotate_deg" in cfg or "translate_m" in cfg:
        mesh = TriMesh.build(verts, mesh.triangles)
    return mesh


def _attach_target(entry: dict, rest: np.ndarray):
    vertex = entry["vertex"]
    traj = entry["trajectory"]
    if traj == "fixed":
        pinned = rest[vertex].copy()
        return vertex, (lambda t, p=pinned: p)
    wps = traj["waypoints"]
    times = np.array([w["t_s"] for w in wps])
    points = np.array([w["position_m"] for w in wps])

    def target(t: float, times=times, points=points) -> np.ndarray:
        return np.array(
            [np.interp(t, times, points[:, k]) for k in range(3)]
        )

    return vertex, target


def build_model(config: SceneConfig) -> tuple[Model, SimState]:
    """Compile a validated config into a simulation-ready model and state."""
    raw = config.raw
    mesh = _build_mesh(raw["mesh"])
    m = mesh.num_vertices
    for i, a in enumerate(raw["attachments"]):
        if a["vertex"] >= m:
            raise ConfigError(f"attachments[{i}].vertex: index {a['vertex']} out of range (m={m})")
    mass = lumped_mass(mesh, raw["density_kg_m2"])
    attachments = [_attach_target(a, mesh.vertices) for a in raw["attachments"]]
    constraints = build_constraints(
        mesh,
        raw["stretch_weight"],
        raw["bend_weight"],
        attachments,
        raw.get("attach_weight"),
    )
    obstacles = []
    for ob in raw["obstacles"]:
        kind, body = next(iter(ob.items()))
        if kind == "halfspace":
            obstacles.append(
                HalfSpace(np.array(body["point_m"]), np.array(body["normal"]), body["mu"])
            )
        else:
            obstacles.append(
                SphereObstacle(
                    np.array(body["center_m"]), body["radius_m"], body["mu"], body["side"]
                )
            )
    sc = raw["self_collision"]
    solver = raw["solver"]
    options = SolverOptions(
        forward_tol=solver["forward_tol_m"],
        max_outer=solver["max_outer"],
        contact_tol=solver["contact_tol_m_s"],
        max_contact_iters=solver["max_contact_iters"],
        adjoint_epsilon=solver["adjoint_epsilon"],
        adjoint_max_iters=solver["adjoint_max_iters"],
        detection_margin=solver["detection_margin_m"],
    )
    wind = None
    if raw.get("wind") is not None:
        w = raw["wind"]
        wind = WindModel(np.array(w["amplitude_n"]), w["frequency_hz"], w["phase_rad"])
    model = Model(
        mesh=mesh,
        mass=mass,
        constraints=constraints,
        h=raw["h_s"],
        gravity=np.array(raw["gravity_m_s2"]),
        wind=wind,
        obstacles=obstacles,
        self_collision=SelfCollisionConfig(sc["enabled"], sc["radius_m"], sc["mu"]),
        options=options,
        density=raw["density_kg_m2"],
        frame_gradients=raw["frame_gradients"],
    )
    x0 = mesh.vertices.reshape(-1).copy()
    v0 = np.tile(np.asarray(raw["initial_velocity_m_s"], dtype=np.float64), m)
    return model, SimState(x0, v0, 0.0)


# -- bundled scenes -----------------------------------------------------------------


def _wind_raw(resolution: int = 24, steps: int = 200) -> dict:
    # hanging square cloth, pinned top corners, oscillating side wind
    size = 1.0
    spacing = size / (resolution - 1)
    nx = resolution
    top_row = [(resolution - 1) * nx, resolution * nx - 1]  # two top corners
    return {
        "name": f"wind-{resolution}",
        "mesh": {
            "grid": {"nx": resolution, "ny": resolution, "spacing_m": spacing},
            "rotate_deg": {"axis": [1.0, 0.0, 0.0], "angle": 90.0},
            "translate_m": [0.0, 0.0, size],
        },
        "density_kg_m2": 0.3,
        "stretch_weight": 30.0,
        "bend_weight": 5e-4,
        "attachments": [{"vertex": top_row[0], "trajectory": "fixed"}, {"vertex": top_row[1], "trajectory": "fixed"}],
        "obstacles": [],
        "wind": {"amplitude_n": [2e-3, 1.5e-3, 0.0], "frequency_hz": 1.2, "phase_rad": 0.3},
        "h_s": 1.0 / 90.0,
        "steps": steps,
        "solver": {"forward_tol_m": 1e-6},
    }


def _slope_raw(
    resolution_x: int = 12,
    resolution_y: int = 12,
    theta_deg: float = 30.0,
    mu: float = 0.5,
    steps: int = 300,
) -> dict:
    # cloth resting on a plane inclined about the y axis; +x is uphill
    spacing = 0.5 / max(resolution_x - 1, 1)
    return {
        "name": f"slope-{resolution_x}x{resolution_y}",
        "mesh": {
            "grid": {"nx": resolution_x, "ny": resolution_y, "spacing_m": spacing},
            "rotate_deg": {"axis": [0.0, 1.0, 0.0], "angle": -theta_deg},
        },
        "density_kg_m2": 0.3,
        "stretch_weight": 30.0,
        "bend_weight": 5e-4,
        "attachments": [],
        "obstacles": [
            {
                "halfspace": {
                    "point_m": [0.0, 0.0, 0.0],
                    "normal": [
                        float(-np.sin(np.deg2rad(theta_deg))),
                        0.0,
                        float(np.cos(np.deg2rad(theta_deg))),
                    ],
                    "mu": mu,
                }
            }
        ],
        "h_s": 1.0 / 100.0,
        "steps": steps,
    }


def _napkin_bowl_raw(resolution: int = 20, steps: int = 360) -> dict:
    # napkin falling into a bowl (sphere interior); includes self-collision
    size = 0.5
    spacing = size / (resolution - 1)
    return {
        "name": "napkin-bowl",
        "mesh": {
            "grid": {"nx": resolution, "ny": resolution, "spacing_m": spacing},
            "translate_m": [-size / 2, -size / 2, -0.1],
        },
        "density_kg_m2": 0.3,
        "stretch_weight": 120.0,
        "bend_weight": 1e-3,
        "attachments": [],
        "obstacles": [
            {"sphere": {"center_m": [0.0, 0.0, 0.0], "radius_m": 0.5, "side": "interior", "mu": 0.3}}
        ],
        "self_collision": {"enabled": True, "radius_m": spacing * 0.5, "mu": 0.2},
        "h_s": 5e-3,
        "steps": steps,
    }


def _sphere_sysid_raw(resolution: int = 12, steps: int = 120, mu: float = 0.4) -> dict:
    # square cloth dropped on a sphere; motion after contact is set by friction
    size = 0.5
    spacing = size / (resolution - 1)
    return {
        "name": "sphere-sysid",
        "mesh": {
            "grid": {"nx": resolution, "ny": resolution, "spacing_m": spacing},
            "translate_m": [-size / 2 + 0.06, -size / 2, 0.26],
        },
        "density_kg_m2": 0.3,
        "stretch_weight": 30.0,
        "bend_weight": 5e-4,
        "attachments": [],
        "obstacles": [
            {"sphere": {"center_m": [0.0, 0.0, 0.0], "radius_m": 0.25, "side": "exterior", "mu": mu}}
        ],
        "h_s": 1.0 / 180.0,
        "steps": steps,
    }


def _wind_sysid_raw(resolution: int = 8, steps: int = 40) -> dict:
    raw = _wind_raw(resolution, steps)
    raw["name"] = "wind-sysid"
    raw["wind"] = {"amplitude_n": [4e-3, 2e-3, 1e-3], "frequency_hz": 1.0, "phase_rad": 0.5}
    raw["solver"] = {"forward_tol_m": 1e-9}
    return raw


_BUNDLED = {
    "wind": _wind_raw,
    "slope": _slope_raw,
    "napkin-bowl": _napkin_bowl_raw,
    "sphere-sysid": _sphere_sysid_raw,
    "wind-sysid": _wind_sysid_raw,
}


def bundled_scene_names() -> list[str]:
    return sorted(_BUNDLED)


def bundled_config(name: str, **kwargs) -> SceneConfig:
    """One of the bundled experiment scenes, validated."""
    if name not in _BUNDLED:
        raise ConfigError(f"unknown bundled scene {name!r}; choices: {bundled_scene_names()}")
    return validate(_BUNDLED[name](**kwargs))


# -- randomized desk-scale scenes for gradient checking ------------------------------


def gradcheck_scenes(seed: int = 0) -> list[tuple[str, SceneConfig]]:
    """Small randomized scenes spanning contact geometry and contact cases."""
    rng = np.random.default_rng(seed)

    def jitter(x, rel=0.15):
        return float(x * (1.0 + rel * (2.0 * rng.random() - 1.0)))

    scenes: list[tuple[str, SceneConfig]] = []
    tight = {"forward_tol_m": 1e-10, "max_outer": 600, "contact_tol_m_s": 1e-11, "max_contact_iters": 1200}

    # contact-free hanging cloth under wind
    for i in range(2):
        n = int(rng.integers(6, 9))
        raw = _wind_raw(n, steps=25)
        raw["name"] = f"gradcheck-free-{i}"
        raw["stretch_weight"] = jitter(25.0)
        raw["bend_weight"] = jitter(6e-4)
        raw["density_kg_m2"] = jitter(0.28)
        raw["wind"]["amplitude_n"] = [jitter(3e-3), jitter(2e-3), jitter(1e-3)]
        raw["wind"]["frequency_hz"] = jitter(1.1)
        raw["wind"]["phase_rad"] = jitter(0.4)
        raw["solver"] = dict(tight)
        scenes.append((raw["name"], validate(raw)))

    # plane contact: stick (shallow angle, high mu) and slip (steep, low mu)
    for name, theta, mu in (("gradcheck-plane-stick", 14.0, 0.6), ("gradcheck-plane-slip", 35.0, 0.3)):
        raw = _slope_raw(8, 4, theta_deg=jitter(theta, 0.05), mu=jitter(mu, 0.05), steps=25)
        raw["name"] = name
        raw["stretch_weight"] = jitter(25.0)
        raw["solver"] = dict(tight)
        scenes.append((name, validate(raw)))

    # plane take-off: cloth launched upward away from the plane it starts on
    raw = _slope_raw(7, 4, theta_deg=0.0, mu=0.4, steps=20)
    raw["name"] = "gradcheck-plane-takeoff"
    raw["initial_velocity_m_s"] = [0.0, 0.0, 0.8]
    raw["solver"] = dict(tight)
    scenes.append((raw["name"], validate(raw)))

    # sphere contact, exterior: drape with slip and with stick
    for name, mu in (("gradcheck-sphere-slip", 0.2), ("gradcheck-sphere-stick", 1.2)):
        raw = _sphere_sysid_raw(8, steps=30, mu=jitter(mu, 0.05))
        raw["name"] = name
        raw["mesh"]["translate_m"] = [-0.2, -0.25 + 0.02, 0.252]
        raw["solver"] = dict(tight)
        scenes.append((name, validate(raw)))

    # sphere interior (bowl)
    raw = _napkin_bowl_raw(8, steps=30)
    raw["name"] = "gradcheck-bowl"
    raw["self_collision"]["enabled"] = False
    raw["mesh"]["translate_m"] = [-0.125, -0.125, -0.32]
    raw["stretch_weight"] = 25.0
    raw["h_s"] = 4e-3
    raw["solver"] = dict(tight)
    scenes.append((raw["name"], validate(raw)))

    # node-node self contact: a falling strip over a pinned strip, two angles
    for i, mu in enumerate((0.15, 0.9)):
        raw = _two_layer_raw(mu=jitter(mu, 0.05))
        raw["name"] = f"gradcheck-pair-{i}"
        raw["solver"] = dict(tight)
        scenes.append((raw["name"], validate(raw)))

    # wind over a plane: mixes take-off and sliding contacts
    raw = _slope_raw(7, 5, theta_deg=25.0, mu=0.35, steps=25)
    raw["name"] = "gradcheck-mixed"
    raw["wind"] = {"amplitude_n": [2e-3, 0.0, 2.5e-3], "frequency_hz": 1.4, "phase_rad": 0.1}
    raw["solver"] = dict(tight)
    scenes.append((raw["name"], validate(raw)))

    return scenes


def _two_layer_raw(mu: float = 0.3, steps: int = 25) -> dict:
    """Two stacked grids in one mesh; the upper one lands on the pinned lower one."""
    n = 6
    spacing = 0.3 / (n - 1)
    corners = [0, n - 1, (n - 1) * n, n * n - 1]
    return {
        "name": "two-layer",
        "mesh": {
            "grid": {
                "nx": n,
                "ny": n,
                "spacing_m": spacing,
                "layers": 2,
                "layer_offset_m": [0.4 * spacing, 0.3 * spacing, 1.3 * spacing],
            },
            "rotate_deg": {"axis": [0.0, 1.0, 0.0], "angle": -12.0},
        },
        "density_kg_m2": 0.3,
        "stretch_weight": 25.0,
        "bend_weight": 5e-4,
        "attachments": [{"vertex": c, "trajectory": "fixed"} for c in corners],
        "obstacles": [],
        "self_collision": {"enabled": True, "radius_m": 0.9 * spacing, "mu": mu},
        "h_s": 5e-3,
        "steps": steps,
    }
