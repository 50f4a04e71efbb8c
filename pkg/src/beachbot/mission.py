"""Mission state machine, survey pattern, configuration and episode orchestration."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from statistics import pvariance

import numpy as np
import yaml

from .camera import CameraIntrinsics, ScaleCalibration
from .classifier import TrainedClassifier, make_dataset, predict, train
from .errors import ConfigError, ProtocolError
from .kinematics import DEFAULT_LIMITS, NOMINAL_Q, ArmGeometry, JointConfig
from .scene import (
    COLORS,
    ActuationModel,
    EffectorState,
    Particle,
    RoverPose,
    Scene,
    Simulator,
    Terrain,
    pixel_ground,
)
from .segmentation import LED, SegmentationParams, detect_candidates
from .servo import ServoParams, run_episode
from .spectra import CLASSES, default_library


class MissionState(str, Enum):
    NAVIGATE = "NAVIGATE"
    SCAN = "SCAN"
    TRACK = "TRACK"
    DESCEND = "DESCEND"
    REFERENCE = "REFERENCE"
    SAMPLE = "SAMPLE"
    CLASSIFY = "CLASSIFY"
    STOW = "STOW"


S = MissionState
EVENTS = (
    "waypoint_reached",
    "mission_complete",
    "candidate_found",
    "no_candidates",
    "xy_converged",
    "target_lost",
    "snr_reached",
    "descent_aborted",
    "reference_clean",
    "reference_failed",
    "spectrum_valid",
    "spiral_exhausted",
    "logged",
    "abort",
)

TRANSITIONS: dict[tuple[MissionState, str], MissionState] = {
    (S.NAVIGATE, "waypoint_reached"): S.SCAN,
    (S.NAVIGATE, "mission_complete"): S.STOW,
    (S.SCAN, "candidate_found"): S.TRACK,
    (S.SCAN, "no_candidates"): S.NAVIGATE,
    (S.TRACK, "xy_converged"): S.DESCEND,
    (S.TRACK, "target_lost"): S.SCAN,
    (S.DESCEND, "snr_reached"): S.REFERENCE,
    (S.DESCEND, "descent_aborted"): S.SCAN,
    (S.REFERENCE, "reference_clean"): S.SAMPLE,
    (S.REFERENCE, "reference_failed"): S.CLASSIFY,
    (S.SAMPLE, "spectrum_valid"): S.CLASSIFY,
    (S.SAMPLE, "spiral_exhausted"): S.CLASSIFY,
    (S.CLASSIFY, "logged"): S.SCAN,
}
for _s in MissionState:
    TRANSITIONS[(_s, "abort")] = S.STOW


def next_state(current: MissionState | str, event: str) -> MissionState:
    cur = MissionState(current)
    try:
        return TRANSITIONS[(cur, event)]
    except KeyError:
        raise ProtocolError(cur.value, event) from None


def legal_events(current: MissionState | str) -> list[str]:
    cur = MissionState(current)
    return [e for e in EVENTS if (cur, e) in TRANSITIONS]


# -- configuration ------------------------------------------------------------


def _default_doc() -> dict:
    text = resources.files("beachbot").joinpath("data/default_config.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(out[k], dict) and k != "peak_power":
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{k} must be a section")
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _positive(doc, section, key, allow_zero=False):
    v = doc[section][key]
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(f"{section}.{key} must be a positive number, got {v!r}")
    return float(v)


@dataclass(frozen=True)
class MissionConfig:
    doc: dict
    base_dir: Path = Path(".")

    @classmethod
    def default(cls) -> "MissionConfig":
        return cls.from_dict({})

    @classmethod
    def from_dict(cls, overrides: dict, base_dir=".") -> "MissionConfig":
        cfg = cls(_merge(_default_doc(), overrides or {}), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "MissionConfig":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(doc, path.parent)

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    def validate(self):
        d = self.doc
        for key in ("speed_mps", "battery_hours", "swath_m"):
            _positive(d, "rover", key)
        for name, vi in d["rover"]["peak_power"].items():
            if len(vi) != 2 or min(vi) < 0:
                raise ConfigError(f"rover.peak_power.{name} must be [volts, amps]")
        sc = d["scene"]
        if not isinstance(sc["n_particles"], int) or sc["n_particles"] < 0:
            raise ConfigError("scene.n_particles must be a non-negative integer")
        lo, hi = sc["size_mm"]
        if not 1.0 <= lo <= hi:
            raise ConfigError("scene.size_mm must satisfy 1 <= min <= max")
        for c in sc["colors"]:
            if c not in COLORS:
                raise ConfigError(f"unknown particle color {c!r}")
        for m in sc["materials"] or ():
            if m not in CLASSES:
                raise ConfigError(f"unknown material {m!r}")
        if not 0 < sc["max_slope_deg"] <= 45:
            raise ConfigError("scene.max_slope_deg must be in (0, 45]")
        _positive(d, "scene", "max_amplitude_m", allow_zero=True)
        sv = d["survey"]
        for key in ("length_m", "spacing_m", "dedupe_m"):
            _positive(d, "survey", key)
        _positive(d, "survey", "variance_threshold", allow_zero=True)
        if not isinstance(sv["lines"], int) or sv["lines"] < 1:
            raise ConfigError("survey.lines must be at least 1")
        if not isinstance(sv["window"], int) or sv["window"] < 2:
            raise ConfigError("survey.window must be at least 2")
        if not sv["views_rad"]:
            raise ConfigError("survey.views_rad must list at least one view")
        a = d["arm"]
        for key in ("r1", "r2"):
            _positive(d, "arm", key)
        _positive(d, "arm", "sigma_act_rad", allow_zero=True)
        if not DEFAULT_LIMITS.contains(JointConfig(*a["stow"])):
            raise ConfigError("arm.stow is outside the joint limits")
        for key in ("width", "height", "fov_deg", "nominal_zc_m"):
            _positive(d, "camera", key)
        try:
            self.servo_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"servo: {exc}") from None
        cl = d["classifier"]
        if cl["variant"] not in ("SVM3", "SVM3+I"):
            raise ConfigError(f"unknown classifier variant {cl['variant']!r}")
        if cl["model_path"] is not None and not self.model_path().exists():
            raise ConfigError(f"classifier model {self.model_path()} does not exist")
        if sc["particles"] is not None:
            for p in sc["particles"]:
                try:
                    self._particle(p, 0)
                except (KeyError, TypeError, ValueError) as exc:
                    raise ConfigError(f"bad particle entry {p!r}: {exc}") from None

    # -- typed views --
    def model_path(self) -> Path | None:
        p = self.doc["classifier"]["model_path"]
        return None if p is None else (self.base_dir / p)

    def servo_params(self) -> ServoParams:
        return ServoParams(**self.doc["servo"])

    def geometry(self) -> ArmGeometry:
        a = self.doc["arm"]
        return ArmGeometry(r1=a["r1"], r2=a["r2"], alpha_j=a["alpha_j"])

    def actuation(self) -> ActuationModel:
        a = self.doc["arm"]
        return ActuationModel(a["sigma_act_rad"], a["flex_bias_rad"], a["settle_ticks"])

    def intrinsics(self) -> CameraIntrinsics:
        c = self.doc["camera"]
        return CameraIntrinsics.from_fov(c["width"], c["height"], c["fov_deg"])

    def calibration(self) -> ScaleCalibration:
        c = self.doc["camera"]
        return ScaleCalibration.from_intrinsics(self.intrinsics(), c["nominal_zc_m"], c["hand_eye_yaw_rad"])

    def stow(self) -> JointConfig:
        return JointConfig(*self.doc["arm"]["stow"])

    @staticmethod
    def _particle(p: dict, pid: int) -> Particle:
        color = p["color"]
        hsv = COLORS[color] if isinstance(color, str) else tuple(color)
        return Particle(tuple(map(float, p["position"])), float(p["size_mm"]), hsv, p["material"], pid)


# -- survey geometry ------------------------------------------------------------


def view_q(gamma0: float) -> JointConfig:
    return JointConfig(gamma0, NOMINAL_Q.gamma1, NOMINAL_Q.gamma2)


def transect_lines(cfg: MissionConfig) -> list[tuple[tuple[float, float], float]]:
    """(start point, yaw) per line; alternate lines run back the other way."""
    sv = cfg.doc["survey"]
    x0, y0 = sv["origin"]
    swath = cfg.doc["rover"]["swath_m"]
    out = []
    for i in range(sv["lines"]):
        y = y0 + i * swath
        out.append(((x0, y), 0.0) if i % 2 == 0 else ((x0 + sv["length_m"], y), math.pi))
    return out


def footprint_contains(sim: Simulator, q: JointConfig, rover: RoverPose, xy, margin_px: float = 3.0) -> bool:
    """Whether a ground point falls inside the image of a scan view."""
    from .scene import ground_pixel, pose

    pz = pose(sim.scene, sim.rig, sim.geom, EffectorState(q, rover), sim.actuation.flex_bias)
    px = ground_pixel(pz, sim.intr, sim.cal, xy)
    w, h = sim.intr.image_size
    return margin_px <= px.u <= w - 1 - margin_px and margin_px <= px.v <= h - 1 - margin_px


def reachable(sim: Simulator, rover: RoverPose, xy, margin: float = 0.1, slack: float = 0.012) -> bool:
    """Whether the arm can work over ``xy``: scan height down to the focus on the ground.

    Both ends need a joint solution ``margin`` rad inside every limit and
    ``slack`` m short of full extension, leaving room for the reference
    step and the terminal search.
    """
    from .kinematics import solve_position
    from .scene import arm_origin

    o = arm_origin(sim.scene, sim.rig, rover)
    c, s = math.cos(rover.yaw), math.sin(rover.yaw)
    dx, dy = xy[0] - o[0], xy[1] - o[1]
    x, y = c * dx + s * dy, -s * dx + c * dy
    ground = float(sim.scene.terrain.height(*xy))
    if math.hypot(x, y) < 0.05:
        return False
    lo = np.asarray(sim.limits.lower) + margin
    hi = np.asarray(sim.limits.upper) - margin
    for above in (0.02, -0.001):
        z = ground + sim.rig.focus_drop + above - o[2]
        if math.hypot(math.hypot(x, y), z) > sim.geom.r1 + sim.geom.r2 - slack:
            return False
        try:
            q = solve_position(sim.geom, (x, y, z), view_q(math.atan2(y, x)), tol=1e-10, max_iter=60)
        except (ValueError, np.linalg.LinAlgError):
            return False
        a = q.as_array()
        if not (np.all(a >= lo) and np.all(a <= hi)):
            return False
    return True


def in_swath(sim: Simulator, covered, xy, margin_px: float = 0.0) -> bool:
    return any(footprint_contains(sim, q, rv, xy, margin_px) and reachable(sim, rv, xy) for rv, q in covered)


def planned_waypoints(cfg: MissionConfig, spacing: float | None = None) -> list[RoverPose]:
    """Waypoints at a fixed spacing (no adaptation); used for coverage bookkeeping."""
    sv = cfg.doc["survey"]
    step = spacing or sv["spacing_m"]
    out = []
    for (x, y), yaw in transect_lines(cfg):
        n = int(math.floor(sv["length_m"] / step + 1e-9))
        for k in range(n + 1):
            out.append(RoverPose(x + math.cos(yaw) * k * step, y, yaw))
    return out


# -- scene generation ---------------------------------------------------------


def build_scene(cfg: MissionConfig, seed: int) -> Scene:
    """Terrain plus particles; generated particles land inside scan-view footprints."""
    sc = cfg.doc["scene"]
    rng = np.random.default_rng([seed, 0])
    terrain = Terrain.random(rng, sc["max_slope_deg"], sc["max_amplitude_m"])
    if sc["particles"] is not None:
        parts = tuple(cfg._particle(p, i) for i, p in enumerate(sc["particles"]))
        return Scene(terrain, parts, seed, max_slope_deg=sc["max_slope_deg"])
    probe = Simulator(Scene(terrain, (), seed), EffectorState(NOMINAL_Q), geom=cfg.geometry(),
                      intr=cfg.intrinsics(), cal=cfg.calibration(), actuation=cfg.actuation())
    views = [view_q(g) for g in cfg.doc["survey"]["views_rad"]]
    wps = planned_waypoints(cfg)
    xs = [w.x for w in wps]
    ys = [w.y for w in wps]
    box = (min(xs) - 0.3, max(xs) + 0.3, min(ys) - 0.3, max(ys) + 0.3)
    mats = sc["materials"] or list(CLASSES)
    parts = []
    tries = 0
    while len(parts) < sc["n_particles"]:
        tries += 1
        if tries > 100_000:
            raise ConfigError("could not place the requested particles inside the survey footprint")
        xy = (float(rng.uniform(box[0], box[1])), float(rng.uniform(box[2], box[3])))
        if any(math.dist(xy, p.position) < sc["min_separation_m"] for p in parts):
            continue
        if not in_swath(probe, [(w, q) for w in wps for q in views], xy, 10.0):
            continue
        size = float(rng.uniform(*sc["size_mm"]))
        color = COLORS[sc["colors"][int(rng.integers(len(sc["colors"])))]]
        mat = mats[int(rng.integers(len(mats)))]
        parts.append(Particle(xy, size, color, mat, len(parts)))
    return Scene(terrain, tuple(parts), seed, max_slope_deg=sc["max_slope_deg"])


# -- log ------------------------------------------------------------------------

LOG_HEADER = ("t_s", "state", "event", "payload")


@dataclass
class MissionLog:
    """Append-only event records; the first record carries the config and seed."""

    records: list = field(default_factory=list)

    def append(self, t: float, state: str, event: str, payload: dict | None = None):
        self.records.append((f"{t:.3f}", state, event, json.dumps(payload or {}, sort_keys=True, separators=(",", ":"))))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(self.records)
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "MissionLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != LOG_HEADER:
            raise ValueError(f"{path} is not a mission log")
        return cls([tuple(r) for r in rows[1:]])

    def header(self) -> dict:
        t, state, event, payload = self.records[0]
        if event != "config":
            raise ValueError("log does not start with a config record")
        return json.loads(payload)

    def events(self) -> list[tuple[str, str]]:
        return [(r[1], r[2]) for r in self.records[1:]]


# -- mission run ----------------------------------------------------------------


@dataclass
class MissionSummary:
    total: int
    found: int
    missed: int
    out_of_swath: int
    sampled: int
    classified_correct: int
    per_class: dict
    area_m2: float
    path_m: float
    accuracy: float
    states_visited: list
    episodes: list

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        return d


class _Machine:
    def __init__(self, log: MissionLog, clock):
        self.state = S.NAVIGATE
        self.log = log
        self.clock = clock
        self.visited = [S.NAVIGATE.value]

    def fire(self, event: str, payload=None):
        new = next_state(self.state, event)
        self.log.append(self.clock(), self.state.value, event, payload)
        self.state = new
        if new.value not in self.visited:
            self.visited.append(new.value)


def _event_path(status: str, trace_phases: list[str]) -> list[str]:
    """Machine events implied by an episode outcome."""
    if status == "lost":
        return ["target_lost"]
    if status == "collision":
        return ["xy_converged", "descent_aborted"]
    if status == "reference_failed":
        return ["xy_converged", "snr_reached", "reference_failed"]
    if status == "unreachable":
        return ["xy_converged", "snr_reached", "reference_clean", "spiral_exhausted"]
    return ["xy_converged", "snr_reached", "reference_clean", "spectrum_valid"]


def load_classifier(cfg: MissionConfig) -> TrainedClassifier:
    path = cfg.model_path()
    if path is not None:
        return TrainedClassifier.load(path)
    cl = cfg.doc["classifier"]
    data = make_dataset(default_library(), cl["train_seed"])
    return train(data, cl["variant"], cl["C"], seed=cl["train_seed"])


def run_mission(cfg: MissionConfig, seed: int | None = None, model: TrainedClassifier | None = None,
                abort_after_episodes: int | None = None):
    """Survey the configured plot; returns (MissionLog, MissionSummary)."""
    seed = cfg.doc["mission"]["seed"] if seed is None else seed
    scene = build_scene(cfg, seed)
    model = model or load_classifier(cfg)
    sv = cfg.doc["survey"]
    rv = cfg.doc["rover"]
    params = cfg.servo_params()
    sim = Simulator(scene, EffectorState(cfg.stow()), geom=cfg.geometry(), intr=cfg.intrinsics(),
                    cal=cfg.calibration(), actuation=cfg.actuation(), rng=np.random.default_rng([seed, 1]))
    seg = SegmentationParams.for_camera(sim.cal.meters_per_pixel)
    views = [view_q(g) for g in sv["views_rad"]]

    log = MissionLog()
    log.append(0.0, "", "config", {"seed": seed, "config": json.loads(cfg.to_json())})
    drive_s = [0.0]
    clock = lambda: drive_s[0] + sim.state.ticks / 60.0
    fsm = _Machine(log, clock)

    handled: list[tuple[float, float]] = []
    counts: list[int] = []
    episodes = []
    path_m = 0.0
    rover = None
    covered: list[tuple[RoverPose, JointConfig]] = []
    aborted = False

    def view_candidates(q: JointConfig):
        sim.state = replace(sim.state, q=q, lamp=False)
        img = sim.render(LED)
        pz = sim.pose
        out = []
        for det in detect_candidates(img, seg):
            gx, gy = pixel_ground(pz, sim.intr, sim.cal, det.centroid.u, det.centroid.v)
            xy = (float(gx), float(gy))
            if all(math.dist(xy, h) > sv["dedupe_m"] for h in handled) and reachable(sim, rover, xy):
                out.append((det, xy))
        return out

    for (start, yaw), line in zip(transect_lines(cfg), range(sv["lines"])):
        along = 0.0
        while along <= sv["length_m"] + 1e-9 and not aborted:
            target = RoverPose(start[0] + math.cos(yaw) * along, start[1] + math.sin(yaw) * along, yaw)
            if rover is not None:
                d = math.hypot(target.x - rover.x, target.y - rover.y)
                path_m += d
                drive_s[0] += d / rv["speed_mps"]
            rover = target
            sim.state = replace(sim.state, rover=rover, q=cfg.stow(), lamp=False)
            fsm.fire("waypoint_reached", {"x": round(rover.x, 6), "y": round(rover.y, 6), "line": line})
            found_here = 0
            for q in views:
                covered.append((rover, q))
                while not aborted:
                    cands = view_candidates(q)
                    if not cands:
                        break
                    det, xy = cands[0]
                    handled.append(xy)
                    found_here += 1
                    fsm.fire("candidate_found", {"u": round(det.centroid.u, 3), "v": round(det.centroid.v, 3),
                                                 "x": round(xy[0], 6), "y": round(xy[1], 6), "area": det.area})
                    res = run_episode(sim, det.centroid, params, seg)
                    events = _event_path(res.status, res.trace.phases())
                    for ev in events:
                        payload = {}
                        if ev in ("spectrum_valid", "spiral_exhausted"):
                            payload = {"probes": res.probes}
                        fsm.fire(ev, payload)
                    ep = {"x": xy[0], "y": xy[1], "status": res.status, "label": None, "margin": None}
                    if fsm.state == S.CLASSIFY:
                        if res.absorbance is not None:
                            label, margin = predict(model, res.absorbance)
                            ep["label"], ep["margin"] = label, margin
                        else:
                            ep["label"] = "no_sample"
                        fsm.fire("logged", {"label": ep["label"], "margin": ep["margin"],
                                            "snr": None if res.assessment is None else round(res.assessment.snr, 3)})
                    episodes.append(ep)
                    sim.state = replace(sim.state, q=q, lamp=False)
                    if abort_after_episodes is not None and len(episodes) >= abort_after_episodes:
                        aborted = True
            if aborted:
                break
            counts.append(found_here)
            fsm.fire("no_candidates", {"detections": found_here})
            recent = counts[-sv["window"]:]
            halve = len(recent) >= sv["window"] and pvariance(recent) > sv["variance_threshold"]
            base = sv["spacing_m"]
            # Halving adds midpoints; the base grid is always visited.
            next_grid = (math.floor(along / base + 1e-9) + 1) * base
            along = min(along + (base / 2 if halve else base), next_grid)
        if aborted:
            break
    if aborted:
        fsm.fire("abort", {"reason": "episode budget reached"})
    else:
        fsm.fire("mission_complete", {"path_m": round(path_m, 6)})
    sim.state = replace(sim.state, q=cfg.stow(), lamp=False)

    summary = _summarize(scene, sim, episodes, covered, path_m, rv["swath_m"], fsm.visited)
    return log, summary


def _summarize(scene, sim, episodes, covered, path_m, swath, visited) -> MissionSummary:
    found = missed = outside = correct = sampled = 0
    per_class: dict = {}
    matched = set()
    for ep in episodes:
        if ep["label"] not in (None, "no_sample"):
            sampled += 1
            per_class[ep["label"]] = per_class.get(ep["label"], 0) + 1
    for p in scene.particles:
        hits = [ep for ep in episodes if math.dist((ep["x"], ep["y"]), p.position) <= p.radius + 0.002]
        if hits:
            found += 1
            ep = hits[0]
            matched.add(p.pid)
            if ep["label"] == p.material:
                correct += 1
        elif in_swath(sim, covered, p.position):
            missed += 1
        else:
            outside += 1
    return MissionSummary(
        total=len(scene.particles),
        found=found,
        missed=missed,
        out_of_swath=outside,
        sampled=sampled,
        classified_correct=correct,
        per_class=dict(sorted(per_class.items())),
        area_m2=path_m * swath,
        path_m=path_m,
        accuracy=correct / found if found else float("nan"),
        states_visited=list(visited),
        episodes=episodes,
    )


# -- endurance and replay ---------------------------------------------------------


def endurance_report(cfg: MissionConfig) -> dict:
    rv = cfg.doc["rover"]
    path = rv["speed_mps"] * rv["battery_hours"] * 3600.0
    power = {k: {"volts": v[0], "amps": v[1], "watts": v[0] * v[1]} for k, v in rv["peak_power"].items()}
    return {
        "speed_mps": rv["speed_mps"],
        "duration_h": rv["battery_hours"],
        "swath_m": rv["swath_m"],
        "path_m": path,
        "area_m2": path * rv["swath_m"],
        "peak_power": power,
        "peak_power_total_w": sum(p["watts"] for p in power.values()),
        "note": "arithmetic consistency check from configured speed, duration and swath; not a field measurement",
    }


def replay(log_path) -> tuple[bool, MissionLog, MissionLog]:
    """Re-run the mission recorded in a log and compare byte for byte."""
    old = MissionLog.read(log_path)
    head = old.header()
    cfg = MissionConfig(head["config"])
    cfg.validate()
    new, _ = run_mission(cfg, head["seed"])
    return new.to_csv() == old.to_csv(), old, new
