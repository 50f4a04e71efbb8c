"""Small scene builders shared by the simulation tests."""

import numpy as np

from beachbot.kinematics import NOMINAL_Q
from beachbot.scene import COLORS, ActuationModel, EffectorState, Particle, Scene, Simulator, Terrain

QUIET = ActuationModel(0.0, 0.0)


def spot_xy(terrain=Terrain(), q=NOMINAL_Q, actuation=QUIET):
    sim = Simulator(Scene(terrain, (), 0), EffectorState(q), actuation=actuation)
    return tuple(float(c) for c in sim.pose.spot_center)


def sim_with(particles=(), terrain=Terrain(), q=NOMINAL_Q, actuation=QUIET, seed=0, lamp=False):
    return Simulator(Scene(terrain, tuple(particles), seed), EffectorState(q, lamp=lamp), actuation=actuation,
                     rng=np.random.default_rng(seed))


def particle_at(xy, size_mm=3.0, color="blue", material="PP", pid=0):
    return Particle(tuple(map(float, xy)), size_mm, COLORS[color] if isinstance(color, str) else color, material, pid)
