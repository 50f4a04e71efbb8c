"""Simulation and analysis toolkit for a beach-surveying microplastics rover.

Arm kinematics, an eye-in-hand camera model, NIR spectra and absorbance, an
SVM material classifier, particle segmentation, a seeded scene simulator, the
closed-loop servo controller and the mission state machine.
"""

__version__ = "0.1.0"
