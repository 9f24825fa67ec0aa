"""Simulator scenes shared by the flow tests."""
import numpy as np
from scipy.ndimage import gaussian_filter

from evblur.events import slice_window
from evblur.sim import Scene, TexturedPatch, Trajectory, emit_events, translation_displacement

SLICE = 10_000  # microseconds


def blob_texture(rng, size=448, smooth=5.0):
    t = gaussian_filter(rng.standard_normal((size, size)), smooth)
    return np.where(t > 0, 0.85, 0.15)


def textured_translation(rng, velocity, size=64):
    """Full-frame hard-edged texture translating at ``velocity`` px per slice."""
    vel = np.asarray(velocity, dtype=np.float64)
    patch = TexturedPatch(Trajectory.linear([size / 2, size / 2], vel / SLICE, 0, 3 * SLICE),
                          size // 2 + 23, blob_texture(rng))
    scene = Scene(size, size, 3 * SLICE, np.full((size, size), 0.15), patches=[patch])
    speed = max(np.hypot(*vel), 1e-3)
    stream = emit_events(scene, 0, 3 * SLICE, step=SLICE / (8 * speed))
    return scene, stream


def bar_scene(velocity, size=64):
    """A bright upright bar (about 9 x 39 px) translating at ``velocity`` px per slice."""
    tex = np.full((64, 64), 0.15)
    tex[10:55, 27:37] = 0.9
    vel = np.asarray(velocity, dtype=np.float64)
    patch = TexturedPatch(Trajectory.linear([24, size / 2], vel / SLICE, 0, 3 * SLICE), 28, tex, order=0)
    scene = Scene(size, size, 3 * SLICE, np.full((size, size), 0.15), patches=[patch])
    stream = emit_events(scene, 0, 3 * SLICE, step=SLICE / 40)
    return scene, stream


def middle_slice(stream, direction=1):
    return slice_window(stream, SLICE, 2 * SLICE, direction)


def truth(scene):
    return translation_displacement(scene, SLICE, 2 * SLICE)
