import numpy as np
import pytest

from inrreg import nets, synth


@pytest.fixture(scope="session")
def small_bench():
    """A small deterministic registration problem (24^3, gaussian bump)."""
    return synth.generate(synth.SynthSpec(dims=(24, 24, 24), seed=3,
                                          n_landmarks=20))


@pytest.fixture(scope="session")
def default_bench():
    """The shipped default benchmark (48^3)."""
    return synth.generate(synth.SynthSpec())


def tiny_nets(seed=0, width=8, omega0=3.0, dtype=np.float64):
    """Small nets in 64-bit mode for finite-difference checks; omega0 kept
    low so FD steps stay well inside one activation period."""
    return nets.init(seed, (3, width, width, 3), (1, width, width, width, 4),
                     omega0=omega0, dtype=dtype)


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / (np.abs(b) + floor)
