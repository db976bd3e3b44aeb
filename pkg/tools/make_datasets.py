"""Regenerate the bundled synthetic measurement files under datasets/.

Each dataset is produced by the package's own forward models with a
fixed-seed noise draw, then written through the CLI's deterministic
writers, so a rerun reproduces the files byte for byte. The matching
TOML configs make each file a ready-to-run fit:

    mate-optix --config datasets/loss.toml --out /tmp/out fit loss
"""
from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from mate_optix.cli import write_csv  # noqa: E402
from mate_optix.core import (CavityGeometry, MembraneSpec, Mirror,  # noqa: E402
                             thin_membrane_coefficients)
from mate_optix.fitting import (PolyStretch, loss_budget_model,  # noqa: E402
                                map_model_detuning)
from mate_optix.resonance import solve_resonant_k  # noqa: E402
from mate_optix.tilt import TiltedCavity, wavelength_spectrum  # noqa: E402

DATASETS = Path(__file__).parent.parent / "datasets"

SEED = 20260822


# ---------------------------------------------------------------------------
# resonance map: three mode branches on distorted piezo axes

MAP_LENGTH = 0.1
MAP_INDEX = 2.0
MAP_THICKNESS = 76e-9
MAP_BRANCHES = (129031, 129032, 129033)
MAP_OFFSETS = (0.0, 8.3e9, -7.9e9)
MAP_X_SCALE = 1.1e-6
MAP_X_STRETCH = PolyStretch(0.09, 1.0, 0.03, -0.02, 0.015)
MAP_DET_SCALE = 1.5e10
MAP_DET_STRETCH = PolyStretch(0.0, 1.0, -0.04, 0.015, -0.008)
MAP_NOISE = 2.5e7  # rad/s detuning scatter
MAP_VOLTS_PER_UNIT = (6.8, 1.9)  # membrane piezo: raw = 6.8 u + 1.9
MAP_DET_VOLTS = (3.2, -0.7)  # length piezo: raw = 3.2 w - 0.7
MAP_RAD_PER_VOLT = 4.6e9  # nominal instrument conversion


def make_map() -> None:
    rng = np.random.default_rng(SEED)
    rows = []
    grids = (np.linspace(-1.0, 1.0, 47),
             np.linspace(-0.96, 0.93, 43),
             np.linspace(-0.9, 0.98, 41))
    for branch, offset, grid in zip(MAP_BRANCHES, MAP_OFFSETS, grids):
        membrane = thin_membrane_coefficients(
            MAP_INDEX, MAP_THICKNESS, math.pi * branch / MAP_LENGTH)
        x_phys = MAP_X_SCALE * MAP_X_STRETCH(grid)
        detuning = map_model_detuning(x_phys, branch, membrane,
                                      MAP_LENGTH) + offset
        detuning = detuning + MAP_NOISE * rng.standard_normal(grid.size)
        w = MAP_DET_STRETCH.invert(detuning / MAP_DET_SCALE, -3.0, 3.0)
        x_raw = MAP_VOLTS_PER_UNIT[0] * grid + MAP_VOLTS_PER_UNIT[1]
        l_raw = MAP_DET_VOLTS[0] * np.asarray(w) + MAP_DET_VOLTS[1]
        det_raw = MAP_RAD_PER_VOLT * l_raw
        rows.extend(zip(x_raw, l_raw, [branch] * grid.size, det_raw))
    write_csv(DATASETS / "map.csv",
              ("piezo_x_raw", "piezo_L_raw", "mode_id", "detuning_raw"),
              rows)


MAP_CONFIG = """\
[model]
length_l = 0.1
branch_n = 129032

[model.mirror1]
t_sq = 6e-3

[model.mirror2]
t_sq = 0.0

[model.membrane]
kind = "thin"
index_n = 2.0
thickness_d = 76e-9

[fit.map]
data = "map.csv"
membrane_model = "thin"
refractive_index = 2.0

[fit.map.init]
x_scale = 1.04e-6
x_c0 = 0.07
det_scale = 8.0e9
thickness_d = 60e-9
"""


# ---------------------------------------------------------------------------
# loss budget: decay rate and resonant reflection over membrane travel

LOSS_LENGTH = 0.1
LOSS_BRANCH = 129033
LOSS_MEMBRANE = (2.0, 90e-9)  # slab index, thickness
LOSS_TRUTH = (0.82, 8.4e-3, 6.5e-4, 7.5e-4)  # eps, t1_sq, S1, t2_sq
LOSS_NOISE = 0.01


def make_loss() -> None:
    rng = np.random.default_rng(SEED + 1)
    membrane = MembraneSpec.slab(*LOSS_MEMBRANE)
    x = 3e-6 + np.linspace(0.0, 2.0 * LOSS_LENGTH / LOSS_BRANCH, 30)
    resonant_k = np.asarray([solve_resonant_k(
        CavityGeometry(length_l=LOSS_LENGTH, membrane_x=float(xi),
                       mode_index_n=LOSS_BRANCH,
                       wavenumber_k=math.pi * LOSS_BRANCH / LOSS_LENGTH),
        membrane, branch_n=LOSS_BRANCH).wavenumber_k for xi in x])
    kappa, reflection = loss_budget_model(x, resonant_k, LOSS_TRUTH,
                                          membrane, LOSS_LENGTH)
    sigma_kappa = LOSS_NOISE * kappa
    sigma_r = LOSS_NOISE * reflection
    kappa = kappa + sigma_kappa * rng.standard_normal(x.size)
    reflection = reflection + sigma_r * rng.standard_normal(x.size)
    write_csv(DATASETS / "loss.csv",
              ("x_m", "kappa_rad_s", "r_res", "sigma_kappa", "sigma_r"),
              list(zip(x, kappa, reflection, sigma_kappa, sigma_r)))


LOSS_CONFIG = """\
[model]
length_l = 0.1
branch_n = 129033

[model.mirror1]
t_sq = 8.4e-3
loss_s = 6.5e-4

[model.mirror2]
t_sq = 7.5e-4

[model.membrane]
kind = "slab"
index_n = 2.0
thickness_d = 90e-9

[fit.loss]
data = "loss.csv"

[fit.loss.init]
mode_match_eps = 0.7
t1_sq = 7e-3
loss_s1 = 4e-4
t2_sq = 1e-3
"""


# ---------------------------------------------------------------------------
# tilted transmission: wavelength sweeps at stepped interference orders

TRANS_MEMBRANE = (2.0, 88e-9)
TRANS_LAMBDA = 1.55e-6
TRANS_ORDER = 23
TRANS_OFFSETS = (0, -2, -4, -6, -8, -10)
TRANS_JITTER = (2.4e-9, -1.7e-9, 1.1e-9, -0.6e-9, 1.9e-9, -1.3e-9)
TRANS_R1_SQ = 0.992
TRANS_THETA0 = 0.21e-3
TRANS_SLOPE = 35.0
TRANS_BEAM = 80e-6
TRANS_NOISE = 0.01


def make_transmission() -> None:
    rng = np.random.default_rng(SEED + 2)
    k0 = 2.0 * math.pi / TRANS_LAMBDA
    membrane = MembraneSpec.slab(*TRANS_MEMBRANE)
    phi = math.pi + membrane.coefficients_at(k0).r_phase
    mirror1 = Mirror(math.sqrt(TRANS_R1_SQ), math.sqrt(1.0 - TRANS_R1_SQ))

    def gap(order: int) -> float:
        return (2.0 * math.pi * order - phi) / (2.0 * k0)

    rows = []
    reference = gap(TRANS_ORDER) + TRANS_JITTER[0]
    for offset, jitter in zip(TRANS_OFFSETS, TRANS_JITTER):
        grid = np.linspace(TRANS_LAMBDA - 18e-9, TRANS_LAMBDA + 18e-9, 121)
        x0 = gap(TRANS_ORDER + offset) + jitter
        theta = TRANS_THETA0 - TRANS_SLOPE * (x0 - reference)
        cavity = TiltedCavity(x0=x0, theta=theta, sigma=TRANS_BEAM,
                              mirror1=mirror1, membrane=membrane)
        power = wavelength_spectrum(cavity, grid)
        sigma = TRANS_NOISE * float(power.max())
        power = power + sigma * rng.standard_normal(grid.size)
        rows.extend(zip([offset] * grid.size, grid, power,
                        [sigma] * grid.size))
    write_csv(DATASETS / "transmission.csv",
              ("mode_l", "lambda_m", "p_t", "sigma"), rows)


TRANS_CONFIG = """\
[model]
length_l = 0.1
branch_n = 129032

[model.mirror1]
t_sq = 8e-3

[model.mirror2]
t_sq = 0.0

[model.membrane]
kind = "slab"
index_n = 2.0
thickness_d = 88e-9

[fit.transmission]
data = "transmission.csv"
beam_sigma = 80e-6
l0_min = 19
l0_max = 27

[fit.transmission.init]
r1_sq = 0.99
theta_0 = 0.18e-3
tilt_slope_a = 30.0
"""


def main() -> None:
    DATASETS.mkdir(exist_ok=True)
    make_map()
    make_loss()
    make_transmission()
    for name, text in (("map.toml", MAP_CONFIG), ("loss.toml", LOSS_CONFIG),
                       ("transmission.toml", TRANS_CONFIG)):
        (DATASETS / name).write_text(text, encoding="utf-8")
        print(f"wrote {DATASETS / name}")


if __name__ == "__main__":
    main()
