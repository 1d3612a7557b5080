"""Generate the shipped benchmark datasets (fixed seeds)."""

import json
from pathlib import Path

import numpy as np

from vbmc.problems import (GANDK_N_DATA, GANDK_THETA_TRUE, RICKER_T,
                           RICKER_THETA_TRUE, gandk_simulate,
                           ricker_simulate)

DATA = Path(__file__).resolve().parents[1] / "src" / "vbmc" / "data"


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240561)
    z = ricker_simulate(RICKER_THETA_TRUE, T=RICKER_T, n_rep=1, rng=rng)[0]
    with open(DATA / "ricker_data.json", "w") as fh:
        json.dump({"observed": z.tolist(),
                   "theta_true": RICKER_THETA_TRUE.tolist(),
                   "seed": 20240561}, fh)
    rng = np.random.default_rng(20240562)
    x = gandk_simulate(GANDK_THETA_TRUE, n_data=GANDK_N_DATA, n_rep=1,
                       rng=rng)[0]
    with open(DATA / "gandk_data.json", "w") as fh:
        json.dump({"observed": x.tolist(),
                   "theta_true": GANDK_THETA_TRUE.tolist(),
                   "seed": 20240562}, fh)
    print("wrote", DATA / "ricker_data.json")
    print("wrote", DATA / "gandk_data.json")


if __name__ == "__main__":
    main()
