"""Regenerates the bundled synthetic scenarios and disturbance traces.

All parameters and profiles are synthetic: diurnal solar/wind/load
shapes with fixed-seed noise, sized so that every microgrid is islanded-
feasible at all times (conventional capacity covers the peak load) while
power exchange is clearly beneficial (complementary surpluses).

Run from the repository root:  python3 scripts/gen_data.py
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from emgrid.io import write_scenario, write_series  # noqa: E402
from emgrid.model import (ConventionalGenSpec, DisturbanceSample,  # noqa: E402
                          GridGraph, LineSpec, MicrogridSpec, PccSpec,
                          ResSpec, StorageSpec)
from emgrid.scenario import Scenario, SolverSettings  # noqa: E402

OUT = Path(__file__).resolve().parent.parent / "src" / "emgrid" / "data"
STEPS = 337          # one week at 30 min plus the seed sample
TS_HOURS = 0.5
SEED = 20240817


def mg_fleet():
    pcc = PccSpec(a_p=0.04, a_abs=0.008)
    return [
        # wind-heavy producer, small town load
        MicrogridSpec(
            id=1,
            conv=(ConventionalGenSpec(p_min=5, p_max=60, a=3.0,
                                      a_lin=0.16, a_quad=0.0025),),
            storage=(StorageSpec(x_min=8, x_max=80, p_min=-40, p_max=40,
                                 a_s=0.0015),),
            res=(ResSpec(p_max=120, a_r=0.05),),
            loads=1, pcc=pcc),
        # load-heavy town with modest solar
        MicrogridSpec(
            id=2,
            conv=(ConventionalGenSpec(p_min=10, p_max=120, a=2.5,
                                      a_lin=0.12, a_quad=0.0015),),
            storage=(StorageSpec(x_min=6, x_max=60, p_min=-35, p_max=35,
                                 a_s=0.002),),
            res=(ResSpec(p_max=60, a_r=0.06),),
            loads=1, pcc=pcc),
        # solar farm with a large battery
        MicrogridSpec(
            id=3,
            conv=(ConventionalGenSpec(p_min=5, p_max=80, a=2.0,
                                      a_lin=0.14, a_quad=0.002),),
            storage=(StorageSpec(x_min=15, x_max=150, p_min=-50, p_max=50,
                                 a_s=0.001),),
            res=(ResSpec(p_max=100, a_r=0.05),),
            loads=1, pcc=pcc),
        # industrial site, flat demand, some wind
        MicrogridSpec(
            id=4,
            conv=(ConventionalGenSpec(p_min=10, p_max=100, a=2.2,
                                      a_lin=0.10, a_quad=0.0012),),
            storage=(StorageSpec(x_min=5, x_max=50, p_min=-30, p_max=30,
                                 a_s=0.002),),
            res=(ResSpec(p_max=70, a_r=0.06),),
            loads=1, pcc=pcc),
    ]


def grid4():
    # four nodes, four lines: ring 1-2-3 closed by 1-3, spur to 4
    mk = lambda a, b, y, lim, w: LineSpec(a=a, b=b, susceptance=y,
                                          p_min=-lim, p_max=lim,
                                          cost_weight=w)
    return GridGraph(n=4, edges=(
        mk(1, 2, 110.0, 70.0, 2e-4),
        mk(2, 3, 95.0, 65.0, 2.5e-4),
        mk(1, 3, 100.0, 60.0, 3e-4),
        mk(3, 4, 120.0, 80.0, 1.5e-4),
    ))


def profiles(rng, steps):
    """Per-MG renewable availability and load traces (kW)."""
    t = np.arange(steps)
    hour = (t * TS_HOURS) % 24.0
    day = t * TS_HOURS / 24.0

    def smooth(x, w=5):
        k = np.ones(w) / w
        return np.convolve(np.pad(x, (w // 2, w // 2), mode="edge"), k,
                           mode="valid")[:steps]

    def solar(scale):
        base = np.maximum(0.0, np.sin(np.pi * (hour - 6.0) / 12.0)) ** 2
        cloud = np.clip(1.0 - 0.45 * np.abs(smooth(rng.standard_normal(steps))),
                        0.25, 1.0)
        return scale * base * cloud

    def wind(scale, phase):
        slow = 0.55 + 0.35 * np.sin(2 * np.pi * day / 2.3 + phase) \
            + 0.10 * np.sin(2 * np.pi * day * 3.1 + 2 * phase)
        gust = 0.15 * smooth(rng.standard_normal(steps), 7)
        return scale * np.clip(slow + gust, 0.03, 1.0)

    def load(base, peak, weekend_drop, phase=0.0):
        morning = np.exp(-0.5 * ((hour - 8.5 - phase) / 2.0) ** 2)
        evening = np.exp(-0.5 * ((hour - 19.0 - phase) / 2.4) ** 2)
        shape = base + peak * (0.55 * morning + 0.8 * evening)
        wk = np.where((day % 7.0) >= 5.0, weekend_drop, 1.0)
        noise = 1.0 + 0.04 * smooth(rng.standard_normal(steps), 3)
        return -np.clip(shape * wk * noise, 0.3 * base, None)

    res = {
        1: wind(110.0, 0.4),
        2: solar(55.0),
        3: solar(95.0),
        4: wind(60.0, 2.1),
    }
    loads = {
        1: load(18.0, 16.0, 0.9),
        2: load(45.0, 42.0, 0.85, phase=0.5),
        3: load(28.0, 26.0, 0.9, phase=-0.4),
        4: load(48.0, 14.0, 0.97),
    }
    return res, loads


def build_samples(res, loads, ids, steps):
    out = []
    for t in range(steps):
        out.append(DisturbanceSample(
            res={j: np.array([res[j][t]]) for j in ids},
            load={j: np.array([loads[j][t]]) for j in ids}))
    return out


def main():
    rng = np.random.default_rng(SEED)
    fleet = mg_fleet()
    res, loads = profiles(rng, STEPS)
    settings = SolverSettings(rho=1e3, tau=0.3, eps_term=1e-5, nu_max=5000,
                              gamma=1.0, Ts=TS_HOURS, H=12,
                              dd_alpha0=400.0, dd_prox=100.0)

    # 4-microgrid scenario: the full fleet on the ring-with-spur grid
    scen4 = Scenario(specs=tuple(fleet), graph=grid4(),
                     x0={1: [40.0], 2: [30.0], 3: [75.0], 4: [25.0]},
                     settings=settings)
    write_scenario(OUT / "scenario4.json", scen4)
    write_series(OUT / "series4.csv", scen4.specs,
                 build_samples(res, loads, [1, 2, 3, 4], STEPS))

    # 2-microgrid scenario: producer and consumer joined by one line
    two = [fleet[0], fleet[1]]
    scen2 = Scenario(
        specs=tuple(two),
        graph=GridGraph(n=2, edges=(LineSpec(
            a=1, b=2, susceptance=110.0, p_min=-70.0, p_max=70.0,
            cost_weight=2e-4),)),
        x0={1: [40.0], 2: [30.0]}, settings=settings)
    write_scenario(OUT / "scenario2.json", scen2)
    write_series(OUT / "series2.csv", scen2.specs,
                 build_samples(res, loads, [1, 2], STEPS))

    # single microgrid: the town alone
    one = MicrogridSpec(id=1, conv=fleet[1].conv, storage=fleet[1].storage,
                        res=fleet[1].res, loads=1, pcc=fleet[1].pcc)
    scen1 = Scenario(specs=(one,), graph=GridGraph(n=1, edges=()),
                     x0={1: [30.0]}, settings=settings)
    write_scenario(OUT / "scenario1.json", scen1)
    res1 = {1: res[2]}
    loads1 = {1: loads[2]}
    write_series(OUT / "series1.csv", scen1.specs,
                 build_samples(res1, loads1, [1], STEPS))
    print(f"wrote bundled data to {OUT}")


if __name__ == "__main__":
    main()
