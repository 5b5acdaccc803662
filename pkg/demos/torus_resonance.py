"""Averaging on the torus with and without a locked mode.

For the default field the in-measure error falls roughly like eps.  The
"locked" field contains cos(2 pi (2 phi1 - phi2)), which stays constant
along trajectories, so the averaged equation misses it and the error does
not go away.

    python3 demos/torus_resonance.py
"""
from nonconvavg.torus import build_torus_field, run_torus

for name in ("default", "locked"):
    f = build_torus_field(name)
    res = run_torus(f, [1e-1, 1e-2], n_points=32, seed=0)
    errs = ", ".join(f"{e:.3g}" for e in res.errors)
    print(f"{name:>8}: locked modes {f.locked_modes()}, in-measure error {errs}")
