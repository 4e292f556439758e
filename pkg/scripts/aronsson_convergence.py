#!/usr/bin/env python3
"""Convergence study: reduced critical-system residual of the explicit
|x|^(4/3) - |y|^(4/3) solution under grid refinement on [1,2]^2.

Usage: python scripts/aronsson_convergence.py [--resolutions 17,33,65,129]
"""

import argparse

import numpy as np

from linfvar import ClosedFormMap, DomainBox, Hamiltonian, Subdomain, residual_field

EXPR = "abs(x1)^(4/3) - abs(x2)^(4/3)"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolutions", default="17,33,65,129")
    ap.add_argument("--csv", default=None, help="optional output CSV path")
    args = ap.parse_args()
    resolutions = [int(r) for r in args.resolutions.split(",")]
    u = ClosedFormMap.from_expressions([EXPR], n=2)
    H = Hamiltonian.dirichlet(2, 1)
    rows = []
    prev = None
    print(f"{'res':>5} {'h':>10} {'max residual':>14} {'ratio':>7}")
    for res in resolutions:
        box = DomainBox((1.0, 1.0), (2.0, 2.0), (res, res))
        O = Subdomain.whole(box)
        gm = u.sample(box)
        rf = residual_field(gm, H, O, variant="reduced")
        err = float(rf.norms.max())
        h = float(box.spacing[0])
        ratio = prev / err if prev else float("nan")
        print(f"{res:>5} {h:>10.5f} {err:>14.4e} {ratio:>7.2f}")
        rows.append((res, h, err, ratio))
        prev = err
    if args.csv:
        np.savetxt(args.csv, np.asarray(rows), delimiter=",",
                   header="resolution,h,max_residual,ratio", comments="")
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
