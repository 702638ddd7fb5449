#!/usr/bin/env python
"""Finite-difference audit of every differentiable op, worst offenders
first. Checks run in 64-bit regardless of the ambient default."""

import time

from fedbcs.gradcheck import check_names, run_all

names = check_names()
print(f"{len(names)} registered checks, tolerance 1e-3 relative\n")

start = time.time()
results = run_all(tolerance=1e-3)
elapsed = time.time() - start

for r in sorted(results, key=lambda r: -r.max_rel_err):
    flag = "ok  " if r.passed else "FAIL"
    print(f"  {flag} {r.name:<22s} max rel err {r.max_rel_err:.3e}")

passed = sum(r.passed for r in results)
print(f"\n{passed}/{len(results)} passed in {elapsed:.1f}s")
