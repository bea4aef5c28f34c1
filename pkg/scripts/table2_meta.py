#!/usr/bin/env python3
"""Meta-analyse the per-cohort odds ratios reported for the two Spry cohorts.

Standard errors are recovered from the 95% intervals on the log scale, then
pooled with fixed and DerSimonian-Laird random effects per exposure arm.
"""
import json
import math

from cohortforge.estimators import estimate_from_interval, meta_fixed_random
from cohortforge.fixtures import fixture_dir

Z = 1.959963984540054


def main():
    table = json.loads((fixture_dir() / "table2_spry.json").read_text(encoding="utf-8"))
    for arm in table["arms"]:
        ests = [estimate_from_interval(*table["replication"][cohort][arm], arm, cohort, table["comparator"])
                for cohort in sorted(table["replication"])]
        m = meta_fixed_random(ests)
        lo, hi = (math.exp(m.fixed + s * Z * m.fixed_se) for s in (-1, 1))
        pooled = table["pooled"][arm]
        print(f"{arm:<16} fixed OR {math.exp(m.fixed):.2f} [{lo:.2f}, {hi:.2f}]  "
              f"random OR {math.exp(m.random):.2f}  Q={m.q:.2f} I2={m.i2:.1f}%  "
              f"(pooled-data OR {pooled[0]} [{pooled[1]}, {pooled[2]}])")


if __name__ == "__main__":
    main()
