# SPDX-License-Identifier: Apache-2.0
# Regenerates the report fixtures from first principles.
import math
import os

here = os.path.dirname(os.path.abspath(__file__))

sets = [
    ("baseline", [float(i) for i in range(1, 101)]),
    ("ondemand", [i * 2.0 + 10.0 for i in range(1, 101)]),
    ("pool", [i * 1.17 for i in range(1, 101)]),
]


def p95(xs):
    s = sorted(xs)
    rank = -(-95 * len(s) // 100)
    return s[rank - 1]


def stddev(xs):
    m = sum(xs) / len(xs)
    return math.sqrt(sum((x - m) * (x - m) for x in xs) / (len(xs) - 1))


def change(frac):
    s = "%+.2f" % (frac * 100.0)
    return "0.00%" if s in ("+0.00", "-0.00") else s + "%"


base = p95(sets[0][1])
with open(os.path.join(here, "boottime_fixture.csv"), "w") as f:
    f.write("Type,p95,p95_change,stddev\n")
    for label, xs in sets:
        c = 0.0 if label == "baseline" else (p95(xs) - base) / base
        f.write("%s,%.3f,%s,%.3f\n" % (label, p95(xs), change(c), stddev(xs)))

for label, xs in sets:
    with open(os.path.join(here, "cdf_fixture_%s.csv" % label), "w") as f:
        f.write("ms,fraction\n")
        s = sorted(xs)
        for v in sorted(set(s)):
            f.write("%.6f,%.6f\n" % (v, sum(1 for x in s if x <= v) / len(s)))

rows = [
    ("baseline", 2500 * 1024),
    ("vtpm-vmm", 2504 * 1024),
    ("vtpm-vmm+backend", (2500 + 3760) * 1024),
]
with open(os.path.join(here, "memoverhead.csv"), "w") as f:
    f.write("Type,kb_overhead,change\n")
    b = rows[0][1]
    for label, n in rows:
        f.write("%s,%.2f,%s\n" % (label, n / 1024.0, change((n - b) / b)))
