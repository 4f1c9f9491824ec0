"""How the participation ratio behaves under uniform sampling.

Each client's ratio r = observed selections / expected selections starts
out spread wide (a client picked once in round 1 looks 10x over-sampled)
and tightens toward 1 as rounds accumulate. The gate maps r to the weight
that scales the drift memory; the bounded modes keep early outliers from
dominating.

Run: python demos/02_participation_gate.py
"""

import numpy as np

from fedssg.numkit import derive_stream
from fedssg.sampling import (
    GateConfig,
    ParticipationStats,
    SamplerConfig,
    gate,
    ratios,
    record_participation,
    sample_cohort,
)

sampler = SamplerConfig(n_clients=100, cohort_size=10)
stats = ParticipationStats.fresh(100, total_rounds=1000)
print(f"{'round':>6} {'mean r':>8} {'var r':>8} {'min r':>7} {'max r':>7}")
for t in range(1, 1001):
    stats = record_participation(stats, sample_cohort(sampler, t, derive_stream(0, "cohort", t)))
    if t in (1, 10, 100, 1000):
        r = ratios(stats, sampler)
        print(f"{t:>6} {r.mean():>8.3f} {r.var():>8.3f} {r.min():>7.2f} {r.max():>7.2f}")

print("\ngate value for a few ratios")
modes = ("identity", "identity_clipped", "logistic", "identity_full_horizon")
print(f"{'r':>5} " + " ".join(f"{m:>22}" for m in modes))
for r in (0.0, 0.5, 1.0, 2.0, 10.0):
    print(f"{r:>5.1f} " + " ".join(f"{gate(GateConfig(mode=m), r):>22.4f}" for m in modes))
