"""
Gridding in stacked atrous convolutions
=======================================

Three 3x3 convolutions with dilation rates r1, r2, r3 see a window of
1 + 2 * (r1 + r2 + r3) input pixels. Whether every pixel in that window is
actually sampled depends on the rates.
"""

from qapseg.dilation import DilationSchedule, rank_schedules, render_coverage, report

# The two progressions used by the atrous pyramids, plus one that skips too far.
for rates in [(1, 2, 4), (1, 3, 9), (1, 2, 9)]:
    s = DilationSchedule(3, rates)
    r = report(s)
    print(f"rates {list(rates)}: receptive field {r.rf_oracle}, never-sampled pixels {r.uncovered_oracle}")
    print(render_coverage(s))
    print()

# Rank every schedule with rates up to 9. Zero holes come first, wider fields break ties.
ranked = rank_schedules(3, 3, 9)
for r in ranked[:5]:
    print(list(r.rates), r.rf_oracle, r.uncovered_oracle)

# The printed closed forms are also kept for comparison with the simulation.
r = report(DilationSchedule(3, (1, 3, 9)))
print("closed form rf", r.rf_paper, "simulated rf", r.rf_oracle)
