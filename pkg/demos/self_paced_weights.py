"""Pair weights as a function of pair loss for a few learning paces.

The soft weight fades linearly to zero at l = gamma; the hard weight is the
0/1 rule that minimises the linear objective w*l - gamma*w exactly. The last
column shows how much lower the hard weight's objective is.
"""

import numpy as np

from cawcl.selfpaced import hard_weight, optimal_weight, regularizer

losses = np.linspace(0.0, 3.0, 7)
for gamma in (0.5, 1.0, 2.0):
    print(f"gamma = {gamma}")
    for l in losses:
        soft, hard = optimal_weight(l, gamma), hard_weight(l, gamma)
        gap = (soft * l + regularizer(soft, gamma)) - (hard * l + regularizer(hard, gamma))
        print(f"  l {l:4.1f}   soft {soft:.3f}   hard {hard:.0f}   objective gap {gap:.3f}")
