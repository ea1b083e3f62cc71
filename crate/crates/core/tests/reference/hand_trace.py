"""Enhanced LIF neuron stepped by hand with exact rationals.

tau = 2, tau_p = 1/2, theta = 1, hard reset to 0, zero initial state and
x = 1 for three steps. Prints one `t,m,s,v,m_p` row per step.
"""

from fractions import Fraction as F

tau, tau_p, theta, v_reset = F(2), F(1, 2), F(1), F(0)
v = m_p = F(0)
for t, x in enumerate([F(1)] * 3, start=1):
    current = x + m_p
    m = v + (current - v) / tau
    s = 1 if m >= theta else 0
    v = v_reset if s else m
    m_p = (1 - tau_p) * m_p + tau_p * (x - s / tau)
    print(f"{t},{float(m)},{s},{float(v)},{float(m_p)}")
