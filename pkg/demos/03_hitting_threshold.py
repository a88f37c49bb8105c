"""Which drifts let the diffusion reach the origin?

Simulate dX = -b_n(X) dt + sqrt(2) dB from |x0| = 0.5 for several delta and
record how often |X| drops below eps before T = 1.  Past delta = 4 the
radius behaves like a Bessel process of dimension below 2 and the hitting
probability jumps.  A one-dimensional simulation of the radius and a PDE
for the continuous-time probability serve as references at delta = 9.

M is kept small so that the demo runs in about a minute.
"""

from singular_sde_lab.drift_catalog import make_inverse_square, mollify
from singular_sde_lab.sde import (bessel_dimension, bessel_hitting_pde, hitting_probability,
                                  radial_oracle, simulate)

M, dt, T, eps = 4000, 1e-4, 1.0, 0.05
for delta in (0.25, 1.0, 4.0, 9.0, 16.0):
    b = mollify(make_inverse_square(3, delta), 256)
    ens = simulate(b, (0.5, 0.0, 0.0), dt, T, M, seed=2024, stop_radius=eps)
    st = hitting_probability(ens, eps)
    print(f"delta={delta:5.2f} delta_B={bessel_dimension(3, delta):5.2f}  "
          f"p_hat={st.p_hat:.4f} +- {st.ci95:.4f}")

orc = radial_oracle(3, 9.0, 0.5, dt, T, M, seed=7777, epsilon=eps)
print(f"radial chain at delta=9: {orc.stats.p_hat:.4f} +- {orc.stats.ci95:.4f}")
print(f"continuous time at delta=9: {bessel_hitting_pde(3, 9.0, 0.5, eps, T):.4f}")
