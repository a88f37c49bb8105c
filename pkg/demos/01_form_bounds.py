"""Form bounds, the critical exponent and the Bessel dimension of the radius.

For b(x) = sqrt(delta) (d-2)/2 |x|^-2 x the Hardy inequality makes delta the
exact form bound.  The numeric certificate maximizes a Rayleigh quotient over
radial test functions and should approach delta from below as the log-range
of the test family grows.
"""

import numpy as np

from singular_sde_lab.drift_catalog import certify_form_bound, make_inverse_square, p_critical
from singular_sde_lab.sde import bessel_dimension

print(f"{'delta':>6} {'levels':>32} {'certified':>10} {'p_delta':>8} {'delta_B':>8}")
for delta in (0.25, 1.0, 2.25, 3.24):
    cert = certify_form_bound(make_inverse_square(3, delta))
    levels = " ".join(f"{v:.4f}" for v in cert.levels)
    print(f"{delta:6.2f} {levels:>32} {cert.delta:10.4f} {p_critical(delta):8.3f} "
          f"{bessel_dimension(3, delta):8.3f}")

# The radius |X| is a Bessel process of dimension delta_B = d - sqrt(delta)(d-2)/2,
# which reaches the origin exactly when delta_B < 2, that is when delta > 4.
for delta in np.array([1.0, 4.0, 9.0, 16.0]):
    db = bessel_dimension(3, delta)
    print(f"delta={delta:4.0f}: delta_B={db:.2f} -> {'hits' if db < 2 else 'avoids'} the origin")
