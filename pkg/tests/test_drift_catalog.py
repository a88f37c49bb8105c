import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from singular_sde_lab.drift_catalog import (
    FormBoundCertificate, MollificationSchedule, RadialFamily, certificates_csv,
    certify_form_bound, difference, drift_id, local_l2_distance, lps_exponents,
    make_bounded_smooth, make_constant, make_inverse_square, make_lps_power, make_zero, mollify,
    negate, p_critical, parse_drift_id, random_family_quotients)
from singular_sde_lab.errors import (ExponentRangeError, FormBoundError, InvalidDimensionError,
                                     InvalidParameterError)

deltas = st.floats(0.05, 3.9)


@pytest.mark.parametrize("d", [3, 4, 5])
@pytest.mark.parametrize("delta", [0.25, 1.0, 2.25])
def test_inverse_square_magnitude_and_direction(d, delta):
    b = make_inverse_square(d, delta)
    rng = np.random.default_rng(d)
    x = rng.normal(size=(20, d))
    r = np.linalg.norm(x, axis=-1)
    v = b.eval(0.0, x)
    assert np.allclose(np.linalg.norm(v, axis=-1), math.sqrt(delta) * (d - 2) / (2 * r))
    assert np.allclose(np.sum(v * x, axis=-1), np.linalg.norm(v, axis=-1) * r)


def test_origin_is_undefined_for_singular_fields():
    b = make_inverse_square(3, 1.0)
    assert np.all(np.isnan(b.eval(0.0, np.zeros(3))))
    assert b.is_singular and b.sup_norm() == math.inf


@pytest.mark.parametrize("d", [1, 2, 2.5])
def test_dimension_below_three_rejected(d):
    with pytest.raises(InvalidDimensionError):
        make_inverse_square(d, 1.0)


@pytest.mark.parametrize("delta", [0.0, -1.0])
def test_nonpositive_delta_rejected(delta):
    with pytest.raises(InvalidParameterError):
        make_inverse_square(3, delta)


def test_bounded_smooth_sup_norm_and_constant_part():
    b = make_bounded_smooth(3, 2.0, [0.0, 0.0, 1.0])
    x = np.array([[50.0, 0.0, 0.0]])
    assert np.allclose(b.eval(0.0, x), [[2.0 * math.tanh(50.0), 0.0, 1.0]])
    assert b.sup_norm() == pytest.approx(3.0)
    assert np.allclose(make_zero(3).eval(0.0, x), 0.0)
    assert np.allclose(make_constant(3, [1, 2, 3]).eval(0.0, x), [[1, 2, 3]])


@pytest.mark.parametrize("delta, expected", [(1.0, 2.0), (0.25, 4.0 / 3.0), (2.25, 4.0)])
def test_p_critical(delta, expected):
    assert p_critical(delta) == pytest.approx(expected)


@pytest.mark.parametrize("delta", [0.0, 4.0, 9.0])
def test_p_critical_outside_range(delta):
    with pytest.raises(ExponentRangeError):
        p_critical(delta)


@given(d=st.integers(3, 6), delta=deltas)
@settings(max_examples=40, deadline=None)
def test_drift_id_round_trip(d, delta):
    b = make_inverse_square(d, delta)
    assert drift_id(parse_drift_id(b.id)) == b.id


@pytest.mark.parametrize("text", ["zero:d=3", "bounded-smooth:d=4:amp=0.5",
                                  "bounded-smooth:d=3:amp=1.0:c=0.0,0.0,1.0",
                                  "inverse-square:d=3:delta=1.0@n=4",
                                  "diff(inverse-square:d=3:delta=1.0@n=4|inverse-square:d=3:delta=1.0@n=8)"])
def test_catalog_ids_round_trip(text):
    assert parse_drift_id(text).id == text


@pytest.mark.parametrize("text", ["inverse-square:d=3", "warp:d=3", "zero:d=3:foo=1", "diff(zero:d=3)"])
def test_bad_ids_rejected(text):
    with pytest.raises(InvalidParameterError):
        parse_drift_id(text)


def test_mollified_field_is_bounded_and_close_to_the_original_away_from_zero():
    b = make_inverse_square(3, 1.0)
    m = mollify(b, 8)
    assert not m.is_singular
    r = np.geomspace(1e-4, 20.0, 400)
    assert np.all(np.abs(m.radial(r)) <= 8.0 + 1e-9)
    far = r[(r > 0.5) & (r < 7.0)]
    assert np.allclose(m.radial(far), b.radial(far), rtol=0.02)
    # the truncation at |x| = n switches the field off beyond n + width
    assert np.all(m.radial(np.array([8.2, 10.0])) == 0.0)


def test_mollification_is_cached_and_validated():
    b = make_inverse_square(3, 1.0)
    assert mollify(b, 4) is mollify(b, MollificationSchedule(4))
    with pytest.raises(InvalidParameterError):
        MollificationSchedule(0)
    with pytest.raises(InvalidParameterError):
        MollificationSchedule(4, value_cap=-1.0)


def test_mollified_sequence_is_cauchy_locally():
    b = make_inverse_square(3, 1.0)
    d1 = local_l2_distance(mollify(b, 4), mollify(b, 8))
    d2 = local_l2_distance(mollify(b, 8), mollify(b, 16))
    assert d2 < d1


def test_difference_and_negation():
    b1, b2 = make_bounded_smooth(3, 2.0), make_bounded_smooth(3, 0.5, [1.0, 0, 0])
    x = np.random.default_rng(0).normal(size=(10, 3))
    assert np.allclose(difference(b1, b2).eval(0.0, x), b1.eval(0.0, x) - b2.eval(0.0, x))
    assert np.allclose(negate(b1).eval(0.0, x), -b1.eval(0.0, x))
    with pytest.raises(InvalidDimensionError):
        difference(b1, make_zero(4))


@pytest.mark.parametrize("delta", [0.25, 1.0, 2.25])
def test_rayleigh_certificate_matches_hardy_constant(delta):
    # Hardy: int |x|^{-2} xi^2 <= (2/(d-2))^2 int |grad xi|^2, sharp, so the
    # form bound of the inverse-square field is exactly delta
    cert = certify_form_bound(make_inverse_square(3, delta))
    assert cert.method == "rayleigh_numeric" and cert.one_sided
    assert cert.delta == pytest.approx(delta, rel=0.05)
    assert cert.delta <= delta * (1 + 1e-9)
    assert list(cert.levels) == sorted(cert.levels)


def test_analytic_certificates():
    assert certify_form_bound(make_inverse_square(3, 2.0), method="analytic").delta == 2.0
    c = certify_form_bound(make_bounded_smooth(3, 2.0), method="auto")
    assert c.g() == pytest.approx(4.0)
    with pytest.raises(InvalidParameterError):
        certify_form_bound(make_lps_power(3, 0.5), method="analytic")


def test_random_test_functions_stay_below_the_certificate():
    b = make_inverse_square(3, 1.0)
    assert max(random_family_quotients(b, n_funcs=6, seed=3)) <= 1.0


def test_supercritical_power_has_no_form_bound():
    with pytest.raises(FormBoundError):
        certify_form_bound(make_lps_power(3, 1.5), RadialFamily(decades=(4, 8, 16)))


def test_certificate_invariants():
    with pytest.raises(InvalidParameterError):
        FormBoundCertificate(0.0, 0.0, 0.05, "analytic")
    with pytest.raises(InvalidParameterError):
        FormBoundCertificate(1.0, -1.0, 0.05, "analytic")
    with pytest.raises(InvalidParameterError):
        FormBoundCertificate(1.0, 0.0, 0.05, "rayleigh_numeric")
    table = FormBoundCertificate(1.0, np.array([[0.0, 0.0], [1.0, 2.0]]), 0.05, "analytic")
    assert table.g(0.5) == pytest.approx(1.0)


def test_certificates_csv_has_one_header():
    b = make_inverse_square(3, 1.0)
    text = certificates_csv([(b, certify_form_bound(b, method="analytic"))])
    lines = text.strip().split("\n")
    assert lines[0].startswith("kind,d,params,delta") and len(lines) == 2


def test_lps_exponents():
    assert lps_exponents(make_lps_power(3, 0.5)).r == pytest.approx(6.0)
    assert lps_exponents(make_inverse_square(3, 1.0)) is None
    assert lps_exponents(mollify(make_inverse_square(3, 1.0), 4)).r == math.inf


def test_mollification_preserves_the_form_bound():
    b = make_inverse_square(3, 1.0)
    base = certify_form_bound(b).delta
    assert certify_form_bound(mollify(b, 8)).delta <= base + 0.05


def test_mollified_zero_field_is_zero():
    m = mollify(make_zero(3), 4)
    x = np.random.default_rng(2).normal(size=(10, 3))
    assert np.all(m.eval(0.0, x) == 0.0)
