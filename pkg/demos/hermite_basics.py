"""
Hermite expansions of activations and links
===========================================

Everything in the package is expressed in the probabilists' Hermite basis
He_k, with E[He_k(z) He_l(z)] = k! when k == l and 0 otherwise.
"""

import math

import numpy as np

from additive_lab.hermite import (
    HermiteSeries,
    gauss_quadrature,
    information_exponent,
    relu_shifted_coeffs,
    series_eval,
    superorthogonal_k2l2,
    superorthogonality_check,
)

# A link function is a coefficient vector.  He_3 normalized to unit L2 norm:
link = HermiteSeries.basis(3, normalized=True)
print("He_3 / sqrt(3!) coefficients:", link.coeffs)
print("information exponent:", information_exponent(link))

# Gauss-Hermite quadrature integrates polynomials exactly, so the second
# moment from the coefficients matches the quadrature estimate.
rule = gauss_quadrature(16)
print("E[f^2] from coefficients:", link.second_moment())
print("E[f^2] by quadrature:   ", rule.expect(lambda z: series_eval(link, z) ** 2))

# %%
# A ReLU neuron with bias b has closed-form Hermite coefficients.  Without a
# bias every odd coefficient above 1 vanishes, which is why the students here
# draw their biases at random: a degree-3 teacher needs a degree-3 student.
for b in (0.0, -0.5, 0.5):
    c = relu_shifted_coeffs(b, 5).coeffs
    print(f"b = {b:+.1f}: c_3 = {c[3]:+.5f}, c_4 = {c[4]:+.5f}")

# %%
# A polynomial whose first two powers are orthogonal to He_1 and He_2.
# Its square has no degree-1 or degree-2 component, so label transformations
# of degree at most two reveal nothing about the direction.
f = superorthogonal_k2l2()
print("degree:", f.degree)
print("residuals E[f^k He_l], k, l in {1, 2}:")
print(np.array2string(superorthogonality_check(f, 2, 2), precision=3))
print("sqrt(E f^2) =", math.sqrt(f.second_moment()))
