#pragma once

// Scalar special functions shared by the rest of the library: the stable
// logistic, the Jacobi theta_3 partial sums used to normalize a Gaussian PSF
// over an integer lattice, and gamma-distribution moments.

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace vbsr {

// Two-branch logistic; never overflows, saturates exactly at 0/1 for |x| large.
template <typename T>
T logistic(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

namespace detail {
template <typename T>
void require_nome(T q) {
  if (!(q >= T(0)) || q >= T(1))
    throw std::domain_error("theta3: nome q must satisfy 0 <= q < 1");
}

// The q-series loses all relative accuracy as q -> 1 (O(1) terms cancel down
// to a tiny sum and can even go negative); past this nome the dual Gaussian
// comb from Poisson summation takes over. Below it the series keeps at most
// three terms and its value stays above 1 - 2q - 2q^4 > 0.
template <typename T>
constexpr T comb_nome = T(0.05);

// Precision of the comb dual: theta3(u, exp(-2 pi^2 / g)) =
// sqrt(g/2pi) sum_m exp(-g (u-m)^2 / 2).
template <typename T>
T comb_gamma(T q) {
  return T(-2) * std::numbers::pi_v<T> * std::numbers::pi_v<T> / std::log(q);
}

// Terms beyond |u - m| ~ sqrt(120/g) are below 1e-26 of the lead term.
template <typename T>
int comb_range(T gamma) {
  return static_cast<int>(std::ceil(std::sqrt(T(120) / gamma)));
}

// Sums f(u - m) over the comb, pairing m0 +/- k so that integer and
// half-integer u keep their exact reflection symmetry in floating point.
template <typename T, typename F>
T comb_sum(T u, T gamma, F&& f) {
  const long m0 = std::lround(u);
  const int range = comb_range(gamma);
  T sum = f(u - T(m0));
  for (int k = 1; k <= range; ++k)
    sum += f(u - T(m0 + k)) + f(u - T(m0 - k));
  return std::sqrt(gamma / (T(2) * std::numbers::pi_v<T>)) * sum;
}
}  // namespace detail

// theta3(u, q) = 1 + 2 sum_{n>=1} q^(n^2) cos(2 n pi u).
// Series terms are dropped once 2 q^(n^2) < 1e-16; the bound is u-independent
// since |cos| <= 1, so the term count depends on q alone. q^(n^2) is grown
// incrementally: q^(n^2) = q^((n-1)^2) * q^(2n-1). Large nomes switch to the
// all-positive Gaussian comb, so the result is positive for every 0 <= q < 1.
template <typename T>
T theta3(T u, T q) {
  detail::require_nome(q);
  if (q >= detail::comb_nome<T>) {
    const T gamma = detail::comb_gamma(q);
    return detail::comb_sum(u, gamma, [gamma](T d) {
      return std::exp(T(-0.5) * gamma * d * d);
    });
  }
  T sum = T(1);
  T qn2 = T(1);   // q^(n^2) for the current n
  T qodd = q;     // q^(2n-1)
  for (int n = 1;; ++n) {
    qn2 *= qodd;  // now q^(n^2)
    qodd *= q * q;
    const T term = T(2) * qn2;
    if (term < T(1e-16)) break;
    sum += term * std::cos(T(2) * std::numbers::pi_v<T> * T(n) * u);
  }
  return sum;
}

// d theta3 / du = -4 pi sum_{n>=1} n q^(n^2) sin(2 n pi u), same branch and
// truncation rules. Exactly zero at u = 0 on both branches.
template <typename T>
T theta3_du(T u, T q) {
  detail::require_nome(q);
  if (q >= detail::comb_nome<T>) {
    const T gamma = detail::comb_gamma(q);
    return detail::comb_sum(u, gamma, [gamma](T d) {
      return -gamma * d * std::exp(T(-0.5) * gamma * d * d);
    });
  }
  T sum = T(0);
  T qn2 = T(1);
  T qodd = q;
  for (int n = 1;; ++n) {
    qn2 *= qodd;
    qodd *= q * q;
    const T term = T(4) * std::numbers::pi_v<T> * T(n) * qn2;
    if (term < T(1e-16)) break;
    sum -= term * std::sin(T(2) * std::numbers::pi_v<T> * T(n) * u);
  }
  return sum;
}

// d theta3 / dq = 2 sum_{n>=1} n^2 q^(n^2 - 1) cos(2 n pi u), same truncation
// rule. Needed for the PSF-precision derivative of the transform matrix, where
// the nome q = exp(-2 pi^2 / gamma) depends on gamma. The n=1 term is 2 cos(2
// pi u) regardless of q, so the result does not vanish as q -> 0. On the comb
// branch the chain rule through gamma(q) gives
// d theta3 / dq = (d comb / d gamma) * gamma^2 / (2 pi^2 q).
template <typename T>
T theta3_dq(T u, T q) {
  detail::require_nome(q);
  if (q >= detail::comb_nome<T>) {
    const T gamma = detail::comb_gamma(q);
    const T dcomb = detail::comb_sum(u, gamma, [gamma](T d) {
      return (T(0.5) / gamma - T(0.5) * d * d) *
             std::exp(T(-0.5) * gamma * d * d);
    });
    return dcomb * gamma * gamma /
           (T(2) * std::numbers::pi_v<T> * std::numbers::pi_v<T> * q);
  }
  T sum = T(0);
  T qn2m1 = T(1);        // q^(n^2 - 1); (n+1)^2 - 1 = (n^2 - 1) + (2n + 1)
  T qstep = q * q * q;   // q^(2n + 1)
  for (int n = 1;; ++n) {
    const T term = T(2) * T(n) * T(n) * qn2m1;
    if (term < T(1e-16)) break;
    sum += term * std::cos(T(2) * std::numbers::pi_v<T> * T(n) * u);
    qn2m1 *= qstep;
    qstep *= q * q;
  }
  return sum;
}

struct GammaParams {
  double a = 0;  // shape
  double b = 0;  // rate
};

inline double gamma_mean(const GammaParams& p) {
  if (!(p.a > 0) || !(p.b > 0))
    throw std::invalid_argument("gamma_mean: shape and rate must be positive");
  return p.a / p.b;
}

}  // namespace vbsr
