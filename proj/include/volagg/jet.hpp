#pragma once

// Forward-mode dual numbers with N tangent directions. Used for the local
// Jacobians of small closed-form maps (e.g. axis-angle -> rotation) inside
// hand-written backward rules.

#include <array>
#include <cmath>

namespace volagg::ad {

template <int N>
struct Jet {
  double a = 0.0;
  std::array<double, N> v{};

  Jet() = default;
  Jet(double value) : a(value) {}  // NOLINT: implicit constants are intended
  Jet(double value, int direction) : a(value) { v[direction] = 1.0; }

  Jet& operator+=(const Jet& o) {
    a += o.a;
    for (int i = 0; i < N; ++i) v[i] += o.v[i];
    return *this;
  }
  Jet& operator-=(const Jet& o) {
    a -= o.a;
    for (int i = 0; i < N; ++i) v[i] -= o.v[i];
    return *this;
  }
};

template <int N>
Jet<N> operator-(const Jet<N>& x) {
  Jet<N> r;
  r.a = -x.a;
  for (int i = 0; i < N; ++i) r.v[i] = -x.v[i];
  return r;
}

template <int N>
Jet<N> operator+(Jet<N> x, const Jet<N>& y) {
  return x += y;
}

template <int N>
Jet<N> operator-(Jet<N> x, const Jet<N>& y) {
  return x -= y;
}

template <int N>
Jet<N> operator*(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r;
  r.a = x.a * y.a;
  for (int i = 0; i < N; ++i) r.v[i] = x.a * y.v[i] + x.v[i] * y.a;
  return r;
}

template <int N>
Jet<N> operator/(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r;
  const double inv = 1.0 / y.a;
  r.a = x.a * inv;
  for (int i = 0; i < N; ++i) r.v[i] = (x.v[i] - r.a * y.v[i]) * inv;
  return r;
}

template <int N>
Jet<N> operator+(const Jet<N>& x, double s) { return x + Jet<N>(s); }
template <int N>
Jet<N> operator+(double s, const Jet<N>& x) { return Jet<N>(s) + x; }
template <int N>
Jet<N> operator-(const Jet<N>& x, double s) { return x - Jet<N>(s); }
template <int N>
Jet<N> operator-(double s, const Jet<N>& x) { return Jet<N>(s) - x; }
template <int N>
Jet<N> operator*(const Jet<N>& x, double s) {
  Jet<N> r = x;
  r.a *= s;
  for (auto& d : r.v) d *= s;
  return r;
}
template <int N>
Jet<N> operator*(double s, const Jet<N>& x) { return x * s; }
template <int N>
Jet<N> operator/(const Jet<N>& x, double s) { return x * (1.0 / s); }

template <int N>
Jet<N> chain(const Jet<N>& x, double value, double derivative) {
  Jet<N> r;
  r.a = value;
  for (int i = 0; i < N; ++i) r.v[i] = derivative * x.v[i];
  return r;
}

template <int N>
Jet<N> sin(const Jet<N>& x) { return chain(x, std::sin(x.a), std::cos(x.a)); }
template <int N>
Jet<N> cos(const Jet<N>& x) { return chain(x, std::cos(x.a), -std::sin(x.a)); }
template <int N>
Jet<N> sqrt(const Jet<N>& x) {
  const double s = std::sqrt(x.a);
  return chain(x, s, 0.5 / s);
}

inline double value_of(double x) { return x; }
template <int N>
double value_of(const Jet<N>& x) { return x.a; }

}  // namespace volagg::ad
