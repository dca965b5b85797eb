#pragma once

// Truncated multivariate Taylor polynomials.
//
// A TruncatedPoly<T> stores the coefficients c_I of sum_I c_I y^I for all
// multi-indices |I| <= max_order, enumerated in graded-lexicographic order.
// All products are truncated at the common order, so the algebra is the
// ring of jets R[y]/(y)^{k+1}.  Coefficients are Taylor coefficients, i.e.
// c_I = (d^I p)(0) / I!.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "beamxray/errors.hpp"
#include "beamxray/numerics.hpp"

namespace beamxray {

using cd = std::complex<double>;

class MultiIndexSet {
 public:
  struct Product {
    int j, k;
  };

  MultiIndexSet(int nvars, int order) : nvars_(nvars), order_(order) {
    if (nvars < 1 || order < 0) throw Error(ErrorKind::ShapeError, "invalid multi-index set");
    std::vector<int> e(nvars, 0);
    degree_begin_.assign(order + 2, 0);
    for (int d = 0; d <= order; ++d) {
      degree_begin_[d] = static_cast<int>(degree_.size());
      enumerate(d, 0, e);
    }
    degree_begin_[order + 1] = static_cast<int>(degree_.size());
    const int n = size();

    radix_ = order + 1;
    double dense = std::pow(double(radix_), nvars);
    use_dense_ = dense <= double(1 << 22);
    if (use_dense_) dense_.assign(static_cast<std::size_t>(dense), -1);
    for (int k = 0; k < n; ++k) {
      auto key = encode(exponents(k).data());
      if (use_dense_)
        dense_[key] = k;
      else
        sparse_[key] = k;
    }

    deriv_.assign(static_cast<std::size_t>(nvars) * n, -1);
    shift_.assign(static_cast<std::size_t>(nvars) * n, -1);
    std::vector<int> f(nvars);
    for (int k = 0; k < n; ++k) {
      for (int v = 0; v < nvars; ++v) {
        std::copy_n(exponents(k).data(), nvars, f.begin());
        if (f[v] > 0) {
          f[v] -= 1;
          deriv_[v * n + k] = index(f.data());
          f[v] += 1;
        }
        if (degree_[k] < order_) {
          f[v] += 1;
          shift_[v * n + k] = index(f.data());
        }
      }
    }

    prod_begin_.assign(n + 1, 0);
    for (int i = 0; i < n; ++i) {
      prod_begin_[i] = static_cast<int>(prod_.size());
      for (int j = 0; j < degree_begin_[order_ - degree_[i] + 1]; ++j) {
        for (int v = 0; v < nvars; ++v) f[v] = exps_[i * nvars + v] + exps_[j * nvars + v];
        prod_.push_back({j, index(f.data())});
      }
    }
    prod_begin_[n] = static_cast<int>(prod_.size());
  }

  static std::shared_ptr<const MultiIndexSet> get(int nvars, int order) {
    static std::mutex mu;
    static std::map<std::pair<int, int>, std::shared_ptr<const MultiIndexSet>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[{nvars, order}];
    if (!slot) slot = std::make_shared<const MultiIndexSet>(nvars, order);
    return slot;
  }

  int nvars() const { return nvars_; }
  int order() const { return order_; }
  int size() const { return static_cast<int>(degree_.size()); }
  int degree(int k) const { return degree_[k]; }
  std::span<const int> exponents(int k) const { return {exps_.data() + k * nvars_, std::size_t(nvars_)}; }
  int exponent(int k, int v) const { return exps_[k * nvars_ + v]; }
  int degree_begin(int d) const { return degree_begin_[std::clamp(d, 0, order_ + 1)]; }

  // Linear index of the multi-index e, or -1 when |e| exceeds the order.
  int index(const int* e) const {
    int d = 0;
    for (int v = 0; v < nvars_; ++v) {
      if (e[v] < 0) return -1;
      d += e[v];
    }
    if (d > order_) return -1;
    auto key = encode(e);
    if (use_dense_) return dense_[key];
    auto it = sparse_.find(key);
    return it == sparse_.end() ? -1 : it->second;
  }
  int index(std::initializer_list<int> e) const { return index(std::data(e)); }

  // Index of I - e_v (or -1); the derivative factor is exponent(k, v).
  int deriv_target(int v, int k) const { return deriv_[v * size() + k]; }
  // Index of I + e_v (or -1 when truncated).
  int shift_target(int v, int k) const { return shift_[v * size() + k]; }

  // For coefficient i of the left factor, the (j, k) pairs with |I_i|+|I_j| <= order.
  std::span<const Product> products_of(int i) const {
    return {prod_.data() + prod_begin_[i], std::size_t(prod_begin_[i + 1] - prod_begin_[i])};
  }

 private:
  void enumerate(int remaining, int v, std::vector<int>& e) {
    if (v == nvars_ - 1) {
      e[v] = remaining;
      exps_.insert(exps_.end(), e.begin(), e.end());
      int d = 0;
      for (int x : e) d += x;
      degree_.push_back(d);
      return;
    }
    for (int a = remaining; a >= 0; --a) {
      e[v] = a;
      enumerate(remaining - a, v + 1, e);
    }
  }
  std::uint64_t encode(const int* e) const {
    std::uint64_t key = 0;
    for (int v = nvars_ - 1; v >= 0; --v) key = key * radix_ + e[v];
    return key;
  }

  int nvars_, order_;
  std::uint64_t radix_ = 1;
  std::vector<int> exps_, degree_, degree_begin_;
  bool use_dense_ = true;
  std::vector<int> dense_;
  std::unordered_map<std::uint64_t, int> sparse_;
  std::vector<int> deriv_, shift_;
  std::vector<Product> prod_;
  std::vector<int> prod_begin_;
};


using IndexSetPtr = std::shared_ptr<const MultiIndexSet>;

template <class T>
class TruncatedPoly {
 public:
  using value_type = T;

  TruncatedPoly() = default;
  explicit TruncatedPoly(IndexSetPtr set) : set_(std::move(set)), c_(set_->size(), T{}) {}
  TruncatedPoly(IndexSetPtr set, T constant) : TruncatedPoly(std::move(set)) { c_[0] = constant; }
  TruncatedPoly(int nvars, int order) : TruncatedPoly(MultiIndexSet::get(nvars, order)) {}

  // The coordinate function center + y_v.
  static TruncatedPoly variable(IndexSetPtr set, int v, T center = T{}) {
    TruncatedPoly p(set, center);
    if (set->order() >= 1) {
      std::vector<int> e(set->nvars(), 0);
      e[v] = 1;
      p.c_[set->index(e.data())] = T(1);
    }
    return p;
  }

  bool valid() const { return static_cast<bool>(set_); }
  const IndexSetPtr& set() const { return set_; }
  int n_vars() const { return set_->nvars(); }
  int max_order() const { return set_->order(); }
  int size() const { return static_cast<int>(c_.size()); }

  T& operator[](int k) { return c_[k]; }
  const T& operator[](int k) const { return c_[k]; }
  T coeff(std::initializer_list<int> e) const {
    int k = set_->index(std::data(e));
    return k < 0 ? T{} : c_[k];
  }
  void set_coeff(std::initializer_list<int> e, T value) {
    int k = set_->index(std::data(e));
    if (k < 0) throw Error(ErrorKind::ShapeError, "multi-index beyond truncation order");
    c_[k] = value;
  }
  std::vector<T>& coeffs() { return c_; }
  const std::vector<T>& coeffs() const { return c_; }
  T constant() const { return c_[0]; }

  TruncatedPoly& operator+=(const TruncatedPoly& o) {
    check_same(o);
    for (int k = 0; k < size(); ++k) c_[k] += o.c_[k];
    return *this;
  }
  TruncatedPoly& operator-=(const TruncatedPoly& o) {
    check_same(o);
    for (int k = 0; k < size(); ++k) c_[k] -= o.c_[k];
    return *this;
  }
  TruncatedPoly& operator+=(T s) {
    c_[0] += s;
    return *this;
  }
  TruncatedPoly& operator-=(T s) {
    c_[0] -= s;
    return *this;
  }
  TruncatedPoly& operator*=(T s) {
    for (auto& x : c_) x *= s;
    return *this;
  }
  TruncatedPoly& operator/=(T s) {
    for (auto& x : c_) x /= s;
    return *this;
  }
  TruncatedPoly operator-() const {
    TruncatedPoly r(*this);
    for (auto& x : r.c_) x = -x;
    return r;
  }

  // r += a * b, truncated; all three must share one jet space.
  template <class A, class B>
  void add_product(const TruncatedPoly<A>& a, const TruncatedPoly<B>& b) {
    if (a.set() != set_ || b.set() != set_) throw Error(ErrorKind::ShapeError, "add_product: jet space mismatch");
    for (int i = 0; i < size(); ++i) {
      const A ai = a[i];
      if (ai == A{}) continue;
      for (const auto& p : set_->products_of(i)) c_[p.k] += ai * b[p.j];
    }
  }

  template <class S>
  auto eval(std::span<const S> y) const {
    using R = decltype(T{} * S{});
    const int nv = n_vars();
    const int ord = max_order();
    std::vector<S> pw(static_cast<std::size_t>(nv) * (ord + 1));
    for (int v = 0; v < nv; ++v) {
      pw[v * (ord + 1)] = S(1);
      for (int a = 1; a <= ord; ++a) pw[v * (ord + 1) + a] = pw[v * (ord + 1) + a - 1] * y[v];
    }
    R acc{};
    for (int k = 0; k < size(); ++k) {
      if (c_[k] == T{}) continue;
      S m(1);
      for (int v = 0; v < nv; ++v) m *= pw[v * (ord + 1) + set_->exponent(k, v)];
      acc += c_[k] * m;
    }
    return acc;
  }
  template <class S>
  auto eval(const std::vector<S>& y) const {
    return eval(std::span<const S>(y.data(), y.size()));
  }

  double max_abs() const {
    double m = 0;
    for (const auto& x : c_) m = std::max(m, double(std::abs(x)));
    return m;
  }

 private:
  void check_same(const TruncatedPoly& o) const {
    if (o.set_ != set_) throw Error(ErrorKind::ShapeError, "polynomials live in different jet spaces");
  }

  IndexSetPtr set_;
  std::vector<T> c_;
};

using RPoly = TruncatedPoly<double>;
using CPoly = TruncatedPoly<cd>;

// Re-express p in another jet space with the same number of variables; terms
// beyond the target order are dropped.
template <class T>
TruncatedPoly<T> truncate(const TruncatedPoly<T>& p, const IndexSetPtr& target) {
  if (p.set() == target) return p;
  if (p.n_vars() != target->nvars()) throw Error(ErrorKind::ShapeError, "variable count mismatch");
  TruncatedPoly<T> r(target);
  const int n = std::min(p.size(), r.size());
  for (int k = 0; k < n; ++k) r[k] = p[k];
  return r;
}

template <class T>
TruncatedPoly<T> truncate(const TruncatedPoly<T>& p, int order) {
  return truncate(p, MultiIndexSet::get(p.n_vars(), order));
}

template <class A, class B>
auto operator*(const TruncatedPoly<A>& a, const TruncatedPoly<B>& b) {
  using R = decltype(A{} * B{});
  if (a.n_vars() != b.n_vars()) throw Error(ErrorKind::ShapeError, "poly_mul: variable count mismatch");
  auto target = a.max_order() <= b.max_order() ? a.set() : b.set();
  TruncatedPoly<R> r(target);
  if (a.set() == target && b.set() == target) {
    r.add_product(a, b);
  } else {
    r.add_product(truncate(a, target), truncate(b, target));
  }
  return r;
}

template <class T>
TruncatedPoly<T> poly_mul(const TruncatedPoly<T>& a, const TruncatedPoly<T>& b) {
  return a * b;
}

template <class T>
TruncatedPoly<T> operator+(TruncatedPoly<T> a, const TruncatedPoly<T>& b) {
  a += b;
  return a;
}
template <class T>
TruncatedPoly<T> operator-(TruncatedPoly<T> a, const TruncatedPoly<T>& b) {
  a -= b;
  return a;
}
template <class T>
TruncatedPoly<T> operator*(TruncatedPoly<T> a, T s) {
  a *= s;
  return a;
}
template <class T>
TruncatedPoly<T> operator*(T s, TruncatedPoly<T> a) {
  a *= s;
  return a;
}
template <class T>
TruncatedPoly<T> operator+(TruncatedPoly<T> a, T s) {
  a += s;
  return a;
}
template <class T>
TruncatedPoly<T> operator-(TruncatedPoly<T> a, T s) {
  a -= s;
  return a;
}
template <class T>
TruncatedPoly<T> operator+(T s, TruncatedPoly<T> a) {
  a += s;
  return a;
}
template <class T>
TruncatedPoly<T> operator-(T s, const TruncatedPoly<T>& a) {
  TruncatedPoly<T> r = -a;
  r += s;
  return r;
}
inline CPoly operator*(const RPoly& a, cd s) {
  CPoly r(a.set());
  for (int k = 0; k < a.size(); ++k) r[k] = a[k] * s;
  return r;
}
inline CPoly operator*(cd s, const RPoly& a) { return a * s; }

inline CPoly to_complex(const RPoly& p) {
  CPoly r(p.set());
  for (int k = 0; k < p.size(); ++k) r[k] = p[k];
  return r;
}
inline RPoly real_part(const CPoly& p) {
  RPoly r(p.set());
  for (int k = 0; k < p.size(); ++k) r[k] = p[k].real();
  return r;
}
inline RPoly imag_part(const CPoly& p) {
  RPoly r(p.set());
  for (int k = 0; k < p.size(); ++k) r[k] = p[k].imag();
  return r;
}
// Coefficientwise conjugate: the polynomial conj(p(y)) for real y.
inline CPoly conj(const CPoly& p) {
  CPoly r(p.set());
  for (int k = 0; k < p.size(); ++k) r[k] = std::conj(p[k]);
  return r;
}

// Partial derivative in variable v.  The top-degree coefficients of the
// result are zero, so the result is exact only up to order max_order - 1.
template <class T>
TruncatedPoly<T> derivative(const TruncatedPoly<T>& p, int v) {
  TruncatedPoly<T> r(p.set());
  const auto& s = *p.set();
  for (int k = 0; k < p.size(); ++k) {
    int t = s.deriv_target(v, k);
    if (t >= 0) r[t] += p[k] * double(s.exponent(k, v));
  }
  return r;
}

// Antiderivative in variable v vanishing on {y_v = 0}; truncated.
template <class T>
TruncatedPoly<T> antiderivative(const TruncatedPoly<T>& p, int v) {
  TruncatedPoly<T> r(p.set());
  const auto& s = *p.set();
  for (int k = 0; k < p.size(); ++k) {
    int t = s.shift_target(v, k);
    if (t >= 0) r[t] = p[k] / double(s.exponent(k, v) + 1);
  }
  return r;
}

// Keep only the terms of total degree in [lo, hi].
template <class T>
TruncatedPoly<T> degree_slice(const TruncatedPoly<T>& p, int lo, int hi) {
  TruncatedPoly<T> r(p.set());
  const auto& s = *p.set();
  for (int k = s.degree_begin(lo); k < s.degree_begin(hi + 1); ++k) r[k] = p[k];
  return r;
}

// Substitute y_v = value and return the polynomial in the remaining
// variables embedded back in the same space (variable v no longer appears).
template <class T>
TruncatedPoly<T> substitute(const TruncatedPoly<T>& p, int v, double value) {
  TruncatedPoly<T> r(p.set());
  const auto& s = *p.set();
  std::vector<int> e(s.nvars());
  for (int k = 0; k < p.size(); ++k) {
    if (p[k] == T{}) continue;
    auto ex = s.exponents(k);
    std::copy(ex.begin(), ex.end(), e.begin());
    double f = std::pow(value, e[v]);
    e[v] = 0;
    r[s.index(e.data())] += p[k] * f;
  }
  return r;
}

// f(p) = sum_k s_k (p - p(0))^k where s_k = f^{(k)}(p(0))/k!.
template <class T>
TruncatedPoly<T> apply_series(const TruncatedPoly<T>& p, const std::vector<T>& s) {
  TruncatedPoly<T> q = p;
  q[0] = T{};
  const int n = std::min<int>(static_cast<int>(s.size()) - 1, p.max_order());
  TruncatedPoly<T> r(p.set(), s[n]);
  for (int k = n - 1; k >= 0; --k) {
    TruncatedPoly<T> t(p.set());
    t.add_product(r, q);
    t[0] += s[k];
    r = std::move(t);
  }
  return r;
}

template <class T>
TruncatedPoly<T> reciprocal(const TruncatedPoly<T>& p) {
  const T c = p[0];
  if (std::abs(c) == 0) throw Error(ErrorKind::DomainError, "reciprocal of a jet with zero constant term");
  std::vector<T> s(p.max_order() + 1);
  T inv = T(1) / c, cur = inv;
  for (int k = 0; k <= p.max_order(); ++k) {
    s[k] = cur;
    cur *= -inv;
  }
  return apply_series(p, s);
}

// Principal branch of the square root at the constant term.
template <class T>
TruncatedPoly<T> sqrt(const TruncatedPoly<T>& p) {
  const T c = p[0];
  if constexpr (std::is_floating_point_v<T>) {
    if (c <= 0) throw Error(ErrorKind::DomainError, "sqrt of a jet with non-positive constant term");
  } else {
    if (std::abs(c) == 0) throw Error(ErrorKind::DomainError, "sqrt of a jet with zero constant term");
  }
  std::vector<T> s(p.max_order() + 1);
  T root = std::sqrt(c);
  T binom = T(1);
  T pw = root;  // c^{1/2 - k}
  for (int k = 0; k <= p.max_order(); ++k) {
    s[k] = binom * pw;
    binom *= T((0.5 - k) / (k + 1.0));
    pw /= c;
  }
  return apply_series(p, s);
}

template <class T>
TruncatedPoly<T> exp(const TruncatedPoly<T>& p) {
  std::vector<T> s(p.max_order() + 1);
  T e = std::exp(p[0]);
  double fact = 1;
  for (int k = 0; k <= p.max_order(); ++k) {
    if (k > 0) fact *= k;
    s[k] = e / fact;
  }
  return apply_series(p, s);
}

template <class T>
TruncatedPoly<T> log(const TruncatedPoly<T>& p) {
  const T c = p[0];
  if constexpr (std::is_floating_point_v<T>) {
    if (c <= 0) throw Error(ErrorKind::DomainError, "log of a jet with non-positive constant term");
  }
  std::vector<T> s(p.max_order() + 1);
  s[0] = std::log(c);
  T pw = T(1);
  for (int k = 1; k <= p.max_order(); ++k) {
    pw /= c;
    s[k] = pw * ((k % 2 == 1) ? 1.0 : -1.0) / double(k);
  }
  return apply_series(p, s);
}

template <class T>
TruncatedPoly<T> sin(const TruncatedPoly<T>& p) {
  std::vector<T> s(p.max_order() + 1);
  const T sv = std::sin(p[0]), cv = std::cos(p[0]);
  double fact = 1;
  for (int k = 0; k <= p.max_order(); ++k) {
    if (k > 0) fact *= k;
    T d = (k % 4 == 0) ? sv : (k % 4 == 1) ? cv : (k % 4 == 2) ? -sv : -cv;
    s[k] = d / fact;
  }
  return apply_series(p, s);
}

template <class T>
TruncatedPoly<T> cos(const TruncatedPoly<T>& p) {
  std::vector<T> s(p.max_order() + 1);
  const T sv = std::sin(p[0]), cv = std::cos(p[0]);
  double fact = 1;
  for (int k = 0; k <= p.max_order(); ++k) {
    if (k > 0) fact *= k;
    T d = (k % 4 == 0) ? cv : (k % 4 == 1) ? -sv : (k % 4 == 2) ? -cv : sv;
    s[k] = d / fact;
  }
  return apply_series(p, s);
}

// Precomputed monomial values y^I for fast evaluation of many polynomials
// from the same jet space at one point.
template <class S>
std::vector<S> monomials(const MultiIndexSet& set, std::span<const S> y) {
  const int nv = set.nvars();
  std::vector<S> m(set.size());
  m[0] = S(1);
  // Every multi-index of degree d >= 1 is I' + e_v for the first v with I_v > 0.
  for (int k = 1; k < set.size(); ++k) {
    for (int v = 0; v < nv; ++v) {
      int t = set.deriv_target(v, k);
      if (t >= 0) {
        m[k] = m[t] * y[v];
        break;
      }
    }
  }
  return m;
}

template <class T, class S>
auto dot(const TruncatedPoly<T>& p, const std::vector<S>& mono) {
  using R = decltype(T{} * S{});
  R acc{};
  for (int k = 0; k < p.size(); ++k) acc += p[k] * mono[k];
  return acc;
}

// The slice |I| = k of a jet in n_vars complex variables.
struct HomogeneousPoly {
  int n_vars = 1;
  int degree = 0;
  std::vector<cd> coeffs;  // graded-lex order within degree `degree`

  HomogeneousPoly() = default;
  HomogeneousPoly(int nv, int k) : n_vars(nv), degree(k) {
    auto s = MultiIndexSet::get(nv, k);
    coeffs.assign(s->degree_begin(k + 1) - s->degree_begin(k), cd{});
  }
  CPoly to_poly(int order) const {
    auto s = MultiIndexSet::get(n_vars, std::max(order, degree));
    auto sk = MultiIndexSet::get(n_vars, degree);
    CPoly p(s);
    const int b = sk->degree_begin(degree);
    for (std::size_t i = 0; i < coeffs.size(); ++i) p[s->index(sk->exponents(b + int(i)).data())] = coeffs[i];
    return p;
  }
  static HomogeneousPoly from_poly(const CPoly& p, int k) {
    HomogeneousPoly h(p.n_vars(), k);
    auto sk = MultiIndexSet::get(p.n_vars(), k);
    const int b = sk->degree_begin(k);
    for (std::size_t i = 0; i < h.coeffs.size(); ++i) {
      int idx = p.set()->index(sk->exponents(b + int(i)).data());
      h.coeffs[i] = idx < 0 ? cd{} : p[idx];
    }
    return h;
  }
};

// Q f = sum_ij B_ij d_i d_j f.
inline CPoly apply_Q(const Eigen::MatrixXd& B, const CPoly& f) {
  CPoly r(f.set());
  const int n = f.n_vars();
  for (int i = 0; i < n; ++i) {
    CPoly di = derivative(f, i);
    for (int j = 0; j < n; ++j) {
      if (B(i, j) == 0) continue;
      CPoly dij = derivative(di, j);
      dij *= cd(B(i, j));
      r += dij;
    }
  }
  return r;
}

// Q^k(conj(p) q) for homogeneous p, q of degree k, computed by k exact
// applications of the second-order operator Q = <B D, D>.
inline cd qk_pairing(const Eigen::MatrixXd& B, const HomogeneousPoly& p, const HomogeneousPoly& q) {
  if (p.degree != q.degree || p.n_vars != q.n_vars || B.rows() != p.n_vars || B.cols() != p.n_vars)
    throw Error(ErrorKind::ShapeError, "qk_pairing: degree or dimension mismatch");
  if ((B - B.transpose()).norm() > 1e-12 * (1 + B.norm()))
    throw Error(ErrorKind::NotPositiveDefinite, "qk_pairing: B is not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(B);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::NotPositiveDefinite, "qk_pairing: B is not positive definite");
  const int k = p.degree;
  CPoly f = conj(p.to_poly(2 * k)) * q.to_poly(2 * k);
  for (int i = 0; i < k; ++i) f = apply_Q(B, f);
  return f[0];
}

// Matrix whose entries are jets in a common space.
class PolyMat {
 public:
  PolyMat() = default;
  PolyMat(IndexSetPtr set, int rows, int cols) : set_(std::move(set)), rows_(rows), cols_(cols) {
    e_.assign(static_cast<std::size_t>(rows) * cols, CPoly(set_));
  }
  static PolyMat constant(IndexSetPtr set, const CMat& m) {
    PolyMat r(set, int(m.rows()), int(m.cols()));
    for (int i = 0; i < r.rows_; ++i)
      for (int j = 0; j < r.cols_; ++j) r(i, j)[0] = m(i, j);
    return r;
  }
  static PolyMat identity(IndexSetPtr set, int n) { return constant(std::move(set), CMat::Identity(n, n)); }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  const IndexSetPtr& set() const { return set_; }
  CPoly& operator()(int i, int j) { return e_[i * cols_ + j]; }
  const CPoly& operator()(int i, int j) const { return e_[i * cols_ + j]; }

  CMat coeff(int k) const {
    CMat m(rows_, cols_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) m(i, j) = (*this)(i, j)[k];
    return m;
  }
  void set_coeff(int k, const CMat& m) {
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) (*this)(i, j)[k] = m(i, j);
  }
  template <class S>
  CMat eval(std::span<const S> y) const {
    auto mono = monomials(*set_, y);
    CMat m(rows_, cols_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) m(i, j) = dot((*this)(i, j), mono);
    return m;
  }
  CMat eval_mono(const std::vector<double>& mono) const {
    CMat m(rows_, cols_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) m(i, j) = dot((*this)(i, j), mono);
    return m;
  }

  PolyMat& operator+=(const PolyMat& o) {
    for (std::size_t k = 0; k < e_.size(); ++k) e_[k] += o.e_[k];
    return *this;
  }
  PolyMat& operator-=(const PolyMat& o) {
    for (std::size_t k = 0; k < e_.size(); ++k) e_[k] -= o.e_[k];
    return *this;
  }
  PolyMat& operator*=(cd s) {
    for (auto& p : e_) p *= s;
    return *this;
  }
  // r += a * b
  void add_product(const PolyMat& a, const PolyMat& b) {
    for (int i = 0; i < a.rows_; ++i)
      for (int j = 0; j < b.cols_; ++j)
        for (int k = 0; k < a.cols_; ++k) (*this)(i, j).add_product(a(i, k), b(k, j));
  }
  // r += p * a for a scalar jet p
  void add_scaled(const CPoly& p, const PolyMat& a) {
    for (std::size_t k = 0; k < e_.size(); ++k) e_[k].add_product(p, a.e_[k]);
  }
  void add_scaled(const RPoly& p, const PolyMat& a) {
    for (std::size_t k = 0; k < e_.size(); ++k) e_[k].add_product(p, a.e_[k]);
  }
  PolyMat adjoint() const {
    PolyMat r(set_, cols_, rows_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) r(j, i) = conj((*this)(i, j));
    return r;
  }
  double max_abs() const {
    double m = 0;
    for (const auto& p : e_) m = std::max(m, p.max_abs());
    return m;
  }

 private:
  IndexSetPtr set_;
  int rows_ = 0, cols_ = 0;
  std::vector<CPoly> e_;
};

inline PolyMat operator*(const PolyMat& a, const PolyMat& b) {
  if (a.cols() != b.rows() || a.set() != b.set()) throw Error(ErrorKind::ShapeError, "PolyMat product shape mismatch");
  PolyMat r(a.set(), a.rows(), b.cols());
  r.add_product(a, b);
  return r;
}
inline PolyMat operator+(PolyMat a, const PolyMat& b) { return a += b; }
inline PolyMat operator-(PolyMat a, const PolyMat& b) { return a -= b; }
inline PolyMat operator*(PolyMat a, cd s) { return a *= s; }

inline PolyMat derivative(const PolyMat& m, int v) {
  PolyMat r(m.set(), m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) r(i, j) = derivative(m(i, j), v);
  return r;
}

inline PolyMat truncate(const PolyMat& m, const IndexSetPtr& target) {
  PolyMat r(target, m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) r(i, j) = truncate(m(i, j), target);
  return r;
}

// Matrix exponential of a jet-valued matrix: scaling and squaring with the
// Taylor series; the nilpotent part terminates by truncation.
inline PolyMat exp(const PolyMat& m) {
  const int n = m.rows();
  const double nrm = m.coeff(0).cwiseAbs().rowwise().sum().maxCoeff();
  int s = 0;
  if (nrm > 0.25) s = static_cast<int>(std::ceil(std::log2(nrm / 0.25)));
  PolyMat a = m * cd(std::ldexp(1.0, -s));
  PolyMat r = PolyMat::identity(m.set(), n);
  PolyMat term = r;
  const int terms = 18 + m.set()->order();
  for (int k = 1; k <= terms; ++k) {
    term = term * a;
    term *= cd(1.0 / k);
    r += term;
    if (term.max_abs() < 1e-18) break;
  }
  for (int i = 0; i < s; ++i) r = r * r;
  return r;
}

// Jet components sampled along a parameter t: samples[i][l] is the y-jet
// psi_{(l, .)} at t[i].
struct JetSection {
  std::vector<double> t;
  std::vector<std::vector<CPoly>> samples;
};

struct ProlongationReport {
  bool ok = false;
  double max_defect = 0;
};

// Checks that the stored l-th t-derivative components agree with finite
// differences of the l = 0 component on the nearest samples: a 5-point
// stencil for first derivatives, 7 points once second derivatives are stored.
inline ProlongationReport check_prolongable(const JetSection& psi, double tol = 1e-4) {
  const int n = static_cast<int>(psi.t.size());
  if (n < 5 || static_cast<int>(psi.samples.size()) != n) throw Error(ErrorKind::NotEnoughSamples, "need at least 5 t-samples");
  const int levels = static_cast<int>(psi.samples[0].size());
  ProlongationReport rep;
  for (int i = 0; i < n; ++i) {
    int lo = std::clamp(i - 2, 0, n - 5);
    int width = 5;
    // Second derivatives need one more node to keep the same accuracy.
    if (levels > 2 && n >= 7) {
      lo = std::clamp(i - 3, 0, n - 7);
      width = 7;
    }
    std::vector<double> xs(psi.t.begin() + lo, psi.t.begin() + lo + width);
    auto w = fornberg_weights(psi.t[i], xs, std::max(1, levels - 1));
    for (int l = 1; l < levels; ++l) {
      const CPoly& stored = psi.samples[i][l];
      for (int k = 0; k < stored.size(); ++k) {
        cd fd = 0;
        for (int j = 0; j < width; ++j) {
          const CPoly& p0 = psi.samples[lo + j][0];
          if (k < p0.size()) fd += w[l][j] * p0[k];
        }
        rep.max_defect = std::max(rep.max_defect, std::abs(stored[k] - fd));
      }
    }
  }
  rep.ok = rep.max_defect <= tol;
  return rep;
}

}  // namespace beamxray
