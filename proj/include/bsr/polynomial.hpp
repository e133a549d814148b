#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "bsr/errors.hpp"
#include "bsr/rules.hpp"

namespace bsr {

// Truncated power series with exact coefficients; entry k is the t^k coefficient.
using Series = std::vector<Rational>;

inline Series multiply(const Series& a, const Series& b, std::size_t order) {
  Series out(order + 1, Rational(0));
  for (std::size_t i = 0; i < a.size() && i <= order; ++i) {
    if (a[i] == 0) continue;
    for (std::size_t j = 0; j < b.size() && i + j <= order; ++j) {
      out[i + j] += a[i] * b[j];
    }
  }
  return out;
}

// Index of the first nonzero coefficient, or -1 if the truncated series vanishes.
inline int leading_order(const Series& s) {
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s[k] != 0) return static_cast<int>(k);
  }
  return -1;
}

// Multivariate polynomial in the class fractions x_1..x_K, x_omega.
class Polynomial {
 public:
  using Exponents = std::vector<int>;

  explicit Polynomial(int variables = 0) : variables_(variables) {}

  int variables() const { return variables_; }
  const std::map<Exponents, Rational>& terms() const { return terms_; }
  bool is_zero() const { return terms_.empty(); }

  void add_term(const Exponents& e, const Rational& coefficient) {
    if (static_cast<int>(e.size()) != variables_) throw MalformedInput("exponent arity mismatch");
    if (coefficient == 0) return;
    auto [it, inserted] = terms_.emplace(e, coefficient);
    if (!inserted) {
      it->second += coefficient;
      if (it->second == 0) terms_.erase(it);
    }
    rebuild();
  }

  Polynomial& operator+=(const Polynomial& other) {
    for (const auto& [e, c] : other.terms_) add_term(e, c);
    return *this;
  }

  Polynomial scaled(const Rational& factor) const {
    Polynomial out(variables_);
    for (const auto& [e, c] : terms_) out.add_term(e, c * factor);
    return out;
  }

  // Exact division by x_var^power; every term must carry the factor.
  Polynomial divided_by_variable(int var, int power) const {
    Polynomial out(variables_);
    for (const auto& [e, c] : terms_) {
      if (e[var] < power) throw NumericalError("polynomial is not divisible by the requested variable");
      auto f = e;
      f[var] -= power;
      out.add_term(f, c);
    }
    return out;
  }

  double operator()(std::span<const double> x) const {
    double sum = 0.0;
    for (const auto& t : numeric_) {
      double v = t.coefficient;
      for (const auto& [var, power] : t.factors) {
        for (int p = 0; p < power; ++p) v *= x[var];
      }
      sum += v;
    }
    return sum;
  }

  // Composition with truncated power series, exact to the given order.
  Series compose(const std::vector<Series>& x, std::size_t order) const {
    Series out(order + 1, Rational(0));
    for (const auto& [e, c] : terms_) {
      Series term(order + 1, Rational(0));
      term[0] = c;
      for (int var = 0; var < variables_; ++var) {
        for (int p = 0; p < e[var]; ++p) term = multiply(term, x[var], order);
      }
      for (std::size_t k = 0; k <= order; ++k) out[k] += term[k];
    }
    return out;
  }

 private:
  struct NumericTerm {
    double coefficient;
    std::vector<std::pair<int, int>> factors;
  };

  void rebuild() {
    numeric_.clear();
    for (const auto& [e, c] : terms_) {
      NumericTerm t{static_cast<double>(c), {}};
      for (int var = 0; var < variables_; ++var) {
        if (e[var] > 0) t.factors.emplace_back(var, e[var]);
      }
      numeric_.push_back(std::move(t));
    }
  }

  int variables_;
  std::map<Exponents, Rational> terms_;
  std::vector<NumericTerm> numeric_;
};

}  // namespace bsr
