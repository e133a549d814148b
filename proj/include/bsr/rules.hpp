#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include "bsr/errors.hpp"

namespace bsr {

using Rational = boost::multiprecision::cpp_rational;

inline constexpr int max_cap = 12;

// A capped component size: 1..K, or omega for anything larger than K.
class ComponentClass {
 public:
  constexpr ComponentClass() = default;

  static constexpr ComponentClass omega() { return ComponentClass(0); }

  static ComponentClass of_size(int size) {
    if (size < 1) throw MalformedInput("component class size must be >= 1");
    return ComponentClass(size);
  }

  // Dense encoding used for tables: sizes 1..K map to 0..K-1, omega maps to K.
  static ComponentClass from_index(int index, int K) {
    if (index < 0 || index > K) throw MalformedInput("class index out of range");
    return index == K ? omega() : ComponentClass(index + 1);
  }

  constexpr bool is_omega() const { return value_ == 0; }

  int size() const {
    if (is_omega()) throw MalformedInput("omega has no numeric size");
    return value_;
  }

  constexpr int index(int K) const { return is_omega() ? K : value_ - 1; }

  constexpr bool valid_for(int K) const { return is_omega() || value_ <= K; }

  std::string to_string() const { return is_omega() ? "w" : std::to_string(value_); }

  friend constexpr bool operator==(ComponentClass, ComponentClass) = default;

 private:
  explicit constexpr ComponentClass(int value) : value_(value) {}
  int value_ = 0;
};

inline ComponentClass classify(std::uint64_t size, int K) {
  if (size == 0) throw MalformedInput("components are never empty");
  if (K < 1) throw MalformedInput("cap K must be >= 1");
  return size <= static_cast<std::uint64_t>(K) ? ComponentClass::of_size(static_cast<int>(size))
                                               : ComponentClass::omega();
}

using Quadruple = std::array<ComponentClass, 4>;

enum class EdgeChoice { first, second };

// A bounded-size rule: cap K and the set F of ordered class quadruples for
// which the first sampled pair is added.
class RuleTable {
 public:
  RuleTable(std::string name, int K, const std::vector<Quadruple>& accepted)
      : name_(std::move(name)), K_(K) {
    if (K < 1 || K > max_cap) {
      throw MalformedInput("K must lie in [1," + std::to_string(max_cap) + "], got " +
                           std::to_string(K));
    }
    const std::size_t base = static_cast<std::size_t>(K) + 1;
    member_.assign(base * base * base * base, false);
    for (const auto& j : accepted) {
      const auto c = code(j);
      if (member_[c]) {
        ++duplicates_;
      } else {
        member_[c] = true;
      }
    }
    for (std::size_t c = 0; c < member_.size(); ++c) {
      if (member_[c]) accepted_.push_back(quadruple(c));
    }
  }

  const std::string& name() const { return name_; }
  int K() const { return K_; }
  int alphabet_size() const { return K_ + 1; }
  std::size_t quadruple_count() const { return member_.size(); }
  const std::vector<Quadruple>& accepted() const { return accepted_; }
  std::size_t duplicates_dropped() const { return duplicates_; }

  bool accepts(const Quadruple& j) const { return member_[code(j)]; }

  std::size_t code(const Quadruple& j) const {
    const std::size_t base = static_cast<std::size_t>(K_) + 1;
    std::size_t c = 0;
    for (const auto& e : j) {
      if (!e.valid_for(K_)) {
        throw MalformedInput("class " + e.to_string() + " is out of range for K=" +
                             std::to_string(K_));
      }
      c = c * base + static_cast<std::size_t>(e.index(K_));
    }
    return c;
  }

  Quadruple quadruple(std::size_t c) const {
    const std::size_t base = static_cast<std::size_t>(K_) + 1;
    Quadruple j;
    for (int p = 3; p >= 0; --p) {
      j[p] = ComponentClass::from_index(static_cast<int>(c % base), K_);
      c /= base;
    }
    return j;
  }

 private:
  std::string name_;
  int K_;
  std::vector<bool> member_;
  std::vector<Quadruple> accepted_;
  std::size_t duplicates_ = 0;
};

inline EdgeChoice decide(const RuleTable& rule, const Quadruple& j) {
  return rule.accepts(j) ? EdgeChoice::first : EdgeChoice::second;
}

inline std::pair<ComponentClass, ComponentClass> chosen_pair(const RuleTable& rule,
                                                             const Quadruple& j) {
  return decide(rule, j) == EdgeChoice::first ? std::pair{j[0], j[1]} : std::pair{j[2], j[3]};
}

// Drift coefficient of class i contributed by the class pattern j. Sums that
// involve omega never equal a bounded size; they only feed the omega row.
inline Rational delta(const RuleTable& rule, const Quadruple& j, ComponentClass i) {
  if (!i.valid_for(rule.K())) throw MalformedInput("target class out of range");
  const auto [p, q] = chosen_pair(rule, j);
  if (!i.is_omega()) {
    const int s = i.size();
    int indicator = 0;
    if (!p.is_omega() && !q.is_omega() && p.size() + q.size() == s) indicator += 1;
    if (p == i) indicator -= 1;
    if (q == i) indicator -= 1;
    return Rational(s * indicator, 2);
  }
  const bool big = p.is_omega() || q.is_omega() || p.size() + q.size() > rule.K();
  if (!big) return Rational(0);
  const int mass = (p.is_omega() ? 0 : p.size()) + (q.is_omega() ? 0 : q.size());
  return Rational(mass, 2);
}

// ---- built-in rule families ------------------------------------------------

// Accept the first pair iff both of its endpoints are isolated (K=1 is the
// Bohman-Frieze rule).
inline RuleTable isolated_first(int K, std::string name = "") {
  std::vector<Quadruple> f;
  const auto one = ComponentClass::of_size(1);
  for (int a = 0; a <= K; ++a) {
    for (int b = 0; b <= K; ++b) {
      f.push_back({one, one, ComponentClass::from_index(a, K), ComponentClass::from_index(b, K)});
    }
  }
  if (name.empty()) name = "isolated-first:" + std::to_string(K);
  return RuleTable(std::move(name), K, f);
}

inline RuleTable bohman_frieze() { return isolated_first(1, "bohman-frieze"); }

// Accept the first pair iff both endpoints sit in bounded components.
inline RuleTable small_first(int K) {
  std::vector<Quadruple> f;
  for (int a = 0; a < K; ++a) {
    for (int b = 0; b < K; ++b) {
      for (int c = 0; c <= K; ++c) {
        for (int d = 0; d <= K; ++d) {
          f.push_back({ComponentClass::from_index(a, K), ComponentClass::from_index(b, K),
                       ComponentClass::from_index(c, K), ComponentClass::from_index(d, K)});
        }
      }
    }
  }
  return RuleTable("small-first:" + std::to_string(K), K, f);
}

// F empty: the second pair is always added, which is the Erdos-Renyi process.
inline RuleTable erdos_renyi(int K = 1) {
  return RuleTable(K == 1 ? "erdos-renyi" : "erdos-renyi:" + std::to_string(K), K, {});
}

// ---- rule files ----------------------------------------------------------------

inline ComponentClass parse_class(const nlohmann::json& entry, int K) {
  if (entry.is_string()) {
    const auto s = entry.get<std::string>();
    if (s == "w") return ComponentClass::omega();
    throw MalformedInput("unknown class symbol \"" + s + "\" (use \"w\" for omega)");
  }
  if (entry.is_number_integer()) {
    const auto v = entry.get<long long>();
    if (v < 1 || v > K) {
      throw MalformedInput("class " + std::to_string(v) + " out of range [1," +
                           std::to_string(K) + "]");
    }
    return ComponentClass::of_size(static_cast<int>(v));
  }
  throw MalformedInput("class entries must be integers or \"w\"");
}

inline RuleTable parse_rule(const nlohmann::json& doc, std::vector<std::string>* warnings = nullptr) {
  if (!doc.is_object()) throw MalformedInput("rule document must be a JSON object");
  if (!doc.contains("K") || !doc["K"].is_number_integer()) {
    throw MalformedInput("rule document needs an integer \"K\"");
  }
  const auto K = doc["K"].get<long long>();
  if (K < 1 || K > max_cap) throw MalformedInput("K out of range: " + std::to_string(K));
  std::string name = "custom";
  if (doc.contains("name")) {
    if (!doc["name"].is_string()) throw MalformedInput("\"name\" must be a string");
    name = doc["name"].get<std::string>();
  }
  if (!doc.contains("F") || !doc["F"].is_array()) {
    throw MalformedInput("rule document needs an array \"F\"");
  }
  std::vector<Quadruple> f;
  for (const auto& row : doc["F"]) {
    if (!row.is_array() || row.size() != 4) throw MalformedInput("each F entry must be a 4-array");
    Quadruple j;
    for (std::size_t p = 0; p < 4; ++p) j[p] = parse_class(row[p], static_cast<int>(K));
    f.push_back(j);
  }
  RuleTable rule(name, static_cast<int>(K), f);
  if (warnings && rule.duplicates_dropped() > 0) {
    warnings->push_back(std::to_string(rule.duplicates_dropped()) +
                        " duplicate quadruple(s) dropped from F");
  }
  return rule;
}

inline RuleTable parse_rule(const std::string& text, std::vector<std::string>* warnings = nullptr) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedInput(std::string("rule file is not valid JSON: ") + e.what());
  }
  return parse_rule(doc, warnings);
}

inline nlohmann::json to_json(const RuleTable& rule) {
  nlohmann::json f = nlohmann::json::array();
  for (const auto& j : rule.accepted()) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& e : j) {
      if (e.is_omega()) {
        row.push_back("w");
      } else {
        row.push_back(e.size());
      }
    }
    f.push_back(row);
  }
  return {{"name", rule.name()}, {"K", rule.K()}, {"F", f}};
}

// Built-in names: bohman-frieze, erdos-renyi[:K], isolated-first:K, small-first:K.
// Anything else is read as a rule file path.
inline RuleTable resolve_rule(const std::string& ref, std::vector<std::string>* warnings = nullptr) {
  if (ref == "bohman-frieze" || ref == "bf") return bohman_frieze();
  if (ref == "erdos-renyi" || ref == "er") return erdos_renyi(1);
  const auto colon = ref.find(':');
  if (colon != std::string::npos) {
    const auto family = ref.substr(0, colon);
    int K = 0;
    try {
      K = std::stoi(ref.substr(colon + 1));
    } catch (const std::exception&) {
      throw MalformedInput("bad cap in rule name " + ref);
    }
    if (family == "erdos-renyi") return erdos_renyi(K);
    if (family == "isolated-first") return isolated_first(K);
    if (family == "small-first") return small_first(K);
  }
  std::ifstream in(ref);
  if (!in) throw MalformedInput("unknown rule \"" + ref + "\" (not a built-in name or readable file)");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_rule(buf.str(), warnings);
}

}  // namespace bsr
