#pragma once

#include "nvs/autograd.hpp"
#include "nvs/rng.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace nvs {

struct Init {
  enum class Kind { zeros, ones, lecun_normal, normal, constant };
  Kind kind = Kind::zeros;
  double stddev = 0.0;
  Index fan_in = 1;

  static Init zeros() { return {Kind::zeros}; }
  static Init ones() { return {Kind::ones}; }
  /// Truncated normal with variance 1/fan_in.
  static Init lecun(Index fan_in) { return {Kind::lecun_normal, 0.0, fan_in}; }
  static Init normal(double stddev) { return {Kind::normal, stddev}; }
  /// Every entry set to `value` (carried in `stddev`).
  static Init constant(double value) { return {Kind::constant, value}; }
};

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

using ParamId = std::size_t;

/// Names, shapes and initializers of a model's parameters. Building a
/// registry allocates nothing, so large configurations can be inspected.
class ParamRegistry {
 public:
  ParamId add(const std::string& name, Shape shape, Init init) {
    std::string full = prefix() + name;
    if (!index_.emplace(full, specs_.size()).second) throw std::logic_error("duplicate parameter " + full);
    specs_.push_back({std::move(full), std::move(shape), init});
    return specs_.size() - 1;
  }

  class Scope {
   public:
    Scope(ParamRegistry& r, const std::string& name) : r_(r) { r_.scopes_.push_back(name); }
    ~Scope() { r_.scopes_.pop_back(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    ParamRegistry& r_;
  };
  Scope scope(const std::string& name) { return Scope(*this, name); }

  const std::vector<ParamSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }
  Index total_size() const {
    Index n = 0;
    for (const auto& s : specs_) n += shape_size(s.shape);
    return n;
  }
  std::optional<ParamId> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::string prefix() const {
    std::string p;
    for (const auto& s : scopes_) p += s + "/";
    return p;
  }

  std::vector<ParamSpec> specs_;
  std::unordered_map<std::string, ParamId> index_;
  std::vector<std::string> scopes_;
};

/// Parameter values for a registry, one tape leaf per parameter.
template <typename Scalar>
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(const ParamRegistry& registry) : specs_(registry.specs()) {
    vars_.reserve(specs_.size());
    for (const auto& s : specs_) vars_.push_back(ag::Var<Scalar>::leaf(Tensor<Scalar>::zeros(s.shape)));
  }

  void initialize(Rng& rng) {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      auto& t = vars_[i].mutable_value();
      const Init& init = specs_[i].init;
      switch (init.kind) {
        case Init::Kind::zeros:
          t.array().setZero();
          break;
        case Init::Kind::ones:
          t.array().setOnes();
          break;
        case Init::Kind::constant:
          t.array().setConstant(static_cast<Scalar>(init.stddev));
          break;
        case Init::Kind::normal:
          for (Index j = 0; j < t.size(); ++j) t[j] = static_cast<Scalar>(init.stddev * rng.normal());
          break;
        case Init::Kind::lecun_normal: {
          // Truncated at two standard deviations, rescaled to keep the target variance.
          const double stddev = std::sqrt(1.0 / static_cast<double>(init.fan_in)) / 0.87962566103423978;
          for (Index j = 0; j < t.size(); ++j) {
            double v;
            do v = rng.normal();
            while (std::abs(v) > 2.0);
            t[j] = static_cast<Scalar>(stddev * v);
          }
          break;
        }
      }
    }
  }

  const ag::Var<Scalar>& operator[](ParamId id) const { return vars_.at(id); }
  ag::Var<Scalar>& operator[](ParamId id) { return vars_.at(id); }
  std::size_t size() const { return vars_.size(); }
  const ParamSpec& spec(ParamId id) const { return specs_.at(id); }
  const std::vector<ParamSpec>& specs() const { return specs_; }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }
  void set_requires_grad(bool on) {
    for (auto& v : vars_) v.set_requires_grad(on);
  }
  Index total_size() const {
    Index n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
  }

 private:
  std::vector<ParamSpec> specs_;
  std::vector<ag::Var<Scalar>> vars_;
};

}  // namespace nvs
