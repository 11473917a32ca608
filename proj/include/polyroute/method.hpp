// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <string_view>

#include "polyroute/error.hpp"

namespace polyroute {

enum class Method {
  shared,
  private_mu,
  random_mu,
  poly,
  poly_mu,
  poly_s,
  mhr_mu,
  poly_z,
  poly_s_z,
  adapter_soup,
  full_ft,
};

enum class Phase { pretrain, finetune, inference };

inline constexpr std::array<Method, 11> kAllMethods{
    Method::shared, Method::private_mu, Method::random_mu, Method::poly,         Method::poly_mu, Method::poly_s,
    Method::mhr_mu, Method::poly_z,     Method::poly_s_z,  Method::adapter_soup, Method::full_ft,
};

/// Methods that can actually be trained (Full FT only exists in the accountant).
inline constexpr std::array<Method, 10> kTrainableMethods{
    Method::shared, Method::private_mu, Method::random_mu, Method::poly,     Method::poly_mu,
    Method::poly_s, Method::mhr_mu,     Method::poly_z,    Method::poly_s_z, Method::adapter_soup,
};

inline constexpr std::array<Phase, 3> kAllPhases{Phase::pretrain, Phase::finetune, Phase::inference};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::shared: return "shared";
    case Method::private_mu: return "private-mu";
    case Method::random_mu: return "random-mu";
    case Method::poly: return "poly";
    case Method::poly_mu: return "poly-mu";
    case Method::poly_s: return "poly-s";
    case Method::mhr_mu: return "mhr-mu";
    case Method::poly_z: return "poly-z";
    case Method::poly_s_z: return "poly-s-z";
    case Method::adapter_soup: return "adapter-soup";
    case Method::full_ft: return "full-ft";
  }
  return "?";
}

inline std::string method_names() {
  std::string out;
  for (auto m : kAllMethods) {
    if (!out.empty()) out += ", ";
    out += method_name(m);
  }
  return out;
}

inline Method parse_method(std::string_view name) {
  for (auto m : kAllMethods) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method '" + std::string(name) + "'; valid methods: " + method_names());
}

inline std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::finetune: return "finetune";
    case Phase::inference: return "inference";
  }
  return "?";
}

}  // namespace polyroute
