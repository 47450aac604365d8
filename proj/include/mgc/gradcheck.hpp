#pragma once

// Central finite-difference checks of the analytic gradients.

#include <functional>
#include <string>
#include <vector>

#include "mgc/autograd.hpp"

namespace mgc::gradcheck {

struct Options {
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::size_t samples_per_tensor = 8;  // entries probed per leaf...
  std::size_t exhaustive_below = 64;   // ...unless it has at most this many, then all of them
};

struct SuiteResult {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst;  // "leaf[index]" of the largest error
  double worst_analytic = 0.0, worst_numeric = 0.0;
  std::size_t entries = 0;
  double seconds = 0.0;
  bool passed = false;
};

// |a - n| / max(|a|, |n|, 1e-6)
double relative_error(double analytic, double numeric);

// `loss` rebuilds the scalar from the current leaf values; it is called once
// with gradients enabled and then repeatedly under NoGradGuard.
SuiteResult check(const std::string& name, const std::vector<std::pair<std::string, ag::Var>>& leaves,
                  const std::function<ag::Var()>& loss, const Options& opt);

// Instances: N=6, K=3, D=8, C'=5, T'=4.
SuiteResult cross_entropy_suite(const Options& opt);
SuiteResult refinement_suite(const Options& opt);
SuiteResult fusion_suite(const Options& opt);
SuiteResult network_suite(const Options& opt);
SuiteResult composite_suite(const Options& opt);

std::vector<SuiteResult> run_all(const Options& opt);

}  // namespace mgc::gradcheck
