#pragma once

#include <functional>
#include <string>
#include <vector>

#include "candle/tensor.hpp"

namespace candle::gradcheck {

inline constexpr float kDefaultEps = 1e-3f;
inline constexpr double kOpTolerance = 1e-3;
inline constexpr double kEndToEndTolerance = 1e-2;

// Central differences of a scalar-valued f, element by element. The step is
// the float-representable x +- eps, so the quotient uses the realized width.
Tensor finite_difference_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, float eps = kDefaultEps);

// max |a - n| / max(max |a|, max |n|, floor).
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor = 1e-4);

using MultiOp = std::function<Tensor(const std::vector<Tensor>&)>;

// Checks d<w, op(inputs)>/d inputs[k], k in `check`, against central
// differences; `w` is a fixed random projection of the output. The error is
// taken over the concatenated gradient of all checked inputs.
double check_op(const MultiOp& op, std::vector<Tensor> inputs, const std::vector<std::size_t>& check, std::uint64_t seed,
                float eps = kDefaultEps);

struct CheckResult {
    std::string module;
    std::string name;
    int seeds = 0;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed() const { return max_rel_error <= tolerance; }
};

// Module names accepted by run_suite: tensor, wavelet, arch, metrics, train, e2e.
std::vector<std::string> module_names();

// Runs every check of `module` (all when empty) over `seeds` seeds.
std::vector<CheckResult> run_suite(const std::string& module = "", int seeds = 20);

std::string format_table(const std::vector<CheckResult>& results);

}  // namespace candle::gradcheck
