#pragma once

#include <functional>
#include <string>
#include <vector>

#include "avsdiff/autodiff.hpp"

namespace avsdiff {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
  std::int64_t elements_checked = 0;
};

/// Compares analytic gradients against central finite differences.
///
/// `loss(with_grad)` must run a full forward pass from the current parameter
/// values and return the scalar loss; when with_grad is true it must also
/// leave d(loss)/dp in every Param.grad (grads are zeroed here beforehand).
/// Elements where both gradients are below `zero_gate` are treated as matching
/// zeros; everything else is compared as |a-f| / max(|a|,|f|).
GradCheckReport grad_check(const std::vector<Param*>& params,
                           const std::function<double(bool with_grad)>& loss,
                           double step = 1e-5, double zero_gate = 1e-6);

}  // namespace avsdiff
