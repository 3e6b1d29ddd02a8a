#include "avsdiff/gradcheck.hpp"

#include <cmath>

namespace avsdiff {

GradCheckReport grad_check(const std::vector<Param*>& params,
                           const std::function<double(bool with_grad)>& loss, double step,
                           double zero_gate) {
  for (Param* p : params) p->zero_grad();
  (void)loss(true);

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      const double up = loss(false);
      p.value[i] = saved - step;
      const double down = loss(false);
      p.value[i] = saved;

      const double fd = (up - down) / (2.0 * step);
      const double an = analytic[pi][i];
      const double mag = std::max(std::fabs(an), std::fabs(fd));
      const double rel = mag < zero_gate ? 0.0 : std::fabs(an - fd) / mag;
      ++report.elements_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name;
        report.worst_index = i;
        report.worst_analytic = an;
        report.worst_fd = fd;
      }
    }
  }
  return report;
}

}  // namespace avsdiff
