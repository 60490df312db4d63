#include "tps/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tps/rng.hpp"

namespace tps {

GradCheckReport grad_check(const std::function<double()>& loss,
                           const std::vector<Parameter*>& params, double eps,
                           std::size_t max_coords_per_param, std::uint64_t sample_seed) {
  GradCheckReport report;
  const double base = loss();
  require(std::isfinite(base), "grad_check: non-finite loss");

  // Snapshot analytic gradients before perturbation passes overwrite them.
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) {
    require(p->value.has_grad(), "grad_check: parameter '" + p->name + "' has no gradient");
    analytic.push_back(p->value.grad);
  }

  Rng pick(sample_seed == 0 ? 0x6a09e667f3bcc909ull : sample_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const std::size_t n = p.value.numel();
    std::vector<std::size_t> coords;
    if (max_coords_per_param == 0 || n <= max_coords_per_param) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(static_cast<std::size_t>(pick.below(n)));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = loss();
      p.value[i] = saved - eps;
      const double down = loss();
      p.value[i] = saved;
      require(std::isfinite(up) && std::isfinite(down), "grad_check: non-finite perturbed loss");
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  // Restore the unperturbed gradient state.
  loss();
  return report;
}

}  // namespace tps
