#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tps/tensor.hpp"

namespace tps {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "param[index]" of the worst coordinate
  std::size_t coords_checked = 0;
};

// Central-difference verification of analytic gradients.
//
// `loss` must zero the parameters' gradients, run forward + backward and
// return the scalar loss; it is invoked repeatedly under coordinate-wise
// perturbations. Relative error uses denominator max(|analytic|, |numeric|,
// 1e-8). With max_coords_per_param > 0 a seeded subset of coordinates is
// checked per tensor, keeping large-model sweeps fast.
GradCheckReport grad_check(const std::function<double()>& loss,
                           const std::vector<Parameter*>& params, double eps = 1e-5,
                           std::size_t max_coords_per_param = 0, std::uint64_t sample_seed = 0);

}  // namespace tps
