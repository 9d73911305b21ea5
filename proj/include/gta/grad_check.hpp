#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "gta/rng.hpp"
#include "gta/tensor.hpp"

namespace gta {

/// Central-difference gradient check. `f` composes a scalar loss from the
/// tensor it is handed; it must be deterministic. Returns the largest
/// relative error over the checked components, with a max(1,|analytic|)
/// denominator. `max_components > 0` checks a seeded subsample instead of
/// every component (for large parameter tensors).
inline double finite_diff_check(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
    std::size_t max_components = 0, std::uint64_t subsample_seed = 0) {
  if (!(eps > 0.0) || eps > 1e-3)
    throw config_error("finite_diff_check: eps must lie in (0, 1e-3]");

  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor xw = tape.watch(x);
    Tensor loss = f(xw);
    if (loss.numel() != 1)
      throw config_error("finite_diff_check: f must return a scalar");
    analytic = tape.backward(loss).at(xw).data();
  }

  std::vector<std::size_t> indices(x.numel());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  if (max_components > 0 && max_components < indices.size()) {
    Rng rng(subsample_seed);
    for (std::size_t i = 0; i < max_components; ++i) {
      const std::size_t j =
          i + static_cast<std::size_t>(rng.uniform_index(indices.size() - i));
      std::swap(indices[i], indices[j]);
    }
    indices.resize(max_components);
  }

  NoTapeScope off;
  std::vector<double> probe = x.data();
  double worst = 0.0;
  for (std::size_t i : indices) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = f(Tensor(x.shape(), probe)).value();
    probe[i] = saved - eps;
    const double down = f(Tensor(x.shape(), probe)).value();
    probe[i] = saved;
    const double fd = (up - down) / (2.0 * eps);
    const double denom = std::max(1.0, std::fabs(analytic[i]));
    worst = std::max(worst, std::fabs(fd - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace gta
