#pragma once

#include <numeric>

#include "warpattn/tensor.hpp"

namespace warpattn {

struct GradCheckReport {
  double max_rel_err = 0.0;
  Index worst_coord = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Central-difference audit of reverse-mode gradients. `f` maps a tensor to a
// scalar tensor and must work on both tracked and untracked inputs. Relative
// error uses max(|analytic|, |numeric|, 1e-8) as denominator. When
// `max_coords` is positive only a seeded subset of coordinates is probed
// (composite audits on image-sized points would otherwise be quadratic).
template <class S, class F>
GradCheckReport gradcheck(F f, const Tensor<S>& point, S epsilon,
                          Index max_coords = -1, std::uint64_t coord_seed = 0) {
  if (!(epsilon > S(0))) throw ValidationError("gradcheck: epsilon must be positive");

  DebugChecksGuard guard(true);  // surface non-finite intermediates by op name

  Graph<S> g;
  Tensor<S> x = Tensor<S>::leaf(g, point.detached(), "gradcheck_point");
  Tensor<S> loss = f(x);
  if (loss.size() != 1)
    throw ValidationError("gradcheck: function must return a scalar");

  Tensor<S> analytic;
  if (loss.tracked()) {
    auto grads = backward(loss);
    auto it = grads.find(x.node());
    analytic = it != grads.end() ? it->second : Tensor<S>::zeros(point.shape());
  } else {
    analytic = Tensor<S>::zeros(point.shape());  // constant function
  }

  std::vector<Index> coords(static_cast<std::size_t>(point.size()));
  std::iota(coords.begin(), coords.end(), Index{0});
  if (max_coords > 0 && max_coords < point.size()) {
    SeededRng rng(coord_seed, 77);
    for (Index i = 0; i < max_coords; ++i) {
      Index j = i + static_cast<Index>(rng.next_u64() %
                                       static_cast<std::uint64_t>(point.size() - i));
      std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(j)]);
    }
    coords.resize(static_cast<std::size_t>(max_coords));
  }

  GradCheckReport report;
  std::vector<S> base(point.data(), point.data() + point.size());
  for (Index c : coords) {
    std::vector<S> plus = base, minus = base;
    plus[static_cast<std::size_t>(c)] += epsilon;
    minus[static_cast<std::size_t>(c)] -= epsilon;
    const double fp = static_cast<double>(
        f(Tensor<S>::from_vector(point.shape(), plus)).item());
    const double fm = static_cast<double>(
        f(Tensor<S>::from_vector(point.shape(), minus)).item());
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(epsilon));
    const double a = static_cast<double>(analytic[c]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_coord = c;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  return report;
}

}  // namespace warpattn
