#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "lsc/ops.hpp"
#include "lsc/tensor.hpp"

namespace lsc {

template <class R>
struct GradCheckEntry {
  std::string name;
  double max_err = 0;  // max |analytic - numeric| / max(1, |numeric|)
};

template <class R>
struct GradCheckReport {
  std::vector<GradCheckEntry<R>> entries;

  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_err);
    return w;
  }
  bool pass(double tol) const { return worst() <= tol; }

  std::string str() const {
    std::string s;
    for (const auto& e : entries) s += e.name + " max_rel_err=" + num_str(e.max_err) + "\n";
    return s;
  }
};

// Central finite differences against the tape gradients. `f` rebuilds the
// scalar loss from the current parameter values on every call; it must be
// deterministic, which is verified by a double evaluation.
template <class R, class F>
GradCheckReport<R> grad_check(F&& f, const std::vector<std::pair<std::string, Tensor<R>>>& params,
                              R step, double tol) {
  (void)tol;
  R v0, v1;
  {
    NoGradScope<R> ng;
    v0 = f().item();
    v1 = f().item();
  }
  LSC_CHECK(std::memcmp(&v0, &v1, sizeof(R)) == 0,
            "grad_check: non-deterministic function (double evaluation mismatch: "
                << num_str(v0) << " vs " << num_str(v1) << ")");

  // analytic gradients
  std::vector<std::vector<R>> analytic;
  {
    TapeScope<R> ts;
    Tensor<R> loss = f();
    ts.tape().backward(loss);
    for (const auto& [name, p] : params) analytic.push_back(p.grad_or_zeros());
  }

  GradCheckReport<R> report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<R> p = params[pi].second;
    GradCheckEntry<R> entry;
    entry.name = params[pi].first;
    R* data = p.mutable_data();
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const R old = data[i];
      const R hi = old + step;
      const R lo = old - step;
      R fp, fm;
      {
        NoGradScope<R> ng;
        data[i] = hi;
        fp = f().item();
        data[i] = lo;
        fm = f().item();
      }
      data[i] = old;
      const double numeric =
          (static_cast<double>(fp) - static_cast<double>(fm)) / (static_cast<double>(hi) - lo);
      const double a = static_cast<double>(analytic[pi][static_cast<std::size_t>(i)]);
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      entry.max_err = std::max(entry.max_err, err);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace lsc
