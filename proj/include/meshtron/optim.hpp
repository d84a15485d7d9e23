#pragma once

// AdamW with decoupled weight decay, global-norm clipping and a cosine
// learning-rate schedule with linear warm-up.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "meshtron/hourglass.hpp"

namespace meshtron {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Linear warm-up to `peak`, then cosine decay to `floor` at `total` steps.
struct CosineSchedule {
  double peak = 1e-3;
  double floor = 1e-4;
  std::size_t warmup = 100;
  std::size_t total = 1000;

  double at(std::size_t step) const {
    if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total <= warmup) return peak;
    const double t = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * t));
  }
};

template <typename T>
std::vector<Mat<T>*> tensors(ParameterSet<T>& p) {
  std::vector<Mat<T>*> out;
  visit_parameters(p, [&](const std::string&, Mat<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<const Mat<T>*> tensors(const ParameterSet<T>& p) {
  std::vector<const Mat<T>*> out;
  visit_parameters(p, [&](const std::string&, const Mat<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
double grad_norm(const ParameterSet<T>& g) {
  double s = 0.0;
  for (const auto* m : tensors(g)) s += static_cast<double>(m->squaredNorm());
  return std::sqrt(s);
}

/// Scales g so its global norm is at most max_norm; returns the norm before scaling.
template <typename T>
double clip_grad_norm(ParameterSet<T>& g, double max_norm) {
  const double n = grad_norm(g);
  if (!std::isfinite(n)) throw NumericError("clip_grad_norm: non-finite gradient norm");
  if (n > max_norm) {
    const T scale = static_cast<T>(max_norm / n);
    for (auto* m : tensors(g)) *m *= scale;
  }
  return n;
}

template <typename T>
struct AdamState {
  ParameterSet<T> m, v;
  std::size_t step = 0;

  AdamState() = default;
  explicit AdamState(const ParameterSet<T>& p) : m(zeros_like(p)), v(zeros_like(p)) {}
};

/// One AdamW update. Decay applies to matrices only (not gains or bias rows).
template <typename T>
void adamw_step(ParameterSet<T>& p, const ParameterSet<T>& g, AdamState<T>& s, double lr, const AdamWOptions& o) {
  ++s.step;
  const auto ps = tensors(p);
  const auto gs = tensors(g);
  const auto ms = tensors(s.m);
  const auto vs = tensors(s.v);
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.step));
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Mat<T>& w = *ps[i];
    const Mat<T>& gr = *gs[i];
    ms[i]->array() = b1 * ms[i]->array() + (T(1) - b1) * gr.array();
    vs[i]->array() = b2 * vs[i]->array() + (T(1) - b2) * gr.array().square();
    const bool decay = w.rows() > 1 && w.cols() > 1;
    if (decay) w *= static_cast<T>(1.0 - lr * o.weight_decay);
    const T step = static_cast<T>(lr / c1);
    const T eps = static_cast<T>(o.eps);
    const T rc2 = static_cast<T>(1.0 / std::sqrt(c2));
    w.array() -= step * ms[i]->array() / (vs[i]->array().sqrt() * rc2 + eps);
  }
}

}  // namespace meshtron
