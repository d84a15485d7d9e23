#pragma once

// Finite-difference verification of the analytic gradients.

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "meshtron/train.hpp"

namespace meshtron {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;              // "tensor[index]" with the largest error
  std::set<std::string> roles;    // layer roles that were sampled
};

/// Role of a tensor name: embed, attention, cross_attention, ffn, norm,
/// shortening, upsampling, head or encoder.
inline std::string parameter_role(const std::string& name) {
  if (name.rfind("encoder/", 0) == 0) return "encoder";
  if (name == "embed") return "embed";
  if (name.rfind("shorten", 0) == 0) return "shortening";
  if (name.rfind("upsample", 0) == 0) return "upsampling";
  if (name.rfind("head", 0) == 0) return "head";
  if (name.find("cross.") != std::string::npos) return "cross_attention";
  if (name.find("attn.") != std::string::npos) return "attention";
  if (name.find("ffn.") != std::string::npos) return "ffn";
  return "norm";
}

/// Compares backprop against central differences on about `samples` scalar
/// parameters spread over every tensor. The relative error of one entry is
/// |a - n| / max(|a|, |n|, floor); the floor keeps entries whose true gradient is
/// at rounding level from dominating.
inline GradCheckResult grad_check(ParameterSet<double>& p, const HourglassConfig& cfg, const TrainExample& ex,
                                  std::size_t offset, std::size_t length, std::size_t window, std::size_t samples,
                                  double h = 1e-5, std::uint64_t seed = 0, double floor = 1e-6) {
  auto loss = [&] {
    return example_loss(p, cfg, ex.sequence, offset, length, ex.points, ex.face_count, ex.quad_ratio, window).mean;
  };
  ParameterSet<double> g = zeros_like(p);
  example_loss(p, cfg, ex.sequence, offset, length, ex.points, ex.face_count, ex.quad_ratio, window, &g);

  std::vector<std::pair<std::string, Mat<double>*>> named;
  visit_parameters(p, [&](const std::string& name, Mat<double>& m) {
    if (m.size() > 0) named.emplace_back(name, &m);
  });
  std::vector<Mat<double>*> grads;
  visit_parameters(g, [&](const std::string&, Mat<double>& m) {
    if (m.size() > 0) grads.push_back(&m);
  });

  Rng rng(seed);
  const std::size_t per = std::max<std::size_t>(1, (samples + named.size() - 1) / named.size());
  GradCheckResult r;
  for (std::size_t t = 0; t < named.size(); ++t) {
    Mat<double>& w = *named[t].second;
    for (std::size_t k = 0; k < per; ++k) {
      const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.size())));
      const double saved = w.data()[idx];
      w.data()[idx] = saved + h;
      const double up = loss();
      w.data()[idx] = saved - h;
      const double down = loss();
      w.data()[idx] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads[t]->data()[idx];
      const double err =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      if (err > r.max_rel_error || r.checked == 0) {
        r.max_rel_error = std::max(r.max_rel_error, err);
        if (err >= r.max_rel_error) r.worst = named[t].first + "[" + std::to_string(idx) + "]";
      }
      r.roles.insert(parameter_role(named[t].first));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace meshtron
