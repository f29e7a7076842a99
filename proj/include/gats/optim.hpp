#pragma once

// Adam with bias correction and a linear warm-up schedule. Frozen parameters
// (requires_grad == false) are skipped entirely.

#include <cmath>
#include <string>
#include <vector>

#include "gats/tensor.hpp"

namespace gats {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 0;
  double max_grad_norm = 0.0;  // global-norm clip; 0 disables
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

class AdamState {
public:
  explicit AdamState(std::vector<NamedParam> params)
      : params_(std::move(params)) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor.numel(), 0.0);
      v_[i].assign(params_[i].tensor.numel(), 0.0);
    }
  }

  std::size_t step_count() const { return step_; }
  const std::vector<NamedParam>& params() const { return params_; }

  double current_lr(const AdamHyper& h) const {
    if (h.warmup_steps == 0 || step_ >= h.warmup_steps) return h.lr;
    return h.lr * static_cast<double>(step_ + 1) /
           static_cast<double>(h.warmup_steps);
  }

  // One update from the gradients currently stored on the parameters.
  void step(const AdamHyper& h) {
    double lr = current_lr(h);
    double clip = 1.0;
    if (h.max_grad_norm > 0.0) {
      double gn = grad_norm();
      if (gn > h.max_grad_norm) clip = h.max_grad_norm / gn;
    }
    ++step_;
    double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i].tensor;
      if (!p.requires_grad()) continue;
      if (p.grad().size() != p.numel())
        throw shape_error("adam: grad shape mismatch for " + params_[i].name);
      auto& val = p.mutable_data();
      const auto& g = p.grad();
      for (std::size_t j = 0; j < val.size(); ++j) {
        double gj = g[j] * clip;
        m_[i][j] = h.beta1 * m_[i][j] + (1.0 - h.beta1) * gj;
        v_[i][j] = h.beta2 * v_[i][j] + (1.0 - h.beta2) * gj * gj;
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        val[j] -= lr * mhat / (std::sqrt(vhat) + h.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      if (p.tensor.requires_grad())
        for (double g : p.tensor.grad()) s += g * g;
    return std::sqrt(s);
  }

private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

inline void adam_step(AdamState& state, const AdamHyper& hyper) {
  state.step(hyper);
}

// FNV-1a over the raw bytes of a parameter set; used for frozen-immutability
// checks and cache keys.
inline std::uint64_t param_fingerprint(const std::vector<NamedParam>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.tensor.data().data(), p.tensor.numel() * sizeof(double));
  }
  return h;
}

}  // namespace gats
