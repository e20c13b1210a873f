#pragma once

// Adam with bias correction and optional global gradient-norm clipping.
// Moment buffers are keyed by parameter name, so freezing or unfreezing a
// parameter between steps does not shift any other parameter's state.

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "ppm/registry.hpp"

namespace ppm {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // <= 0 disables clipping
};

// L2 norm over the gradients of trainable parameters, in registry order.
template <typename T>
double global_grad_norm(const RegistryT<T>& reg) {
    double sq = 0.0;
    for (const auto& name : reg.order) {
        const auto& e = reg.at(name);
        if (!e.trainable || e.tensor.grad().empty()) continue;
        for (T g : e.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(sq);
}

template <typename T>
class AdamT {
  public:
    explicit AdamT(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    long long step_count() const { return t_; }

    // One update over the trainable parameters that received gradient.
    void step(RegistryT<T>& reg) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

        double clip_scale = 1.0;
        if (cfg_.clip_norm > 0.0) {
            const double norm = global_grad_norm(reg);
            if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
        }

        for (const auto& name : reg.order) {
            auto& e = reg.at(name);
            if (!e.trainable || e.tensor.grad().empty()) continue;
            auto& m = moment1_[name];
            auto& v = moment2_[name];
            if (m.empty()) m.assign(e.tensor.numel(), 0.0);
            if (v.empty()) v.assign(e.tensor.numel(), 0.0);
            auto& data = e.tensor.data();
            const auto& grad = e.tensor.grad();
            for (size_t i = 0; i < data.size(); ++i) {
                const double g = static_cast<double>(grad[i]) * clip_scale;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                data[i] = static_cast<T>(static_cast<double>(data[i]) -
                                         cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

  private:
    AdamConfig cfg_;
    long long t_ = 0;
    std::unordered_map<std::string, std::vector<double>> moment1_;
    std::unordered_map<std::string, std::vector<double>> moment2_;
};

using Adam = AdamT<float>;

}  // namespace ppm
