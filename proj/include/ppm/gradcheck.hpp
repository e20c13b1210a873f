#pragma once

// Central-difference gradient verification. Runs entirely in double so the
// numerical quotient is honest; callers cast a float registry up first.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ppm/registry.hpp"
#include "ppm/tensor.hpp"

namespace ppm {

struct GradCheckReport {
    double max_rel_error = 0.0;
    long long elements_checked = 0;
    std::string worst_param;
    size_t worst_index = 0;
};

// forward() must rebuild the scalar loss graph from the registry's current
// values on every call. Checks every element of every trainable parameter
// unless `names` narrows the set.
inline GradCheckReport finite_diff_check(RegistryT<double>& reg,
                                         const std::function<TensorT<double>()>& forward,
                                         std::vector<std::string> names = {}, double h = 1e-3) {
    if (names.empty()) {
        for (const auto& name : reg.order)
            if (reg.at(name).trainable) names.push_back(name);
    }

    reg.zero_grad();
    TensorT<double> loss = forward();
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(names.size());
    for (const auto& name : names) {
        auto& t = reg.tensor(name);
        if (t.grad().empty())
            analytic.emplace_back(t.numel(), 0.0);
        else
            analytic.push_back(t.grad());
    }

    GradCheckReport report;
    NoGradGuard eval_only;
    for (size_t ni = 0; ni < names.size(); ++ni) {
        auto& t = reg.tensor(names[ni]);
        for (size_t i = 0; i < t.numel(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + h;
            const double up = forward().item();
            t.data()[i] = saved - h;
            const double down = forward().item();
            t.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[ni][i];
            const double rel = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = names[ni];
                report.worst_index = i;
            }
            ++report.elements_checked;
        }
    }
    return report;
}

}  // namespace ppm
