// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "magical/tensor.hpp"

namespace magical {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct CheckReport {
    struct Param {
        std::string name;
        double max_rel_error = 0.0;
        std::size_t worst_index = 0;
        double analytic = 0.0;
        double numeric = 0.0;
    };
    std::vector<Param> params;
    double tolerance = 0.0;
    bool pass = true;

    const Param* worst() const {
        const Param* w = nullptr;
        for (const auto& p : params)
            if (!w || p.max_rel_error > w->max_rel_error) w = &p;
        return w;
    }
};

/// Compares tape gradients of `scalar_fn` against central differences for
/// every entry of every parameter. The relative error of one entry is
/// |a - n| / max(|a|, |n|, floor); the floor keeps round-off in near-zero
/// gradients from reading as relative error.
inline CheckReport grad_check(const std::function<Tensor()>& scalar_fn, std::vector<NamedTensor> params,
                              double h = 1e-5, double tol = 1e-4, double floor = 1e-6) {
    CheckReport report;
    report.tolerance = tol;

    GradientMap grads;
    {
        GradientTape tape;
        Tensor loss = scalar_fn();
        if (!std::isfinite(loss.item())) throw NumericalDomainError("grad_check: non-finite function value");
        grads = tape.backward(loss);
    }

    NoGradGuard no_grad;
    for (auto& [name, param] : params) {
        CheckReport::Param entry;
        entry.name = name;
        const Tensor analytic = grads.get(param);
        auto values = param.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double fp = scalar_fn().item();
            values[i] = saved - h;
            const double fm = scalar_fn().item();
            values[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericalDomainError("grad_check: non-finite function value perturbing " + name);
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            if (err > entry.max_rel_error || i == 0) {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        if (entry.max_rel_error > tol) report.pass = false;
        report.params.push_back(std::move(entry));
    }
    return report;
}

}  // namespace magical
