#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pushpull/tensor.hpp"

namespace pushpull {

struct GradCheckReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<Entry> per_param;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

/// Compares reverse-mode gradients of a deterministic scalar program against
/// central finite differences, coordinate by coordinate.
///
/// Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|),
/// the step is central with h = 1e-5 so frozen oracle values reproduce.
inline GradCheckReport grad_check(const std::function<Tensor()>& program,
                                  std::vector<std::pair<std::string, Tensor>> params, double tolerance,
                                  double step = 1e-5) {
    auto eval = [&]() {
        NoGradGuard no_grad;
        const Tensor out = program();
        const double v = out.value();
        if (!std::isfinite(v)) throw std::runtime_error("grad_check: program produced a non-finite value");
        return v;
    };

    for (auto& [name, p] : params) {
        if (!p.requires_grad()) throw std::invalid_argument("grad_check: parameter '" + name + "' does not require grad");
        p.zero_grad();
    }
    Tensor loss = program();
    if (!std::isfinite(loss.value())) throw std::runtime_error("grad_check: program produced a non-finite value");
    loss.backward();

    GradCheckReport report;
    report.tolerance = tolerance;
    for (auto& [name, p] : params) {
        const std::vector<double> analytic = p.grad();
        std::vector<double>& v = p.values();
        double worst = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double saved = v[i];
            v[i] = saved + step;
            const double up = eval();
            v[i] = saved - step;
            const double down = eval();
            v[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
        report.per_param.push_back({name, worst});
        report.max_rel_err = std::max(report.max_rel_err, worst);
    }
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

}  // namespace pushpull
