#pragma once

// Central-difference gradient checking against the double-precision stack.
//
// The loss builder receives a tape pointer: the analytic pass records onto a
// real tape and runs backward, the difference passes evaluate with a null
// tape. Builders must therefore be pure functions of the parameter values
// (fixed seeds, frozen pair weights, dropout off).

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <flame/flame.hpp>

namespace testsupport {

struct FdReport {
    double max_rel_err = 0.0;
    double analytic_at_worst = 0.0;
    double fd_at_worst = 0.0;
    std::string worst;
    std::size_t coords = 0;
};

using LossBuilder = std::function<flame::Tensor<double>(flame::Tape<double>*)>;

inline double fd_rel_err(double analytic, double fd) {
    const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-6});
    return std::abs(analytic - fd) / denom;
}

inline FdReport fd_check(const std::vector<std::pair<std::string, flame::Tensor<double>*>>& params,
                         const LossBuilder& loss, double h = 1e-4) {
    for (const auto& [name, t] : params) t->drop_grad();

    flame::Tape<double> tape;
    flame::Tensor<double> out = loss(&tape);
    tape.backward(out);

    std::vector<std::vector<double>> analytic(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        const flame::Tensor<double>& t = *params[p].second;
        analytic[p].assign(t.numel(), 0.0);
        if (t.has_grad()) {
            const double* g = t.grad_data();
            analytic[p].assign(g, g + t.numel());
        }
    }

    FdReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        flame::Tensor<double>& t = *params[p].second;
        double* x = t.data();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double saved = x[i];
            x[i] = saved + h;
            const double up = loss(nullptr).item();
            x[i] = saved - h;
            const double down = loss(nullptr).item();
            x[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double rel = fd_rel_err(analytic[p][i], fd);
            ++report.coords;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.analytic_at_worst = analytic[p][i];
                report.fd_at_worst = fd;
                report.worst = params[p].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

}  // namespace testsupport
