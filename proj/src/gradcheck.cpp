#include "synergen/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "synergen/rng.hpp"

namespace synergen {

GradCheckResult gradcheck(Model& model, const std::function<int(GraphRun&, Tape&)>& build_loss,
                          int coords_per_param, double epsilon, uint64_t seed, double rel_floor) {
    if (coords_per_param < 1 || epsilon <= 0.0) throw std::invalid_argument("gradcheck: bad settings");

    auto loss_value = [&]() {
        Tape tape;
        GraphRun run(model, tape, false);
        const int loss = build_loss(run, tape);
        const Tensor& v = tape.value(loss);
        if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("gradcheck: loss must be a scalar");
        return v.at(0, 0);
    };

    // Analytic pass.
    std::map<std::string, Tensor> analytic;
    {
        Tape tape;
        GraphRun run(model, tape, true);
        const int loss = build_loss(run, tape);
        tape.backward(loss);
        for (const auto& [name, node] : run.param_nodes())
            if (tape.has_grad(node)) analytic.emplace(name, tape.grad(node));
    }

    GradCheckResult res;
    ParamStore& params = model.params();
    for (int pi = 0; pi < params.count(); ++pi) {
        Param& p = params.at(pi);
        auto rng = make_engine(seed, "gradcheck", static_cast<uint64_t>(pi));
        const int total = p.value.rows() * p.value.cols();
        const int n = std::min(coords_per_param, total);
        auto git = analytic.find(p.name);
        for (int c = 0; c < n; ++c) {
            const int flat = static_cast<int>(rng() % static_cast<uint64_t>(total));
            double* slot = p.value.data().data() + flat;
            const double orig = *slot;
            auto central = [&](double eps) {
                *slot = orig + eps;
                const double up = loss_value();
                *slot = orig - eps;
                const double dn = loss_value();
                *slot = orig;
                return (up - dn) / (2.0 * eps);
            };
            const double numeric = central(epsilon);
            const double half = central(epsilon / 2.0);
            // For a smooth loss the two quotients agree to O(eps^2); a large
            // gap means the interval crosses a ReLU kink, where no derivative
            // exists and the finite-difference oracle does not apply.
            if (std::abs(numeric - half) / std::max(std::abs(numeric) + std::abs(half), rel_floor) > 1e-5) {
                ++res.coords_skipped;
                continue;
            }
            const double a = git == analytic.end() ? 0.0 : git->second.data()[flat];
            const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), rel_floor);
            ++res.coords_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = p.name;
            }
        }
    }
    return res;
}

}  // namespace synergen
