#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "synergen/model.hpp"

namespace synergen {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int coords_checked = 0;
    int coords_skipped = 0;  // coordinates straddling a ReLU kink
};

// Compares backprop against central finite differences. `build_loss` must
// construct the full graph from the model's current parameter values and
// return the scalar loss node; it is re-invoked for every perturbation, so it
// has to be deterministic. Relative error uses a small absolute floor so
// near-zero gradients do not blow up the ratio. Coordinates where the
// difference quotient does not converge as epsilon shrinks (the perturbation
// straddles a ReLU kink, where the loss is not differentiable and the oracle
// is invalid) are skipped and counted separately.
GradCheckResult gradcheck(Model& model, const std::function<int(GraphRun&, Tape&)>& build_loss,
                          int coords_per_param = 6, double epsilon = 1e-5, uint64_t seed = 0,
                          double rel_floor = 1e-3);

}  // namespace synergen
