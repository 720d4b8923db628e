#include "synergen/tensor.hpp"

#include <cmath>

namespace synergen {

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::check_finite(const std::string& what) const {
    if (!all_finite()) throw std::runtime_error("non-finite value in " + what + " " + shape_str());
}

}  // namespace synergen
