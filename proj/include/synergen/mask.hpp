#pragma once

#include <cstdint>
#include <vector>

namespace synergen {

// Binary attention-permission matrix. m(i, j) == true means token i may
// attend to token j.
class MaskMatrix {
public:
    MaskMatrix() = default;
    explicit MaskMatrix(int n) : n_(n), bits_(static_cast<size_t>(n) * n, 0) {}

    int size() const { return n_; }
    bool at(int i, int j) const { return bits_[static_cast<size_t>(i) * n_ + j] != 0; }
    void set(int i, int j, bool v) { bits_[static_cast<size_t>(i) * n_ + j] = v ? 1 : 0; }

    bool operator==(const MaskMatrix& o) const { return n_ == o.n_ && bits_ == o.bits_; }

private:
    int n_ = 0;
    std::vector<uint8_t> bits_;
};

}  // namespace synergen
