#pragma once

#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace synergen {

// Dense row-major matrix/vector of doubles. Shape is limited to rank 1 or 2;
// scalars are 1x1.
class Tensor {
public:
    Tensor() = default;
    Tensor(int rows, int cols) : rows_(rows), cols_(cols), data_(checked_size(rows, cols), 0.0) {}
    Tensor(int rows, int cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != static_cast<size_t>(rows) * cols)
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor scalar(double v) {
        Tensor t(1, 1);
        t.data_[0] = v;
        return t;
    }
    static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }
    static Tensor full(int rows, int cols, double v) {
        Tensor t(rows, cols);
        for (auto& x : t.data_) x = v;
        return t;
    }
    static Tensor randn(int rows, int cols, double stddev, std::mt19937_64& rng) {
        Tensor t(rows, cols);
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& x : t.data_) x = dist(rng);
        return t;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }
    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double* row_ptr(int r) { return data_.data() + static_cast<size_t>(r) * cols_; }
    const double* row_ptr(int r) const { return data_.data() + static_cast<size_t>(r) * cols_; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool all_finite() const;
    void check_finite(const std::string& what) const;

    std::string shape_str() const {
        return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
    }

private:
    static size_t checked_size(int rows, int cols) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("Tensor: negative dimension");
        return static_cast<size_t>(rows) * cols;
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

}  // namespace synergen
