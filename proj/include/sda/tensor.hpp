#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sda/error.hpp"

namespace sda {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor of doubles, rank 0..3. Rank 0 is a scalar with one
// element.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), v_(shape_size(shape_), 0.0) { validate(); }

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), v_(std::move(values)) {
        validate();
        if (v_.size() != shape_size(shape_))
            throw ShapeError("tensor: " + std::to_string(v_.size()) + " values for shape " + shape_str(shape_));
    }

    static Tensor scalar(double x) {
        Tensor t{Shape{}};
        t.v_[0] = x;
        return t;
    }

    static Tensor full(Shape shape, double x) {
        Tensor t{std::move(shape)};
        std::fill(t.v_.begin(), t.v_.end(), x);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return v_.size(); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }

    double& at(int i) { return v_[static_cast<std::size_t>(i)]; }
    double at(int i) const { return v_[static_cast<std::size_t>(i)]; }
    double& at(int i, int j) { return v_[static_cast<std::size_t>(i) * dim(1) + j]; }
    double at(int i, int j) const { return v_[static_cast<std::size_t>(i) * dim(1) + j]; }
    double& at(int i, int j, int k) {
        return v_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double at(int i, int j, int k) const {
        return v_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

private:
    void validate() const {
        for (int d : shape_)
            if (d <= 0) throw ShapeError("tensor: nonpositive dim in shape " + shape_str(shape_));
        if (shape_.size() > 3) throw ShapeError("tensor: rank > 3 unsupported, shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> v_{0.0};  // rank-0 default holds one element
};

// Integer id matrix for token batches (rows = samples, cols = positions).
struct TokenMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<std::int32_t> ids;

    TokenMatrix() = default;
    TokenMatrix(int r, int c) : rows(r), cols(c), ids(static_cast<std::size_t>(r) * c, 0) {}

    std::int32_t at(int r, int c) const { return ids[static_cast<std::size_t>(r) * cols + c]; }
    std::int32_t& at(int r, int c) { return ids[static_cast<std::size_t>(r) * cols + c]; }
};

}  // namespace sda
