#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnlab {

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor of 64-bit reals. Plain value type: parameters,
// corpus rows, captured activations and metric inputs all live here.
// Traced computation uses Var handles (autodiff.hpp); a Tensor itself
// carries no tape state.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), 0.0) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != numel(shape_))
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    const Shape& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t size() const { return data_.size(); }
    size_t rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.empty() ? 0 : 1); }
    size_t cols() const { return shape_.size() == 2 ? shape_[1] : (shape_.empty() ? 0 : shape_[0]); }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    double operator[](size_t i) const { return data_[i]; }
    double& operator[](size_t i) { return data_[i]; }

    double at(size_t r, size_t c) const { return data_[r * shape_[1] + c]; }
    double& at(size_t r, size_t c) { return data_[r * shape_[1] + c]; }

    double item() const {
        if (data_.size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape_));
        return data_[0];
    }

    // One row of a 2-D tensor, copied out.
    std::vector<double> row(size_t r) const {
        if (rank() != 2 || r >= shape_[0])
            throw std::invalid_argument("row " + std::to_string(r) + " out of range for " + shape_str(shape_));
        return std::vector<double>(data_.begin() + static_cast<ptrdiff_t>(r * shape_[1]),
                                   data_.begin() + static_cast<ptrdiff_t>((r + 1) * shape_[1]));
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_bits(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        for (size_t i = 0; i < data_.size(); ++i) {
            // bit compare: distinguishes -0.0 from 0.0 but treats each value as itself
            uint64_t a, b;
            static_assert(sizeof(double) == sizeof(uint64_t));
            std::memcpy(&a, &data_[i], 8);
            std::memcpy(&b, &o.data_[i], 8);
            if (a != b) return false;
        }
        return true;
    }

private:
    void check_shape() const {
        for (size_t d : shape_)
            if (d == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline void require_finite(const Tensor& t, const std::string& where) {
    if (!t.all_finite()) throw std::domain_error("non-finite values in " + where);
}

}  // namespace pnlab
