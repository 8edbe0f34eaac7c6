#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ltp/common.hpp"

namespace ltp {

// Dense row-major double tensor. Feature maps are CHW, embedding batches are
// {rows, dim}, scalars are {1, 1}. Value semantics, unique ownership.
// Construction zero-fills; uninit() skips the fill for buffers that are
// written in full immediately (GEMM outputs, im2col columns).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : Tensor(std::move(shape), Fill::Zero) {}

    Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape_))
            throw ContractError("tensor data size does not match shape " + shape_str());
        n_ = static_cast<int64_t>(data.size());
        data_ = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(n_));
        std::copy(data.begin(), data.end(), data_.get());
    }

    Tensor(const Tensor& o) : shape_(o.shape_), n_(o.n_) {
        if (n_ > 0) {
            data_ = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(n_));
            std::copy(o.data_.get(), o.data_.get() + n_, data_.get());
        }
    }
    Tensor& operator=(const Tensor& o) {
        if (this != &o) *this = Tensor(o);
        return *this;
    }
    Tensor(Tensor&&) noexcept = default;
    Tensor& operator=(Tensor&&) noexcept = default;

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor uninit(std::vector<int> shape) { return Tensor(std::move(shape), Fill::None); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t = uninit(std::move(shape));
        for (int64_t i = 0; i < t.n_; ++i) t.data_[static_cast<size_t>(i)] = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int dim() const { return static_cast<int>(shape_.size()); }
    int size(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
    int64_t numel() const { return n_; }
    bool empty() const { return n_ == 0; }

    double* data() { return data_.get(); }
    const double* data() const { return data_.get(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor with numel " + std::to_string(numel()));
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ContractError("negative dimension in tensor shape");
            n *= d;
        }
        return n;
    }

private:
    enum class Fill { Zero, None };

    Tensor(std::vector<int> shape, Fill fill) : shape_(std::move(shape)) {
        n_ = numel_of(shape_);
        if (n_ > 0) {
            data_ = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(n_));
            if (fill == Fill::Zero) std::fill(data_.get(), data_.get() + n_, 0.0);
        }
    }

    std::vector<int> shape_;
    int64_t n_ = 0;
    std::unique_ptr<double[]> data_;
};

inline void require_shape(const Tensor& t, const std::vector<int>& shape, const char* what) {
    if (t.shape() != shape)
        throw ContractError(std::string(what) + ": expected shape " +
                            Tensor(shape).shape_str() + ", got " + t.shape_str());
}

}  // namespace ltp
