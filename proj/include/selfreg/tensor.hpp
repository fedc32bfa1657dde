#ifndef SELFREG_TENSOR_HPP
#define SELFREG_TENSOR_HPP

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "selfreg/errors.hpp"

namespace selfreg {

// Dense row-major tensor of doubles. All model math runs at 64-bit.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel_of(shape_))
            throw ShapeError("Tensor: data size does not match shape");
    }

    static std::size_t numel_of(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("Tensor: negative dimension");
            n *= std::size_t(d);
        }
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[std::size_t(i)]; }
    int ndim() const { return int(shape_.size()); }
    std::size_t numel() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 4-D accessor (the common layout: batch, channel, row, col)
    double& at(int n, int c, int h, int w) {
        return data_[((std::size_t(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at(int n, int c, int h, int w) const {
        return data_[((std::size_t(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> new_shape) const {
        if (numel_of(new_shape) != numel())
            throw ShapeError("reshape: element count mismatch");
        Tensor out;
        out.shape_ = std::move(new_shape);
        out.data_ = data_;
        return out;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ")";
        return os.str();
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

// Integer tensor for label masks.
class IntTensor {
public:
    IntTensor() = default;
    explicit IntTensor(std::vector<int> shape, int fill = 0)
        : shape_(std::move(shape)), data_(Tensor::numel_of(shape_), fill) {}

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[std::size_t(i)]; }
    int ndim() const { return int(shape_.size()); }
    std::size_t numel() const { return data_.size(); }

    int* data() { return data_.data(); }
    const int* data() const { return data_.data(); }
    int& operator[](std::size_t i) { return data_[i]; }
    int operator[](std::size_t i) const { return data_[i]; }

    int& at(int n, int h, int w) {
        return data_[(std::size_t(n) * shape_[1] + h) * shape_[2] + w];
    }
    int at(int n, int h, int w) const {
        return data_[(std::size_t(n) * shape_[1] + h) * shape_[2] + w];
    }

    bool same_shape(const IntTensor& o) const { return shape_ == o.shape_; }

private:
    std::vector<int> shape_;
    std::vector<int> data_;
};

}  // namespace selfreg

#endif
