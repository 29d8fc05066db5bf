#include "tracer/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "tracer/errors.hpp"

namespace tracer {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
    for (std::size_t d : shape_) {
        if (d == 0) throw ValidationError("tensor dimensions must be positive, got " + shape_to_string(shape_));
    }
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : Tensor(std::move(shape)) {
    for (double& v : data_) v = fill;
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
    if (shape_product(new_shape) != data_.size()) {
        throw ValidationError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    if (a.size() == 0) return true;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Tensor slice_row(const Tensor& batch, std::size_t r) {
    if (batch.rank() < 1 || r >= batch.dim(0)) throw ValidationError("slice_row: row out of range");
    std::vector<std::size_t> shape(batch.shape().begin() + 1, batch.shape().end());
    if (shape.empty()) shape.push_back(1);
    std::size_t stride = shape_product(shape);
    std::vector<double> data(batch.data() + r * stride, batch.data() + (r + 1) * stride);
    return Tensor(std::move(shape), std::move(data));
}

Tensor stack_rows(const std::vector<Tensor>& samples) {
    if (samples.empty()) throw ValidationError("stack_rows: no samples");
    std::vector<std::size_t> shape;
    shape.push_back(samples.size());
    for (std::size_t d : samples[0].shape()) shape.push_back(d);
    Tensor out(shape);
    std::size_t stride = samples[0].size();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].same_shape(samples[0])) throw ValidationError("stack_rows: mismatched sample shapes");
        std::memcpy(out.data() + i * stride, samples[i].data(), stride * sizeof(double));
    }
    return out;
}

}  // namespace tracer
