#include "simva/tensor.hpp"

#include <cmath>
#include <sstream>

#include "simva/errors.hpp"

namespace simva {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
    return st;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int64_t d : shape_)
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape_));
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
        throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

namespace {
int64_t flat_index(const Shape& shape, std::initializer_list<int64_t> idx) {
    if (idx.size() != shape.size())
        throw ShapeError("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                         std::to_string(shape.size()));
    int64_t flat = 0;
    auto st = row_major_strides(shape);
    size_t k = 0;
    for (int64_t i : idx) {
        if (i < 0 || i >= shape[k])
            throw ShapeError("index " + std::to_string(i) + " out of range for dim " + std::to_string(k) +
                             " of shape " + shape_str(shape));
        flat += i * st[k];
        ++k;
    }
    return flat;
}
} // namespace

double& Tensor::at(std::initializer_list<int64_t> idx) {
    return data_[static_cast<size_t>(flat_index(shape_, idx))];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    return data_[static_cast<size_t>(flat_index(shape_, idx))];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

} // namespace simva
