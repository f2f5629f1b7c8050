#pragma once

// Dense row-major f64 tensor, the value carrier for every module.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowcal {

// Raised on contract violations: bad shapes, bad config, bad arguments.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when an optimization or evaluation produces non-finite values.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised on file-format and filesystem failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        for (int64_t d : shape_)
            if (d <= 0) throw ValidationError("Tensor: non-positive extent in " + shape_str(shape_));
        data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw ValidationError("Tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor from(Shape shape, std::initializer_list<double> vals) {
        return Tensor(std::move(shape), std::vector<double>(vals));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Rank-2 accessors, row-major.
    double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw ValidationError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape) +
                                  " changes element count");
        return Tensor(std::move(shape), data_);
    }

    void fill(double v) {
        for (double& x : data_) x = v;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double max_abs(const Tensor& a) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

namespace detail {

// out = A(m,k) * B(k,n). Accumulation order is fixed (k innermost ascending)
// so results are run-to-run deterministic.
inline void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < m; ++i) {
        double* orow = po + i * n;
        for (int64_t j = 0; j < n; ++j) orow[j] = 0.0;
        for (int64_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// accA += G(m,n) * B(k,n)^T
inline void matmul_acc_nt(const Tensor& g, const Tensor& b, Tensor& acc_a) {
    const int64_t m = g.dim(0), n = g.dim(1), k = b.dim(0);
    const double* pg = g.data();
    const double* pb = b.data();
    double* pa = acc_a.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double* grow = pg + i * n;
            const double* brow = pb + p * n;
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            pa[i * k + p] += s;
        }
    }
}

// accB += A(m,k)^T * G(m,n)
inline void matmul_acc_tn(const Tensor& a, const Tensor& g, Tensor& acc_b) {
    const int64_t m = a.dim(0), k = a.dim(1), n = g.dim(1);
    const double* pa = a.data();
    const double* pg = g.data();
    double* pb = acc_b.data();
    for (int64_t i = 0; i < m; ++i) {
        const double* grow = pg + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            double* brow = pb + p * n;
            for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
    }
}

// Same-length zero-padded 1-D convolution along `axis`:
//   out[t] = sum_j kernel[j+h] * x[t-j],  j in [-h, h].
// The tensor is traversed as outer x len x inner.
inline void conv1d(const Tensor& x, const Tensor& kernel, int axis, Tensor& out) {
    const Shape& s = x.shape();
    const int64_t len = s[static_cast<size_t>(axis)];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t klen = kernel.numel();
    const int64_t h = (klen - 1) / 2;
    const double* px = x.data();
    const double* pk = kernel.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        const double* xb = px + o * len * inner;
        double* ob = po + o * len * inner;
        for (int64_t t = 0; t < len; ++t) {
            const int64_t jlo = std::max<int64_t>(-h, t - (len - 1));
            const int64_t jhi = std::min<int64_t>(h, t);
            for (int64_t c = 0; c < inner; ++c) ob[t * inner + c] = 0.0;
            for (int64_t j = jlo; j <= jhi; ++j) {
                const double kv = pk[j + h];
                const double* xrow = xb + (t - j) * inner;
                double* orow = ob + t * inner;
                for (int64_t c = 0; c < inner; ++c) orow[c] += kv * xrow[c];
            }
        }
    }
}

// Exact adjoint of conv1d: correlation with the same kernel.
//   out[t] = sum_j kernel[j+h] * d[t+j],  j in [-h, h].
inline void conv1d_adjoint(const Tensor& d, const Tensor& kernel, int axis, Tensor& out) {
    const Shape& s = d.shape();
    const int64_t len = s[static_cast<size_t>(axis)];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < d.rank(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t klen = kernel.numel();
    const int64_t h = (klen - 1) / 2;
    const double* pd = d.data();
    const double* pk = kernel.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        const double* db = pd + o * len * inner;
        double* ob = po + o * len * inner;
        for (int64_t t = 0; t < len; ++t) {
            const int64_t jlo = std::max<int64_t>(-h, -t);
            const int64_t jhi = std::min<int64_t>(h, (len - 1) - t);
            for (int64_t c = 0; c < inner; ++c) ob[t * inner + c] = 0.0;
            for (int64_t j = jlo; j <= jhi; ++j) {
                const double kv = pk[j + h];
                const double* drow = db + (t + j) * inner;
                double* orow = ob + t * inner;
                for (int64_t c = 0; c < inner; ++c) orow[c] += kv * drow[c];
            }
        }
    }
}

} // namespace detail
} // namespace flowcal
