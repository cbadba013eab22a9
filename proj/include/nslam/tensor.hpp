#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nslam::ad {

// Training and tests both run in fp64; finite-difference checks require it.
using real = double;

// Dense n-dimensional value, row-major. Rank is small (<= 3 in practice).
struct Tensor {
    std::vector<int> shape;
    std::vector<real> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> shape_, real fill = 0.0) : shape(std::move(shape_)) {
        data.assign(static_cast<size_t>(numel_of(shape)), fill);
    }

    static Tensor scalar(real v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor from(std::vector<real> values) {
        Tensor t;
        t.shape = {static_cast<int>(values.size())};
        t.data = std::move(values);
        return t;
    }

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    int numel() const { return static_cast<int>(data.size()); }

    real& operator[](int i) { return data[static_cast<size_t>(i)]; }
    real operator[](int i) const { return data[static_cast<size_t>(i)]; }

    // 2D access, shape {rows, cols}
    real& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    real at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    // 3D access, shape {d0, d1, d2}
    real& at3(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    real at3(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (real v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    real sum() const { return std::accumulate(data.begin(), data.end(), real(0)); }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) os << 'x';
            os << shape[i];
        }
        os << ']';
        return os.str();
    }
};

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
    }
}

}  // namespace nslam::ad
