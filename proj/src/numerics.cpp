#include "exitlab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace exitlab {

Matrix::Matrix(int r, int c) : rows(r), cols(c) {
    if (r <= 0 || c <= 0) {
        throw std::invalid_argument("Matrix: dimensions must be positive, got " +
                                    std::to_string(r) + "x" + std::to_string(c));
    }
    values.assign(static_cast<size_t>(r) * c, 0.0);
}

Matrix::Matrix(int r, int c, std::vector<double> vals) : rows(r), cols(c), values(std::move(vals)) {
    if (r <= 0 || c <= 0) {
        throw std::invalid_argument("Matrix: dimensions must be positive");
    }
    if (values.size() != static_cast<size_t>(r) * c) {
        throw std::invalid_argument("Matrix: value count " + std::to_string(values.size()) +
                                    " does not match " + std::to_string(r) + "x" + std::to_string(c));
    }
}

Vector matvec(const Matrix& w, const Vector& x) {
    if (x.size() != static_cast<size_t>(w.cols)) {
        throw std::invalid_argument("matvec: vector length " + std::to_string(x.size()) +
                                    " does not match matrix cols " + std::to_string(w.cols));
    }
    Vector out(static_cast<size_t>(w.rows));
    for (int r = 0; r < w.rows; ++r) {
        const double* row = w.values.data() + static_cast<size_t>(r) * w.cols;
        double acc = 0.0;
        for (int c = 0; c < w.cols; ++c) {
            acc += row[c] * x[static_cast<size_t>(c)];
        }
        out[static_cast<size_t>(r)] = acc;
    }
    return out;
}

std::vector<Vector> matvec_batch(const Matrix& w, const std::vector<Vector>& xs) {
    std::vector<Vector> out;
    out.reserve(xs.size());
    for (const Vector& x : xs) {
        out.push_back(matvec(w, x));
    }
    return out;
}

Vector softmax(const Vector& v) {
    if (v.empty()) {
        throw std::invalid_argument("softmax: empty input");
    }
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument("softmax: non-finite input");
        }
    }
    const double mx = *std::max_element(v.begin(), v.end());
    Vector out(v.size());
    double sum = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    for (double& x : out) {
        x /= sum;
    }
    return out;
}

double cosine_similarity(const Vector& u, const Vector& v) {
    if (u.size() != v.size()) {
        throw std::invalid_argument("cosine_similarity: length mismatch");
    }
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    if (uu == 0.0 || vv == 0.0) {
        throw std::invalid_argument("cosine_similarity: zero-norm input");
    }
    return uv / (std::sqrt(uu) * std::sqrt(vv));
}

namespace {

constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

uint64_t splitmix64_at(uint64_t seed, uint64_t index) {
    return mix64(seed + (index + 1) * kGamma);
}

double uniform01_at(uint64_t seed, uint64_t index) {
    return static_cast<double>(splitmix64_at(seed, index) >> 11) * 0x1.0p-53;
}

uint64_t SplitMix64::next() {
    state_ += kGamma;
    return mix64(state_);
}

double SplitMix64::next_double() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

Matrix seeded_matrix(int rows, int cols, uint64_t seed) {
    if (rows <= 0 || cols <= 0) {
        throw std::invalid_argument("seeded_matrix: dimensions must be positive");
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(cols));
    Matrix m(rows, cols);
    for (size_t i = 0; i < m.values.size(); ++i) {
        m.values[i] = (2.0 * uniform01_at(seed, i) - 1.0) * s;
    }
    return m;
}

Vector seeded_vector(int len, uint64_t seed) {
    if (len <= 0) {
        throw std::invalid_argument("seeded_vector: length must be positive");
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(len));
    Vector v(static_cast<size_t>(len));
    for (size_t i = 0; i < v.size(); ++i) {
        v[i] = (2.0 * uniform01_at(seed, i) - 1.0) * s;
    }
    return v;
}

}  // namespace exitlab
