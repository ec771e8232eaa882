#pragma once

#include <cstdint>
#include <vector>

namespace exitlab {

// All math runs in 64-bit floating point. Deterministic accumulation order
// (plain left-to-right loops), so identical inputs give bitwise-identical
// outputs across runs.

using Vector = std::vector<double>;

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;  // row-major

    Matrix() = default;
    Matrix(int r, int c);  // zero-filled
    Matrix(int r, int c, std::vector<double> vals);

    double at(int r, int c) const { return values[static_cast<size_t>(r) * cols + c]; }
    double& at(int r, int c) { return values[static_cast<size_t>(r) * cols + c]; }
};

// y = W x, exact dense product. Throws on dimension mismatch.
Vector matvec(const Matrix& w, const Vector& x);

// Applies W to every vector of a flattened batch. Same math as per-vector
// matvec, loop order fixed.
std::vector<Vector> matvec_batch(const Matrix& w, const std::vector<Vector>& xs);

// Numerically stable softmax (max subtraction). Throws on empty or
// non-finite input.
Vector softmax(const Vector& v);

// u.v / (|u| |v|). Throws on length mismatch or zero-norm input.
double cosine_similarity(const Vector& u, const Vector& v);

// ---------------------------------------------------------------------------
// Portable PRNG: SplitMix64. Counter form `splitmix64_at(seed, i)` depends
// only on (seed, i), so every seeded tensor is byte-reproducible across
// platforms. See README for the exact constants.
// ---------------------------------------------------------------------------

uint64_t splitmix64_at(uint64_t seed, uint64_t index);

// uniform in [0, 1), 53-bit mantissa
double uniform01_at(uint64_t seed, uint64_t index);

// Sequential stream over the same generator; next() equals
// splitmix64_at(seed, n) on the n-th call (0-based).
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}
    uint64_t next();
    double next_double();  // [0, 1)
private:
    uint64_t state_;
};

// Entries uniform in (-s, s) with s = 1/sqrt(fan_in); fan_in = cols for
// matrices, len for vectors. Throws on non-positive dimension.
Matrix seeded_matrix(int rows, int cols, uint64_t seed);
Vector seeded_vector(int len, uint64_t seed);

}  // namespace exitlab
