#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "ltwin/error.hpp"

namespace ltwin {

// Dense row-major f32 tensor. Storage is always f32; every kernel accumulates
// in f64 and rounds once on store, so results are bit-reproducible for a
// given binary regardless of threading.
struct TensorF32 {
    std::vector<int64_t> shape;
    std::vector<float> data;

    TensorF32() = default;
    explicit TensorF32(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0f) {}
    TensorF32(std::vector<int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(numel_of(shape)))
            fail(ErrorKind::dimension, "tensor data length does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t> & s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e < 0) fail(ErrorKind::dimension, "negative tensor extent");
            n *= e;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t rows() const { return shape.size() == 2 ? shape[0] : 0; }
    int64_t cols() const { return shape.size() == 2 ? shape[1] : 0; }

    float & at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    float at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    bool all_finite() const;
};

// Eigenvalues of a Gram matrix, sorted ascending, >= 0.
struct EigenSpectrum {
    std::vector<double> values;

    size_t size() const { return values.size(); }
};

// C = A * B with f64 accumulation. Shapes [m x k] * [k x n] -> [m x n].
TensorF32 matmul(const TensorF32 & a, const TensorF32 & b);

// Raw kernel used by the model; c must hold m*n floats.
void matmul_f32(const float * a, const float * b, float * c, int64_t m, int64_t k, int64_t n);

// C = A * B^T with B row-major [n x k]; the layout every linear layer uses
// (weights are stored [out x in]). Lane-split f64 accumulators, fixed
// reduction order.
void matmul_bt_f32(const float * a, const float * b, float * c, int64_t m, int64_t k, int64_t n);

// C = A^T * B with A [rows x m], B [rows x n]: the weight-gradient shape.
// Row-streamed rank-1 updates into an f64 accumulator, rounded once.
void matmul_at_b_f32(const float * a, const float * b, float * c, int64_t rows, int64_t m, int64_t n);

// A * B^T like matmul_bt_f32 but keeps the f64 accumulation in the output
// (attention scores stay 64-bit through the softmax).
void matmul_bt_f64out(const float * a, const float * b, double * c, int64_t m, int64_t k, int64_t n);

TensorF32 transpose(const TensorF32 & a);

// Eigenvalues of W^T W (the squared singular values of W), ascending,
// computed with a cyclic Jacobi solver on the min(m,n)-sided Gram matrix.
// Negative round-off values are clamped to 0.
EigenSpectrum gram_eigenvalues(const TensorF32 & w);

// Relative threshold below which eigenvalues count as zero downstream.
inline constexpr double kSpectrumZeroRel = 1e-12;

// Lower-triangular L with L L^T = h. h must be symmetric (1e-6 rel) and
// positive definite; a non-positive pivot raises not_positive_definite so the
// caller can damp and retry.
TensorF32 cholesky_lower(const TensorF32 & h);

// H^-1 through the Cholesky factor. Same preconditions as cholesky_lower.
TensorF32 inverse_via_cholesky(const TensorF32 & h);

} // namespace ltwin
