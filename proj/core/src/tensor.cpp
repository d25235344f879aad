#include "ltwin/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#ifdef __AVX512F__
#include <immintrin.h>
#endif

namespace ltwin {

bool TensorF32::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace {

// 4x16 microtile: 8 zmm accumulators on AVX-512, 16 ymm halves on AVX2.
// B is streamed row-wise so the inner loop is a pure broadcast-FMA chain.
constexpr int64_t kMr = 4;
constexpr int64_t kNr = 16;

inline void microtile(const float * a, const float * b, float * c, int64_t k, int64_t n, int64_t i0, int64_t j0,
                      int64_t mr, int64_t nr) {
    double acc[kMr][kNr];
    for (int64_t r = 0; r < mr; ++r)
        for (int64_t q = 0; q < nr; ++q) acc[r][q] = 0.0;

    for (int64_t kk = 0; kk < k; ++kk) {
        double bv[kNr];
        const float * brow = b + kk * n + j0;
        for (int64_t q = 0; q < nr; ++q) bv[q] = static_cast<double>(brow[q]);
        for (int64_t r = 0; r < mr; ++r) {
            const double av = static_cast<double>(a[(i0 + r) * k + kk]);
            for (int64_t q = 0; q < nr; ++q) acc[r][q] += av * bv[q];
        }
    }
    for (int64_t r = 0; r < mr; ++r) {
        float * crow = c + (i0 + r) * n + j0;
        for (int64_t q = 0; q < nr; ++q) crow[q] = static_cast<float>(acc[r][q]);
    }
}

// Full-width tile with mr == kMr and nr == kNr so the compiler sees constant
// trip counts and vectorizes the q-loops.
inline void microtile_full(const float * a, const float * b, float * c, int64_t k, int64_t n,
                           int64_t i0, int64_t j0) {
    double acc[kMr][kNr] = {};
    for (int64_t kk = 0; kk < k; ++kk) {
        double bv[kNr];
        const float * brow = b + kk * n + j0;
        for (int64_t q = 0; q < kNr; ++q) bv[q] = static_cast<double>(brow[q]);
        for (int64_t r = 0; r < kMr; ++r) {
            const double av = static_cast<double>(a[(i0 + r) * k + kk]);
            for (int64_t q = 0; q < kNr; ++q) acc[r][q] += av * bv[q];
        }
    }
    for (int64_t r = 0; r < kMr; ++r) {
        float * crow = c + (i0 + r) * n + j0;
        for (int64_t q = 0; q < kNr; ++q) crow[q] = static_cast<float>(acc[r][q]);
    }
}

#ifdef __AVX512F__

// 4x16 tile, 8 zmm f64 accumulators. ap points at 4 pre-converted f64 rows of
// A (stride k) so the inner loop is pure broadcast-load + FMA.
inline void mm_tile_avx512(const double * ap, const float * b, float * c, int64_t k, int64_t n, int64_t i0,
                           int64_t j0) {
    __m512d c00 = _mm512_setzero_pd(), c01 = _mm512_setzero_pd();
    __m512d c10 = _mm512_setzero_pd(), c11 = _mm512_setzero_pd();
    __m512d c20 = _mm512_setzero_pd(), c21 = _mm512_setzero_pd();
    __m512d c30 = _mm512_setzero_pd(), c31 = _mm512_setzero_pd();
    const double * a0 = ap;
    const double * a1 = ap + k;
    const double * a2 = ap + 2 * k;
    const double * a3 = ap + 3 * k;
    for (int64_t kk = 0; kk < k; ++kk) {
        const float * brow = b + kk * n + j0;
        const __m512d b0 = _mm512_cvtps_pd(_mm256_loadu_ps(brow));
        const __m512d b1 = _mm512_cvtps_pd(_mm256_loadu_ps(brow + 8));
        __m512d av;
        av = _mm512_set1_pd(a0[kk]);
        c00 = _mm512_fmadd_pd(av, b0, c00);
        c01 = _mm512_fmadd_pd(av, b1, c01);
        av = _mm512_set1_pd(a1[kk]);
        c10 = _mm512_fmadd_pd(av, b0, c10);
        c11 = _mm512_fmadd_pd(av, b1, c11);
        av = _mm512_set1_pd(a2[kk]);
        c20 = _mm512_fmadd_pd(av, b0, c20);
        c21 = _mm512_fmadd_pd(av, b1, c21);
        av = _mm512_set1_pd(a3[kk]);
        c30 = _mm512_fmadd_pd(av, b0, c30);
        c31 = _mm512_fmadd_pd(av, b1, c31);
    }
    _mm256_storeu_ps(c + (i0 + 0) * n + j0, _mm512_cvtpd_ps(c00));
    _mm256_storeu_ps(c + (i0 + 0) * n + j0 + 8, _mm512_cvtpd_ps(c01));
    _mm256_storeu_ps(c + (i0 + 1) * n + j0, _mm512_cvtpd_ps(c10));
    _mm256_storeu_ps(c + (i0 + 1) * n + j0 + 8, _mm512_cvtpd_ps(c11));
    _mm256_storeu_ps(c + (i0 + 2) * n + j0, _mm512_cvtpd_ps(c20));
    _mm256_storeu_ps(c + (i0 + 2) * n + j0 + 8, _mm512_cvtpd_ps(c21));
    _mm256_storeu_ps(c + (i0 + 3) * n + j0, _mm512_cvtpd_ps(c30));
    _mm256_storeu_ps(c + (i0 + 3) * n + j0 + 8, _mm512_cvtpd_ps(c31));
}

#endif // __AVX512F__

} // namespace

void matmul_f32(const float * a, const float * b, float * c, int64_t m, int64_t k, int64_t n) {
    const int64_t m_main = m - m % kMr;
    const int64_t n_main = n - n % kNr;

#pragma omp parallel
    {
#ifdef __AVX512F__
        std::vector<double> apanel(static_cast<size_t>(kMr * k));
#endif
#pragma omp for schedule(static)
        for (int64_t i0 = 0; i0 < m_main; i0 += kMr) {
#ifdef __AVX512F__
            for (int64_t r = 0; r < kMr; ++r)
                for (int64_t kk = 0; kk < k; ++kk)
                    apanel[static_cast<size_t>(r * k + kk)] = static_cast<double>(a[(i0 + r) * k + kk]);
            for (int64_t j0 = 0; j0 < n_main; j0 += kNr) mm_tile_avx512(apanel.data(), b, c, k, n, i0, j0);
#else
            for (int64_t j0 = 0; j0 < n_main; j0 += kNr) microtile_full(a, b, c, k, n, i0, j0);
#endif
            if (n_main < n) microtile(a, b, c, k, n, i0, n_main, kMr, n - n_main);
        }
    }
    if (m_main < m) {
        for (int64_t j0 = 0; j0 < n_main; j0 += kNr) microtile(a, b, c, k, n, m_main, j0, m - m_main, kNr);
        if (n_main < n) microtile(a, b, c, k, n, m_main, n_main, m - m_main, n - n_main);
    }
}

namespace {

// 4x4 output tile, 8 f64 lanes per accumulator; lanes are folded in a fixed
// order after the k loop so results do not depend on threading.
template <int MR, int NR, typename OutT>
inline void bt_tile(const float * a, const float * b, OutT * c, int64_t k, int64_t n, int64_t i0, int64_t j0) {
    double lanes[MR][NR][8] = {};
    const int64_t k8 = k - k % 8;
    for (int64_t kk = 0; kk < k8; kk += 8) {
        double av[MR][8];
        for (int r = 0; r < MR; ++r) {
            const float * arow = a + (i0 + r) * k + kk;
            for (int l = 0; l < 8; ++l) av[r][l] = static_cast<double>(arow[l]);
        }
        for (int q = 0; q < NR; ++q) {
            const float * brow = b + (j0 + q) * k + kk;
            double bv[8];
            for (int l = 0; l < 8; ++l) bv[l] = static_cast<double>(brow[l]);
            for (int r = 0; r < MR; ++r)
                for (int l = 0; l < 8; ++l) lanes[r][q][l] += av[r][l] * bv[l];
        }
    }
    for (int64_t kk = k8; kk < k; ++kk)
        for (int r = 0; r < MR; ++r)
            for (int q = 0; q < NR; ++q)
                lanes[r][q][0] += static_cast<double>(a[(i0 + r) * k + kk]) * static_cast<double>(b[(j0 + q) * k + kk]);

    for (int r = 0; r < MR; ++r)
        for (int q = 0; q < NR; ++q) {
            double s = 0.0;
            for (int l = 0; l < 8; ++l) s += lanes[r][q][l];
            c[(i0 + r) * n + (j0 + q)] = static_cast<OutT>(s);
        }
}

#ifdef __AVX512F__

// 4x4 dot-product tile: 16 zmm lane accumulators reduced once after the k
// loop; the scalar tail goes through a separate f64 cell added before the
// reduction result is stored.
template <typename OutT>
inline void bt_tile4_avx512(const float * a, const float * b, OutT * c, int64_t k, int64_t n, int64_t i0,
                            int64_t j0) {
    __m512d s00 = _mm512_setzero_pd(), s01 = _mm512_setzero_pd(), s02 = _mm512_setzero_pd(),
            s03 = _mm512_setzero_pd();
    __m512d s10 = _mm512_setzero_pd(), s11 = _mm512_setzero_pd(), s12 = _mm512_setzero_pd(),
            s13 = _mm512_setzero_pd();
    __m512d s20 = _mm512_setzero_pd(), s21 = _mm512_setzero_pd(), s22 = _mm512_setzero_pd(),
            s23 = _mm512_setzero_pd();
    __m512d s30 = _mm512_setzero_pd(), s31 = _mm512_setzero_pd(), s32 = _mm512_setzero_pd(),
            s33 = _mm512_setzero_pd();
    const float * a0 = a + (i0 + 0) * k;
    const float * a1 = a + (i0 + 1) * k;
    const float * a2 = a + (i0 + 2) * k;
    const float * a3 = a + (i0 + 3) * k;
    const float * b0 = b + (j0 + 0) * k;
    const float * b1 = b + (j0 + 1) * k;
    const float * b2 = b + (j0 + 2) * k;
    const float * b3 = b + (j0 + 3) * k;
    const int64_t k8 = k - k % 8;
    for (int64_t kk = 0; kk < k8; kk += 8) {
        const __m512d va0 = _mm512_cvtps_pd(_mm256_loadu_ps(a0 + kk));
        const __m512d va1 = _mm512_cvtps_pd(_mm256_loadu_ps(a1 + kk));
        const __m512d va2 = _mm512_cvtps_pd(_mm256_loadu_ps(a2 + kk));
        const __m512d va3 = _mm512_cvtps_pd(_mm256_loadu_ps(a3 + kk));
        __m512d vb;
        vb = _mm512_cvtps_pd(_mm256_loadu_ps(b0 + kk));
        s00 = _mm512_fmadd_pd(va0, vb, s00);
        s10 = _mm512_fmadd_pd(va1, vb, s10);
        s20 = _mm512_fmadd_pd(va2, vb, s20);
        s30 = _mm512_fmadd_pd(va3, vb, s30);
        vb = _mm512_cvtps_pd(_mm256_loadu_ps(b1 + kk));
        s01 = _mm512_fmadd_pd(va0, vb, s01);
        s11 = _mm512_fmadd_pd(va1, vb, s11);
        s21 = _mm512_fmadd_pd(va2, vb, s21);
        s31 = _mm512_fmadd_pd(va3, vb, s31);
        vb = _mm512_cvtps_pd(_mm256_loadu_ps(b2 + kk));
        s02 = _mm512_fmadd_pd(va0, vb, s02);
        s12 = _mm512_fmadd_pd(va1, vb, s12);
        s22 = _mm512_fmadd_pd(va2, vb, s22);
        s32 = _mm512_fmadd_pd(va3, vb, s32);
        vb = _mm512_cvtps_pd(_mm256_loadu_ps(b3 + kk));
        s03 = _mm512_fmadd_pd(va0, vb, s03);
        s13 = _mm512_fmadd_pd(va1, vb, s13);
        s23 = _mm512_fmadd_pd(va2, vb, s23);
        s33 = _mm512_fmadd_pd(va3, vb, s33);
    }
    double tail[4][4] = {};
    for (int64_t kk = k8; kk < k; ++kk) {
        const double av[4] = {static_cast<double>(a0[kk]), static_cast<double>(a1[kk]),
                              static_cast<double>(a2[kk]), static_cast<double>(a3[kk])};
        const double bv[4] = {static_cast<double>(b0[kk]), static_cast<double>(b1[kk]),
                              static_cast<double>(b2[kk]), static_cast<double>(b3[kk])};
        for (int r = 0; r < 4; ++r)
            for (int q = 0; q < 4; ++q) tail[r][q] += av[r] * bv[q];
    }
    OutT * c0 = c + (i0 + 0) * n + j0;
    OutT * c1 = c + (i0 + 1) * n + j0;
    OutT * c2 = c + (i0 + 2) * n + j0;
    OutT * c3 = c + (i0 + 3) * n + j0;
    c0[0] = static_cast<OutT>(_mm512_reduce_add_pd(s00) + tail[0][0]);
    c0[1] = static_cast<OutT>(_mm512_reduce_add_pd(s01) + tail[0][1]);
    c0[2] = static_cast<OutT>(_mm512_reduce_add_pd(s02) + tail[0][2]);
    c0[3] = static_cast<OutT>(_mm512_reduce_add_pd(s03) + tail[0][3]);
    c1[0] = static_cast<OutT>(_mm512_reduce_add_pd(s10) + tail[1][0]);
    c1[1] = static_cast<OutT>(_mm512_reduce_add_pd(s11) + tail[1][1]);
    c1[2] = static_cast<OutT>(_mm512_reduce_add_pd(s12) + tail[1][2]);
    c1[3] = static_cast<OutT>(_mm512_reduce_add_pd(s13) + tail[1][3]);
    c2[0] = static_cast<OutT>(_mm512_reduce_add_pd(s20) + tail[2][0]);
    c2[1] = static_cast<OutT>(_mm512_reduce_add_pd(s21) + tail[2][1]);
    c2[2] = static_cast<OutT>(_mm512_reduce_add_pd(s22) + tail[2][2]);
    c2[3] = static_cast<OutT>(_mm512_reduce_add_pd(s23) + tail[2][3]);
    c3[0] = static_cast<OutT>(_mm512_reduce_add_pd(s30) + tail[3][0]);
    c3[1] = static_cast<OutT>(_mm512_reduce_add_pd(s31) + tail[3][1]);
    c3[2] = static_cast<OutT>(_mm512_reduce_add_pd(s32) + tail[3][2]);
    c3[3] = static_cast<OutT>(_mm512_reduce_add_pd(s33) + tail[3][3]);
}

#endif // __AVX512F__

template <int MR, typename OutT>
inline void bt_row_band(const float * a, const float * b, OutT * c, int64_t k, int64_t n, int64_t i0) {
    const int64_t n4 = n - n % 4;
    for (int64_t j0 = 0; j0 < n4; j0 += 4) {
#ifdef __AVX512F__
        if constexpr (MR == 4) {
            bt_tile4_avx512(a, b, c, k, n, i0, j0);
            continue;
        }
#endif
        bt_tile<MR, 4>(a, b, c, k, n, i0, j0);
    }
    for (int64_t j0 = n4; j0 < n; ++j0) bt_tile<MR, 1>(a, b, c, k, n, i0, j0);
}

} // namespace

void matmul_bt_f32(const float * a, const float * b, float * c, int64_t m, int64_t k, int64_t n) {
    const int64_t m4 = m - m % 4;
#pragma omp parallel for schedule(static)
    for (int64_t i0 = 0; i0 < m4; i0 += 4) bt_row_band<4>(a, b, c, k, n, i0);
    for (int64_t i0 = m4; i0 < m; ++i0) bt_row_band<1>(a, b, c, k, n, i0);
}

void matmul_bt_f64out(const float * a, const float * b, double * c, int64_t m, int64_t k, int64_t n) {
    const int64_t m4 = m - m % 4;
#pragma omp parallel for schedule(static)
    for (int64_t i0 = 0; i0 < m4; i0 += 4) bt_row_band<4>(a, b, c, k, n, i0);
    for (int64_t i0 = m4; i0 < m; ++i0) bt_row_band<1>(a, b, c, k, n, i0);
}

void matmul_at_b_f32(const float * a, const float * b, float * c, int64_t rows, int64_t m, int64_t n) {
    // Output strips sized to stay L1-resident across the row stream.
    int64_t strip = 24576 / (n * 8);
    strip = std::clamp<int64_t>(strip, 4, m);

#pragma omp parallel
    {
        std::vector<double> acc(static_cast<size_t>(strip * n));
#pragma omp for schedule(static)
        for (int64_t i0 = 0; i0 < m; i0 += strip) {
            const int64_t is = std::min(strip, m - i0);
            std::fill(acc.begin(), acc.begin() + static_cast<size_t>(is * n), 0.0);
            for (int64_t r = 0; r < rows; ++r) {
                const float * ar = a + r * m + i0;
                const float * br = b + r * n;
                for (int64_t i = 0; i < is; ++i) {
                    const double av = static_cast<double>(ar[i]);
                    if (av == 0.0) continue;
                    double * crow = acc.data() + i * n;
#ifdef __AVX512F__
                    const __m512d vav = _mm512_set1_pd(av);
                    const int64_t n8 = n - n % 8;
                    for (int64_t j = 0; j < n8; j += 8) {
                        const __m512d vb = _mm512_cvtps_pd(_mm256_loadu_ps(br + j));
                        _mm512_storeu_pd(crow + j, _mm512_fmadd_pd(vav, vb, _mm512_loadu_pd(crow + j)));
                    }
                    for (int64_t j = n8; j < n; ++j) crow[j] += av * static_cast<double>(br[j]);
#else
                    for (int64_t j = 0; j < n; ++j) crow[j] += av * static_cast<double>(br[j]);
#endif
                }
            }
            for (int64_t i = 0; i < is; ++i)
                for (int64_t j = 0; j < n; ++j)
                    c[(i0 + i) * n + j] = static_cast<float>(acc[static_cast<size_t>(i * n + j)]);
        }
    }
}

TensorF32 matmul(const TensorF32 & a, const TensorF32 & b) {
    if (a.rank() != 2 || b.rank() != 2) fail(ErrorKind::dimension, "matmul expects rank-2 tensors");
    if (a.shape[1] != b.shape[0])
        fail(ErrorKind::dimension, "matmul inner extents differ: " + std::to_string(a.shape[1]) + " vs " +
                                       std::to_string(b.shape[0]));
    TensorF32 c({a.shape[0], b.shape[1]});
    if (c.numel() == 0) return c;
    if (a.shape[1] == 0) return c; // empty contraction -> zeros
    matmul_f32(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1], b.shape[1]);
    return c;
}

TensorF32 transpose(const TensorF32 & a) {
    if (a.rank() != 2) fail(ErrorKind::dimension, "transpose expects a rank-2 tensor");
    TensorF32 t({a.shape[1], a.shape[0]});
    for (int64_t i = 0; i < a.shape[0]; ++i)
        for (int64_t j = 0; j < a.shape[1]; ++j) t.data[j * a.shape[0] + i] = a.data[i * a.shape[1] + j];
    return t;
}

namespace {

// Cyclic Jacobi on a symmetric matrix held in f64. Off-diagonal Frobenius
// threshold 1e-10 * ||A||_F, at most 100 sweeps.
void jacobi_eigenvalues(std::vector<double> & a, int64_t n, std::vector<double> & eig) {
    double fro = 0.0;
    for (int64_t i = 0; i < n * n; ++i) fro += a[i] * a[i];
    fro = std::sqrt(fro);
    const double stop = 1e-10 * fro;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += 2.0 * a[p * n + q] * a[p * n + q];
        if (std::sqrt(off) <= stop) break;

        for (int64_t p = 0; p < n - 1; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) continue;
                const double app = a[p * n + p];
                const double aqq = a[q * n + q];
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = t * cs;

                for (int64_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p];
                    const double aiq = a[i * n + q];
                    a[i * n + p] = cs * aip - sn * aiq;
                    a[i * n + q] = sn * aip + cs * aiq;
                }
                for (int64_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i];
                    const double aqi = a[q * n + i];
                    a[p * n + i] = cs * api - sn * aqi;
                    a[q * n + i] = sn * api + cs * aqi;
                }
            }
        }
    }

    eig.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = a[i * n + i];
    std::sort(eig.begin(), eig.end());
}

} // namespace

EigenSpectrum gram_eigenvalues(const TensorF32 & w) {
    if (w.rank() != 2) fail(ErrorKind::dimension, "gram_eigenvalues expects a rank-2 tensor");
    const int64_t m = w.shape[0];
    const int64_t n = w.shape[1];
    if (m < 1 || n < 1) fail(ErrorKind::dimension, "gram_eigenvalues expects m,n >= 1");
    if (!w.all_finite()) fail(ErrorKind::numeric, "gram_eigenvalues: non-finite input");

    // Gram on the smaller side; eigenvalues equal the squared singular values either way.
    const bool rows_small = m <= n;
    const int64_t g = rows_small ? m : n;
    std::vector<double> gram(static_cast<size_t>(g * g), 0.0);
    const float * wd = w.data.data();
    if (rows_small) {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = i; j < m; ++j) {
                double s = 0.0;
                for (int64_t t = 0; t < n; ++t)
                    s += static_cast<double>(wd[i * n + t]) * static_cast<double>(wd[j * n + t]);
                gram[i * g + j] = s;
                gram[j * g + i] = s;
            }
    } else {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i; j < n; ++j) {
                double s = 0.0;
                for (int64_t t = 0; t < m; ++t)
                    s += static_cast<double>(wd[t * n + i]) * static_cast<double>(wd[t * n + j]);
                gram[i * g + j] = s;
                gram[j * g + i] = s;
            }
    }

    EigenSpectrum spec;
    jacobi_eigenvalues(gram, g, spec.values);
    for (double & v : spec.values)
        if (v < 0.0) v = 0.0;
    return spec;
}

namespace {

// Shared factorization core in f64; returns the lower factor of h.
std::vector<double> cholesky_f64(const TensorF32 & h, int64_t & n_out) {
    if (h.rank() != 2 || h.shape[0] != h.shape[1]) fail(ErrorKind::dimension, "cholesky expects a square matrix");
    const int64_t n = h.shape[0];
    n_out = n;
    if (n == 0) fail(ErrorKind::dimension, "cholesky of an empty matrix");
    if (!h.all_finite()) fail(ErrorKind::numeric, "cholesky: non-finite input");

    double amax = 0.0;
    for (float v : h.data) amax = std::max(amax, std::abs(static_cast<double>(v)));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            const double d = std::abs(static_cast<double>(h.at(i, j)) - static_cast<double>(h.at(j, i)));
            if (d > 1e-6 * std::max(amax, 1e-30))
                fail(ErrorKind::validation, "cholesky: matrix not symmetric within 1e-6 rel");
        }

    std::vector<double> l(static_cast<size_t>(n * n), 0.0);
    for (int64_t j = 0; j < n; ++j) {
        double d = static_cast<double>(h.at(j, j));
        for (int64_t t = 0; t < j; ++t) d -= l[j * n + t] * l[j * n + t];
        if (!(d > 0.0) || !std::isfinite(d))
            fail(ErrorKind::not_positive_definite,
                 "cholesky: non-positive pivot at column " + std::to_string(j));
        const double dj = std::sqrt(d);
        l[j * n + j] = dj;
        for (int64_t i = j + 1; i < n; ++i) {
            double s = static_cast<double>(h.at(i, j));
            for (int64_t t = 0; t < j; ++t) s -= l[i * n + t] * l[j * n + t];
            l[i * n + j] = s / dj;
        }
    }
    return l;
}

} // namespace

TensorF32 cholesky_lower(const TensorF32 & h) {
    int64_t n = 0;
    std::vector<double> l = cholesky_f64(h, n);
    TensorF32 out({n, n});
    for (int64_t i = 0; i < n * n; ++i) out.data[static_cast<size_t>(i)] = static_cast<float>(l[static_cast<size_t>(i)]);
    return out;
}

TensorF32 inverse_via_cholesky(const TensorF32 & h) {
    int64_t n = 0;
    std::vector<double> l = cholesky_f64(h, n);

    // Solve H x = e_j column by column: L y = e_j, then L^T x = y.
    TensorF32 inv({n, n});
    std::vector<double> y(static_cast<size_t>(n));
    std::vector<double> x(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        for (int64_t i = 0; i < n; ++i) {
            double s = (i == j) ? 1.0 : 0.0;
            for (int64_t t = 0; t < i; ++t) s -= l[i * n + t] * y[static_cast<size_t>(t)];
            y[static_cast<size_t>(i)] = s / l[i * n + i];
        }
        for (int64_t i = n - 1; i >= 0; --i) {
            double s = y[static_cast<size_t>(i)];
            for (int64_t t = i + 1; t < n; ++t) s -= l[t * n + i] * x[static_cast<size_t>(t)];
            x[static_cast<size_t>(i)] = s / l[i * n + i];
        }
        for (int64_t i = 0; i < n; ++i) inv.at(i, j) = static_cast<float>(x[static_cast<size_t>(i)]);
    }
    return inv;
}

} // namespace ltwin
