#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>

// Row-major kernels shared by the transformer and LSTM paths. Backward
// routines accumulate (+=) into their outputs; null outputs are skipped.
namespace leverlm::nn {

// Four interleaved partial sums; the fixed combination order keeps the
// result deterministic.
inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// y[L x out] = x[L x in] * W^T + b, with W stored out x in.
inline void linear_forward(const double* x, std::size_t rows, std::size_t in, const double* w, const double* b,
                           std::size_t out, double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * in;
        double* yr = y + r * out;
        for (std::size_t o = 0; o < out; ++o) {
            const double bias = b != nullptr ? b[o] : 0.0;
            yr[o] = bias + dot(w + o * in, xr, in);
        }
    }
}

inline void linear_backward(const double* x, const double* dy, std::size_t rows, std::size_t in, std::size_t out,
                            const double* w, double* dx, double* dw, double* db) {
    // Output-major so each weight row stays in cache across rows. For any
    // fixed element the additions still run in ascending r (dw, db) or
    // ascending o (dx), so results match the row-major loop bit for bit.
    for (std::size_t o = 0; o < out; ++o) {
        const double* wo = w + o * in;
        double* dwo = dw != nullptr ? dw + o * in : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
            const double g = dy[r * out + o];
            if (g == 0.0) continue;
            const double* xr = x + r * in;
            if (db != nullptr) db[o] += g;
            if (dwo != nullptr) {
                for (std::size_t i = 0; i < in; ++i) dwo[i] += g * xr[i];
            }
            if (dx != nullptr) {
                double* dxr = dx + r * in;
                for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wo[i];
            }
        }
    }
}

inline constexpr double kLayerNormEps = 1e-5;

// y = gain * xhat + bias per row; xhat and rstd cached for backward.
inline void layer_norm_forward(const double* x, std::size_t rows, std::size_t d, const double* gain,
                               const double* bias, double* xhat, double* rstd, double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = xr[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = gain[i] * h + bias[i];
        }
    }
}

inline void layer_norm_backward(const double* dy, const double* xhat, const double* rstd, std::size_t rows,
                                std::size_t d, const double* gain, double* dx, double* dgain, double* dbias) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* dyr = dy + r * d;
        const double* hr = xhat + r * d;
        double mean_dh = 0.0;
        double mean_dh_h = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double dh = dyr[i] * gain[i];
            mean_dh += dh;
            mean_dh_h += dh * hr[i];
            if (dgain != nullptr) dgain[i] += dyr[i] * hr[i];
            if (dbias != nullptr) dbias[i] += dyr[i];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double dh = dyr[i] * gain[i];
            dx[r * d + i] += rstd[r] * (dh - mean_dh - hr[i] * mean_dh_h);
        }
    }
}

// Exact (erf) GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace leverlm::nn
