#pragma once

// Independent reference implementations the tests check the library
// against. Everything here is deliberately written as the slowest, most
// obvious version of each computation and shares no code with src/.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "trajmoe/rng.hpp"
#include "trajmoe/tape.hpp"

namespace oracle {

using trajmoe::Index;
using trajmoe::Matrix;

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out = Matrix::Zero(a.rows(), b.cols());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < b.cols(); ++j)
            for (Index k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
    return out;
}

// exp-normalize at long-double precision.
inline std::vector<double> softmax_vector(const std::vector<double>& x) {
    long double sum = 0.0L;
    std::vector<long double> e(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(x[i]));
        sum += e[i];
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
    return out;
}

// Taylor series for erf, enough terms for full long-double accuracy at
// moderate |x|.
inline long double erf_series(long double x) {
    const long double two_over_sqrt_pi = 1.1283791670955125738961589031215L;
    long double term = x;
    long double sum = x;
    for (int n = 1; n < 120; ++n) {
        term *= -x * x / n;
        sum += term / (2 * n + 1);
    }
    return two_over_sqrt_pi * sum;
}

inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + static_cast<double>(erf_series(x / std::sqrt(2.0L))));
}

// Two-pass mean/variance normalization of one row.
inline std::vector<double> layer_norm_row(const std::vector<double>& x,
                                          const std::vector<double>& gain,
                                          const std::vector<double>& bias, double eps = 1e-5) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= x.size();
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= x.size();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = (x[i] - mean) / std::sqrt(var + eps) * gain[i] + bias[i];
    return out;
}

// Mean negative log-likelihood via explicit log-softmax.
inline double ce_loss(const Matrix& logits, const std::vector<int>& targets,
                      const std::vector<std::uint8_t>& valid) {
    long double total = 0.0L;
    long count = 0;
    for (Index i = 0; i < logits.rows(); ++i) {
        if (!valid[i]) continue;
        long double sum = 0.0L;
        for (Index j = 0; j < logits.cols(); ++j)
            sum += std::exp(static_cast<long double>(logits(i, j)));
        total += std::log(sum) - static_cast<long double>(logits(i, targets[i]));
        ++count;
    }
    return static_cast<double>(total / count);
}

inline Matrix random_matrix(Index rows, Index cols, trajmoe::Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

struct FdResult {
    double max_rel_err = 0.0;
    std::string worst_param;
};

// Central finite differences (step h) over every element of every
// parameter, compared against gradients left in Param::grad by `backward`.
// `loss_value` must recompute the loss from the current parameter values.
inline FdResult fd_check(trajmoe::ParamStore& params, const std::function<double()>& loss_value,
                         const std::function<void()>& backward, double h = 1e-5) {
    params.zero_grads();
    backward();
    FdResult res;
    for (auto& p : params) {
        for (Index i = 0; i < p->value.size(); ++i) {
            const double keep = p->value.data()[i];
            p->value.data()[i] = keep + h;
            const double up = loss_value();
            p->value.data()[i] = keep - h;
            const double down = loss_value();
            p->value.data()[i] = keep;
            const double fd = (up - down) / (2.0 * h);
            const double an = p->grad.data()[i];
            const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst_param = p->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace oracle
