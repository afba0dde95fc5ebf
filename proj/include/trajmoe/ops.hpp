#pragma once

#include <cstdint>
#include <vector>

#include "trajmoe/tape.hpp"
#include "trajmoe/types.hpp"

namespace trajmoe {

// ---------------------------------------------------------------------------
// Tape-free kernels. The differentiable ops below reuse these for their
// forward passes, so there is a single definition of each computation.
// ---------------------------------------------------------------------------

// Shape-checked matrix product.
Matrix matmul(const Matrix& a, const Matrix& b);

// Stabilized softmax along `axis` (0 = down columns, 1 = across rows).
Matrix softmax(const Matrix& x, int axis);

// Exact GELU, x * Phi(x) with Phi the standard normal CDF via erf.
Matrix gelu(const Matrix& x);

constexpr double kLayerNormEps = 1e-5;

// Normalization over the last dimension (each row), then affine with
// gain/bias given as 1 x n rows.
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias,
                  double eps = kLayerNormEps);

// ---------------------------------------------------------------------------
// Differentiable ops. Each returns a new tape node; gradients flow to any
// argument that requires them.
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T without materializing the transpose
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_rowvec(Var a, Var row);              // broadcast a 1 x n row over all rows of a
Var row_scale(Var a, Var col);               // scale row i of a by col(i, 0)
Var col_slice(Var a, Index j0, Index width);
Var concat_cols(Var a, Var b);
Var softmax_rows(Var x);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias);
Var rows_lookup(Var table, std::vector<int> ids);
Var sum_all(Var x);

// x * w + b with b broadcast over rows.
inline Var affine(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

// Which positions of a padded batch hold real tokens. Rows are laid out
// trajectory-major: position (b, t) is row b * seq + t.
struct BatchMask {
    int batch = 0;
    int seq = 0;
    std::vector<std::uint8_t> real;

    bool is_real(int b, int t) const { return real[static_cast<std::size_t>(b) * seq + t] != 0; }
};

// Multi-head scaled dot-product attention over per-trajectory blocks.
// Entry (i, j) participates iff j <= i and position j is real; rows with no
// allowed key produce a zero context. q/k/v are (batch*seq) x d.
Var masked_attention_core(Var q, Var k, Var v, int heads, const BatchMask& mask);

// Mean negative log-likelihood of `targets` under row-wise softmax of
// `logits`, averaged over rows with valid[row] != 0.
Var ce_loss_masked(Var logits, const std::vector<int>& targets,
                   const std::vector<std::uint8_t>& valid);

}  // namespace trajmoe
