#include "trajmoe/ops.hpp"

#include <cmath>
#include <limits>

namespace trajmoe {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;

bool any_grad(std::initializer_list<Var> vars) {
    for (Var v : vars)
        if (v.tape->requires_grad(v)) return true;
    return false;
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_inner_dims(a, b, "matmul");
    return a * b;
}

Matrix softmax(const Matrix& x, int axis) {
    if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
    if ((axis == 1 && x.cols() == 0) || (axis == 0 && x.rows() == 0))
        throw std::invalid_argument("softmax: empty axis");
    if (axis == 0) return softmax(Matrix(x.transpose()), 1).transpose();
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        RowArray e = (x.row(i).array() - m).exp();
        out.row(i) = (e / e.sum()).matrix();
    }
    return out;
}

Matrix gelu(const Matrix& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps) {
    if (x.cols() == 0) throw std::invalid_argument("layer_norm: last dimension has size 0");
    if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols())
        throw std::invalid_argument("layer_norm: gain/bias must be 1x" +
                                    std::to_string(x.cols()) + ", got " + shape_str(gain) +
                                    " and " + shape_str(bias));
    Matrix out(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().sum() / n;
        const double inv = 1.0 / std::sqrt(var + eps);
        out.row(i) =
            (((x.row(i).array() - mu) * inv) * gain.row(0).array() + bias.row(0).array()).matrix();
    }
    return out;
}

Var matmul(Var a, Var b) {
    check_inner_dims(a.value(), b.value(), "matmul");
    Matrix out = a.value() * b.value();
    return a.tape->make(std::move(out), any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
        if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
    });
}

Var matmul_nt(Var a, Var b) {
    if (a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: inner dimensions disagree, " +
                                    shape_str(a.value()) + " * " + shape_str(b.value()) + "^T");
    Matrix out = a.value() * b.value().transpose();
    return a.tape->make(std::move(out), any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g * b.value());
        if (t.requires_grad(b)) t.accumulate(b, g.transpose() * a.value());
    });
}

Var add(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "add");
    Matrix out = a.value() + b.value();
    return a.tape->make(std::move(out), any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "sub");
    Matrix out = a.value() - b.value();
    return a.tape->make(std::move(out), any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(b)) t.accumulate(b, -g);
    });
}

Var mul(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "mul");
    Matrix out = a.value().cwiseProduct(b.value());
    return a.tape->make(std::move(out), any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
        if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
    });
}

Var scale(Var a, double s) {
    Matrix out = a.value() * s;
    return a.tape->make(std::move(out), a.tape->requires_grad(a),
                        [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var add_rowvec(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        throw std::invalid_argument("add_rowvec: expected 1x" + std::to_string(a.cols()) +
                                    ", got " + shape_str(row.value()));
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return a.tape->make(std::move(out), any_grad({a, row}), [a, row](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
    });
}

Var row_scale(Var a, Var col) {
    if (col.rows() != a.rows() || col.cols() != 1)
        throw std::invalid_argument("row_scale: expected " + std::to_string(a.rows()) +
                                    "x1, got " + shape_str(col.value()));
    Matrix out = a.value().array().colwise() * col.value().col(0).array();
    return a.tape->make(std::move(out), any_grad({a, col}), [a, col](Tape& t, const Matrix& g) {
        if (t.requires_grad(a))
            t.accumulate(a, (g.array().colwise() * col.value().col(0).array()).matrix());
        if (t.requires_grad(col))
            t.accumulate(col, g.cwiseProduct(a.value()).rowwise().sum());
    });
}

Var col_slice(Var a, Index j0, Index width) {
    if (j0 < 0 || width < 0 || j0 + width > a.cols())
        throw std::invalid_argument("col_slice: [" + std::to_string(j0) + ", " +
                                    std::to_string(j0 + width) + ") out of range for " +
                                    shape_str(a.value()));
    Matrix out = a.value().block(0, j0, a.rows(), width);
    return a.tape->make(std::move(out), a.tape->requires_grad(a),
                        [a, j0, width](Tape& t, const Matrix& g) {
                            Matrix da = Matrix::Zero(a.rows(), a.cols());
                            da.block(0, j0, a.rows(), width) = g;
                            t.accumulate(a, da);
                        });
}

Var concat_cols(Var a, Var b) {
    if (a.rows() != b.rows())
        throw std::invalid_argument("concat_cols: row counts differ, " + shape_str(a.value()) +
                                    " vs " + shape_str(b.value()));
    Matrix out(a.rows(), a.cols() + b.cols());
    out << a.value(), b.value();
    const Index ac = a.cols();
    return a.tape->make(std::move(out), any_grad({a, b}), [a, b, ac](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g.leftCols(ac));
        if (t.requires_grad(b)) t.accumulate(b, g.rightCols(g.cols() - ac));
    });
}

Var softmax_rows(Var x) {
    Matrix p = softmax(x.value(), 1);
    return x.tape->make(p, x.tape->requires_grad(x), [x, p](Tape& t, const Matrix& g) {
        Matrix dx(p.rows(), p.cols());
        for (Index i = 0; i < p.rows(); ++i) {
            const double dot = g.row(i).dot(p.row(i));
            dx.row(i) = (p.row(i).array() * (g.row(i).array() - dot)).matrix();
        }
        t.accumulate(x, dx);
    });
}

Var gelu(Var x) {
    Matrix out = gelu(x.value());
    return x.tape->make(std::move(out), x.tape->requires_grad(x), [x](Tape& t, const Matrix& g) {
        Matrix d = x.value().unaryExpr([](double v) {
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            return cdf + v * pdf;
        });
        t.accumulate(x, g.cwiseProduct(d));
    });
}

Var layer_norm(Var x, Var gain, Var bias) {
    Matrix out = layer_norm(x.value(), gain.value(), bias.value());
    return x.tape->make(
        std::move(out), any_grad({x, gain, bias}), [x, gain, bias](Tape& t, const Matrix& g) {
            const Matrix& xv = x.value();
            const Index n = xv.cols();
            Matrix dx(xv.rows(), n);
            Matrix dgain = Matrix::Zero(1, n);
            Matrix dbias = Matrix::Zero(1, n);
            for (Index i = 0; i < xv.rows(); ++i) {
                const double mu = xv.row(i).mean();
                const double var = (xv.row(i).array() - mu).square().sum() / double(n);
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                RowArray xhat = (xv.row(i).array() - mu) * inv;
                RowArray dy = g.row(i).array() * gain.value().row(0).array();
                const double m1 = dy.mean();
                const double m2 = (dy * xhat).mean();
                dx.row(i) = ((dy - m1 - xhat * m2) * inv).matrix();
                dgain.row(0).array() += g.row(i).array() * xhat;
                dbias.row(0) += g.row(i);
            }
            t.accumulate(x, dx);
            if (t.requires_grad(gain)) t.accumulate(gain, dgain);
            if (t.requires_grad(bias)) t.accumulate(bias, dbias);
        });
}

Var rows_lookup(Var table, std::vector<int> ids) {
    const Matrix& tab = table.value();
    Matrix out(static_cast<Index>(ids.size()), tab.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || ids[r] >= tab.rows())
            throw std::out_of_range("rows_lookup: id " + std::to_string(ids[r]) +
                                    " outside table with " + std::to_string(tab.rows()) + " rows");
        out.row(static_cast<Index>(r)) = tab.row(ids[r]);
    }
    return table.tape->make(std::move(out), table.tape->requires_grad(table),
                            [table, ids = std::move(ids)](Tape& t, const Matrix& g) {
                                Matrix dt = Matrix::Zero(table.rows(), table.cols());
                                for (std::size_t r = 0; r < ids.size(); ++r)
                                    dt.row(ids[r]) += g.row(static_cast<Index>(r));
                                t.accumulate(table, dt);
                            });
}

Var sum_all(Var x) {
    Matrix out(1, 1);
    out(0, 0) = x.value().sum();
    return x.tape->make(std::move(out), x.tape->requires_grad(x), [x](Tape& t, const Matrix& g) {
        t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
    });
}

Var masked_attention_core(Var q, Var k, Var v, int heads, const BatchMask& mask) {
    const Index m = q.rows();
    const Index d = q.cols();
    check_same_shape(q.value(), k.value(), "attention q/k");
    check_same_shape(q.value(), v.value(), "attention q/v");
    if (heads <= 0 || d % heads != 0)
        throw std::invalid_argument("attention: head count " + std::to_string(heads) +
                                    " must divide model dimension " + std::to_string(d));
    const int batch = mask.batch;
    const int seq = mask.seq;
    if (m != static_cast<Index>(batch) * seq)
        throw std::invalid_argument("attention: mask covers " + std::to_string(batch * seq) +
                                    " positions but input has " + std::to_string(m) + " rows");
    const Index hd = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix out(m, d);
    // Attention probabilities are kept for the backward pass; masked and
    // all-masked entries are exactly zero there.
    auto probs = std::make_shared<std::vector<Matrix>>();
    probs->reserve(static_cast<std::size_t>(batch) * heads);

    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const Index r0 = static_cast<Index>(b) * seq;
            const Index c0 = static_cast<Index>(h) * hd;
            Matrix s = q.value().block(r0, c0, seq, hd) *
                       k.value().block(r0, c0, seq, hd).transpose() * sc;
            Matrix p = Matrix::Zero(seq, seq);
            for (int i = 0; i < seq; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j)
                    if (mask.is_real(b, j)) mx = std::max(mx, s(i, j));
                if (!std::isfinite(mx)) continue;  // no allowed key: zero row
                double sum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    if (!mask.is_real(b, j)) continue;
                    p(i, j) = std::exp(s(i, j) - mx);
                    sum += p(i, j);
                }
                p.row(i) /= sum;
            }
            out.block(r0, c0, seq, hd) = p * v.value().block(r0, c0, seq, hd);
            probs->push_back(std::move(p));
        }
    }

    return q.tape->make(
        std::move(out), any_grad({q, k, v}),
        [q, k, v, heads, batch, seq, hd, sc, probs](Tape& t, const Matrix& g) {
            Matrix dq = Matrix::Zero(q.rows(), q.cols());
            Matrix dk = dq, dv = dq;
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const Index r0 = static_cast<Index>(b) * seq;
                    const Index c0 = static_cast<Index>(h) * hd;
                    const Matrix& p = (*probs)[static_cast<std::size_t>(b) * heads + h];
                    Matrix go = g.block(r0, c0, seq, hd);
                    dv.block(r0, c0, seq, hd) += p.transpose() * go;
                    Matrix dp = go * v.value().block(r0, c0, seq, hd).transpose();
                    Matrix ds(seq, seq);
                    for (int i = 0; i < seq; ++i) {
                        const double dot = dp.row(i).dot(p.row(i));
                        ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
                    }
                    dq.block(r0, c0, seq, hd) += ds * k.value().block(r0, c0, seq, hd) * sc;
                    dk.block(r0, c0, seq, hd) +=
                        ds.transpose() * q.value().block(r0, c0, seq, hd) * sc;
                }
            }
            if (t.requires_grad(q)) t.accumulate(q, dq);
            if (t.requires_grad(k)) t.accumulate(k, dk);
            if (t.requires_grad(v)) t.accumulate(v, dv);
        });
}

Var ce_loss_masked(Var logits, const std::vector<int>& targets,
                   const std::vector<std::uint8_t>& valid) {
    const Matrix& z = logits.value();
    const Index m = z.rows();
    const Index n = z.cols();
    if (static_cast<Index>(targets.size()) != m || static_cast<Index>(valid.size()) != m)
        throw std::invalid_argument("ce_loss: targets/valid must have one entry per row");
    Index count = 0;
    double total = 0.0;
    for (Index i = 0; i < m; ++i) {
        if (!valid[i]) continue;
        if (targets[i] < 0 || targets[i] >= n)
            throw std::out_of_range("ce_loss: target " + std::to_string(targets[i]) +
                                    " outside [0, " + std::to_string(n) + ")");
        const double mx = z.row(i).maxCoeff();
        const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
        total += lse - z(i, targets[i]);
        ++count;
    }
    if (count == 0) throw std::invalid_argument("ce_loss: no valid positions in batch");
    Matrix out(1, 1);
    out(0, 0) = total / static_cast<double>(count);
    return logits.tape->make(std::move(out), logits.tape->requires_grad(logits),
                             [logits, targets, valid, count](Tape& t, const Matrix& g) {
                                 const Matrix& zz = logits.value();
                                 Matrix dz = Matrix::Zero(zz.rows(), zz.cols());
                                 const double w = g(0, 0) / static_cast<double>(count);
                                 for (Index i = 0; i < zz.rows(); ++i) {
                                     if (!valid[i]) continue;
                                     const double mx = zz.row(i).maxCoeff();
                                     RowArray e = (zz.row(i).array() - mx).exp();
                                     dz.row(i) = (e / e.sum()).matrix() * w;
                                     dz(i, targets[i]) -= w;
                                 }
                                 t.accumulate(logits, dz);
                             });
}

}  // namespace trajmoe
