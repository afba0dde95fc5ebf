#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace trajmoe {

using Scalar = double;

// Row-major storage so serialized buffers read in (row, col) order.
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
}

inline void check_inner_dims(const Matrix& a, const Matrix& b, const char* what) {
    if (a.cols() != b.rows())
        throw std::invalid_argument(std::string(what) + ": inner dimensions disagree, " +
                                    shape_str(a) + " * " + shape_str(b));
}

}  // namespace trajmoe
