#pragma once

#include <Eigen/Dense>

namespace kalrecon {

/// Dense row-major matrix of doubles; rows are packets or samples.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace kalrecon
