#pragma once

#include <Eigen/Core>

namespace causalscope {

// Activations are [seq x width] row-major; weights are stored [out x in].
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic>;
// Analysis results (metric grids, losses) are kept in double.
using Grid = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

} // namespace causalscope
