#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace smoothfit {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using IVec = Eigen::VectorXi;
using SpMat = Eigen::SparseMatrix<double>;  // column major, int indices
using Triplet = Eigen::Triplet<double>;

}  // namespace smoothfit
