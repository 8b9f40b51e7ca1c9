#pragma once

#include <Eigen/Core>

namespace biobred {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

}  // namespace biobred
