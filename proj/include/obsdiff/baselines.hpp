#pragma once

#include <Eigen/Dense>

#include "obsdiff/obs_unstructured.hpp"

namespace obsdiff {

// Mask-only criteria for controlled comparisons. Both zero weights without
// compensation and produce exactly the same per-row / per-group zero counts as
// the OBS path at the same spec.

KeepMask magnitude_mask(const Eigen::MatrixXd& w, const SparsitySpec& spec);

// score = |w_ij| * norm_j, per-row comparison; norms come from the same
// timestep-weighted statistics, sqrt(diag(H)/2).
KeepMask wanda_mask(const Eigen::MatrixXd& w, const Eigen::VectorXd& activation_norms,
                    const SparsitySpec& spec);

Eigen::MatrixXd apply_mask(const Eigen::MatrixXd& w, const KeepMask& mask);

} // namespace obsdiff
