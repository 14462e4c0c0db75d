#include "obsdiff/baselines.hpp"

#include <cmath>

namespace obsdiff {

namespace {

KeepMask mask_from_scores(const Eigen::MatrixXd& scores, const SparsitySpec& spec) {
    const int rows = static_cast<int>(scores.rows());
    const int n = static_cast<int>(scores.cols());
    KeepMask mask = KeepMask::Constant(rows, n, true);

    if (spec.kind == SparsitySpec::Kind::Unstructured) {
        const int count = static_cast<int>(std::ceil(spec.ratio * static_cast<double>(n)));
        for (int r = 0; r < rows; ++r) {
            for (int p : lowest_score_indices(scores.row(r).transpose(), count)) {
                mask(r, p) = false;
            }
        }
        return mask;
    }
    if (spec.kind == SparsitySpec::Kind::SemiStructured) {
        require(n % spec.nm_group == 0, ErrorCode::BadSpec,
                "width " + std::to_string(n) + " not divisible by group " +
                    std::to_string(spec.nm_group));
        for (int r = 0; r < rows; ++r) {
            const auto keep =
                select_nm_mask(scores.row(r).transpose(), spec.nm_prune, spec.nm_group);
            for (int c = 0; c < n; ++c) {
                mask(r, c) = keep[static_cast<std::size_t>(c)];
            }
        }
        return mask;
    }
    fail(ErrorCode::BadSpec, "baseline masks support unstructured and N:M specs only");
}

} // namespace

KeepMask magnitude_mask(const Eigen::MatrixXd& w, const SparsitySpec& spec) {
    return mask_from_scores(w.cwiseAbs(), spec);
}

KeepMask wanda_mask(const Eigen::MatrixXd& w, const Eigen::VectorXd& activation_norms,
                    const SparsitySpec& spec) {
    require(activation_norms.size() == w.cols(), ErrorCode::ShapeMismatch,
            "norm length " + std::to_string(activation_norms.size()) + " != layer width " +
                std::to_string(w.cols()));
    const Eigen::MatrixXd scores =
        (w.cwiseAbs().array().rowwise() * activation_norms.transpose().array()).matrix();
    return mask_from_scores(scores, spec);
}

Eigen::MatrixXd apply_mask(const Eigen::MatrixXd& w, const KeepMask& mask) {
    require(w.rows() == mask.rows() && w.cols() == mask.cols(), ErrorCode::ShapeMismatch,
            "mask shape != weight shape");
    Eigen::MatrixXd out = w;
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
            if (!mask(r, c)) {
                out(r, c) = 0.0;
            }
        }
    }
    return out;
}

} // namespace obsdiff
