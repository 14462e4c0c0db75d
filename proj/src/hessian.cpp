#include "obsdiff/hessian.hpp"

#include <cmath>

namespace obsdiff {

WeightScheme weight_scheme_from_string(const std::string& s) {
    if (s == "uniform") return WeightScheme::Uniform;
    if (s == "linear-increase") return WeightScheme::LinearIncrease;
    if (s == "linear-decrease") return WeightScheme::LinearDecrease;
    if (s == "log-increase") return WeightScheme::LogIncrease;
    if (s == "log-decrease") return WeightScheme::LogDecrease;
    fail(ErrorCode::BadConfig, "unknown weighting scheme '" + s + "'");
}

std::string weight_scheme_to_string(WeightScheme s) {
    switch (s) {
    case WeightScheme::Uniform: return "uniform";
    case WeightScheme::LinearIncrease: return "linear-increase";
    case WeightScheme::LinearDecrease: return "linear-decrease";
    case WeightScheme::LogIncrease: return "log-increase";
    case WeightScheme::LogDecrease: return "log-decrease";
    }
    return "unknown";
}

TimestepWeights timestep_weights(WeightScheme scheme, int num_steps, double alpha_min,
                                 double alpha_max) {
    require(num_steps >= 1, ErrorCode::BadConfig, "num_steps must be >= 1");
    require(alpha_min > 0.0, ErrorCode::BadConfig, "alpha_min must be > 0");
    require(alpha_min <= alpha_max, ErrorCode::BadConfig, "alpha_min must be <= alpha_max");

    TimestepWeights w;
    w.scheme = scheme;
    w.num_steps = num_steps;
    w.alpha_min = alpha_min;
    w.alpha_max = alpha_max;
    w.values.resize(static_cast<std::size_t>(num_steps));

    const double span = alpha_max - alpha_min;
    const int T = num_steps;
    // fraction in [0, 1] of the way from alpha_min up to alpha_max; endpoints
    // are pinned exactly, interior points use the interpolant
    const auto blend = [&](double fraction) {
        if (fraction <= 0.0) {
            return alpha_min;
        }
        if (fraction >= 1.0) {
            return alpha_max;
        }
        return alpha_min + span * fraction;
    };
    for (int t = 1; t <= T; ++t) {
        double v = 1.0;
        switch (scheme) {
        case WeightScheme::Uniform:
            v = 1.0;
            break;
        case WeightScheme::LinearDecrease:
            v = (T == 1) ? alpha_max
                         : blend(static_cast<double>(T - t) / static_cast<double>(T - 1));
            break;
        case WeightScheme::LinearIncrease:
            v = (T == 1) ? alpha_max
                         : blend(static_cast<double>(t - 1) / static_cast<double>(T - 1));
            break;
        case WeightScheme::LogDecrease:
            // ln(T) = 0 at T = 1; the schedule degenerates to alpha_max
            v = (T == 1) ? alpha_max
                         : blend(std::log(static_cast<double>(T - t + 1)) /
                                 std::log(static_cast<double>(T)));
            break;
        case WeightScheme::LogIncrease:
            v = (T == 1) ? alpha_max
                         : blend(std::log(static_cast<double>(t)) /
                                 std::log(static_cast<double>(T)));
            break;
        }
        w.values[static_cast<std::size_t>(t - 1)] = v;
    }
    return w;
}

HessianAccumulator::HessianAccumulator(std::string layer_id, int dim)
    : layer_id_(std::move(layer_id)), dim_(dim) {
    require(dim >= 1, ErrorCode::BadConfig, "accumulator dim must be >= 1");
    h_ = Eigen::MatrixXd::Zero(dim, dim);
}

void HessianAccumulator::accumulate(const Eigen::MatrixXd& x, double alpha) {
    require(dim_ >= 1, ErrorCode::BadConfig, "accumulator not initialized");
    require(static_cast<int>(x.rows()) == dim_, ErrorCode::ShapeMismatch,
            layer_id_ + ": activation rows " + std::to_string(x.rows()) + " != dim " +
                std::to_string(dim_));
    require(alpha > 0.0, ErrorCode::BadConfig, "alpha must be > 0");
    h_.selfadjointView<Eigen::Lower>().rankUpdate(x, 2.0 * alpha);
    h_.triangularView<Eigen::StrictlyUpper>() = h_.transpose();
    sample_count_ += x.cols();
}

void HessianAccumulator::scale(double factor) {
    require(factor > 0.0, ErrorCode::BadConfig, "scale factor must be > 0");
    h_ *= factor;
}

InverseFactor inverse_factor_from_damped(const Eigen::MatrixXd& h_damped,
                                         const std::string& layer_id, double lambda) {
    require(h_damped.rows() == h_damped.cols() && h_damped.rows() > 0, ErrorCode::ShapeMismatch,
            "damped Hessian must be square");
    InverseFactor f;
    f.layer_id = layer_id;
    f.lambda = lambda;
    f.hessian_damped = h_damped;

    const auto n = h_damped.rows();
    Eigen::LLT<Eigen::MatrixXd> llt(h_damped);
    require(llt.info() == Eigen::Success, ErrorCode::NotPositiveDefinite,
            layer_id + ": Cholesky failed after damping; degenerate calibration?");
    f.inverse = llt.solve(Eigen::MatrixXd::Identity(n, n));

    Eigen::LLT<Eigen::MatrixXd> llt_inv(f.inverse);
    require(llt_inv.info() == Eigen::Success, ErrorCode::NotPositiveDefinite,
            layer_id + ": inverse lost positive definiteness");
    f.chol_upper = llt_inv.matrixL().transpose();
    return f;
}

InverseFactor finalize(const HessianAccumulator& acc, double damp_rel) {
    require(acc.sample_count() > 0, ErrorCode::NotFinalized,
            acc.layer_id() + ": no activations accumulated");
    require(damp_rel >= 0.0, ErrorCode::BadConfig, "damp_rel must be >= 0");
    const double lambda = damp_rel * acc.hessian().diagonal().mean();
    Eigen::MatrixXd damped = acc.hessian();
    damped.diagonal().array() += lambda;
    return inverse_factor_from_damped(damped, acc.layer_id(), lambda);
}

} // namespace obsdiff
