#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obsdiff/errors.hpp"

namespace obsdiff {

enum class WeightScheme {
    Uniform,
    LinearIncrease,
    LinearDecrease,
    LogIncrease,
    LogDecrease,
};

WeightScheme weight_scheme_from_string(const std::string& s);
std::string weight_scheme_to_string(WeightScheme s);

struct TimestepWeights {
    WeightScheme scheme = WeightScheme::LogDecrease;
    int num_steps = 0;
    double alpha_min = 0.1;
    double alpha_max = 1.0;
    std::vector<double> values; // alpha_1..alpha_T, index t-1

    double at(int t) const { return values.at(static_cast<std::size_t>(t - 1)); }
};

// Log-decrease: alpha_t = alpha_min + (alpha_max - alpha_min) * ln(T-t+1)/ln(T),
// highest at t = 1. Increase variants are the time reversal, linear variants
// interpolate, uniform is all ones. T = 1 degenerates to alpha_max (except
// uniform).
TimestepWeights timestep_weights(WeightScheme scheme, int num_steps, double alpha_min = 0.1,
                                 double alpha_max = 1.0);

// Gram statistic of a layer's inputs over the denoising trajectory:
// H = 2 * sum_t alpha_t * X_t X_t^T, columns of X are token inputs.
// Accumulated in 64-bit regardless of model dtype.
class HessianAccumulator {
public:
    HessianAccumulator() = default;
    HessianAccumulator(std::string layer_id, int dim);

    void accumulate(const Eigen::MatrixXd& x, double alpha);
    // Rescales H; the pipeline divides by the trajectory count to realize the
    // per-sample expectation.
    void scale(double factor);

    const std::string& layer_id() const { return layer_id_; }
    int dim() const { return dim_; }
    std::int64_t sample_count() const { return sample_count_; }
    const Eigen::MatrixXd& hessian() const { return h_; }

private:
    std::string layer_id_;
    int dim_ = 0;
    std::int64_t sample_count_ = 0; // columns seen
    Eigen::MatrixXd h_;
};

// Damped inverse bundle consumed by the pruning kernels. chol_upper is the
// upper-triangular U with U^T U = (H + lambda I)^-1; its diagonal squares are
// the suffix-restricted inverse diagonals the fixed-order sweep needs.
struct InverseFactor {
    std::string layer_id;
    double lambda = 0.0;
    Eigen::MatrixXd hessian_damped; // H + lambda I
    Eigen::MatrixXd inverse;        // (H + lambda I)^-1
    Eigen::MatrixXd chol_upper;     // U

    int dim() const { return static_cast<int>(hessian_damped.rows()); }
    bool empty() const { return hessian_damped.size() == 0; }
};

// lambda = damp_rel * mean(diag(H)). Throws NotPositiveDefinite when the
// damped matrix still fails Cholesky (degenerate calibration).
InverseFactor finalize(const HessianAccumulator& acc, double damp_rel);

// Same factorization from an explicit damped matrix; used by layer-level entry
// points that already hold H + lambda I.
InverseFactor inverse_factor_from_damped(const Eigen::MatrixXd& h_damped,
                                         const std::string& layer_id = "", double lambda = 0.0);

} // namespace obsdiff
