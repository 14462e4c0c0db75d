#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "obsdiff/obs_unstructured.hpp"
#include "obsdiff/toy_model.hpp"

namespace obsdiff {

// Quadratic reconstruction error trace(dW * (H/2) * dW^T); H is whatever damped
// statistic the caller accumulated.
double layer_recon_error(const Eigen::MatrixXd& w, const Eigen::MatrixXd& w_hat,
                         const Eigen::MatrixXd& h_damped);

struct DivergenceStats {
    double mean = 0.0;
    double max = 0.0;
    std::vector<double> per_sample; // MSE of final latents, sample order
};

// MSE between final latents of the two models from identical noise/condition.
DivergenceStats trajectory_divergence(const ToyModel& dense, const ToyModel& pruned,
                                      const CalibrationSet& eval_set);

struct GroupViolation {
    std::string layer;
    int row = 0;
    int group = 0; // group index along the row
};

struct LayerSparsity {
    std::string layer;
    std::int64_t zeros = 0;
    std::int64_t total = 0;
    double zero_fraction = 0.0;
};

struct SparsityAudit {
    std::vector<LayerSparsity> layers;
    double global_fraction = 0.0;       // over all parameters incl. norms/embeddings
    double target_layer_fraction = 0.0; // over prunable linear layers only
    bool nm_valid = true;               // meaningful for N:M specs
    std::vector<GroupViolation> violations;
    bool structure_consistent = true;   // dead neurons/heads are dead on both sides
    std::vector<std::string> structure_notes;

    nlohmann::json to_json() const;
};

// Recounts zeros straight from the weights; never throws, always reports.
SparsityAudit sparsity_report(const ToyModel& model,
                              const std::optional<SparsitySpec>& spec = std::nullopt);

} // namespace obsdiff
