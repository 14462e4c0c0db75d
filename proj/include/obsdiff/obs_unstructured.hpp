#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obsdiff/hessian.hpp"

namespace obsdiff {

struct SparsitySpec {
    enum class Kind { Unstructured, SemiStructured, FfnNeurons, Heads };

    Kind kind = Kind::Unstructured;
    double ratio = 0.5;   // Unstructured / FfnNeurons / Heads
    int nm_prune = 2;     // zeros per group (SemiStructured)
    int nm_group = 4;     // group width (SemiStructured)

    static SparsitySpec unstructured(double ratio);
    static SparsitySpec semi_structured(int prune_per_group, int group);
    static SparsitySpec ffn_neurons(double ratio);
    static SparsitySpec heads(double ratio);

    // "unstructured" | "N:M" | "ffn-neurons" | "heads", ratio applied where relevant
    static SparsitySpec parse(const std::string& pattern, double ratio);
    std::string describe() const;
};

using KeepMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct PruneResult {
    Eigen::MatrixXd weights;  // pruned weights, zeros where keep_mask is false
    KeepMask keep_mask;       // true = weight retained
    double recon_error = 0.0; // trace(dW * (H_damped/2) * dW^T)
    std::optional<std::vector<double>> saliency_trace; // per-removal losses, removal order
};

// Exact reference: repeats k_remove times -- invert H over the remaining
// support, drop the weight with the smallest loss increase
// L_q = w_q^2 / (2 [H^-1]_qq), compensate the survivors with
// dw = -(w_q / [H^-1]_qq) H^-1[:,q]. Ties break toward the lowest index.
PruneResult prune_row_naive(const Eigen::VectorXd& w, const Eigen::MatrixXd& h_damped,
                            int k_remove);

// Fixed-order blocked sweep over columns, rows independent. Within each block
// saliencies come from the Cholesky factor of the damped inverse; zeroed
// weights trigger the compensation on columns to their right, batched within
// the block and flushed at the block boundary. Ratio targets are met per row
// via cumulative block quotas summing to ceil(ratio * n).
PruneResult prune_layer_blocked(const Eigen::MatrixXd& w, const InverseFactor& inv,
                                const SparsitySpec& spec, int block_size = 32,
                                bool record_trace = false);

// Exactly n false entries per consecutive group of m; ties prune the lowest
// index first.
std::vector<bool> select_nm_mask(const Eigen::VectorXd& saliency, int n, int m);

// Lowest-count indices by (score asc, index asc); shared tie rule for every
// ratio-based criterion.
std::vector<int> lowest_score_indices(const Eigen::VectorXd& scores, int count);

} // namespace obsdiff
