#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obsdiff/hessian.hpp"
#include "obsdiff/obs_unstructured.hpp"
#include "obsdiff/toy_model.hpp"

namespace obsdiff {

struct NeuronSaliency {
    std::string layer_id;
    Eigen::VectorXd scores; // per column q: sum_rows W(:,q)^2 / (2 [H^-1]_qq)
};

struct HeadSaliency {
    char modality = 'A';
    int head_dim = 0;
    Eigen::VectorXd scores; // per head j
};

struct FusedHeadRanking {
    int rrf_k = 60;
    Eigen::VectorXd fused;          // S_j = 1/(k+rank_A) + 1/(k+rank_B)
    std::vector<int> ascending;     // head indices, least salient first
    std::vector<int> pruned_heads;  // filled by prune_heads
};

// Head Hessian interpretation: principal submatrix of the damped H inverted on
// its own (default), or the corresponding block of the full inverse.
enum class HeadHessianMode { SubmatrixInverse, InverseSubmatrix };

NeuronSaliency ffn_neuron_saliency(const Eigen::MatrixXd& w_down, const InverseFactor& inv);

struct FfnPruneOutcome {
    std::vector<int> removed;
    double recon_error = 0.0; // down-projection error under the damped H
};

// Greedy removal of ceil(ratio * F) hidden neurons: zero the down-projection
// column with the lowest saliency, compensate the survivors with the rank-one
// update, recompute the restricted inverse exactly, zero the matching up row.
FfnPruneOutcome prune_ffn(Eigen::MatrixXd& w_down, Eigen::MatrixXd& w_up,
                          const InverseFactor& inv, double ratio);

HeadSaliency head_saliency(const Eigen::MatrixXd& w_out, const InverseFactor& inv, int head_dim,
                           char modality = 'A',
                           HeadHessianMode mode = HeadHessianMode::SubmatrixInverse);

// rank 1 = highest saliency, ties give the lower head index the better rank;
// lower fused score = first to prune.
FusedHeadRanking rrf_fuse(const Eigen::VectorXd& scores_a, const Eigen::VectorXd& scores_b,
                          int rrf_k = 60);

struct HeadPruneOutcome {
    std::vector<int> removed_heads;
    FusedHeadRanking ranking;
    double recon_error_a = 0.0;
    double recon_error_b = 0.0;
};

// Fuses the two modality rankings, drops floor(ratio * heads) heads: the
// output-projection slabs are zeroed column by column with full-Hessian
// compensation, the q/k/v rows of the dead heads are zeroed outright.
HeadPruneOutcome prune_heads(ToyModel& model, int block_id, const InverseFactor& inv_a,
                             const InverseFactor& inv_b, double ratio, int rrf_k = 60,
                             HeadHessianMode mode = HeadHessianMode::SubmatrixInverse);

} // namespace obsdiff
