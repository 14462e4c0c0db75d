#include "obsdiff/obs_structured.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace obsdiff {

namespace {

Eigen::MatrixXd restricted_inverse(const Eigen::MatrixXd& h_damped,
                                   const std::vector<int>& support) {
    const auto s = static_cast<Eigen::Index>(support.size());
    Eigen::MatrixXd hs(s, s);
    for (Eigen::Index i = 0; i < s; ++i) {
        for (Eigen::Index j = 0; j < s; ++j) {
            hs(i, j) = h_damped(support[static_cast<std::size_t>(i)],
                                support[static_cast<std::size_t>(j)]);
        }
    }
    return hs.llt().solve(Eigen::MatrixXd::Identity(s, s));
}

// Zeroes column `pos` (a position into `support`) of W with the exact rank-one
// compensation over the remaining support, then drops it from the support.
void remove_column(Eigen::MatrixXd& w, const Eigen::MatrixXd& minv, std::vector<int>& support,
                   std::size_t pos) {
    const int q = support[pos];
    const Eigen::VectorXd col_q = w.col(q);
    const double diag = minv(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(pos));
    for (std::size_t p = 0; p < support.size(); ++p) {
        w.col(support[p]) -=
            (minv(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(pos)) / diag) * col_q;
    }
    w.col(q).setZero();
    support.erase(support.begin() + static_cast<std::ptrdiff_t>(pos));
}

double quadratic_error(const Eigen::MatrixXd& delta, const Eigen::MatrixXd& h_damped) {
    return 0.5 * (delta * h_damped).cwiseProduct(delta).sum();
}

} // namespace

NeuronSaliency ffn_neuron_saliency(const Eigen::MatrixXd& w_down, const InverseFactor& inv) {
    require(!inv.empty(), ErrorCode::NotFinalized, "inverse factor is empty");
    require(static_cast<int>(w_down.cols()) == inv.dim(), ErrorCode::ShapeMismatch,
            "down-projection width " + std::to_string(w_down.cols()) + " != Hessian dim " +
                std::to_string(inv.dim()));
    NeuronSaliency s;
    s.layer_id = inv.layer_id;
    s.scores.resize(w_down.cols());
    for (Eigen::Index q = 0; q < w_down.cols(); ++q) {
        s.scores[q] = w_down.col(q).squaredNorm() / (2.0 * inv.inverse(q, q));
    }
    return s;
}

FfnPruneOutcome prune_ffn(Eigen::MatrixXd& w_down, Eigen::MatrixXd& w_up,
                          const InverseFactor& inv, double ratio) {
    require(!inv.empty(), ErrorCode::NotFinalized, "inverse factor is empty");
    require(ratio > 0.0 && ratio < 1.0, ErrorCode::BadSpec, "ratio must lie inside (0,1)");
    const int f = static_cast<int>(w_down.cols());
    require(inv.dim() == f, ErrorCode::ShapeMismatch, "Hessian dim != hidden width");
    require(static_cast<int>(w_up.rows()) == f, ErrorCode::ShapeMismatch,
            "up-projection rows != down-projection columns");

    const int k = static_cast<int>(std::ceil(ratio * static_cast<double>(f)));
    const Eigen::MatrixXd w0 = w_down;

    FfnPruneOutcome outcome;
    std::vector<int> support(static_cast<std::size_t>(f));
    std::iota(support.begin(), support.end(), 0);

    for (int step = 0; step < k; ++step) {
        const Eigen::MatrixXd minv = restricted_inverse(inv.hessian_damped, support);
        std::size_t best = 0;
        double best_loss = std::numeric_limits<double>::infinity();
        for (std::size_t p = 0; p < support.size(); ++p) {
            const auto pe = static_cast<Eigen::Index>(p);
            const double loss = w_down.col(support[p]).squaredNorm() / (2.0 * minv(pe, pe));
            if (loss < best_loss) {
                best_loss = loss;
                best = p;
            }
        }
        const int q = support[best];
        remove_column(w_down, minv, support, best);
        w_up.row(q).setZero();
        outcome.removed.push_back(q);
    }

    outcome.recon_error = quadratic_error(w_down - w0, inv.hessian_damped);
    return outcome;
}

HeadSaliency head_saliency(const Eigen::MatrixXd& w_out, const InverseFactor& inv, int head_dim,
                           char modality, HeadHessianMode mode) {
    require(!inv.empty(), ErrorCode::NotFinalized, "inverse factor is empty");
    require(head_dim >= 1, ErrorCode::BadSpec, "head_dim must be >= 1");
    const int n = static_cast<int>(w_out.cols());
    require(n % head_dim == 0, ErrorCode::BadSpec,
            "width " + std::to_string(n) + " not divisible by head_dim " +
                std::to_string(head_dim));
    require(inv.dim() == n, ErrorCode::ShapeMismatch, "Hessian dim != projection width");

    const int heads = n / head_dim;
    HeadSaliency s;
    s.modality = modality;
    s.head_dim = head_dim;
    s.scores.resize(heads);
    for (int j = 0; j < heads; ++j) {
        const int base = j * head_dim;
        Eigen::MatrixXd mj;
        if (mode == HeadHessianMode::SubmatrixInverse) {
            const Eigen::MatrixXd hj = inv.hessian_damped.block(base, base, head_dim, head_dim);
            mj = hj.llt().solve(Eigen::MatrixXd::Identity(head_dim, head_dim));
        } else {
            mj = inv.inverse.block(base, base, head_dim, head_dim);
        }
        double total = 0.0;
        for (int c = 0; c < head_dim; ++c) {
            total += w_out.col(base + c).squaredNorm() / mj(c, c);
        }
        s.scores[j] = total;
    }
    return s;
}

FusedHeadRanking rrf_fuse(const Eigen::VectorXd& scores_a, const Eigen::VectorXd& scores_b,
                          int rrf_k) {
    require(scores_a.size() == scores_b.size(), ErrorCode::ShapeMismatch,
            "modality score lengths differ");
    require(rrf_k >= 1, ErrorCode::BadConfig, "rrf_k must be >= 1");

    const auto heads = static_cast<int>(scores_a.size());
    auto ranks_of = [heads](const Eigen::VectorXd& scores) {
        std::vector<int> order(static_cast<std::size_t>(heads));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (scores[a] != scores[b]) {
                return scores[a] > scores[b]; // rank 1 = most salient
            }
            return a < b;
        });
        std::vector<int> rank(static_cast<std::size_t>(heads));
        for (int pos = 0; pos < heads; ++pos) {
            rank[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] = pos + 1;
        }
        return rank;
    };
    const auto rank_a = ranks_of(scores_a);
    const auto rank_b = ranks_of(scores_b);

    FusedHeadRanking out;
    out.rrf_k = rrf_k;
    out.fused.resize(heads);
    for (int j = 0; j < heads; ++j) {
        out.fused[j] = 1.0 / static_cast<double>(rrf_k + rank_a[static_cast<std::size_t>(j)]) +
                       1.0 / static_cast<double>(rrf_k + rank_b[static_cast<std::size_t>(j)]);
    }
    out.ascending.resize(static_cast<std::size_t>(heads));
    std::iota(out.ascending.begin(), out.ascending.end(), 0);
    std::sort(out.ascending.begin(), out.ascending.end(), [&](int a, int b) {
        if (out.fused[a] != out.fused[b]) {
            return out.fused[a] < out.fused[b];
        }
        return a < b;
    });
    return out;
}

HeadPruneOutcome prune_heads(ToyModel& model, int block_id, const InverseFactor& inv_a,
                             const InverseFactor& inv_b, double ratio, int rrf_k,
                             HeadHessianMode mode) {
    require(block_id >= 0 && block_id < static_cast<int>(model.blocks.size()),
            ErrorCode::UnknownLayer, "block " + std::to_string(block_id));
    require(ratio > 0.0 && ratio < 1.0, ErrorCode::BadSpec, "ratio must lie inside (0,1)");

    auto& blk = model.blocks[static_cast<std::size_t>(block_id)];
    const int d = model.config.head_dim();
    const int heads = model.heads_in_block(block_id);
    const int k = static_cast<int>(std::floor(ratio * static_cast<double>(heads)));
    require(k < heads, ErrorCode::BadSpec, "spec would remove every head");

    const auto sal_a = head_saliency(blk.w_out_a, inv_a, d, 'A', mode);
    const auto sal_b = head_saliency(blk.w_out_b, inv_b, d, 'B', mode);

    HeadPruneOutcome outcome;
    outcome.ranking = rrf_fuse(sal_a.scores, sal_b.scores, rrf_k);
    outcome.removed_heads.assign(outcome.ranking.ascending.begin(),
                                 outcome.ranking.ascending.begin() + k);
    std::sort(outcome.removed_heads.begin(), outcome.removed_heads.end());
    outcome.ranking.pruned_heads = outcome.removed_heads;
    if (k == 0) {
        return outcome;
    }

    // slab columns, ascending; processed left to right in both projections
    std::vector<int> cols;
    for (int j : outcome.removed_heads) {
        for (int c = 0; c < d; ++c) {
            cols.push_back(j * d + c);
        }
    }

    auto zero_slabs = [&cols](Eigen::MatrixXd& w_out, const InverseFactor& inv) {
        const Eigen::MatrixXd w0 = w_out;
        std::vector<int> support(static_cast<std::size_t>(w_out.cols()));
        std::iota(support.begin(), support.end(), 0);
        for (int col : cols) {
            const auto it = std::find(support.begin(), support.end(), col);
            const auto pos = static_cast<std::size_t>(it - support.begin());
            const Eigen::MatrixXd minv = restricted_inverse(inv.hessian_damped, support);
            remove_column(w_out, minv, support, pos);
        }
        return quadratic_error(w_out - w0, inv.hessian_damped);
    };
    outcome.recon_error_a = zero_slabs(blk.w_out_a, inv_a);
    outcome.recon_error_b = zero_slabs(blk.w_out_b, inv_b);

    // dead heads end to end: their q/k/v rows are dropped without compensation
    for (int j : outcome.removed_heads) {
        blk.w_q.middleRows(j * d, d).setZero();
        blk.w_k.middleRows(j * d, d).setZero();
        blk.w_v.middleRows(j * d, d).setZero();
    }
    return outcome;
}

} // namespace obsdiff
