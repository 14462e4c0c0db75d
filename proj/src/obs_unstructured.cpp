#include "obsdiff/obs_unstructured.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace obsdiff {

namespace {

double quadratic_error(const Eigen::MatrixXd& delta, const Eigen::MatrixXd& h_damped) {
    // trace(dW * (H/2) * dW^T)
    return 0.5 * (delta * h_damped).cwiseProduct(delta).sum();
}

int ratio_zero_count(double ratio, int n) {
    return static_cast<int>(std::ceil(ratio * static_cast<double>(n)));
}

} // namespace

SparsitySpec SparsitySpec::unstructured(double ratio) {
    require(ratio > 0.0 && ratio < 1.0, ErrorCode::BadSpec,
            "unstructured ratio must lie strictly inside (0,1)");
    SparsitySpec s;
    s.kind = Kind::Unstructured;
    s.ratio = ratio;
    return s;
}

SparsitySpec SparsitySpec::semi_structured(int prune_per_group, int group) {
    require(group >= 1, ErrorCode::BadSpec, "group width must be >= 1");
    require(prune_per_group >= 0 && prune_per_group < group, ErrorCode::BadSpec,
            "N:M requires N < M");
    SparsitySpec s;
    s.kind = Kind::SemiStructured;
    s.nm_prune = prune_per_group;
    s.nm_group = group;
    return s;
}

SparsitySpec SparsitySpec::ffn_neurons(double ratio) {
    require(ratio > 0.0 && ratio < 1.0, ErrorCode::BadSpec,
            "ffn-neuron ratio must lie strictly inside (0,1)");
    SparsitySpec s;
    s.kind = Kind::FfnNeurons;
    s.ratio = ratio;
    return s;
}

SparsitySpec SparsitySpec::heads(double ratio) {
    require(ratio > 0.0 && ratio < 1.0, ErrorCode::BadSpec,
            "head ratio must lie strictly inside (0,1)");
    SparsitySpec s;
    s.kind = Kind::Heads;
    s.ratio = ratio;
    return s;
}

SparsitySpec SparsitySpec::parse(const std::string& pattern, double ratio) {
    if (pattern == "unstructured") {
        return unstructured(ratio);
    }
    if (pattern == "ffn-neurons") {
        return ffn_neurons(ratio);
    }
    if (pattern == "heads") {
        return heads(ratio);
    }
    const auto colon = pattern.find(':');
    if (colon != std::string::npos && colon > 0 && colon + 1 < pattern.size()) {
        try {
            const int n = std::stoi(pattern.substr(0, colon));
            const int m = std::stoi(pattern.substr(colon + 1));
            return semi_structured(n, m);
        } catch (const Error&) {
            throw;
        } catch (...) {
            // fall through to the BadSpec below
        }
    }
    fail(ErrorCode::BadSpec, "unknown sparsity pattern '" + pattern + "'");
}

std::string SparsitySpec::describe() const {
    switch (kind) {
    case Kind::Unstructured: return "unstructured(" + std::to_string(ratio) + ")";
    case Kind::SemiStructured:
        return std::to_string(nm_prune) + ":" + std::to_string(nm_group);
    case Kind::FfnNeurons: return "ffn-neurons(" + std::to_string(ratio) + ")";
    case Kind::Heads: return "heads(" + std::to_string(ratio) + ")";
    }
    return "?";
}

std::vector<int> lowest_score_indices(const Eigen::VectorXd& scores, int count) {
    std::vector<int> idx(static_cast<std::size_t>(scores.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) {
            return scores[a] < scores[b];
        }
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(std::clamp(count, 0, static_cast<int>(scores.size()))));
    return idx;
}

std::vector<bool> select_nm_mask(const Eigen::VectorXd& saliency, int n, int m) {
    require(m >= 1 && n < m, ErrorCode::BadSpec, "N:M requires N < M");
    require(n >= 0, ErrorCode::BadSpec, "N must be >= 0");
    require(saliency.size() % m == 0, ErrorCode::BadSpec,
            "length " + std::to_string(saliency.size()) + " not divisible by group " +
                std::to_string(m));
    std::vector<bool> keep(static_cast<std::size_t>(saliency.size()), true);
    for (Eigen::Index g = 0; g < saliency.size(); g += m) {
        const auto pruned = lowest_score_indices(saliency.segment(g, m), n);
        for (int p : pruned) {
            keep[static_cast<std::size_t>(g + p)] = false;
        }
    }
    return keep;
}

PruneResult prune_row_naive(const Eigen::VectorXd& w, const Eigen::MatrixXd& h_damped,
                            int k_remove) {
    const int n = static_cast<int>(w.size());
    require(h_damped.rows() == n && h_damped.cols() == n, ErrorCode::ShapeMismatch,
            "Hessian must be n x n");
    require(k_remove >= 0 && k_remove <= n, ErrorCode::BadSpec,
            "k_remove outside [0, n]");

    PruneResult result;
    result.weights = w.transpose();
    result.keep_mask = KeepMask::Constant(1, n, true);
    result.saliency_trace = std::vector<double>{};

    Eigen::VectorXd cur = w;
    std::vector<int> support(static_cast<std::size_t>(n));
    std::iota(support.begin(), support.end(), 0);

    for (int step = 0; step < k_remove; ++step) {
        const auto s = static_cast<Eigen::Index>(support.size());
        Eigen::MatrixXd hs(s, s);
        for (Eigen::Index i = 0; i < s; ++i) {
            for (Eigen::Index j = 0; j < s; ++j) {
                hs(i, j) = h_damped(support[static_cast<std::size_t>(i)],
                                    support[static_cast<std::size_t>(j)]);
            }
        }
        const Eigen::MatrixXd minv = hs.llt().solve(Eigen::MatrixXd::Identity(s, s));

        Eigen::Index best = 0;
        double best_loss = std::numeric_limits<double>::infinity();
        for (Eigen::Index p = 0; p < s; ++p) {
            const double wq = cur[support[static_cast<std::size_t>(p)]];
            const double loss = wq * wq / (2.0 * minv(p, p));
            if (loss < best_loss) { // strict: ties keep the lowest index
                best_loss = loss;
                best = p;
            }
        }

        const int q = support[static_cast<std::size_t>(best)];
        const double coeff = cur[q] / minv(best, best);
        for (Eigen::Index p = 0; p < s; ++p) {
            cur[support[static_cast<std::size_t>(p)]] -= coeff * minv(p, best);
        }
        cur[q] = 0.0;
        result.keep_mask(0, q) = false;
        result.saliency_trace->push_back(best_loss);
        support.erase(support.begin() + best);
    }

    result.weights = cur.transpose();
    result.recon_error = quadratic_error(cur.transpose() - w.transpose(), h_damped);
    return result;
}

PruneResult prune_layer_blocked(const Eigen::MatrixXd& w, const InverseFactor& inv,
                                const SparsitySpec& spec, int block_size, bool record_trace) {
    require(!inv.empty(), ErrorCode::NotFinalized, "inverse factor is empty");
    const int rows = static_cast<int>(w.rows());
    const int n = static_cast<int>(w.cols());
    require(inv.dim() == n, ErrorCode::ShapeMismatch,
            "layer width " + std::to_string(n) + " != Hessian dim " + std::to_string(inv.dim()));
    require(block_size >= 1, ErrorCode::BadSpec, "block size must be >= 1");

    const bool semi = spec.kind == SparsitySpec::Kind::SemiStructured;
    require(semi || spec.kind == SparsitySpec::Kind::Unstructured, ErrorCode::BadSpec,
            "prune_layer_blocked handles unstructured and N:M specs only");
    if (semi) {
        require(n % spec.nm_group == 0, ErrorCode::BadSpec,
                "width " + std::to_string(n) + " not divisible by group " +
                    std::to_string(spec.nm_group));
        // groups must not straddle block boundaries
        block_size = ((block_size + spec.nm_group - 1) / spec.nm_group) * spec.nm_group;
    }
    block_size = std::min(block_size, n);

    const Eigen::MatrixXd& u = inv.chol_upper;
    PruneResult result;
    result.weights = w;
    result.keep_mask = KeepMask::Constant(rows, n, true);
    if (record_trace) {
        result.saliency_trace = std::vector<double>{};
    }
    Eigen::MatrixXd& cur = result.weights;

    for (int i1 = 0; i1 < n; i1 += block_size) {
        const int i2 = std::min(i1 + block_size, n);
        const int count = i2 - i1;
        Eigen::MatrixXd err = Eigen::MatrixXd::Zero(rows, count);

        if (!semi) {
            // cumulative quota keeps the row total at exactly ceil(ratio * n)
            const int quota =
                ratio_zero_count(spec.ratio, i2) - ratio_zero_count(spec.ratio, i1);
            if (quota > 0) {
                for (int r = 0; r < rows; ++r) {
                    Eigen::VectorXd saliency(count);
                    for (int j = 0; j < count; ++j) {
                        const double d = u(i1 + j, i1 + j);
                        const double wv = cur(r, i1 + j);
                        saliency[j] = wv * wv / (2.0 * d * d);
                    }
                    for (int p : lowest_score_indices(saliency, quota)) {
                        result.keep_mask(r, i1 + p) = false;
                    }
                }
            }
        }

        for (int j = 0; j < count; ++j) {
            const int col = i1 + j;

            if (semi && col % spec.nm_group == 0) {
                // group mask from saliencies of the already-compensated weights
                for (int r = 0; r < rows; ++r) {
                    Eigen::VectorXd saliency(spec.nm_group);
                    for (int g = 0; g < spec.nm_group; ++g) {
                        const double d = u(col + g, col + g);
                        const double wv = cur(r, col + g);
                        saliency[g] = wv * wv / (2.0 * d * d);
                    }
                    const auto keep = select_nm_mask(saliency, spec.nm_prune, spec.nm_group);
                    for (int g = 0; g < spec.nm_group; ++g) {
                        result.keep_mask(r, col + g) = keep[static_cast<std::size_t>(g)];
                    }
                }
            }

            const double d = u(col, col);
            Eigen::VectorXd err_col = Eigen::VectorXd::Zero(rows);
            for (int r = 0; r < rows; ++r) {
                if (!result.keep_mask(r, col)) {
                    err_col[r] = cur(r, col) / d;
                    if (record_trace) {
                        result.saliency_trace->push_back(0.5 * err_col[r] * err_col[r]);
                    }
                }
            }
            // immediate compensation inside the block, column col included
            cur.block(0, col, rows, i2 - col).noalias() -=
                err_col * u.row(col).segment(col, i2 - col);
            err.col(j) = err_col;
        }

        // lazy flush to the columns right of the block
        if (i2 < n) {
            cur.block(0, i2, rows, n - i2).noalias() -= err * u.block(i1, i2, count, n - i2);
        }
    }

    // the in-block update drives pruned entries to zero up to rounding; pin them
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < n; ++c) {
            if (!result.keep_mask(r, c)) {
                cur(r, c) = 0.0;
            }
        }
    }

    result.recon_error = quadratic_error(cur - w, inv.hessian_damped);
    return result;
}

} // namespace obsdiff
