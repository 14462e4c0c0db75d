#include "obsdiff/evaluate.hpp"

#include <algorithm>

namespace obsdiff {

double layer_recon_error(const Eigen::MatrixXd& w, const Eigen::MatrixXd& w_hat,
                         const Eigen::MatrixXd& h_damped) {
    require(w.rows() == w_hat.rows() && w.cols() == w_hat.cols(), ErrorCode::ShapeMismatch,
            "weight shapes differ");
    require(h_damped.rows() == w.cols() && h_damped.cols() == w.cols(), ErrorCode::ShapeMismatch,
            "Hessian dim != layer width");
    const Eigen::MatrixXd delta = w_hat - w;
    return 0.5 * (delta * h_damped).cwiseProduct(delta).sum();
}

DivergenceStats trajectory_divergence(const ToyModel& dense, const ToyModel& pruned,
                                      const CalibrationSet& eval_set) {
    require(dense.config.to_json() == pruned.config.to_json(), ErrorCode::BadConfig,
            "models have different configs");
    DivergenceStats stats;
    stats.per_sample.reserve(eval_set.samples.size());
    for (const auto& sample : eval_set.samples) {
        const Eigen::MatrixXd a = run_trajectory(dense, sample);
        const Eigen::MatrixXd b = run_trajectory(pruned, sample);
        const double mse = (a - b).squaredNorm() / static_cast<double>(a.size());
        stats.per_sample.push_back(mse);
    }
    if (!stats.per_sample.empty()) {
        double total = 0.0;
        for (double v : stats.per_sample) {
            total += v;
            stats.max = std::max(stats.max, v);
        }
        stats.mean = total / static_cast<double>(stats.per_sample.size());
    }
    return stats;
}

namespace {

std::int64_t count_zeros(const Eigen::MatrixXd& m) {
    std::int64_t zeros = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (m(i, j) == 0.0) {
                ++zeros;
            }
        }
    }
    return zeros;
}

bool column_zero(const Eigen::MatrixXd& m, int c) { return m.col(c).isZero(0.0); }
bool row_zero(const Eigen::MatrixXd& m, int r) { return m.row(r).isZero(0.0); }

} // namespace

nlohmann::json SparsityAudit::to_json() const {
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& l : layers) {
        layers_json.push_back({{"layer", l.layer},
                               {"zeros", l.zeros},
                               {"total", l.total},
                               {"zero_fraction", l.zero_fraction}});
    }
    nlohmann::json violations_json = nlohmann::json::array();
    for (const auto& v : violations) {
        violations_json.push_back({{"layer", v.layer}, {"row", v.row}, {"group", v.group}});
    }
    return {{"layers", layers_json},
            {"global_fraction", global_fraction},
            {"target_layer_fraction", target_layer_fraction},
            {"nm_valid", nm_valid},
            {"violations", violations_json},
            {"structure_consistent", structure_consistent},
            {"structure_notes", structure_notes}};
}

SparsityAudit sparsity_report(const ToyModel& model, const std::optional<SparsitySpec>& spec) {
    SparsityAudit audit;
    std::int64_t layer_zeros = 0;
    std::int64_t layer_total = 0;

    for (const auto& id : model.layer_ids()) {
        const auto& w = model.weight(id);
        LayerSparsity ls;
        ls.layer = id;
        ls.zeros = count_zeros(w);
        ls.total = w.size();
        ls.zero_fraction =
            ls.total == 0 ? 0.0 : static_cast<double>(ls.zeros) / static_cast<double>(ls.total);
        layer_zeros += ls.zeros;
        layer_total += ls.total;
        audit.layers.push_back(ls);

        if (spec && spec->kind == SparsitySpec::Kind::SemiStructured) {
            const int m = spec->nm_group;
            if (static_cast<int>(w.cols()) % m != 0) {
                audit.nm_valid = false;
                audit.structure_notes.push_back(id + ": width not divisible by group");
                continue;
            }
            for (int r = 0; r < w.rows(); ++r) {
                for (int g = 0; g * m < w.cols(); ++g) {
                    int zeros_in_group = 0;
                    for (int c = 0; c < m; ++c) {
                        if (w(r, g * m + c) == 0.0) {
                            ++zeros_in_group;
                        }
                    }
                    if (zeros_in_group < spec->nm_prune) {
                        audit.nm_valid = false;
                        audit.violations.push_back({id, r, g});
                    }
                }
            }
        }
    }

    // dead structures must be dead on every side that feeds them; element-wise
    // masks can zero a whole column by coincidence, so the pairing check only
    // applies to structured audits
    const bool check_structure = !spec || spec->kind == SparsitySpec::Kind::FfnNeurons ||
                                 spec->kind == SparsitySpec::Kind::Heads;
    for (std::size_t b = 0; check_structure && b < model.blocks.size(); ++b) {
        const auto& blk = model.blocks[b];
        const std::string p = "b" + std::to_string(b) + ".";
        const auto check_ffn = [&](const Eigen::MatrixXd& down, const Eigen::MatrixXd& up,
                                   const std::string& name) {
            for (int q = 0; q < down.cols(); ++q) {
                const bool down_dead = column_zero(down, q);
                const bool up_dead = row_zero(up, q);
                if (down_dead != up_dead) {
                    audit.structure_consistent = false;
                    audit.structure_notes.push_back(p + name + ": neuron " + std::to_string(q) +
                                                    " half-dead");
                }
            }
        };
        check_ffn(blk.w_down_a, blk.w_up_a, "ffn_a");
        check_ffn(blk.w_down_b, blk.w_up_b, "ffn_b");

        const int d = model.config.head_dim();
        for (int j = 0; j * d < blk.w_out_a.cols(); ++j) {
            bool out_dead = true;
            for (int c = 0; c < d; ++c) {
                out_dead = out_dead && column_zero(blk.w_out_a, j * d + c) &&
                           column_zero(blk.w_out_b, j * d + c);
            }
            if (!out_dead) {
                continue;
            }
            for (int r = 0; r < d; ++r) {
                if (!row_zero(blk.w_q, j * d + r) || !row_zero(blk.w_k, j * d + r) ||
                    !row_zero(blk.w_v, j * d + r)) {
                    audit.structure_consistent = false;
                    audit.structure_notes.push_back(p + "attn: head " + std::to_string(j) +
                                                    " output dead but q/k/v rows live");
                    break;
                }
            }
        }
    }

    audit.target_layer_fraction =
        layer_total == 0 ? 0.0 : static_cast<double>(layer_zeros) / static_cast<double>(layer_total);

    std::int64_t all_total = model.parameter_count();
    std::int64_t all_zeros = layer_zeros + count_zeros(model.t_emb);
    for (const auto& blk : model.blocks) {
        for (const auto* g : {&blk.ln1_a, &blk.ln1_b, &blk.ln2_a, &blk.ln2_b}) {
            for (Eigen::Index i = 0; i < g->size(); ++i) {
                if ((*g)[i] == 0.0) {
                    ++all_zeros;
                }
            }
        }
    }
    audit.global_fraction =
        all_total == 0 ? 0.0 : static_cast<double>(all_zeros) / static_cast<double>(all_total);
    return audit;
}

} // namespace obsdiff
