#include "obsdiff/scheduler.hpp"

#include <algorithm>
#include <chrono>
#include <future>

namespace obsdiff {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

bool is_elementwise(const SparsitySpec& spec) {
    return spec.kind == SparsitySpec::Kind::Unstructured ||
           spec.kind == SparsitySpec::Kind::SemiStructured;
}

int block_of_layer(const LayerId& id) {
    // ids look like "b3.attn.q"
    const auto dot = id.find('.');
    return std::stoi(id.substr(1, dot - 1));
}

double layer_zero_fraction(const Eigen::MatrixXd& w) {
    std::int64_t zeros = 0;
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            if (w(i, j) == 0.0) {
                ++zeros;
            }
        }
    }
    return w.size() == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(w.size());
}

Eigen::MatrixXd drop_rows(const Eigen::MatrixXd& m, const std::vector<int>& removed) {
    std::vector<bool> gone(static_cast<std::size_t>(m.rows()), false);
    for (int r : removed) {
        gone[static_cast<std::size_t>(r)] = true;
    }
    Eigen::MatrixXd out(m.rows() - static_cast<Eigen::Index>(removed.size()), m.cols());
    Eigen::Index dst = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (!gone[static_cast<std::size_t>(r)]) {
            out.row(dst++) = m.row(r);
        }
    }
    return out;
}

Eigen::MatrixXd drop_cols(const Eigen::MatrixXd& m, const std::vector<int>& removed) {
    return drop_rows(m.transpose(), removed).transpose();
}

} // namespace

std::vector<LayerId> ModulePackage::layer_ids() const {
    std::vector<LayerId> ids;
    for (const auto& u : units) {
        ids.insert(ids.end(), u.layers.begin(), u.layers.end());
    }
    return ids;
}

PruneMethod prune_method_from_string(const std::string& s) {
    if (s == "obs") return PruneMethod::Obs;
    if (s == "magnitude") return PruneMethod::Magnitude;
    if (s == "wanda") return PruneMethod::Wanda;
    fail(ErrorCode::BadConfig, "unknown method '" + s + "'");
}

std::string prune_method_to_string(PruneMethod m) {
    switch (m) {
    case PruneMethod::Obs: return "obs";
    case PruneMethod::Magnitude: return "magnitude";
    case PruneMethod::Wanda: return "wanda";
    }
    return "?";
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json j{{"spec", spec.describe()},
                     {"num_packages", num_packages},
                     {"weighting", weight_scheme_to_string(weighting)},
                     {"alpha_min", alpha_min},
                     {"alpha_max", alpha_max},
                     {"damp_rel", damp_rel},
                     {"block_size", block_size},
                     {"rrf_k", rrf_k},
                     {"method", prune_method_to_string(method)},
                     {"export", export_mode == ExportMode::Masked ? "masked" : "shrunk"},
                     {"head_hessian", head_hessian == HeadHessianMode::SubmatrixInverse
                                          ? "submatrix-inverse"
                                          : "inverse-submatrix"},
                     {"exclude_blocks", exclude_blocks},
                     {"threads", threads}};
    return j;
}

std::vector<BasicUnit> basic_units(const ToyModel& model) {
    std::vector<BasicUnit> units;
    for (int b = 0; b < model.config.num_blocks; ++b) {
        const std::string p = "b" + std::to_string(b) + ".";
        units.push_back({{p + "attn.q", p + "attn.k", p + "attn.v"}});
        units.push_back({{p + "attn.out_a", p + "attn.out_b"}});
        units.push_back({{p + "ffn_a.up", p + "ffn_b.up"}});
        units.push_back({{p + "ffn_a.down", p + "ffn_b.down"}});
    }
    return units;
}

std::vector<BasicUnit> target_units(const ToyModel& model, const SparsitySpec& spec,
                                    const std::vector<int>& exclude_blocks) {
    std::vector<BasicUnit> units;
    for (int b = 0; b < model.config.num_blocks; ++b) {
        if (std::find(exclude_blocks.begin(), exclude_blocks.end(), b) != exclude_blocks.end()) {
            continue;
        }
        const std::string p = "b" + std::to_string(b) + ".";
        switch (spec.kind) {
        case SparsitySpec::Kind::Unstructured:
        case SparsitySpec::Kind::SemiStructured:
            units.push_back({{p + "attn.q", p + "attn.k", p + "attn.v"}});
            units.push_back({{p + "attn.out_a", p + "attn.out_b"}});
            units.push_back({{p + "ffn_a.up", p + "ffn_b.up"}});
            units.push_back({{p + "ffn_a.down", p + "ffn_b.down"}});
            break;
        case SparsitySpec::Kind::Heads:
            units.push_back({{p + "attn.out_a", p + "attn.out_b"}});
            break;
        case SparsitySpec::Kind::FfnNeurons:
            units.push_back({{p + "ffn_a.down", p + "ffn_b.down"}});
            break;
        }
    }
    return units;
}

std::vector<ModulePackage> partition_into_packages(const std::vector<BasicUnit>& units,
                                                   int num_packages) {
    require(num_packages >= 1, ErrorCode::BadConfig, "num_packages must be >= 1");
    require(num_packages <= static_cast<int>(units.size()), ErrorCode::BadConfig,
            "num_packages " + std::to_string(num_packages) + " exceeds unit count " +
                std::to_string(units.size()));
    std::vector<ModulePackage> packages(static_cast<std::size_t>(num_packages));
    const int base = static_cast<int>(units.size()) / num_packages;
    const int rem = static_cast<int>(units.size()) % num_packages;
    std::size_t next = 0;
    for (int p = 0; p < num_packages; ++p) {
        auto& pkg = packages[static_cast<std::size_t>(p)];
        pkg.index = p;
        const int take = base + (p < rem ? 1 : 0);
        for (int i = 0; i < take; ++i) {
            pkg.units.push_back(units[next++]);
        }
    }
    return packages;
}

std::vector<ModulePackage> partition_into_packages(const ToyModel& model, int num_packages) {
    return partition_into_packages(basic_units(model), num_packages);
}

std::map<LayerId, HessianAccumulator> collect_package_stats(const ToyModel& model,
                                                            const ModulePackage& package,
                                                            const CalibrationSet& calib,
                                                            const TimestepWeights& weights) {
    require(weights.num_steps == model.config.num_steps, ErrorCode::BadConfig,
            "weight schedule length != model num_steps");
    require(!calib.samples.empty(), ErrorCode::BadConfig, "empty calibration set");

    const auto layers = package.layer_ids();
    std::map<LayerId, HessianAccumulator> accs;
    for (const auto& id : layers) {
        const auto& w = model.weight(id); // throws UnknownLayer for bad ids
        accs.emplace(id, HessianAccumulator(id, static_cast<int>(w.cols())));
    }

    ActivationHook hook = [&](const LayerId& id, int t, const Eigen::MatrixXd& x) {
        accs.at(id).accumulate(x, weights.at(t));
    };
    for (const auto& sample : calib.samples) {
        run_trajectory_hooked(model, sample, layers, hook);
    }
    // expectation over calibration samples
    const double inv_n = 1.0 / static_cast<double>(calib.samples.size());
    for (auto& [id, acc] : accs) {
        acc.scale(inv_n);
    }
    return accs;
}

nlohmann::json PipelineReport::to_json() const {
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& l : layers) {
        layers_json.push_back({{"layer", l.layer},
                               {"recon_error", l.recon_error},
                               {"sparsity", l.sparsity},
                               {"rows", l.rows},
                               {"cols", l.cols},
                               {"prune_ms", l.prune_ms}});
    }
    return {{"config", config_echo},
            {"layers", layers_json},
            {"removed_neurons", removed_neurons},
            {"removed_heads", removed_heads},
            {"calibration_passes", calibration_passes},
            {"peak_accumulator_bytes", peak_accumulator_bytes},
            {"collect_ms", collect_ms},
            {"prune_ms", prune_ms},
            {"total_ms", total_ms},
            {"global_sparsity", global_sparsity},
            {"target_layer_sparsity", target_layer_sparsity}};
}

namespace {

struct ElementwiseJob {
    LayerId layer;
    PruneResult result;
    double ms = 0.0;
};

ElementwiseJob prune_elementwise_layer(const LayerId& id, const Eigen::MatrixXd& w,
                                       const HessianAccumulator& acc,
                                       const PipelineConfig& config) {
    const auto start = Clock::now();
    ElementwiseJob job;
    job.layer = id;
    const InverseFactor inv = finalize(acc, config.damp_rel);
    switch (config.method) {
    case PruneMethod::Obs:
        job.result = prune_layer_blocked(w, inv, config.spec, config.block_size);
        break;
    case PruneMethod::Magnitude: {
        job.result.keep_mask = magnitude_mask(w, config.spec);
        job.result.weights = apply_mask(w, job.result.keep_mask);
        job.result.recon_error = layer_recon_error(w, job.result.weights, inv.hessian_damped);
        break;
    }
    case PruneMethod::Wanda: {
        const Eigen::VectorXd norms = (acc.hessian().diagonal() * 0.5).cwiseSqrt();
        job.result.keep_mask = wanda_mask(w, norms, config.spec);
        job.result.weights = apply_mask(w, job.result.keep_mask);
        job.result.recon_error = layer_recon_error(w, job.result.weights, inv.hessian_damped);
        break;
    }
    }
    job.ms = ms_since(start);
    return job;
}

} // namespace

PipelineOutcome run_pipeline(const ToyModel& model, const CalibrationSet& calib,
                             const PipelineConfig& config) {
    require(!calib.samples.empty(), ErrorCode::BadConfig, "calibration set is empty");
    require(config.threads >= 1, ErrorCode::BadConfig, "threads must be >= 1");
    require(config.block_size >= 1, ErrorCode::BadConfig, "block_size must be >= 1");
    if (config.spec.kind == SparsitySpec::Kind::SemiStructured) {
        require(config.spec.nm_prune >= 0 && config.spec.nm_prune < config.spec.nm_group,
                ErrorCode::BadConfig, "N:M spec requires 0 <= N < M");
    } else {
        require(config.spec.ratio > 0.0 && config.spec.ratio < 1.0, ErrorCode::BadConfig,
                "sparsity ratio must lie strictly inside (0,1)");
    }
    require(config.method == PruneMethod::Obs || is_elementwise(config.spec),
            ErrorCode::BadConfig, "magnitude/wanda support element-wise sparsity only");
    for (const auto& s : calib.samples) {
        require(s.latent.rows() == model.config.latent_tokens &&
                    s.latent.cols() == model.config.hidden_dim &&
                    s.cond.rows() == model.config.cond_tokens &&
                    s.cond.cols() == model.config.hidden_dim,
                ErrorCode::ShapeMismatch, "calibration sample does not match model config");
    }

    const auto t_start = Clock::now();
    PipelineOutcome out{model, {}};
    auto& report = out.report;
    report.config_echo = config.to_json();
    report.config_echo["calibration"] = {{"seed", calib.seed},
                                         {"n_samples", calib.samples.size()}};
    report.config_echo["model"] = model.config.to_json();

    const auto units = target_units(out.model, config.spec, config.exclude_blocks);
    require(!units.empty(), ErrorCode::BadConfig, "no target units left to prune");
    const auto packages = partition_into_packages(units, config.num_packages);
    const TimestepWeights weights = timestep_weights(config.weighting, model.config.num_steps,
                                                     config.alpha_min, config.alpha_max);

    Container hessian_dump;
    hessian_dump.metadata = {{"kind", "hessian-snapshot"}, {"config", config.to_json()}};

    for (const auto& pkg : packages) {
        const auto t_collect = Clock::now();
        auto accs = collect_package_stats(out.model, pkg, calib, weights);
        report.calibration_passes += static_cast<int>(calib.samples.size());
        report.collect_ms += ms_since(t_collect);

        std::int64_t acc_bytes = 0;
        for (const auto& [id, acc] : accs) {
            acc_bytes += static_cast<std::int64_t>(acc.dim()) * acc.dim() * 8;
            if (config.hessian_dump_path) {
                hessian_dump.records.push_back(TensorRecord::from_matrix(id + ".H", acc.hessian()));
            }
        }
        report.peak_accumulator_bytes = std::max(report.peak_accumulator_bytes, acc_bytes);

        const auto t_prune = Clock::now();
        if (is_elementwise(config.spec)) {
            const auto layer_list = pkg.layer_ids();
            std::vector<ElementwiseJob> jobs(layer_list.size());
            auto run_one = [&](std::size_t i) {
                const auto& id = layer_list[i];
                try {
                    jobs[i] = prune_elementwise_layer(id, out.model.weight(id), accs.at(id), config);
                } catch (const Error& e) {
                    throw Error(e.code(), id + ": " + e.message());
                }
            };
            if (config.threads > 1) {
                std::vector<std::future<void>> wave;
                for (std::size_t i = 0; i < layer_list.size(); ++i) {
                    wave.push_back(std::async(std::launch::async, run_one, i));
                    if (static_cast<int>(wave.size()) == config.threads ||
                        i + 1 == layer_list.size()) {
                        for (auto& f : wave) {
                            f.get();
                        }
                        wave.clear();
                    }
                }
            } else {
                for (std::size_t i = 0; i < layer_list.size(); ++i) {
                    run_one(i);
                }
            }
            for (auto& job : jobs) {
                out.model.weight(job.layer) = job.result.weights;
                report.layers.push_back({job.layer, job.result.recon_error,
                                         layer_zero_fraction(job.result.weights),
                                         static_cast<int>(job.result.weights.rows()),
                                         static_cast<int>(job.result.weights.cols()), job.ms});
            }
        } else if (config.spec.kind == SparsitySpec::Kind::FfnNeurons) {
            for (const auto& unit : pkg.units) {
                for (const auto& down_id : unit.layers) {
                    const auto t_layer = Clock::now();
                    const std::string prefix = down_id.substr(0, down_id.rfind(".down"));
                    const LayerId up_id = prefix + ".up";
                    try {
                        const InverseFactor inv = finalize(accs.at(down_id), config.damp_rel);
                        auto& w_down = out.model.weight(down_id);
                        auto& w_up = out.model.weight(up_id);
                        auto outcome = prune_ffn(w_down, w_up, inv, config.spec.ratio);
                        std::sort(outcome.removed.begin(), outcome.removed.end());
                        report.removed_neurons[prefix] = outcome.removed;
                        report.layers.push_back({down_id, outcome.recon_error,
                                                 layer_zero_fraction(w_down),
                                                 static_cast<int>(w_down.rows()),
                                                 static_cast<int>(w_down.cols()),
                                                 ms_since(t_layer)});
                    } catch (const Error& e) {
                        throw Error(e.code(), down_id + ": " + e.message());
                    }
                }
            }
        } else { // Heads
            for (const auto& unit : pkg.units) {
                const LayerId& out_a = unit.layers.at(0);
                const LayerId& out_b = unit.layers.at(1);
                const int b = block_of_layer(out_a);
                const auto t_layer = Clock::now();
                try {
                    const InverseFactor inv_a = finalize(accs.at(out_a), config.damp_rel);
                    const InverseFactor inv_b = finalize(accs.at(out_b), config.damp_rel);
                    auto outcome = prune_heads(out.model, b, inv_a, inv_b, config.spec.ratio,
                                               config.rrf_k, config.head_hessian);
                    report.removed_heads["b" + std::to_string(b)] = outcome.removed_heads;
                    const double ms = ms_since(t_layer);
                    const auto& blk = out.model.blocks[static_cast<std::size_t>(b)];
                    report.layers.push_back({out_a, outcome.recon_error_a,
                                             layer_zero_fraction(blk.w_out_a),
                                             static_cast<int>(blk.w_out_a.rows()),
                                             static_cast<int>(blk.w_out_a.cols()), ms / 2});
                    report.layers.push_back({out_b, outcome.recon_error_b,
                                             layer_zero_fraction(blk.w_out_b),
                                             static_cast<int>(blk.w_out_b.rows()),
                                             static_cast<int>(blk.w_out_b.cols()), ms / 2});
                } catch (const Error& e) {
                    throw Error(e.code(), out_a + ": " + e.message());
                }
            }
        }
        report.prune_ms += ms_since(t_prune);
    }

    if (config.hessian_dump_path) {
        save_container(hessian_dump, *config.hessian_dump_path);
    }

    const auto audit = sparsity_report(out.model, config.spec);
    report.global_sparsity = audit.global_fraction;
    report.target_layer_sparsity = audit.target_layer_fraction;
    report.total_ms = ms_since(t_start);
    return out;
}

Container export_pruned_model(const PipelineOutcome& outcome) {
    const auto& config_echo = outcome.report.config_echo;
    const bool shrunk = config_echo.at("export").get<std::string>() == "shrunk";

    ToyModel model = outcome.model;
    nlohmann::json pruning{{"export", shrunk ? "shrunk" : "masked"},
                           {"spec", config_echo.at("spec")},
                           {"method", config_echo.at("method")}};

    if (shrunk) {
        nlohmann::json kept_neurons = nlohmann::json::object();
        for (const auto& [prefix, removed] : outcome.report.removed_neurons) {
            auto& down = model.weight(prefix + ".down");
            auto& up = model.weight(prefix + ".up");
            down = drop_cols(down, removed);
            up = drop_rows(up, removed);
            std::vector<int> kept;
            for (int q = 0; q < up.rows() + static_cast<int>(removed.size()); ++q) {
                if (std::find(removed.begin(), removed.end(), q) == removed.end()) {
                    kept.push_back(q);
                }
            }
            kept_neurons[prefix] = kept;
        }
        nlohmann::json kept_heads = nlohmann::json::object();
        const int d = model.config.head_dim();
        for (const auto& [bprefix, removed] : outcome.report.removed_heads) {
            const int b = std::stoi(bprefix.substr(1));
            auto& blk = model.blocks[static_cast<std::size_t>(b)];
            std::vector<int> slab_rows;
            for (int j : removed) {
                for (int c = 0; c < d; ++c) {
                    slab_rows.push_back(j * d + c);
                }
            }
            blk.w_q = drop_rows(blk.w_q, slab_rows);
            blk.w_k = drop_rows(blk.w_k, slab_rows);
            blk.w_v = drop_rows(blk.w_v, slab_rows);
            blk.w_out_a = drop_cols(blk.w_out_a, slab_rows);
            blk.w_out_b = drop_cols(blk.w_out_b, slab_rows);
            std::vector<int> kept;
            const int heads_before =
                static_cast<int>(blk.w_q.rows() / d) + static_cast<int>(removed.size());
            for (int j = 0; j < heads_before; ++j) {
                if (std::find(removed.begin(), removed.end(), j) == removed.end()) {
                    kept.push_back(j);
                }
            }
            kept_heads[bprefix] = kept;
        }
        pruning["kept_neurons"] = kept_neurons;
        pruning["kept_heads"] = kept_heads;
    }

    Container c = model.to_container();
    c.metadata["pruning"] = pruning;
    c.metadata["pipeline_config"] = config_echo;
    return c;
}

} // namespace obsdiff
