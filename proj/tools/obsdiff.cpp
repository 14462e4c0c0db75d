#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "obsdiff/evaluate.hpp"
#include "obsdiff/scheduler.hpp"

namespace {

using nlohmann::json;

// flag > env > --config file > built-in default
struct JsonOverride {
    std::string key;
    CLI::Option* opt = nullptr;
    std::function<void(const json&)> apply;
};

void apply_config_file(const std::string& path, const std::vector<JsonOverride>& overrides) {
    std::ifstream in(path);
    obsdiff::require(in.good(), obsdiff::ErrorCode::IoError, "cannot open config file " + path);
    json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
    obsdiff::require(!j.is_discarded() && j.is_object(), obsdiff::ErrorCode::BadMetadata,
                     "config file must hold a JSON object");
    for (const auto& o : overrides) {
        if (o.opt->count() == 0 && j.contains(o.key)) {
            o.apply(j.at(o.key));
        }
    }
}

std::vector<int> resolve_exclude_blocks(const std::string& csv, int num_blocks) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos <= csv.size() && !csv.empty()) {
        const auto comma = csv.find(',', pos);
        const std::string tok = csv.substr(pos, comma == std::string::npos ? comma : comma - pos);
        if (tok == "first") {
            out.push_back(0);
        } else if (tok == "last") {
            out.push_back(num_blocks - 1);
        } else if (!tok.empty()) {
            try {
                out.push_back(std::stoi(tok));
            } catch (...) {
                obsdiff::fail(obsdiff::ErrorCode::BadConfig,
                              "bad --exclude-blocks token '" + tok + "'");
            }
        }
        if (comma == std::string::npos) {
            break;
        }
        pos = comma + 1;
    }
    for (int b : out) {
        obsdiff::require(b >= 0 && b < num_blocks, obsdiff::ErrorCode::BadConfig,
                         "excluded block " + std::to_string(b) + " out of range");
    }
    return out;
}

void emit_json(const json& j, const std::string& path) {
    if (path.empty() || path == "-") {
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::ofstream out(path);
    obsdiff::require(out.good(), obsdiff::ErrorCode::IoError, "cannot open " + path);
    out << j.dump(2) << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"one-shot second-order pruning for a toy joint-attention diffusion model"};
    app.require_subcommand(1);

    // ---- gen-model ----
    auto* gen_model = app.add_subcommand("gen-model", "initialize a seeded model container");
    obsdiff::ModelConfig mc;
    std::string gm_out;
    gen_model->add_option("--out", gm_out, "output .obsd path")->required();
    gen_model->add_option("--hidden-dim", mc.hidden_dim, "model width D");
    gen_model->add_option("--heads", mc.num_heads, "attention heads");
    gen_model->add_option("--ffn-dim", mc.ffn_dim, "FFN hidden width");
    gen_model->add_option("--blocks", mc.num_blocks, "transformer blocks");
    gen_model->add_option("--latent-tokens", mc.latent_tokens, "latent stream tokens");
    gen_model->add_option("--cond-tokens", mc.cond_tokens, "condition stream tokens");
    gen_model->add_option("--steps", mc.num_steps, "denoising steps T");
    gen_model->add_option("--seed", mc.seed, "init seed")->envname("OBSD_SEED");

    // ---- gen-calib ----
    auto* gen_calib = app.add_subcommand("gen-calib", "generate a seeded calibration set");
    std::string gc_out, gc_model;
    std::uint64_t gc_seed = 1234;
    int gc_samples = 100;
    obsdiff::ModelConfig gc_config;
    gen_calib->add_option("--out", gc_out, "output .obsd path")->required();
    gen_calib->add_option("--model", gc_model, "model container to copy the config from");
    gen_calib->add_option("--samples", gc_samples, "number of samples");
    gen_calib->add_option("--seed", gc_seed, "calibration seed")->envname("OBSD_SEED");
    gen_calib->add_option("--hidden-dim", gc_config.hidden_dim, "model width (no --model)");
    gen_calib->add_option("--latent-tokens", gc_config.latent_tokens, "latent tokens (no --model)");
    gen_calib->add_option("--cond-tokens", gc_config.cond_tokens, "condition tokens (no --model)");

    // ---- prune ----
    auto* prune = app.add_subcommand("prune", "run the pruning pipeline");
    std::string pr_model, pr_calib, pr_out, pr_report, pr_config_file, pr_dump_hessians;
    std::string pr_pattern = "unstructured", pr_weighting = "log-decrease", pr_method = "obs";
    std::string pr_export = "masked", pr_head_hessian = "submatrix-inverse", pr_exclude;
    double pr_sparsity = 0.5, pr_alpha_min = 0.1, pr_alpha_max = 1.0, pr_damp = 0.01;
    int pr_packages = 4, pr_block_size = 32, pr_rrf_k = 60, pr_threads = 1;
    prune->add_option("--model", pr_model, "dense model container")->required();
    prune->add_option("--calib", pr_calib, "calibration container")->required();
    prune->add_option("--out", pr_out, "pruned model output path")->required();
    prune->add_option("--report", pr_report, "report JSON path ('-' = stdout, default)");
    prune->add_option("--config", pr_config_file, "JSON config file; flags win over file");
    auto* o_sparsity = prune->add_option("--sparsity", pr_sparsity, "target ratio");
    auto* o_pattern =
        prune->add_option("--pattern", pr_pattern, "unstructured | N:M | ffn-neurons | heads");
    auto* o_packages = prune->add_option("--packages", pr_packages, "module packages");
    auto* o_weighting = prune->add_option(
        "--weighting", pr_weighting,
        "uniform | linear-increase | linear-decrease | log-increase | log-decrease");
    auto* o_alpha_min = prune->add_option("--alpha-min", pr_alpha_min, "schedule floor");
    auto* o_alpha_max = prune->add_option("--alpha-max", pr_alpha_max, "schedule ceiling");
    auto* o_damp = prune->add_option("--damp", pr_damp, "relative damping");
    auto* o_block = prune->add_option("--block-size", pr_block_size, "pruning block size");
    auto* o_rrf = prune->add_option("--rrf-k", pr_rrf_k, "rank-fusion constant");
    auto* o_method = prune->add_option("--method", pr_method, "obs | wanda | magnitude");
    auto* o_export = prune->add_option("--export", pr_export, "masked | shrunk");
    auto* o_head_h = prune->add_option("--head-hessian", pr_head_hessian,
                                       "submatrix-inverse | inverse-submatrix");
    auto* o_exclude = prune->add_option("--exclude-blocks", pr_exclude,
                                        "comma list of block ids, 'first', 'last'");
    auto* o_threads = prune->add_option("--threads", pr_threads, "worker thread cap");
    prune->add_option("--dump-hessians", pr_dump_hessians, "write Hessian snapshots to this path");

    const std::vector<JsonOverride> prune_overrides = {
        {"sparsity", o_sparsity, [&](const json& v) { pr_sparsity = v.get<double>(); }},
        {"pattern", o_pattern, [&](const json& v) { pr_pattern = v.get<std::string>(); }},
        {"packages", o_packages, [&](const json& v) { pr_packages = v.get<int>(); }},
        {"weighting", o_weighting, [&](const json& v) { pr_weighting = v.get<std::string>(); }},
        {"alpha-min", o_alpha_min, [&](const json& v) { pr_alpha_min = v.get<double>(); }},
        {"alpha-max", o_alpha_max, [&](const json& v) { pr_alpha_max = v.get<double>(); }},
        {"damp", o_damp, [&](const json& v) { pr_damp = v.get<double>(); }},
        {"block-size", o_block, [&](const json& v) { pr_block_size = v.get<int>(); }},
        {"rrf-k", o_rrf, [&](const json& v) { pr_rrf_k = v.get<int>(); }},
        {"method", o_method, [&](const json& v) { pr_method = v.get<std::string>(); }},
        {"export", o_export, [&](const json& v) { pr_export = v.get<std::string>(); }},
        {"head-hessian", o_head_h, [&](const json& v) { pr_head_hessian = v.get<std::string>(); }},
        {"exclude-blocks", o_exclude, [&](const json& v) { pr_exclude = v.get<std::string>(); }},
        {"threads", o_threads, [&](const json& v) { pr_threads = v.get<int>(); }},
    };

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "compare a pruned model against its dense source");
    std::string ev_dense, ev_pruned, ev_report, ev_csv, ev_weighting = "log-decrease";
    std::uint64_t ev_seed = 424242; // fixed default, disjoint from the gen-calib default
    int ev_samples = 16;
    eval->add_option("--dense", ev_dense, "dense model container")->required();
    eval->add_option("--pruned", ev_pruned, "pruned model container")->required();
    eval->add_option("--samples", ev_samples, "evaluation samples");
    eval->add_option("--seed", ev_seed, "evaluation seed (keep disjoint from calibration)");
    eval->add_option("--weighting", ev_weighting, "scheme for the recon-error statistic");
    eval->add_option("--report", ev_report, "report JSON path ('-' = stdout, default)");
    eval->add_option("--csv", ev_csv, "optional per-sample divergence CSV");

    // ---- inspect ----
    auto* inspect = app.add_subcommand("inspect", "sparsity audit of a model container");
    std::string in_model, in_pattern;
    double in_sparsity = 0.5;
    inspect->add_option("--model", in_model, "model container")->required();
    inspect->add_option("--pattern", in_pattern, "audit pattern, e.g. 2:4");
    inspect->add_option("--sparsity", in_sparsity, "ratio for ratio-based patterns");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (gen_model->parsed()) {
            const auto model = obsdiff::init_model(mc);
            obsdiff::save_container(model.to_container(), gm_out);
            std::cout << "wrote " << gm_out << " (" << model.parameter_count() << " parameters)\n";
            return 0;
        }

        if (gen_calib->parsed()) {
            obsdiff::ModelConfig config = gc_config;
            if (!gc_model.empty()) {
                config = obsdiff::ToyModel::from_container(obsdiff::load_container(gc_model)).config;
            }
            const auto set = obsdiff::gen_calibration(config, gc_seed, gc_samples);
            obsdiff::save_container(set.to_container(config), gc_out);
            std::cout << "wrote " << gc_out << " (" << set.samples.size() << " samples)\n";
            return 0;
        }

        if (prune->parsed()) {
            if (!pr_config_file.empty()) {
                apply_config_file(pr_config_file, prune_overrides);
            }
            auto model = obsdiff::ToyModel::from_container(obsdiff::load_container(pr_model));
            auto calib = obsdiff::CalibrationSet::from_container(obsdiff::load_container(pr_calib));

            obsdiff::PipelineConfig config;
            config.spec = obsdiff::SparsitySpec::parse(pr_pattern, pr_sparsity);
            config.num_packages = pr_packages;
            config.weighting = obsdiff::weight_scheme_from_string(pr_weighting);
            config.alpha_min = pr_alpha_min;
            config.alpha_max = pr_alpha_max;
            config.damp_rel = pr_damp;
            config.block_size = pr_block_size;
            config.rrf_k = pr_rrf_k;
            config.method = obsdiff::prune_method_from_string(pr_method);
            if (pr_export == "masked") {
                config.export_mode = obsdiff::ExportMode::Masked;
            } else if (pr_export == "shrunk") {
                config.export_mode = obsdiff::ExportMode::Shrunk;
            } else {
                obsdiff::fail(obsdiff::ErrorCode::BadConfig, "unknown export mode " + pr_export);
            }
            if (pr_head_hessian == "submatrix-inverse") {
                config.head_hessian = obsdiff::HeadHessianMode::SubmatrixInverse;
            } else if (pr_head_hessian == "inverse-submatrix") {
                config.head_hessian = obsdiff::HeadHessianMode::InverseSubmatrix;
            } else {
                obsdiff::fail(obsdiff::ErrorCode::BadConfig,
                              "unknown head-hessian mode " + pr_head_hessian);
            }
            config.exclude_blocks = resolve_exclude_blocks(pr_exclude, model.config.num_blocks);
            config.threads = pr_threads;
            if (!pr_dump_hessians.empty()) {
                config.hessian_dump_path = pr_dump_hessians;
            }

            const auto outcome = obsdiff::run_pipeline(model, calib, config);
            obsdiff::save_container(obsdiff::export_pruned_model(outcome), pr_out);
            emit_json(outcome.report.to_json(), pr_report);
            return 0;
        }

        if (eval->parsed()) {
            const auto dense = obsdiff::ToyModel::from_container(obsdiff::load_container(ev_dense));
            const auto pruned =
                obsdiff::ToyModel::from_container(obsdiff::load_container(ev_pruned));
            const auto eval_set = obsdiff::gen_calibration(dense.config, ev_seed, ev_samples);
            const auto stats = obsdiff::trajectory_divergence(dense, pruned, eval_set);

            // recon errors under dense-model statistics gathered on the eval set
            const auto scheme = obsdiff::weight_scheme_from_string(ev_weighting);
            const auto weights = obsdiff::timestep_weights(scheme, dense.config.num_steps);
            obsdiff::ModulePackage all;
            all.units = obsdiff::basic_units(dense);
            all.index = 0;
            const auto accs = obsdiff::collect_package_stats(dense, all, eval_set, weights);

            json recon = json::object();
            for (const auto& id : dense.layer_ids()) {
                const auto& w = dense.weight(id);
                const auto& w_hat = pruned.weight(id);
                if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols()) {
                    recon[id] = nullptr; // shrunken export, shapes no longer comparable
                    continue;
                }
                const auto inv = obsdiff::finalize(accs.at(id), 0.01);
                recon[id] = obsdiff::layer_recon_error(w, w_hat, inv.hessian_damped);
            }

            const auto audit = obsdiff::sparsity_report(pruned);
            json report{{"divergence",
                         {{"mean", stats.mean}, {"max", stats.max}, {"per_sample", stats.per_sample}}},
                        {"per_layer_recon_error", recon},
                        {"sparsity", audit.to_json()},
                        {"eval_seed", ev_seed},
                        {"eval_samples", ev_samples},
                        {"dense_config", dense.config.to_json()}};
            emit_json(report, ev_report);
            if (!ev_csv.empty()) {
                std::ofstream csv(ev_csv);
                obsdiff::require(csv.good(), obsdiff::ErrorCode::IoError, "cannot open " + ev_csv);
                csv << "sample_id,mse\n";
                for (std::size_t i = 0; i < stats.per_sample.size(); ++i) {
                    csv << i << "," << stats.per_sample[i] << "\n";
                }
            }
            return 0;
        }

        if (inspect->parsed()) {
            const auto model = obsdiff::ToyModel::from_container(obsdiff::load_container(in_model));
            std::optional<obsdiff::SparsitySpec> spec;
            if (!in_pattern.empty()) {
                spec = obsdiff::SparsitySpec::parse(in_pattern, in_sparsity);
            }
            emit_json(obsdiff::sparsity_report(model, spec).to_json(), "");
            return 0;
        }
    } catch (const obsdiff::Error& e) {
        std::cerr << nlohmann::json{
                         {"error",
                          {{"code", std::string(obsdiff::error_code_name(e.code()))},
                           {"message", e.message()}}}}
                         .dump()
                  << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", {{"code", "Internal"}, {"message", e.what()}}}}.dump()
                  << "\n";
        return 1;
    }
    return 0;
}
