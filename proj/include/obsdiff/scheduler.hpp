#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "obsdiff/baselines.hpp"
#include "obsdiff/evaluate.hpp"
#include "obsdiff/hessian.hpp"
#include "obsdiff/obs_structured.hpp"
#include "obsdiff/obs_unstructured.hpp"
#include "obsdiff/toy_model.hpp"

namespace obsdiff {

// Layers whose inputs are mutually independent within one forward pass; they
// share a calibration trajectory and can be pruned side by side.
struct BasicUnit {
    std::vector<LayerId> layers;
};

struct ModulePackage {
    int index = 0;
    std::vector<BasicUnit> units;

    std::vector<LayerId> layer_ids() const;
};

enum class PruneMethod { Obs, Magnitude, Wanda };
enum class ExportMode { Masked, Shrunk };

PruneMethod prune_method_from_string(const std::string& s);
std::string prune_method_to_string(PruneMethod m);

struct PipelineConfig {
    SparsitySpec spec = SparsitySpec::unstructured(0.5);
    int num_packages = 4;
    WeightScheme weighting = WeightScheme::LogDecrease;
    double alpha_min = 0.1;
    double alpha_max = 1.0;
    double damp_rel = 0.01;
    int block_size = 32;
    int rrf_k = 60;
    PruneMethod method = PruneMethod::Obs;
    ExportMode export_mode = ExportMode::Masked;
    HeadHessianMode head_hessian = HeadHessianMode::SubmatrixInverse;
    std::vector<int> exclude_blocks; // block indices left dense
    int threads = 1;
    std::optional<std::string> hessian_dump_path; // debug .obsd snapshots

    nlohmann::json to_json() const;
};

// Per-block target units for a spec: all four units for element-wise sparsity,
// the output-projection unit for head pruning, the down-projection unit for
// neuron pruning.
std::vector<BasicUnit> basic_units(const ToyModel& model);
std::vector<BasicUnit> target_units(const ToyModel& model, const SparsitySpec& spec,
                                    const std::vector<int>& exclude_blocks);

// Contiguous topological split into near-equal groups; earlier groups take the
// remainder.
std::vector<ModulePackage> partition_into_packages(const std::vector<BasicUnit>& units,
                                                   int num_packages);
std::vector<ModulePackage> partition_into_packages(const ToyModel& model, int num_packages);

// One full trajectory per calibration sample over the current model state;
// hooks feed every captured layer's accumulator at every step. H is scaled by
// 1/N afterwards so it realizes the per-sample expectation.
std::map<LayerId, HessianAccumulator> collect_package_stats(const ToyModel& model,
                                                            const ModulePackage& package,
                                                            const CalibrationSet& calib,
                                                            const TimestepWeights& weights);

struct LayerReport {
    std::string layer;
    double recon_error = 0.0;
    double sparsity = 0.0;
    int rows = 0;
    int cols = 0;
    double prune_ms = 0.0;
};

struct PipelineReport {
    nlohmann::json config_echo;
    std::vector<LayerReport> layers;
    std::map<std::string, std::vector<int>> removed_neurons; // ffn prefix -> neuron ids
    std::map<std::string, std::vector<int>> removed_heads;   // block prefix -> head ids
    int calibration_passes = 0;
    std::int64_t peak_accumulator_bytes = 0;
    double collect_ms = 0.0;
    double prune_ms = 0.0;
    double total_ms = 0.0;
    double global_sparsity = 0.0;
    double target_layer_sparsity = 0.0;

    nlohmann::json to_json() const;
};

struct PipelineOutcome {
    ToyModel model;
    PipelineReport report;
};

// Sequential package sweep: collect stats on the current (partially pruned)
// weights, finalize, prune every layer of the package, write back, move on.
PipelineOutcome run_pipeline(const ToyModel& model, const CalibrationSet& calib,
                             const PipelineConfig& config);

// Container for the pruned model, honoring the export mode. Shrunk exports
// drop dead neuron/head slices and put the kept-index maps into the metadata.
Container export_pruned_model(const PipelineOutcome& outcome);

} // namespace obsdiff
