#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obsdiff/tensor_store.hpp"

namespace obsdiff {

// A deterministic joint-attention denoiser at desk scale. Two token streams
// (latent A, condition B) share Q/K/V projections over their concatenation;
// each stream has its own attention output projection and FFN. Layer inputs
// are captured feature-major: an activation matrix is (in_features x tokens).

struct ModelConfig {
    int hidden_dim = 32;   // D
    int num_heads = 4;     // heads; head_dim = D / heads
    int ffn_dim = 128;     // F
    int num_blocks = 2;
    int latent_tokens = 8;
    int cond_tokens = 4;
    int num_steps = 8;     // T
    std::uint64_t seed = 0;

    int head_dim() const { return hidden_dim / num_heads; }
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Weight convention: a linear layer is y = W x with W (out_features x
// in_features); rows are pruned independently, columns index the layer input.
struct BlockWeights {
    Eigen::MatrixXd w_q, w_k, w_v;     // (heads*d) x D
    Eigen::MatrixXd w_out_a, w_out_b;  // D x (heads*d)
    Eigen::MatrixXd w_up_a, w_up_b;    // F x D
    Eigen::MatrixXd w_down_a, w_down_b; // D x F
    Eigen::VectorXd ln1_a, ln1_b, ln2_a, ln2_b; // per-channel gains, length D
};

using LayerId = std::string;

struct ToyModel {
    ModelConfig config;
    std::vector<BlockWeights> blocks;
    Eigen::MatrixXd t_emb; // T x D, row t-1 is added to the latent stream at step t

    // Prunable linear layers in forward topological order:
    // b{i}.attn.{q,k,v}, b{i}.attn.out_{a,b}, b{i}.ffn_{a,b}.{up,down}
    std::vector<LayerId> layer_ids() const;
    Eigen::MatrixXd& weight(const LayerId& id);
    const Eigen::MatrixXd& weight(const LayerId& id) const;
    bool has_layer(const LayerId& id) const;

    std::int64_t parameter_count() const;

    // Heads/neurons surviving in block b (shrunken models may differ from config).
    int heads_in_block(int b) const;

    Container to_container() const;
    static ToyModel from_container(const Container& c);
};

struct CalibrationSample {
    Eigen::MatrixXd latent; // latent_tokens x D, seeded Gaussian noise
    Eigen::MatrixXd cond;   // cond_tokens x D, seeded Gaussian "prompt"
    std::uint64_t sample_id = 0;
};

struct CalibrationSet {
    std::uint64_t seed = 0;
    std::vector<CalibrationSample> samples;

    Container to_container(const ModelConfig& config) const;
    static CalibrationSet from_container(const Container& c);
};

ToyModel init_model(const ModelConfig& config);

// One transformer pass plus the deterministic update x <- x - (1/T) * delta,
// where delta is the residual-stream change of the latent tokens. t is 1-based.
Eigen::MatrixXd denoise_step(const ToyModel& model, const Eigen::MatrixXd& state,
                             const Eigen::MatrixXd& cond, int t);

// Activation hook: called once per (captured layer, step) with the exact input
// matrix (in_features x tokens) the layer consumed.
using ActivationHook =
    std::function<void(const LayerId& layer, int t, const Eigen::MatrixXd& input)>;

struct TrajectoryCapture {
    // per layer: T matrices, index t-1
    std::map<LayerId, std::vector<Eigen::MatrixXd>> activations;
};

Eigen::MatrixXd run_trajectory(const ToyModel& model, const CalibrationSample& sample);
Eigen::MatrixXd run_trajectory(const ToyModel& model, const CalibrationSample& sample,
                               const std::vector<LayerId>& capture, TrajectoryCapture& out);
Eigen::MatrixXd run_trajectory_hooked(const ToyModel& model, const CalibrationSample& sample,
                                      const std::vector<LayerId>& layers,
                                      const ActivationHook& hook);

CalibrationSet gen_calibration(const ModelConfig& config, std::uint64_t seed, int n_samples);

} // namespace obsdiff
