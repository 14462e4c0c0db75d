#include "obsdiff/toy_model.hpp"

#include <cmath>

#include "obsdiff/rng.hpp"

namespace obsdiff {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;

void fill_gaussian(Eigen::MatrixXd& m, Rng& rng, double std) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            m(i, j) = std * rng.gaussian();
        }
    }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

// Per-token layer norm with gain, applied to each row of (tokens x D).
Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain) {
    Eigen::MatrixXd out(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).mean();
        const double var = (x.row(i).array() - mean).square().sum() / n;
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        out.row(i) = ((x.row(i).array() - mean) * inv).matrix().cwiseProduct(gain.transpose());
    }
    return out;
}

Eigen::MatrixXd softmax_rows(Eigen::MatrixXd scores) {
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        const double m = scores.row(i).maxCoeff();
        scores.row(i) = (scores.row(i).array() - m).exp();
        scores.row(i) /= scores.row(i).sum();
    }
    return scores;
}

struct HookCtx {
    const std::vector<LayerId>* layers = nullptr;
    const ActivationHook* fn = nullptr;

    bool wants(const LayerId& id) const {
        if (fn == nullptr) {
            return false;
        }
        for (const auto& l : *layers) {
            if (l == id) {
                return true;
            }
        }
        return false;
    }

    // Layer inputs are captured feature-major: (in_features x tokens).
    void emit(const LayerId& id, int t, const Eigen::MatrixXd& tokens_by_features) const {
        if (wants(id)) {
            (*fn)(id, t, tokens_by_features.transpose());
        }
    }
};

// Residual-stream delta of the latent tokens for one transformer pass.
// The step update is x <- x - (1/T) * delta, so an all-zero model is the
// identity map on the state.
Eigen::MatrixXd transformer_delta(const ToyModel& model, const Eigen::MatrixXd& state,
                                  const Eigen::MatrixXd& cond, int t, const HookCtx& hooks) {
    const auto& cfg = model.config;
    require(t >= 1 && t <= cfg.num_steps, ErrorCode::BadStep,
            "step " + std::to_string(t) + " outside [1, " + std::to_string(cfg.num_steps) + "]");
    require(state.rows() == cfg.latent_tokens && state.cols() == cfg.hidden_dim,
            ErrorCode::ShapeMismatch, "latent state shape");
    require(cond.rows() == cfg.cond_tokens && cond.cols() == cfg.hidden_dim,
            ErrorCode::ShapeMismatch, "condition shape");

    const int d = cfg.head_dim();
    const int n_lat = cfg.latent_tokens;
    const int n_cond = cfg.cond_tokens;
    const int n_tot = n_lat + n_cond;

    Eigen::MatrixXd h_lat = state.rowwise() + model.t_emb.row(t - 1);
    Eigen::MatrixXd h_cond = cond;
    const Eigen::MatrixXd h0 = h_lat;

    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        const auto& blk = model.blocks[b];
        const std::string prefix = "b" + std::to_string(b) + ".";
        const int hd = static_cast<int>(blk.w_q.rows()); // heads_in_block * d

        // joint attention over the concatenated streams
        Eigen::MatrixXd x(n_tot, cfg.hidden_dim);
        x.topRows(n_lat) = layer_norm(h_lat, blk.ln1_a);
        x.bottomRows(n_cond) = layer_norm(h_cond, blk.ln1_b);
        hooks.emit(prefix + "attn.q", t, x);
        hooks.emit(prefix + "attn.k", t, x);
        hooks.emit(prefix + "attn.v", t, x);

        const Eigen::MatrixXd q = x * blk.w_q.transpose();
        const Eigen::MatrixXd k = x * blk.w_k.transpose();
        const Eigen::MatrixXd v = x * blk.w_v.transpose();

        Eigen::MatrixXd ctx(n_tot, hd);
        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        for (int head = 0; head * d < hd; ++head) {
            const auto qh = q.middleCols(head * d, d);
            const auto kh = k.middleCols(head * d, d);
            const auto vh = v.middleCols(head * d, d);
            const Eigen::MatrixXd attn = softmax_rows(qh * kh.transpose() * scale);
            ctx.middleCols(head * d, d) = attn * vh;
        }

        const Eigen::MatrixXd ctx_lat = ctx.topRows(n_lat);
        const Eigen::MatrixXd ctx_cond = ctx.bottomRows(n_cond);
        hooks.emit(prefix + "attn.out_a", t, ctx_lat);
        hooks.emit(prefix + "attn.out_b", t, ctx_cond);
        h_lat += ctx_lat * blk.w_out_a.transpose();
        h_cond += ctx_cond * blk.w_out_b.transpose();

        // per-stream FFN
        const Eigen::MatrixXd f_lat = layer_norm(h_lat, blk.ln2_a);
        hooks.emit(prefix + "ffn_a.up", t, f_lat);
        Eigen::MatrixXd u_lat = (f_lat * blk.w_up_a.transpose()).unaryExpr(&gelu);
        hooks.emit(prefix + "ffn_a.down", t, u_lat);
        h_lat += u_lat * blk.w_down_a.transpose();

        const Eigen::MatrixXd f_cond = layer_norm(h_cond, blk.ln2_b);
        hooks.emit(prefix + "ffn_b.up", t, f_cond);
        Eigen::MatrixXd u_cond = (f_cond * blk.w_up_b.transpose()).unaryExpr(&gelu);
        hooks.emit(prefix + "ffn_b.down", t, u_cond);
        h_cond += u_cond * blk.w_down_b.transpose();
    }

    return h_lat - h0;
}

} // namespace

void ModelConfig::validate() const {
    require(hidden_dim > 0 && num_heads > 0 && ffn_dim > 0 && num_blocks > 0,
            ErrorCode::BadConfig, "dimensions must be positive");
    require(hidden_dim % num_heads == 0, ErrorCode::BadConfig,
            "hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                std::to_string(num_heads));
    require(latent_tokens >= 1 && cond_tokens >= 1, ErrorCode::BadConfig,
            "each stream needs at least one token");
    require(num_steps >= 1, ErrorCode::BadConfig, "num_steps must be >= 1");
}

nlohmann::json ModelConfig::to_json() const {
    return {
        {"hidden_dim", hidden_dim},   {"num_heads", num_heads},
        {"ffn_dim", ffn_dim},         {"num_blocks", num_blocks},
        {"latent_tokens", latent_tokens}, {"cond_tokens", cond_tokens},
        {"num_steps", num_steps},     {"seed", seed},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.num_blocks = j.at("num_blocks").get<int>();
    c.latent_tokens = j.at("latent_tokens").get<int>();
    c.cond_tokens = j.at("cond_tokens").get<int>();
    c.num_steps = j.at("num_steps").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

std::vector<LayerId> ToyModel::layer_ids() const {
    std::vector<LayerId> ids;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string p = "b" + std::to_string(b) + ".";
        for (const char* s : {"attn.q", "attn.k", "attn.v", "attn.out_a", "attn.out_b",
                              "ffn_a.up", "ffn_b.up", "ffn_a.down", "ffn_b.down"}) {
            ids.push_back(p + s);
        }
    }
    return ids;
}

namespace {

Eigen::MatrixXd* lookup_weight(ToyModel& model, const LayerId& id) {
    const auto dot = id.find('.');
    if (dot == std::string::npos || id.size() < 2 || id[0] != 'b') {
        return nullptr;
    }
    int b = -1;
    try {
        b = std::stoi(id.substr(1, dot - 1));
    } catch (...) {
        return nullptr;
    }
    if (b < 0 || b >= static_cast<int>(model.blocks.size())) {
        return nullptr;
    }
    auto& blk = model.blocks[static_cast<std::size_t>(b)];
    const std::string rest = id.substr(dot + 1);
    if (rest == "attn.q") return &blk.w_q;
    if (rest == "attn.k") return &blk.w_k;
    if (rest == "attn.v") return &blk.w_v;
    if (rest == "attn.out_a") return &blk.w_out_a;
    if (rest == "attn.out_b") return &blk.w_out_b;
    if (rest == "ffn_a.up") return &blk.w_up_a;
    if (rest == "ffn_a.down") return &blk.w_down_a;
    if (rest == "ffn_b.up") return &blk.w_up_b;
    if (rest == "ffn_b.down") return &blk.w_down_b;
    return nullptr;
}

} // namespace

Eigen::MatrixXd& ToyModel::weight(const LayerId& id) {
    auto* w = lookup_weight(*this, id);
    require(w != nullptr, ErrorCode::UnknownLayer, id);
    return *w;
}

const Eigen::MatrixXd& ToyModel::weight(const LayerId& id) const {
    return const_cast<ToyModel&>(*this).weight(id);
}

bool ToyModel::has_layer(const LayerId& id) const {
    return lookup_weight(const_cast<ToyModel&>(*this), id) != nullptr;
}

std::int64_t ToyModel::parameter_count() const {
    std::int64_t n = t_emb.size();
    for (const auto& blk : blocks) {
        n += blk.w_q.size() + blk.w_k.size() + blk.w_v.size();
        n += blk.w_out_a.size() + blk.w_out_b.size();
        n += blk.w_up_a.size() + blk.w_down_a.size();
        n += blk.w_up_b.size() + blk.w_down_b.size();
        n += blk.ln1_a.size() + blk.ln1_b.size() + blk.ln2_a.size() + blk.ln2_b.size();
    }
    return n;
}

int ToyModel::heads_in_block(int b) const {
    return static_cast<int>(blocks[static_cast<std::size_t>(b)].w_q.rows()) / config.head_dim();
}

ToyModel init_model(const ModelConfig& config) {
    config.validate();
    ToyModel m;
    m.config = config;
    m.blocks.resize(static_cast<std::size_t>(config.num_blocks));

    Rng rng(config.seed);
    const int D = config.hidden_dim;
    const int F = config.ffn_dim;
    // residual-writing projections get a smaller init so depth does not blow
    // up the residual stream
    const double res_std = kInitStd / std::sqrt(static_cast<double>(config.num_blocks));

    for (auto& blk : m.blocks) {
        blk.w_q.resize(D, D);
        blk.w_k.resize(D, D);
        blk.w_v.resize(D, D);
        blk.w_out_a.resize(D, D);
        blk.w_out_b.resize(D, D);
        blk.w_up_a.resize(F, D);
        blk.w_down_a.resize(D, F);
        blk.w_up_b.resize(F, D);
        blk.w_down_b.resize(D, F);
        fill_gaussian(blk.w_q, rng, kInitStd);
        fill_gaussian(blk.w_k, rng, kInitStd);
        fill_gaussian(blk.w_v, rng, kInitStd);
        fill_gaussian(blk.w_out_a, rng, res_std);
        fill_gaussian(blk.w_out_b, rng, res_std);
        fill_gaussian(blk.w_up_a, rng, kInitStd);
        fill_gaussian(blk.w_down_a, rng, res_std);
        fill_gaussian(blk.w_up_b, rng, kInitStd);
        fill_gaussian(blk.w_down_b, rng, res_std);
        blk.ln1_a = Eigen::VectorXd::Ones(D);
        blk.ln1_b = Eigen::VectorXd::Ones(D);
        blk.ln2_a = Eigen::VectorXd::Ones(D);
        blk.ln2_b = Eigen::VectorXd::Ones(D);
    }
    m.t_emb.resize(config.num_steps, D);
    fill_gaussian(m.t_emb, rng, kInitStd);
    return m;
}

Eigen::MatrixXd denoise_step(const ToyModel& model, const Eigen::MatrixXd& state,
                             const Eigen::MatrixXd& cond, int t) {
    const Eigen::MatrixXd delta = transformer_delta(model, state, cond, t, HookCtx{});
    const double gamma = 1.0 / static_cast<double>(model.config.num_steps);
    return state - gamma * delta;
}

Eigen::MatrixXd run_trajectory(const ToyModel& model, const CalibrationSample& sample) {
    return run_trajectory_hooked(model, sample, {}, nullptr);
}

Eigen::MatrixXd run_trajectory(const ToyModel& model, const CalibrationSample& sample,
                               const std::vector<LayerId>& capture, TrajectoryCapture& out) {
    for (const auto& id : capture) {
        out.activations[id].reserve(static_cast<std::size_t>(model.config.num_steps));
    }
    ActivationHook hook = [&](const LayerId& id, int /*t*/, const Eigen::MatrixXd& input) {
        out.activations[id].push_back(input);
    };
    return run_trajectory_hooked(model, sample, capture, hook);
}

Eigen::MatrixXd run_trajectory_hooked(const ToyModel& model, const CalibrationSample& sample,
                                      const std::vector<LayerId>& layers,
                                      const ActivationHook& hook) {
    for (const auto& id : layers) {
        require(model.has_layer(id), ErrorCode::UnknownLayer, id);
    }
    HookCtx ctx;
    if (hook) {
        ctx.layers = &layers;
        ctx.fn = &hook;
    }
    const double gamma = 1.0 / static_cast<double>(model.config.num_steps);
    Eigen::MatrixXd state = sample.latent;
    for (int t = 1; t <= model.config.num_steps; ++t) {
        const Eigen::MatrixXd delta = transformer_delta(model, state, sample.cond, t, ctx);
        state -= gamma * delta;
    }
    return state;
}

CalibrationSet gen_calibration(const ModelConfig& config, std::uint64_t seed, int n_samples) {
    config.validate();
    require(n_samples >= 1, ErrorCode::BadConfig, "n_samples must be >= 1");
    CalibrationSet set;
    set.seed = seed;
    set.samples.resize(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
        Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(i)));
        auto& s = set.samples[static_cast<std::size_t>(i)];
        s.sample_id = static_cast<std::uint64_t>(i);
        s.latent.resize(config.latent_tokens, config.hidden_dim);
        s.cond.resize(config.cond_tokens, config.hidden_dim);
        fill_gaussian(s.latent, rng, 1.0);
        fill_gaussian(s.cond, rng, 1.0);
    }
    return set;
}

Container ToyModel::to_container() const {
    Container c;
    c.metadata = {{"kind", "model"}, {"config", config.to_json()}};
    for (const auto& id : layer_ids()) {
        c.records.push_back(TensorRecord::from_matrix(id, weight(id)));
    }
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string p = "b" + std::to_string(b) + ".";
        c.records.push_back(TensorRecord::from_vector(p + "ln1_a", blocks[b].ln1_a));
        c.records.push_back(TensorRecord::from_vector(p + "ln1_b", blocks[b].ln1_b));
        c.records.push_back(TensorRecord::from_vector(p + "ln2_a", blocks[b].ln2_a));
        c.records.push_back(TensorRecord::from_vector(p + "ln2_b", blocks[b].ln2_b));
    }
    c.records.push_back(TensorRecord::from_matrix("t_emb", t_emb));
    return c;
}

ToyModel ToyModel::from_container(const Container& c) {
    require(c.metadata.contains("config"), ErrorCode::BadMetadata, "missing model config");
    ToyModel m;
    m.config = ModelConfig::from_json(c.metadata.at("config"));
    m.blocks.resize(static_cast<std::size_t>(m.config.num_blocks));
    for (const auto& id : m.layer_ids()) {
        m.weight(id) = c.find(id).to_matrix();
    }
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        const std::string p = "b" + std::to_string(b) + ".";
        m.blocks[b].ln1_a = c.find(p + "ln1_a").to_vector();
        m.blocks[b].ln1_b = c.find(p + "ln1_b").to_vector();
        m.blocks[b].ln2_a = c.find(p + "ln2_a").to_vector();
        m.blocks[b].ln2_b = c.find(p + "ln2_b").to_vector();
    }
    m.t_emb = c.find("t_emb").to_matrix();

    const int d = m.config.head_dim();
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        const auto& blk = m.blocks[b];
        require(blk.w_q.rows() == blk.w_k.rows() && blk.w_q.rows() == blk.w_v.rows() &&
                    blk.w_q.rows() % d == 0 && blk.w_out_a.cols() == blk.w_q.rows() &&
                    blk.w_out_b.cols() == blk.w_q.rows(),
                ErrorCode::BadShape, "inconsistent attention shapes in block " + std::to_string(b));
        require(blk.w_up_a.rows() == blk.w_down_a.cols() && blk.w_up_b.rows() == blk.w_down_b.cols(),
                ErrorCode::BadShape, "inconsistent ffn shapes in block " + std::to_string(b));
    }
    return m;
}

Container CalibrationSet::to_container(const ModelConfig& config) const {
    Container c;
    c.metadata = {{"kind", "calibration"},
                  {"seed", seed},
                  {"n_samples", samples.size()},
                  {"config", config.to_json()}};
    for (const auto& s : samples) {
        const std::string p = "sample" + std::to_string(s.sample_id) + ".";
        c.records.push_back(TensorRecord::from_matrix(p + "latent", s.latent));
        c.records.push_back(TensorRecord::from_matrix(p + "cond", s.cond));
    }
    return c;
}

CalibrationSet CalibrationSet::from_container(const Container& c) {
    CalibrationSet set;
    set.seed = c.metadata.value("seed", std::uint64_t{0});
    const auto n = c.metadata.at("n_samples").get<std::size_t>();
    set.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::string p = "sample" + std::to_string(i) + ".";
        set.samples[i].sample_id = i;
        set.samples[i].latent = c.find(p + "latent").to_matrix();
        set.samples[i].cond = c.find(p + "cond").to_matrix();
    }
    return set;
}

} // namespace obsdiff
