#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "obsdiff/obs_structured.hpp"
#include "oracles.hpp"

using namespace obsdiff;

namespace {

double test_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Eigen::MatrixXd ffn_forward(const Eigen::MatrixXd& w_up, const Eigen::MatrixXd& w_down,
                            const Eigen::MatrixXd& x_tokens) {
    Eigen::MatrixXd u = x_tokens * w_up.transpose();
    for (int i = 0; i < u.rows(); ++i) {
        for (int j = 0; j < u.cols(); ++j) {
            u(i, j) = test_gelu(u(i, j));
        }
    }
    return u * w_down.transpose();
}

std::vector<int> ascending_order(const Eigen::VectorXd& v) {
    std::vector<int> order(static_cast<std::size_t>(v.size()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return v[a] != v[b] ? v[a] < v[b] : a < b;
    });
    return order;
}

} // namespace

TEST_CASE("neuron saliency under identity H is half the column norm") {
    std::mt19937_64 rng(3);
    const Eigen::MatrixXd w = oracles::random_matrix(rng, 4, 6);
    const auto inv = inverse_factor_from_damped(Eigen::MatrixXd::Identity(6, 6));
    const auto s = ffn_neuron_saliency(w, inv);
    for (int q = 0; q < 6; ++q) {
        CHECK(s.scores[q] == doctest::Approx(0.5 * w.col(q).squaredNorm()).epsilon(1e-12));
    }
}

TEST_CASE("zero column has zero saliency") {
    std::mt19937_64 rng(5);
    Eigen::MatrixXd w = oracles::random_matrix(rng, 4, 6);
    w.col(2).setZero();
    const auto inv = inverse_factor_from_damped(oracles::random_spd(rng, 6, 12));
    const auto s = ffn_neuron_saliency(w, inv);
    CHECK(s.scores[2] == 0.0);
    for (int q = 0; q < 6; ++q) {
        CHECK(s.scores[q] >= 0.0);
    }
}

TEST_CASE("neuron saliency matches the elementwise formula with explicit inverse") {
    std::mt19937_64 rng(7);
    const Eigen::MatrixXd w = oracles::random_matrix(rng, 8, 16);
    const Eigen::MatrixXd h = oracles::random_spd(rng, 16, 32);
    const Eigen::MatrixXd hinv = h.fullPivLu().solve(Eigen::MatrixXd::Identity(16, 16));
    const auto s = ffn_neuron_saliency(w, inverse_factor_from_damped(h));
    for (int q = 0; q < 16; ++q) {
        double col_sq = 0.0;
        for (int r = 0; r < 8; ++r) {
            col_sq += w(r, q) * w(r, q);
        }
        CHECK(s.scores[q] == doctest::Approx(col_sq / (2.0 * hinv(q, q))).epsilon(1e-9));
    }
}

TEST_CASE("single-row neuron saliency degenerates to the per-weight score") {
    std::mt19937_64 rng(11);
    const Eigen::MatrixXd w = oracles::random_matrix(rng, 1, 10);
    const Eigen::MatrixXd h = oracles::random_spd(rng, 10, 20);
    const Eigen::MatrixXd hinv = h.fullPivLu().solve(Eigen::MatrixXd::Identity(10, 10));
    const auto s = ffn_neuron_saliency(w, inverse_factor_from_damped(h));
    for (int q = 0; q < 10; ++q) {
        CHECK(s.scores[q] == doctest::Approx(w(0, q) * w(0, q) / (2.0 * hinv(q, q))).epsilon(1e-9));
    }
}

TEST_CASE("diagonal Hessian: removed neuron minimizes colnorm^2 * h_qq, no cross compensation") {
    std::mt19937_64 rng(13);
    const int f = 8;
    Eigen::VectorXd diag(f);
    for (int i = 0; i < f; ++i) {
        diag[i] = 0.5 + (i % 3);
    }
    const Eigen::MatrixXd h = diag.asDiagonal();
    Eigen::MatrixXd w_down = oracles::random_matrix(rng, 4, f);
    Eigen::MatrixXd w_up = oracles::random_matrix(rng, f, 4);
    const Eigen::MatrixXd w_down_before = w_down;

    int expected = 0;
    double best = 1e300;
    for (int q = 0; q < f; ++q) {
        const double loss = w_down.col(q).squaredNorm() * diag[q];
        if (loss < best) {
            best = loss;
            expected = q;
        }
    }

    const auto outcome = prune_ffn(w_down, w_up, inverse_factor_from_damped(h), 1.0 / f);
    REQUIRE(outcome.removed.size() == 1);
    CHECK(outcome.removed[0] == expected);
    CHECK(w_down.col(expected).isZero(0.0));
    CHECK(w_up.row(expected).isZero(0.0));
    for (int q = 0; q < f; ++q) {
        if (q != expected) {
            CHECK(w_down.col(q) == w_down_before.col(q));
        }
    }
}

TEST_CASE("ratio 0.25 on F = 8 removes exactly two consistently-indexed neurons") {
    std::mt19937_64 rng(17);
    Eigen::MatrixXd w_down = oracles::random_matrix(rng, 4, 8);
    Eigen::MatrixXd w_up = oracles::random_matrix(rng, 8, 4);
    const auto inv = inverse_factor_from_damped(oracles::random_spd(rng, 8, 16));
    const auto outcome = prune_ffn(w_down, w_up, inv, 0.25);
    REQUIRE(outcome.removed.size() == 2);
    int zero_cols = 0, zero_rows = 0;
    for (int q = 0; q < 8; ++q) {
        if (w_down.col(q).isZero(0.0)) {
            ++zero_cols;
            CHECK(w_up.row(q).isZero(0.0));
        }
        if (w_up.row(q).isZero(0.0)) {
            ++zero_rows;
        }
    }
    CHECK(zero_cols == 2);
    CHECK(zero_rows == 2);
}

TEST_CASE("first removed neuron matches the brute-force refit oracle") {
    std::mt19937_64 rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        const int f = 10;
        Eigen::MatrixXd w_down = oracles::random_matrix(rng, 5, f);
        Eigen::MatrixXd w_up = oracles::random_matrix(rng, f, 5);
        const Eigen::MatrixXd h = oracles::random_spd(rng, f, 2 * f);
        const auto [best, errors] = oracles::best_single_neuron_removal(w_down, h);

        const auto outcome = prune_ffn(w_down, w_up, inverse_factor_from_damped(h), 1.0 / f);
        REQUIRE(outcome.removed.size() == 1);
        CHECK(outcome.removed[0] == best);
        CHECK(outcome.recon_error == doctest::Approx(errors[best]).epsilon(1e-8));
    }
}

TEST_CASE("masked and shrunken FFNs compute identical outputs") {
    std::mt19937_64 rng(23);
    const int f = 12, d = 6, tokens = 5;
    Eigen::MatrixXd w_down = oracles::random_matrix(rng, d, f);
    Eigen::MatrixXd w_up = oracles::random_matrix(rng, f, d);
    const auto inv = inverse_factor_from_damped(oracles::random_spd(rng, f, 2 * f));
    const auto outcome = prune_ffn(w_down, w_up, inv, 0.4);

    std::vector<bool> removed(f, false);
    for (int q : outcome.removed) {
        removed[static_cast<std::size_t>(q)] = true;
    }
    Eigen::MatrixXd down_small(d, f - static_cast<int>(outcome.removed.size()));
    Eigen::MatrixXd up_small(f - static_cast<int>(outcome.removed.size()), d);
    int dst = 0;
    for (int q = 0; q < f; ++q) {
        if (!removed[static_cast<std::size_t>(q)]) {
            down_small.col(dst) = w_down.col(q);
            up_small.row(dst) = w_up.row(q);
            ++dst;
        }
    }

    const Eigen::MatrixXd x = oracles::random_matrix(rng, tokens, d);
    const Eigen::MatrixXd masked = ffn_forward(w_up, w_down, x);
    const Eigen::MatrixXd shrunk = ffn_forward(up_small, down_small, x);
    CHECK(oracles::rel_diff(masked, shrunk) < 1e-6);
}

TEST_CASE("head saliency under identity H is the slab Frobenius norm") {
    std::mt19937_64 rng(29);
    const int d = 3, heads = 4;
    Eigen::MatrixXd w = oracles::random_matrix(rng, 5, d * heads);
    w.middleCols(2 * d, d).setZero();
    const auto inv = inverse_factor_from_damped(Eigen::MatrixXd::Identity(d * heads, d * heads));
    const auto s = head_saliency(w, inv, d);
    REQUIRE(s.scores.size() == heads);
    for (int j = 0; j < heads; ++j) {
        CHECK(s.scores[j] ==
              doctest::Approx(w.middleCols(j * d, d).squaredNorm()).epsilon(1e-12));
    }
    CHECK(s.scores[2] == 0.0);
}

TEST_CASE("two heads of dim two match the closed-form 2x2 inverse oracle") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::MatrixXd w = oracles::random_matrix(rng, 3, 4);
        const Eigen::MatrixXd h = oracles::random_spd(rng, 4, 8);
        const auto s = head_saliency(w, inverse_factor_from_damped(h), 2);
        for (int j = 0; j < 2; ++j) {
            const double a = h(2 * j, 2 * j), b = h(2 * j, 2 * j + 1);
            const double c = h(2 * j + 1, 2 * j), dd = h(2 * j + 1, 2 * j + 1);
            const double det = a * dd - b * c;
            const double inv00 = dd / det, inv11 = a / det;
            const double expected = w.col(2 * j).squaredNorm() / inv00 +
                                    w.col(2 * j + 1).squaredNorm() / inv11;
            CHECK(s.scores[j] == doctest::Approx(expected).epsilon(1e-9));
        }
    }
}

TEST_CASE("both head-Hessian interpretations score and agree under identity H") {
    std::mt19937_64 rng(33);
    const Eigen::MatrixXd w = oracles::random_matrix(rng, 4, 8);
    const auto ident = inverse_factor_from_damped(Eigen::MatrixXd::Identity(8, 8));
    const auto sub = head_saliency(w, ident, 2, 'A', HeadHessianMode::SubmatrixInverse);
    const auto block = head_saliency(w, ident, 2, 'A', HeadHessianMode::InverseSubmatrix);
    CHECK(oracles::rel_diff(sub.scores, block.scores) < 1e-12);

    // with a correlated H they differ, but both stay positive and finite
    const auto corr = inverse_factor_from_damped(oracles::correlated_spd(rng, 8, 16));
    const auto s1 = head_saliency(w, corr, 2, 'A', HeadHessianMode::SubmatrixInverse);
    const auto s2 = head_saliency(w, corr, 2, 'A', HeadHessianMode::InverseSubmatrix);
    for (int j = 0; j < 4; ++j) {
        CHECK(s1.scores[j] > 0.0);
        CHECK(s2.scores[j] > 0.0);
        CHECK(std::isfinite(s1.scores[j]));
        CHECK(std::isfinite(s2.scores[j]));
    }
}

TEST_CASE("head width must divide by head_dim") {
    std::mt19937_64 rng(37);
    const Eigen::MatrixXd w = oracles::random_matrix(rng, 2, 6);
    const auto inv = inverse_factor_from_damped(oracles::random_spd(rng, 6, 12));
    try {
        head_saliency(w, inv, 4);
        FAIL("expected BadSpec");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::BadSpec);
    }
}

TEST_CASE("rrf fixture: ranks (1,3) at k = 60 score 124/3843") {
    Eigen::VectorXd a(3), b(3);
    a << 3, 2, 1; // head 0 ranks 1st for modality A
    b << 1, 2, 3; // head 0 ranks 3rd for modality B
    const auto fused = rrf_fuse(a, b, 60);
    CHECK(std::abs(fused.fused[0] - 124.0 / 3843.0) < 1e-12);
    CHECK(fused.fused[0] == doctest::Approx(1.0 / 61.0 + 1.0 / 63.0).epsilon(1e-15));
}

TEST_CASE("fused scores live in (0, 2/(k+1)] and equal-rank heads top out") {
    Eigen::VectorXd a(4), b(4);
    a << 4, 3, 2, 1;
    b << 4, 3, 2, 1;
    const auto fused = rrf_fuse(a, b, 60);
    CHECK(fused.fused.maxCoeff() == doctest::Approx(2.0 / 61.0).epsilon(1e-15));
    for (int j = 0; j < 4; ++j) {
        CHECK(fused.fused[j] > 0.0);
        CHECK(fused.fused[j] <= 2.0 / 61.0 + 1e-15);
    }
}

TEST_CASE("identical modality scores reproduce the single-modality ordering") {
    std::mt19937_64 rng(41);
    const Eigen::VectorXd scores = oracles::random_vector(rng, 6);
    const auto fused = rrf_fuse(scores, scores, 60);
    CHECK(fused.ascending == ascending_order(scores));
}

TEST_CASE("rrf ordering is invariant under strictly monotone transforms") {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::VectorXd a = oracles::random_vector(rng, 5);
        const Eigen::VectorXd b = oracles::random_vector(rng, 5);
        const auto base = rrf_fuse(a, b, 60);

        const Eigen::VectorXd a2 = a.array().exp().matrix();
        const Eigen::VectorXd b2 = (3.0 * b.array() + 11.0).matrix();
        const auto mapped = rrf_fuse(a2, b2, 60);
        CHECK(base.ascending == mapped.ascending);
        CHECK(base.fused == mapped.fused); // ranks unchanged, so scores too
    }
}

TEST_CASE("rrf rejects mismatched lengths") {
    try {
        rrf_fuse(Eigen::VectorXd::Ones(3), Eigen::VectorXd::Ones(4), 60);
        FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ShapeMismatch);
    }
}

namespace {

ToyModel small_model(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.hidden_dim = 16;
    cfg.num_heads = 4;
    cfg.ffn_dim = 24;
    cfg.num_blocks = 1;
    cfg.latent_tokens = 4;
    cfg.cond_tokens = 3;
    cfg.num_steps = 3;
    cfg.seed = seed;
    return init_model(cfg);
}

InverseFactor factor_for(const Eigen::MatrixXd& h) { return inverse_factor_from_damped(h); }

} // namespace

TEST_CASE("ratio below 1/heads removes nothing and leaves the model unchanged") {
    ToyModel model = small_model(51);
    const ToyModel before = model;
    std::mt19937_64 rng(53);
    const auto inv_a = factor_for(oracles::random_spd(rng, 16, 32));
    const auto inv_b = factor_for(oracles::random_spd(rng, 16, 32));
    const auto outcome = prune_heads(model, 0, inv_a, inv_b, 0.2, 60);
    CHECK(outcome.removed_heads.empty());
    CHECK(model.blocks[0].w_out_a == before.blocks[0].w_out_a);
    CHECK(model.blocks[0].w_q == before.blocks[0].w_q);
}

TEST_CASE("symmetric modalities remove the bottom heads of single-modality saliency") {
    ToyModel model = small_model(57);
    model.blocks[0].w_out_b = model.blocks[0].w_out_a;
    std::mt19937_64 rng(59);
    const Eigen::MatrixXd h = oracles::random_spd(rng, 16, 32);
    const auto inv = factor_for(h);

    const auto sal = head_saliency(model.blocks[0].w_out_a, inv, model.config.head_dim());
    const auto order = ascending_order(sal.scores);

    const auto outcome = prune_heads(model, 0, inv, inv, 0.5, 60);
    REQUIRE(outcome.removed_heads.size() == 2);
    std::vector<int> expected{order[0], order[1]};
    std::sort(expected.begin(), expected.end());
    CHECK(outcome.removed_heads == expected);
}

TEST_CASE("head removal equals the per-row slab refit oracle") {
    std::mt19937_64 rng(61);
    for (int trial = 0; trial < 10; ++trial) {
        ToyModel model = small_model(1000 + static_cast<std::uint64_t>(trial));
        const Eigen::MatrixXd w_a = model.blocks[0].w_out_a;
        const Eigen::MatrixXd w_b = model.blocks[0].w_out_b;
        const Eigen::MatrixXd h_a = oracles::random_spd(rng, 16, 40);
        const Eigen::MatrixXd h_b = oracles::random_spd(rng, 16, 40);
        const auto outcome = prune_heads(model, 0, factor_for(h_a), factor_for(h_b), 0.25, 60);
        REQUIRE(outcome.removed_heads.size() == 1);
        const int j = outcome.removed_heads[0];
        const int d = model.config.head_dim();
        std::vector<int> slab;
        for (int c = 0; c < d; ++c) {
            slab.push_back(j * d + c);
        }
        for (int r = 0; r < w_a.rows(); ++r) {
            const Eigen::VectorXd refit_a = oracles::refit_row(w_a.row(r).transpose(), h_a, slab);
            CHECK((model.blocks[0].w_out_a.row(r).transpose() - refit_a).norm() <
                  1e-5 * (refit_a.norm() + 1.0));
            const Eigen::VectorXd refit_b = oracles::refit_row(w_b.row(r).transpose(), h_b, slab);
            CHECK((model.blocks[0].w_out_b.row(r).transpose() - refit_b).norm() <
                  1e-5 * (refit_b.norm() + 1.0));
        }
    }
}

TEST_CASE("removed heads are dead: q/k/v perturbations change nothing, exactly") {
    ToyModel model = small_model(63);
    std::mt19937_64 rng(67);
    const auto inv_a = factor_for(oracles::random_spd(rng, 16, 32));
    const auto inv_b = factor_for(oracles::random_spd(rng, 16, 32));
    const auto outcome = prune_heads(model, 0, inv_a, inv_b, 0.25, 60);
    REQUIRE(outcome.removed_heads.size() == 1);
    const int j = outcome.removed_heads[0];
    const int d = model.config.head_dim();

    const auto calib = gen_calibration(model.config, 5, 2);
    std::vector<Eigen::MatrixXd> before;
    for (const auto& s : calib.samples) {
        before.push_back(run_trajectory(model, s));
    }

    ToyModel perturbed = model;
    perturbed.blocks[0].w_q.middleRows(j * d, d).setConstant(123.0);
    perturbed.blocks[0].w_k.middleRows(j * d, d).setConstant(-7.0);
    perturbed.blocks[0].w_v.middleRows(j * d, d).setConstant(0.5);
    for (std::size_t i = 0; i < calib.samples.size(); ++i) {
        const Eigen::MatrixXd after = run_trajectory(perturbed, calib.samples[i]);
        CHECK(after == before[i]); // tolerance zero
    }
}

TEST_CASE("removing every head is rejected") {
    ToyModel model = small_model(71);
    std::mt19937_64 rng(73);
    const auto inv = factor_for(oracles::random_spd(rng, 16, 32));
    CHECK_THROWS_AS(prune_heads(model, 0, inv, inv, 1.0, 60), Error);
}
