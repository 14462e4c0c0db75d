// Independent reference implementations the tests check the library against.
// Everything here recomputes from first principles (explicit inverses, scalar
// loops, brute force) and stays off the library's fast paths.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracles {

inline double rel_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const double denom = std::max(b.norm(), 1e-300);
    return (a - b).norm() / denom;
}

// SPD Hessian the way calibration produces one: Gram matrix of random
// activations plus relative damping.
inline Eigen::MatrixXd random_spd(std::mt19937_64& rng, int n, int samples, double damp_rel = 0.01) {
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd x(n, samples);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < samples; ++j) {
            x(i, j) = g(rng);
        }
    }
    Eigen::MatrixXd h = 2.0 * x * x.transpose() / static_cast<double>(samples);
    h.diagonal().array() += damp_rel * h.diagonal().mean() + 1e-9;
    return h;
}

// Same Gram + damping construction but with cross-feature correlation
// (x = A g), the regime real layer inputs live in.
inline Eigen::MatrixXd correlated_spd(std::mt19937_64& rng, int n, int samples,
                                      double damp_rel = 0.01) {
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd mix(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            mix(i, j) = g(rng) / std::sqrt(static_cast<double>(n));
        }
    }
    Eigen::MatrixXd iid(n, samples);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < samples; ++j) {
            iid(i, j) = g(rng);
        }
    }
    const Eigen::MatrixXd x = mix * iid;
    Eigen::MatrixXd h = 2.0 * x * x.transpose() / static_cast<double>(samples);
    h.diagonal().array() += damp_rel * h.diagonal().mean() + 1e-9;
    return h;
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, int n, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) {
        v[i] = g(rng);
    }
    return v;
}

inline Eigen::MatrixXd random_matrix(std::mt19937_64& rng, int rows, int cols, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            m(i, j) = g(rng);
        }
    }
    return m;
}

// Optimal refit of a row under fixed zeros: minimize (v-w) H (v-w)^T subject
// to v[pruned] = 0, solved through the KKT system with a full pivoted solve.
inline Eigen::VectorXd refit_row(const Eigen::VectorXd& w, const Eigen::MatrixXd& h,
                                 const std::vector<int>& pruned) {
    std::vector<bool> is_pruned(static_cast<std::size_t>(w.size()), false);
    for (int p : pruned) {
        is_pruned[static_cast<std::size_t>(p)] = true;
    }
    std::vector<int> kept;
    for (int i = 0; i < w.size(); ++i) {
        if (!is_pruned[static_cast<std::size_t>(i)]) {
            kept.push_back(i);
        }
    }
    Eigen::VectorXd v = Eigen::VectorXd::Zero(w.size());
    if (kept.empty()) {
        return v;
    }
    const auto nk = static_cast<Eigen::Index>(kept.size());
    const auto np = static_cast<Eigen::Index>(pruned.size());
    Eigen::MatrixXd h_kk(nk, nk);
    Eigen::MatrixXd h_kp(nk, np);
    for (Eigen::Index i = 0; i < nk; ++i) {
        for (Eigen::Index j = 0; j < nk; ++j) {
            h_kk(i, j) = h(kept[static_cast<std::size_t>(i)], kept[static_cast<std::size_t>(j)]);
        }
        for (Eigen::Index j = 0; j < np; ++j) {
            h_kp(i, j) = h(kept[static_cast<std::size_t>(i)], pruned[static_cast<std::size_t>(j)]);
        }
    }
    Eigen::VectorXd w_p(np);
    for (Eigen::Index j = 0; j < np; ++j) {
        w_p[j] = w[pruned[static_cast<std::size_t>(j)]];
    }
    const Eigen::VectorXd delta_k = h_kk.fullPivLu().solve(h_kp * w_p);
    for (Eigen::Index i = 0; i < nk; ++i) {
        v[kept[static_cast<std::size_t>(i)]] = w[kept[static_cast<std::size_t>(i)]] + delta_k[i];
    }
    return v;
}

inline double row_error(const Eigen::VectorXd& w, const Eigen::VectorXd& v,
                        const Eigen::MatrixXd& h) {
    const Eigen::VectorXd d = v - w;
    return 0.5 * d.dot(h * d);
}

// Brute force over single removals with exact least-squares refit; returns the
// best index (ties -> lowest) and all candidate errors.
inline std::pair<int, Eigen::VectorXd> best_single_removal(const Eigen::VectorXd& w,
                                                           const Eigen::MatrixXd& h) {
    Eigen::VectorXd errors(w.size());
    for (int q = 0; q < w.size(); ++q) {
        errors[q] = row_error(w, refit_row(w, h, {q}), h);
    }
    int best = 0;
    for (int q = 1; q < w.size(); ++q) {
        if (errors[q] < errors[best]) {
            best = q;
        }
    }
    return {best, errors};
}

// Brute force over single FFN-neuron removals (whole column of w_down, every
// row refit independently).
inline std::pair<int, Eigen::VectorXd> best_single_neuron_removal(const Eigen::MatrixXd& w_down,
                                                                  const Eigen::MatrixXd& h) {
    Eigen::VectorXd errors(w_down.cols());
    for (int q = 0; q < w_down.cols(); ++q) {
        double total = 0.0;
        for (int r = 0; r < w_down.rows(); ++r) {
            const Eigen::VectorXd row = w_down.row(r).transpose();
            total += row_error(row, refit_row(row, h, {q}), h);
        }
        errors[q] = total;
    }
    int best = 0;
    for (int q = 1; q < w_down.cols(); ++q) {
        if (errors[q] < errors[best]) {
            best = q;
        }
    }
    return {best, errors};
}

// Dense re-implementation of the fixed-order sweep: one block spanning the
// whole layer, every per-column inverse recomputed explicitly from the damped
// Hessian suffix, same mask-selection rule (per-row ceil(ratio*n) lowest
// start-of-block saliencies; saliency w_q^2 / (2 [(H_{q:,q:})^{-1}]_00)).
inline Eigen::MatrixXd dense_fixed_order_reference(const Eigen::MatrixXd& w,
                                                   const Eigen::MatrixXd& h_damped, double ratio) {
    const int rows = static_cast<int>(w.rows());
    const int n = static_cast<int>(w.cols());
    // suffix inverses, computed independently per column
    std::vector<Eigen::MatrixXd> suffix_inv(static_cast<std::size_t>(n));
    for (int q = 0; q < n; ++q) {
        const Eigen::MatrixXd hs = h_damped.block(q, q, n - q, n - q);
        suffix_inv[static_cast<std::size_t>(q)] =
            hs.fullPivLu().solve(Eigen::MatrixXd::Identity(n - q, n - q));
    }

    Eigen::MatrixXd cur = w;
    const int quota = static_cast<int>(std::ceil(ratio * static_cast<double>(n)));
    std::vector<std::vector<bool>> prune(static_cast<std::size_t>(rows),
                                         std::vector<bool>(static_cast<std::size_t>(n), false));
    for (int r = 0; r < rows; ++r) {
        std::vector<int> order(static_cast<std::size_t>(n));
        for (int q = 0; q < n; ++q) {
            order[static_cast<std::size_t>(q)] = q;
        }
        std::vector<double> sal(static_cast<std::size_t>(n));
        for (int q = 0; q < n; ++q) {
            const double diag = suffix_inv[static_cast<std::size_t>(q)](0, 0);
            sal[static_cast<std::size_t>(q)] = cur(r, q) * cur(r, q) / (2.0 * diag);
        }
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            const double sa = sal[static_cast<std::size_t>(a)];
            const double sb = sal[static_cast<std::size_t>(b)];
            return sa != sb ? sa < sb : a < b;
        });
        for (int i = 0; i < quota; ++i) {
            prune[static_cast<std::size_t>(r)][static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
                true;
        }
    }

    for (int q = 0; q < n; ++q) {
        const auto& minv = suffix_inv[static_cast<std::size_t>(q)];
        for (int r = 0; r < rows; ++r) {
            if (!prune[static_cast<std::size_t>(r)][static_cast<std::size_t>(q)]) {
                continue;
            }
            const double e = cur(r, q) / minv(0, 0);
            for (int c = q; c < n; ++c) {
                cur(r, c) -= e * minv(0, c - q);
            }
            cur(r, q) = 0.0;
        }
    }
    return cur;
}

// Dense re-implementation of the fixed-order N:M sweep: group masks picked at
// each group boundary from the compensated weights, explicit suffix inverses.
// select_groups(saliency) must return the keep flags for one group.
template <typename SelectGroup>
inline Eigen::MatrixXd dense_nm_reference(const Eigen::MatrixXd& w, const Eigen::MatrixXd& h,
                                          int m, SelectGroup select_group) {
    const int rows = static_cast<int>(w.rows());
    const int n = static_cast<int>(w.cols());
    std::vector<Eigen::MatrixXd> suffix_inv(static_cast<std::size_t>(n));
    for (int q = 0; q < n; ++q) {
        suffix_inv[static_cast<std::size_t>(q)] =
            h.block(q, q, n - q, n - q).fullPivLu().solve(
                Eigen::MatrixXd::Identity(n - q, n - q));
    }
    Eigen::MatrixXd cur = w;
    std::vector<std::vector<bool>> prune(static_cast<std::size_t>(rows),
                                         std::vector<bool>(static_cast<std::size_t>(n), false));
    for (int q = 0; q < n; ++q) {
        if (q % m == 0) {
            for (int r = 0; r < rows; ++r) {
                Eigen::VectorXd sal(m);
                for (int g = 0; g < m; ++g) {
                    const double diag = suffix_inv[static_cast<std::size_t>(q + g)](0, 0);
                    sal[g] = cur(r, q + g) * cur(r, q + g) / (2.0 * diag);
                }
                const auto keep = select_group(sal);
                for (int g = 0; g < m; ++g) {
                    prune[static_cast<std::size_t>(r)][static_cast<std::size_t>(q + g)] =
                        !keep[static_cast<std::size_t>(g)];
                }
            }
        }
        const auto& minv = suffix_inv[static_cast<std::size_t>(q)];
        for (int r = 0; r < rows; ++r) {
            if (!prune[static_cast<std::size_t>(r)][static_cast<std::size_t>(q)]) {
                continue;
            }
            const double e = cur(r, q) / minv(0, 0);
            for (int c = q; c < n; ++c) {
                cur(r, c) -= e * minv(0, c - q);
            }
            cur(r, q) = 0.0;
        }
    }
    return cur;
}

// Triple-loop Gram accumulation, H += 2 alpha x x^T.
inline void accumulate_naive(Eigen::MatrixXd& h, const Eigen::MatrixXd& x, double alpha) {
    for (int i = 0; i < h.rows(); ++i) {
        for (int j = 0; j < h.cols(); ++j) {
            double dot = 0.0;
            for (int k = 0; k < x.cols(); ++k) {
                dot += x(i, k) * x(j, k);
            }
            h(i, j) += 2.0 * alpha * dot;
        }
    }
}

} // namespace oracles
