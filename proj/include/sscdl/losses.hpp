#pragma once

#include "sscdl/autodiff.hpp"
#include "sscdl/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

// Loss zoo for the contrastive trainer. Every loss exists twice: a plain
// double-precision evaluation used by tests and reporting, and a tape builder
// in sscdl::ad used during training. Conditional distributions compare one
// graph's original embedding against its augmented embedding plus K negatives
// drawn from the same augmented view; the divergence between the weak-view and
// strong-view distributions is the regularizer, the cross-view similarity term
// aligns projections, and NT-Xent is kept as the ablation baseline.
namespace sscdl {

constexpr double kLogClampEps = 1e-12;

enum class DivergenceMode { scalar_pair, full_distribution };

inline std::string to_string(DivergenceMode m) {
    return m == DivergenceMode::scalar_pair ? "scalar_pair" : "full_distribution";
}

inline DivergenceMode divergence_mode_from_string(const std::string& s) {
    if (s == "scalar_pair") return DivergenceMode::scalar_pair;
    if (s == "full_distribution") return DivergenceMode::full_distribution;
    throw ConfigError("unknown divergence mode: " + s);
}

struct CondDistConfig {
    double temperature = 0.5;
    long negative_count = -1;  // -1: every other graph in the batch
    DivergenceMode mode = DivergenceMode::scalar_pair;

    void validate() const {
        if (!std::isfinite(temperature) || temperature <= 0.0)
            throw ConfigError("cond_dist: temperature must be a positive finite value");
        if (negative_count != -1 && negative_count < 1)
            throw ConfigError("cond_dist: negative_count must be >= 1, or -1 for all-in-batch");
    }
};

struct LossWeights {
    double alpha = 0.1;
    double beta = 0.1;

    void validate() const {
        if (!std::isfinite(alpha) || alpha < 0.0 || !std::isfinite(beta) || beta < 0.0)
            throw ConfigError("loss weights must be finite and nonnegative");
    }
};

inline double cosine_sim(const Vector& u, const Vector& v) {
    if (u.size() != v.size()) throw NumericError("cosine_sim: dimension mismatch");
    double nu = u.norm();
    double nv = v.norm();
    if (nu == 0.0 || nv == 0.0) throw NumericError("cosine_sim: undefined for a zero vector");
    return u.dot(v) / (nu * nv);
}

// p(h_aug_i | h_i) over the K+1 candidates {augmented positive, K negatives
// from the same augmented view}. Entry 0 is the positive pair.
inline Vector cond_prob_full(const Vector& h_aug_i, const Vector& h_i,
                             const std::vector<Vector>& negatives, const CondDistConfig& cfg) {
    cfg.validate();
    if (negatives.empty()) throw NumericError("cond_prob: empty negative set");
    Vector e(static_cast<long>(negatives.size()) + 1);
    e(0) = std::exp(cosine_sim(h_aug_i, h_i) / cfg.temperature);
    for (std::size_t k = 0; k < negatives.size(); ++k)
        e(static_cast<long>(k) + 1) = std::exp(cosine_sim(negatives[k], h_i) / cfg.temperature);
    return e / e.sum();
}

inline double cond_prob_pair(const Vector& h_aug_i, const Vector& h_i,
                             const std::vector<Vector>& negatives, const CondDistConfig& cfg) {
    return cond_prob_full(h_aug_i, h_i, negatives, cfg)(0);
}

// Divergence between the weak-view and strong-view conditional distributions,
// averaged over the batch. The scalar form weights -log p_strong by p_weak for
// the positive pair only; the full form is the cross-entropy between the two
// candidate distributions. Zero probabilities inside the log are clamped at
// kLogClampEps and counted.
inline double distribution_divergence(const Vector& weak_pair_probs, const Vector& strong_pair_probs,
                                      std::size_t* clamp_count = nullptr) {
    if (weak_pair_probs.size() != strong_pair_probs.size())
        throw NumericError("distribution_divergence: batch size mismatch");
    const long n = weak_pair_probs.size();
    if (n == 0) throw NumericError("distribution_divergence: empty batch");
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        double p = strong_pair_probs(i);
        if (p < kLogClampEps) {
            p = kLogClampEps;
            if (clamp_count) ++*clamp_count;
        }
        acc += weak_pair_probs(i) * std::log(p);
    }
    return -acc / static_cast<double>(n);
}

inline double distribution_divergence(const Matrix& weak_probs, const Matrix& strong_probs,
                                      std::size_t* clamp_count = nullptr) {
    if (weak_probs.rows() != strong_probs.rows() || weak_probs.cols() != strong_probs.cols())
        throw NumericError("distribution_divergence: shape mismatch");
    const long n = weak_probs.rows();
    if (n == 0) throw NumericError("distribution_divergence: empty batch");
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        for (long k = 0; k < weak_probs.cols(); ++k) {
            double p = strong_probs(i, k);
            if (p < kLogClampEps) {
                p = kLogClampEps;
                if (clamp_count) ++*clamp_count;
            }
            acc += weak_probs(i, k) * std::log(p);
        }
    }
    return -acc / static_cast<double>(n);
}

namespace detail {

inline Matrix l2_normalized_rows(const Matrix& x, const char* who) {
    Matrix y(x.rows(), x.cols());
    for (long i = 0; i < x.rows(); ++i) {
        double n = x.row(i).norm();
        if (n == 0.0) throw NumericError(std::string(who) + ": zero row has no direction");
        y.row(i) = x.row(i) / n;
    }
    return y;
}

}  // namespace detail

// Cross-view similarity loss: reward each projection's agreement with its own
// original-view row, penalize agreement with every other original-view row.
// The positive pair is excluded from the denominator. The temperature is an
// experiment knob; 1 leaves the similarities unscaled.
inline double similarity_loss(const Matrix& p_aug, const Matrix& p, double temperature = 1.0) {
    if (p_aug.rows() != p.rows() || p_aug.cols() != p.cols())
        throw NumericError("similarity_loss: shape mismatch");
    if (!std::isfinite(temperature) || temperature <= 0.0)
        throw ConfigError("similarity_loss: temperature must be positive");
    const long n = p_aug.rows();
    if (n < 2) throw NumericError("similarity_loss: needs at least two graphs");
    Matrix s = detail::l2_normalized_rows(p_aug, "similarity_loss") *
               detail::l2_normalized_rows(p, "similarity_loss").transpose() / temperature;
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        double den = 0.0;
        for (long j = 0; j < n; ++j)
            if (j != i) den += std::exp(s(i, j));
        acc += s(i, i) - std::log(std::max(den, kLogClampEps));
    }
    return -acc / static_cast<double>(n);
}

// Normalized temperature-scaled cross entropy, the baseline contrastive loss.
// The denominator for anchor u_i holds the positive pair, the other rows of V,
// and the other rows of U.
inline double nt_xent(const Matrix& u, const Matrix& v, double temperature) {
    if (u.rows() != v.rows() || u.cols() != v.cols()) throw NumericError("nt_xent: shape mismatch");
    if (!std::isfinite(temperature) || temperature <= 0.0)
        throw ConfigError("nt_xent: temperature must be positive");
    const long n = u.rows();
    if (n < 2) throw NumericError("nt_xent: needs at least two rows");
    Matrix un = detail::l2_normalized_rows(u, "nt_xent");
    Matrix vn = detail::l2_normalized_rows(v, "nt_xent");
    Matrix suv = un * vn.transpose() / temperature;
    Matrix suu = un * un.transpose() / temperature;
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        double den = 0.0;
        for (long k = 0; k < n; ++k) den += std::exp(suv(i, k));
        for (long k = 0; k < n; ++k)
            if (k != i) den += std::exp(suu(i, k));
        acc += suv(i, i) - std::log(std::max(den, kLogClampEps));
    }
    return -acc / static_cast<double>(n);
}

inline double cross_entropy(const Matrix& class_probs, const std::vector<int>& labels,
                            std::size_t* clamp_count = nullptr) {
    if (static_cast<long>(labels.size()) != class_probs.rows())
        throw NumericError("cross_entropy: label count does not match batch size");
    const long n = class_probs.rows();
    if (n == 0) throw NumericError("cross_entropy: empty batch");
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= class_probs.cols())
            throw DataError("cross_entropy: label out of range at row " + std::to_string(i));
        double p = class_probs(i, y);
        if (p < kLogClampEps) {
            p = kLogClampEps;
            if (clamp_count) ++*clamp_count;
        }
        acc += std::log(p);
    }
    return -acc / static_cast<double>(n);
}

inline double total_loss(double l_c, double l_s, double l_d, const LossWeights& w) {
    w.validate();
    if (!std::isfinite(l_c) || !std::isfinite(l_s) || !std::isfinite(l_d))
        throw NumericError("total_loss: non-finite component");
    return l_c + w.alpha * l_s + w.beta * l_d;
}

// Candidate index sets for a batch of n graphs: row i is [i, negatives...].
// negative_count == -1 takes every other graph in index order and consumes no
// randomness; a fixed count samples without replacement per anchor.
inline std::vector<std::vector<int>> negative_candidates(int n_graphs, long negative_count, Rng& rng) {
    if (n_graphs < 2) throw NumericError("negative_candidates: needs at least two graphs");
    const long k = negative_count < 0 ? n_graphs - 1 : negative_count;
    if (k < 1 || k > n_graphs - 1)
        throw ConfigError("negative_candidates: negative_count " + std::to_string(negative_count) +
                          " not in [1, " + std::to_string(n_graphs - 1) + "]");
    std::vector<std::vector<int>> out(static_cast<std::size_t>(n_graphs));
    for (int i = 0; i < n_graphs; ++i) {
        auto& row = out[static_cast<std::size_t>(i)];
        row.reserve(static_cast<std::size_t>(k) + 1);
        row.push_back(i);
        if (k == n_graphs - 1) {
            for (int j = 0; j < n_graphs; ++j)
                if (j != i) row.push_back(j);
        } else {
            for (int idx : rng.sample_without_replacement(n_graphs - 1, static_cast<int>(k)))
                row.push_back(idx >= i ? idx + 1 : idx);
        }
    }
    return out;
}

// Lower-bound check for the strong-view conditional distribution. With all K
// negatives orthogonal to the anchor, -log p(strong positive | anchor) is
// log(e^{s/tau} + K) - s/tau, minimized at positive similarity s = 1, so each
// trial must sit at or above log(K+1) - 1/tau once K >= e^{1/tau} - 1. The
// scalar-pair divergence weights that quantity by the weak positive-pair
// probability and can dip below the bound; it is recorded, not asserted.
struct Theorem1Report {
    double tau = 0.0;
    long negative_count = 0;
    double threshold = 0.0;  // e^{1/tau} - 1, minimum admissible K
    double bound = 0.0;      // log(K+1) - 1/tau
    int trials = 0;
    std::vector<double> margins;  // per trial: -log p_strong - bound
    std::vector<bool> holds;
    std::vector<double> scalar_observations;  // per trial: -p_weak * log p_strong
    std::vector<bool> scalar_holds;
    double min_margin = 0.0;
    bool all_hold = false;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["tau"] = tau;
        j["negative_count"] = negative_count;
        j["threshold"] = threshold;
        j["bound"] = bound;
        j["trials"] = trials;
        j["margins"] = margins;
        j["holds"] = holds;
        j["scalar_observations"] = scalar_observations;
        j["scalar_holds"] = scalar_holds;
        j["min_margin"] = min_margin;
        j["all_hold"] = all_hold;
        j["scalar_hold_count"] =
            static_cast<long>(std::count(scalar_holds.begin(), scalar_holds.end(), true));
        return j;
    }
};

inline Theorem1Report theorem1_check(double tau, long negative_count, int trials, std::uint64_t seed) {
    if (!std::isfinite(tau) || tau <= 0.0)
        throw ConfigError("theorem1_check: temperature must be positive");
    if (trials < 1) throw ConfigError("theorem1_check: trials must be >= 1");
    const double threshold = std::exp(1.0 / tau) - 1.0;
    if (static_cast<double>(negative_count) < threshold)
        throw ConfigError("theorem1_check: negative count " + std::to_string(negative_count) +
                          " is below the threshold e^(1/tau) - 1 = " + std::to_string(threshold));

    Theorem1Report rep;
    rep.tau = tau;
    rep.negative_count = negative_count;
    rep.threshold = threshold;
    rep.bound = std::log(static_cast<double>(negative_count) + 1.0) - 1.0 / tau;
    rep.trials = trials;

    // Anchor e0; positives s*e0 + sqrt(1-s^2)*e1 with s uniform in [-1, 1];
    // negatives the remaining K basis vectors, orthogonal to the anchor in
    // both views.
    const long dim = negative_count + 2;
    Vector anchor = Vector::Zero(dim);
    anchor(0) = 1.0;
    std::vector<Vector> negatives(static_cast<std::size_t>(negative_count));
    for (long j = 0; j < negative_count; ++j) {
        negatives[static_cast<std::size_t>(j)] = Vector::Zero(dim);
        negatives[static_cast<std::size_t>(j)](j + 2) = 1.0;
    }
    auto positive = [dim](double s) {
        Vector p = Vector::Zero(dim);
        p(0) = s;
        p(1) = std::sqrt(std::max(0.0, 1.0 - s * s));
        return p;
    };

    CondDistConfig cfg;
    cfg.temperature = tau;
    cfg.negative_count = negative_count;
    Rng rng(derive_seed(seed, "theorem1"));
    rep.margins.reserve(static_cast<std::size_t>(trials));
    for (int t = 0; t < trials; ++t) {
        double s_weak = 2.0 * rng.next_unit() - 1.0;
        double s_strong = 2.0 * rng.next_unit() - 1.0;
        double p_weak = cond_prob_pair(positive(s_weak), anchor, negatives, cfg);
        double p_strong = cond_prob_pair(positive(s_strong), anchor, negatives, cfg);
        double neg_log_p = -std::log(p_strong);
        double margin = neg_log_p - rep.bound;
        rep.margins.push_back(margin);
        rep.holds.push_back(margin >= 0.0);
        double observation = p_weak * neg_log_p;
        rep.scalar_observations.push_back(observation);
        rep.scalar_holds.push_back(observation >= rep.bound);
    }
    rep.min_margin = *std::min_element(rep.margins.begin(), rep.margins.end());
    rep.all_hold = std::all_of(rep.holds.begin(), rep.holds.end(), [](bool b) { return b; });
    return rep;
}

}  // namespace sscdl

namespace sscdl::ad {

// Batched conditional distributions on the tape. candidates[i] lists the rows
// of h_aug that anchor i is scored against, positive first (candidates[i][0]
// must be i). Returns an n x (K+1) matrix whose rows are the distributions.
inline Var cond_prob_batch(Var h_aug, Var h, double temperature,
                           const std::vector<std::vector<int>>& candidates) {
    detail::check_same_shape(h_aug, h, "cond_prob_batch");
    if (!std::isfinite(temperature) || temperature <= 0.0)
        throw ConfigError("cond_prob_batch: temperature must be positive");
    const long n = h.rows();
    if (static_cast<long>(candidates.size()) != n)
        throw NumericError("cond_prob_batch: candidate rows do not match batch size");
    if (n == 0) throw NumericError("cond_prob_batch: empty batch");
    const std::size_t width = candidates.front().size();
    if (width < 2) throw NumericError("cond_prob_batch: empty negative set");
    for (long i = 0; i < n; ++i) {
        if (candidates[static_cast<std::size_t>(i)].size() != width)
            throw NumericError("cond_prob_batch: ragged candidate sets");
        if (candidates[static_cast<std::size_t>(i)][0] != i)
            throw NumericError("cond_prob_batch: candidates[i][0] must be the anchor itself");
    }
    // s(j, i) = sim(h_aug_j, h_i) / temperature
    Var s = scale(matmul_bt(l2_normalize_rows(h_aug), l2_normalize_rows(h)), 1.0 / temperature);
    std::vector<std::vector<int>> rows(width, std::vector<int>(static_cast<std::size_t>(n)));
    for (long i = 0; i < n; ++i)
        for (std::size_t c = 0; c < width; ++c)
            rows[c][static_cast<std::size_t>(i)] = candidates[static_cast<std::size_t>(i)][c];
    return exp_elem(log_softmax_rows(transpose(gather_entries(s, rows))));
}

inline Var distribution_divergence(Var weak_probs, Var strong_probs, DivergenceMode mode,
                                   std::size_t* clamp_count = nullptr) {
    detail::check_same_shape(weak_probs, strong_probs, "distribution_divergence");
    const long n = weak_probs.rows();
    if (n == 0) throw NumericError("distribution_divergence: empty batch");
    if (mode == DivergenceMode::scalar_pair) {
        std::vector<int> first(static_cast<std::size_t>(n), 0);
        Var pw = select_cols_per_row(weak_probs, first);
        Var ps = select_cols_per_row(strong_probs, first);
        return scale(sum_all(cmul(pw, log_clamped(ps, kLogClampEps, clamp_count))),
                     -1.0 / static_cast<double>(n));
    }
    return scale(sum_all(cmul(weak_probs, log_clamped(strong_probs, kLogClampEps, clamp_count))),
                 -1.0 / static_cast<double>(n));
}

inline Var similarity_loss(Var p_aug, Var p, double temperature = 1.0) {
    detail::check_same_shape(p_aug, p, "similarity_loss");
    if (!std::isfinite(temperature) || temperature <= 0.0)
        throw ConfigError("similarity_loss: temperature must be positive");
    if (p.rows() < 2) throw NumericError("similarity_loss: needs at least two graphs");
    Var s = scale(matmul_bt(l2_normalize_rows(p_aug), l2_normalize_rows(p)), 1.0 / temperature);
    Var den = row_sum(zero_diag(exp_elem(s)));
    return neg(mean_all(sub(diag_col(s), log_clamped(den, kLogClampEps))));
}

inline Var nt_xent(Var u, Var v, double temperature) {
    detail::check_same_shape(u, v, "nt_xent");
    if (!std::isfinite(temperature) || temperature <= 0.0)
        throw ConfigError("nt_xent: temperature must be positive");
    if (u.rows() < 2) throw NumericError("nt_xent: needs at least two rows");
    Var un = l2_normalize_rows(u);
    Var suv = scale(matmul_bt(un, l2_normalize_rows(v)), 1.0 / temperature);
    Var suu = scale(matmul_bt(un, un), 1.0 / temperature);
    Var den = add(row_sum(exp_elem(suv)), row_sum(zero_diag(exp_elem(suu))));
    return neg(mean_all(sub(diag_col(suv), log_clamped(den, kLogClampEps))));
}

inline Var cross_entropy(Var class_probs, const std::vector<int>& labels,
                         std::size_t* clamp_count = nullptr) {
    if (static_cast<long>(labels.size()) != class_probs.rows())
        throw NumericError("cross_entropy: label count does not match batch size");
    if (class_probs.rows() == 0) throw NumericError("cross_entropy: empty batch");
    Var picked = select_cols_per_row(class_probs, labels);
    return neg(mean_all(log_clamped(picked, kLogClampEps, clamp_count)));
}

inline Var total_loss(Var l_c, Var l_s, Var l_d, const LossWeights& w) {
    w.validate();
    for (const Var* t : {&l_c, &l_s, &l_d})
        if (t->rows() != 1 || t->cols() != 1 || !std::isfinite(t->value()(0, 0)))
            throw NumericError("total_loss: components must be finite scalars");
    return add(l_c, add(scale(l_s, w.alpha), scale(l_d, w.beta)));
}

}  // namespace sscdl::ad
