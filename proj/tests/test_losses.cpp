#include <catch2/catch_amalgamated.hpp>

#include "sscdl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

using namespace sscdl;

namespace {

Matrix randm(Rng& rng, int n, int m, double lo = -1.0, double hi = 1.0) {
    Matrix x(n, m);
    for (int j = 0; j < m; ++j)
        for (int i = 0; i < n; ++i) x(i, j) = lo + (hi - lo) * rng.next_unit();
    return x;
}

// Naive transcriptions of the loss formulas, scalar loops only. These are the
// oracles; they share no code with the library implementations.
namespace oracle {

template <typename A, typename B>
double cos_sim(const A& u, const B& v) {
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (long i = 0; i < u.size(); ++i) {
        uv += u(i) * v(i);
        uu += u(i) * u(i);
        vv += v(i) * v(i);
    }
    return uv / (std::sqrt(uu) * std::sqrt(vv));
}

// Distribution of anchor i over candidate rows of the augmented matrix.
std::vector<double> cond_dist(const Matrix& aug, const Matrix& orig, int anchor,
                              const std::vector<int>& candidates, double tau) {
    std::vector<double> e;
    for (int c : candidates) e.push_back(std::exp(cos_sim(aug.row(c), orig.row(anchor)) / tau));
    double total = 0.0;
    for (double x : e) total += x;
    for (double& x : e) x /= total;
    return e;
}

double divergence_scalar(const std::vector<double>& pw, const std::vector<double>& ps) {
    double acc = 0.0;
    for (std::size_t i = 0; i < pw.size(); ++i)
        acc += pw[i] * std::log(std::max(ps[i], 1e-12));
    return -acc / static_cast<double>(pw.size());
}

double divergence_full(const std::vector<std::vector<double>>& pw,
                       const std::vector<std::vector<double>>& ps) {
    double acc = 0.0;
    for (std::size_t i = 0; i < pw.size(); ++i)
        for (std::size_t k = 0; k < pw[i].size(); ++k)
            acc += pw[i][k] * std::log(std::max(ps[i][k], 1e-12));
    return -acc / static_cast<double>(pw.size());
}

double similarity(const Matrix& p_aug, const Matrix& p, double temp = 1.0) {
    const long n = p_aug.rows();
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        double den = 0.0;
        for (long j = 0; j < n; ++j)
            if (j != i) den += std::exp(cos_sim(p_aug.row(i), p.row(j)) / temp);
        acc += cos_sim(p_aug.row(i), p.row(i)) / temp - std::log(den);
    }
    return -acc / static_cast<double>(n);
}

double ntxent(const Matrix& u, const Matrix& v, double tau) {
    const long n = u.rows();
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        double pos = std::exp(cos_sim(u.row(i), v.row(i)) / tau);
        double den = pos;
        for (long k = 0; k < n; ++k) {
            if (k == i) continue;
            den += std::exp(cos_sim(u.row(i), v.row(k)) / tau);
            den += std::exp(cos_sim(u.row(i), u.row(k)) / tau);
        }
        acc += std::log(pos / den);
    }
    return -acc / static_cast<double>(n);
}

double ce(const Matrix& probs, const std::vector<int>& labels) {
    double acc = 0.0;
    for (long i = 0; i < probs.rows(); ++i)
        acc += std::log(std::max(probs(i, labels[static_cast<std::size_t>(i)]), 1e-12));
    return -acc / static_cast<double>(probs.rows());
}

}  // namespace oracle

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

double value_at(const Builder& build, const std::vector<Matrix>& params) {
    ad::Tape t;
    std::vector<ad::Var> vars;
    for (const auto& p : params) vars.push_back(t.param(p));
    return build(t, vars).value()(0, 0);
}

double gradient_rel_err(const Builder& build, std::vector<Matrix> params, double h = 1e-5) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& p : params) vars.push_back(tape.param(p));
    ad::Var loss = build(tape, vars);
    REQUIRE(loss.rows() == 1);
    REQUIRE(loss.cols() == 1);
    tape.backward(loss);

    double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Matrix analytic = vars[k].grad();
        for (long j = 0; j < params[k].cols(); ++j) {
            for (long i = 0; i < params[k].rows(); ++i) {
                std::vector<Matrix> pp = params;
                pp[k](i, j) += h;
                double fp = value_at(build, pp);
                pp[k](i, j) -= 2.0 * h;
                double fm = value_at(build, pp);
                double fd = (fp - fm) / (2.0 * h);
                double d = analytic(i, j) - fd;
                diff2 += d * d;
                a2 += analytic(i, j) * analytic(i, j);
                f2 += fd * fd;
            }
        }
    }
    return std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(f2), 1e-12});
}

Vector basis(long dim, long k) {
    Vector v = Vector::Zero(dim);
    v(k) = 1.0;
    return v;
}

}  // namespace

TEST_CASE("cosine similarity matches closed forms and rejects zero vectors") {
    Vector a(2), b(2);
    a << 1.0, 0.0;
    b << 1.0, 1.0;
    REQUIRE(cosine_sim(a, a) == 1.0);
    REQUIRE(cosine_sim(a, basis(2, 1)) == 0.0);
    REQUIRE(std::abs(cosine_sim(a, b) - 1.0 / std::sqrt(2.0)) < 1e-15);
    REQUIRE(std::abs(cosine_sim(a, b) - 0.7071) < 5e-5);

    REQUIRE_THROWS_AS(cosine_sim(Vector::Zero(3), basis(3, 0)), NumericError);
    REQUIRE_THROWS_AS(cosine_sim(basis(3, 0), Vector::Zero(3)), NumericError);
    REQUIRE_THROWS_AS(cosine_sim(basis(3, 0), basis(4, 0)), NumericError);

    Rng rng(31);
    for (int t = 0; t < 50; ++t) {
        Matrix m = randm(rng, 2, 5);
        double s = cosine_sim(m.row(0).transpose(), m.row(1).transpose());
        REQUIRE(s >= -1.0 - 1e-12);
        REQUIRE(s <= 1.0 + 1e-12);
    }
}

TEST_CASE("conditional probabilities match frozen examples") {
    CondDistConfig cfg;
    cfg.temperature = 1.0;

    SECTION("unit positive against three orthogonal negatives") {
        Vector anchor = basis(5, 0);
        std::vector<Vector> negs = {basis(5, 2), basis(5, 3), basis(5, 4)};
        double p = cond_prob_pair(anchor, anchor, negs, cfg);
        double expect = std::exp(1.0) / (std::exp(1.0) + 3.0);
        REQUIRE(std::abs(p - expect) < 1e-14);
        REQUIRE(std::abs(p - 0.4754) < 5e-5);
    }
    SECTION("identical candidates split mass evenly") {
        Vector anchor = basis(2, 0);
        Vector v(2);
        v << 1.0, 1.0;
        std::vector<Vector> negs = {v, v, v};
        Vector full = cond_prob_full(v, anchor, negs, cfg);
        REQUIRE(full.size() == 4);
        for (long k = 0; k < 4; ++k) REQUIRE(std::abs(full(k) - 0.25) < 1e-14);
    }
    SECTION("small temperature drives the aligned pair toward certainty") {
        // At tau = 0.05 the gap 1 - p is K * e^{-20}, about 2.1e-9 per
        // negative, so the 1e-8 threshold holds through K = 4.
        Vector anchor = basis(6, 0);
        std::vector<Vector> negs4 = {basis(6, 2), basis(6, 3), basis(6, 4), basis(6, 5)};
        CondDistConfig sharp;
        sharp.temperature = 0.05;
        REQUIRE(cond_prob_pair(anchor, anchor, negs4, sharp) >= 1.0 - 1e-8);

        std::vector<Vector> negs10;
        for (long k = 2; k < 12; ++k) negs10.push_back(basis(12, k));
        sharp.temperature = 0.02;
        REQUIRE(cond_prob_pair(basis(12, 0), basis(12, 0), negs10, sharp) >= 1.0 - 1e-8);
    }
    SECTION("validation") {
        REQUIRE_THROWS_AS(cond_prob_pair(basis(2, 0), basis(2, 0), {}, cfg), NumericError);
        CondDistConfig bad;
        bad.temperature = 0.0;
        REQUIRE_THROWS_AS(cond_prob_pair(basis(2, 0), basis(2, 0), {basis(2, 1)}, bad), ConfigError);
        bad.temperature = 1.0;
        bad.negative_count = 0;
        REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    }
}

TEST_CASE("full conditional distributions normalize and ignore embedding scale") {
    Rng rng(777);
    CondDistConfig cfg;
    for (int t = 0; t < 1000; ++t) {
        int dim = 2 + static_cast<int>(rng.below(7));
        int k = 1 + static_cast<int>(rng.below(6));
        cfg.temperature = 0.1 + rng.next_unit() * 2.0;
        Vector anchor = randm(rng, dim, 1);
        Vector pos = randm(rng, dim, 1);
        if (anchor.norm() == 0.0 || pos.norm() == 0.0) continue;
        std::vector<Vector> negs;
        for (int j = 0; j < k; ++j) {
            Vector n = randm(rng, dim, 1);
            if (n.norm() == 0.0) n = basis(dim, 0);
            negs.push_back(n);
        }
        Vector full = cond_prob_full(pos, anchor, negs, cfg);
        REQUIRE(full.size() == k + 1);
        REQUIRE(std::abs(full.sum() - 1.0) < 1e-9);
        for (long c = 0; c < full.size(); ++c) REQUIRE(full(c) > 0.0);

        double scale = std::pow(10.0, -2.0 + 5.0 * rng.next_unit());
        std::vector<Vector> negs_scaled;
        for (const auto& n : negs) negs_scaled.push_back(scale * n);
        Vector rescaled =
            cond_prob_full(Vector(scale * pos), Vector(scale * anchor), negs_scaled, cfg);
        REQUIRE((rescaled - full).cwiseAbs().maxCoeff() <= 1e-10);
    }
}

TEST_CASE("distribution divergence matches frozen examples and the naive oracle") {
    SECTION("half-probability pair") {
        Vector pw(1), ps(1);
        pw << 0.5;
        ps << 0.5;
        REQUIRE(std::abs(distribution_divergence(pw, ps) - 0.5 * std::log(2.0)) < 1e-14);
        REQUIRE(std::abs(distribution_divergence(pw, ps) - 0.3466) < 5e-5);
    }
    SECTION("certain strong pair contributes nothing") {
        Vector pw(1), ps(1);
        pw << 0.7;
        ps << 1.0;
        REQUIRE(distribution_divergence(pw, ps) == 0.0);
    }
    SECTION("identical uniform distributions over four candidates") {
        Matrix u = Matrix::Constant(1, 4, 0.25);
        REQUIRE(std::abs(distribution_divergence(u, u) - std::log(4.0)) < 1e-14);
        REQUIRE(std::abs(distribution_divergence(u, u) - 1.3863) < 5e-5);
    }
    SECTION("zero strong probabilities are clamped and counted") {
        Vector pw(2), ps(2);
        pw << 0.5, 0.5;
        ps << 0.0, 0.5;
        std::size_t clamps = 0;
        double v = distribution_divergence(pw, ps, &clamps);
        REQUIRE(clamps == 1);
        REQUIRE(std::isfinite(v));
        REQUIRE(std::abs(v - (-0.5 * (0.5 * std::log(1e-12) + 0.5 * std::log(0.5)))) < 1e-12);
    }
    SECTION("random batches against the oracle") {
        Rng rng(402);
        for (int t = 0; t < 25; ++t) {
            int n = 2 + static_cast<int>(rng.below(7));
            int width = 2 + static_cast<int>(rng.below(5));
            Matrix pw = randm(rng, n, width, 0.01, 1.0);
            Matrix ps = randm(rng, n, width, 0.01, 1.0);
            for (long i = 0; i < n; ++i) {
                pw.row(i) /= pw.row(i).sum();
                ps.row(i) /= ps.row(i).sum();
            }
            std::vector<std::vector<double>> opw(static_cast<std::size_t>(n)),
                ops(static_cast<std::size_t>(n));
            std::vector<double> vw, vs;
            for (long i = 0; i < n; ++i) {
                for (long k = 0; k < width; ++k) {
                    opw[static_cast<std::size_t>(i)].push_back(pw(i, k));
                    ops[static_cast<std::size_t>(i)].push_back(ps(i, k));
                }
                vw.push_back(pw(i, 0));
                vs.push_back(ps(i, 0));
            }
            REQUIRE(std::abs(distribution_divergence(pw, ps) - oracle::divergence_full(opw, ops)) <=
                    1e-10);
            Vector pwv = Eigen::Map<Vector>(vw.data(), n);
            Vector psv = Eigen::Map<Vector>(vs.data(), n);
            REQUIRE(std::abs(distribution_divergence(pwv, psv) -
                             oracle::divergence_scalar(vw, vs)) <= 1e-10);
        }
    }
    SECTION("shape mismatch throws") {
        REQUIRE_THROWS_AS(distribution_divergence(Vector(Vector::Ones(2)), Vector(Vector::Ones(3))),
                          NumericError);
        REQUIRE_THROWS_AS(
            distribution_divergence(Matrix(Matrix::Ones(2, 2)), Matrix(Matrix::Ones(2, 3))),
            NumericError);
    }
}

TEST_CASE("similarity loss matches frozen examples") {
    SECTION("orthonormal pairs") {
        Matrix eye = Matrix::Identity(2, 2);
        REQUIRE(std::abs(similarity_loss(eye, eye) - (-1.0)) < 1e-14);
    }
    SECTION("uniform similarities collapse to a batch-size constant") {
        // With every pairwise similarity equal to s the positive term and the
        // log-sum cancel, leaving log(n - 1) for any s.
        Matrix pa(4, 2), pb(4, 2);
        for (long i = 0; i < 4; ++i) {
            pa.row(i) << 1.0, 2.0;
            pb.row(i) << 1.0, 2.0;
        }
        REQUIRE(std::abs(similarity_loss(pa, pb) - std::log(3.0)) < 1e-12);

        double s = 0.3;
        for (long i = 0; i < 4; ++i) {
            pa.row(i) << 1.0, 0.0;
            pb.row(i) << s, std::sqrt(1.0 - s * s);
        }
        REQUIRE(std::abs(similarity_loss(pa, pb) - std::log(3.0)) < 1e-12);
    }
    SECTION("fully orthogonal views") {
        Matrix pa(2, 2), pb(2, 2);
        pa.row(0) << 1.0, 0.0;
        pa.row(1) << 1.0, 0.0;
        pb.row(0) << 0.0, 1.0;
        pb.row(1) << 0.0, 1.0;
        REQUIRE(std::abs(similarity_loss(pa, pb)) < 1e-14);
    }
    SECTION("floor from bounded similarities") {
        Rng rng(88);
        for (int t = 0; t < 50; ++t) {
            int n = 2 + static_cast<int>(rng.below(7));
            Matrix pa = randm(rng, n, 5), pb = randm(rng, n, 5);
            REQUIRE(similarity_loss(pa, pb) >=
                    std::log(static_cast<double>(n - 1)) - 2.0 - 1e-9);
        }
    }
    SECTION("validation") {
        Matrix one = Matrix::Ones(1, 3);
        REQUIRE_THROWS_AS(similarity_loss(one, one), NumericError);
        Matrix two = Matrix::Ones(2, 3);
        Matrix zero_row = two;
        zero_row.row(1).setZero();
        REQUIRE_THROWS_AS(similarity_loss(two, zero_row), NumericError);
        REQUIRE_THROWS_AS(similarity_loss(two, two, 0.0), ConfigError);
        REQUIRE_THROWS_AS(similarity_loss(two, Matrix::Ones(3, 3)), NumericError);
    }
}

TEST_CASE("similarity loss equals the double-loop oracle") {
    Rng rng(909);
    for (int t = 0; t < 100; ++t) {
        Matrix pa = randm(rng, 8, 6), pb = randm(rng, 8, 6);
        REQUIRE(std::abs(similarity_loss(pa, pb) - oracle::similarity(pa, pb)) <= 1e-10);
    }
}

TEST_CASE("nt-xent matches frozen examples and the oracle") {
    SECTION("all similarities equal gives ln 3 at n = 2") {
        Matrix u(2, 2), v(2, 2);
        for (long i = 0; i < 2; ++i) {
            u.row(i) << 2.0, 1.0;
            v.row(i) << 2.0, 1.0;
        }
        REQUIRE(std::abs(nt_xent(u, v, 0.7) - std::log(3.0)) < 1e-12);
        REQUIRE(std::abs(nt_xent(u, v, 0.7) - 1.0986) < 5e-5);
    }
    SECTION("antipodal negatives") {
        Matrix u(2, 2), v(2, 2);
        u.row(0) << 1.0, 0.0;
        u.row(1) << -1.0, 0.0;
        v = u;
        double expect = std::log(1.0 + 2.0 * std::exp(-2.0));
        REQUIRE(std::abs(nt_xent(u, v, 1.0) - expect) < 1e-12);
        REQUIRE(std::abs(nt_xent(u, v, 1.0) - 0.2396) < 1e-4);
    }
    SECTION("row scaling is invisible") {
        Rng rng(55);
        Matrix u = randm(rng, 5, 4), v = randm(rng, 5, 4);
        REQUIRE(std::abs(nt_xent(u, v, 0.5) - nt_xent(Matrix(2.0 * u), Matrix(2.0 * v), 0.5)) <=
                1e-12);
    }
    SECTION("random batches against the oracle") {
        Rng rng(606);
        for (int t = 0; t < 100; ++t) {
            Matrix u = randm(rng, 8, 6), v = randm(rng, 8, 6);
            REQUIRE(std::abs(nt_xent(u, v, 0.5) - oracle::ntxent(u, v, 0.5)) <= 1e-10);
        }
    }
    SECTION("validation") {
        Matrix one = Matrix::Ones(1, 2);
        REQUIRE_THROWS_AS(nt_xent(one, one, 0.5), NumericError);
        Matrix two = Matrix::Ones(2, 2);
        REQUIRE_THROWS_AS(nt_xent(two, two, -1.0), ConfigError);
    }
}

TEST_CASE("cross entropy matches frozen examples") {
    SECTION("perfect one-hot prediction") {
        Matrix p(2, 3);
        p.row(0) << 1.0, 0.0, 0.0;
        p.row(1) << 0.0, 0.0, 1.0;
        REQUIRE(cross_entropy(p, {0, 2}) == 0.0);
    }
    SECTION("uniform over two classes") {
        Matrix p = Matrix::Constant(4, 2, 0.5);
        REQUIRE(std::abs(cross_entropy(p, {0, 1, 0, 1}) - std::log(2.0)) < 1e-14);
        REQUIRE(std::abs(cross_entropy(p, {0, 1, 0, 1}) - 0.6931) < 5e-5);
    }
    SECTION("three-quarters confidence") {
        Matrix p(1, 2);
        p << 0.25, 0.75;
        REQUIRE(std::abs(cross_entropy(p, {1}) - (-std::log(0.75))) < 1e-14);
        REQUIRE(std::abs(cross_entropy(p, {1}) - 0.2877) < 5e-5);
    }
    SECTION("zero probability at the label is clamped") {
        Matrix p(1, 2);
        p << 1.0, 0.0;
        std::size_t clamps = 0;
        double v = cross_entropy(p, {1}, &clamps);
        REQUIRE(clamps == 1);
        REQUIRE(std::abs(v - (-std::log(1e-12))) < 1e-10);
    }
    SECTION("random batches against the oracle") {
        Rng rng(14);
        for (int t = 0; t < 50; ++t) {
            Matrix p = randm(rng, 6, 4, 0.01, 1.0);
            for (long i = 0; i < 6; ++i) p.row(i) /= p.row(i).sum();
            std::vector<int> labels;
            for (int i = 0; i < 6; ++i) labels.push_back(static_cast<int>(rng.below(4)));
            REQUIRE(std::abs(cross_entropy(p, labels) - oracle::ce(p, labels)) <= 1e-10);
        }
    }
    SECTION("validation") {
        Matrix p = Matrix::Constant(2, 2, 0.5);
        REQUIRE_THROWS_AS(cross_entropy(p, {0}), NumericError);
        REQUIRE_THROWS_AS(cross_entropy(p, {0, 2}), DataError);
        REQUIRE_THROWS_AS(cross_entropy(p, {-1, 0}), DataError);
    }
}

TEST_CASE("total loss composes components") {
    LossWeights w;
    w.alpha = 0.0;
    w.beta = 0.0;
    REQUIRE(total_loss(1.25, 9.0, -3.0, w) == 1.25);

    w.alpha = 0.1;
    w.beta = 0.5;
    REQUIRE(std::abs(total_loss(1.0, 2.0, 3.0, w) - 2.7) < 1e-12);

    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        double lc = randm(rng, 1, 1)(0, 0), ls = randm(rng, 1, 1)(0, 0),
               ld = randm(rng, 1, 1)(0, 0);
        double a = total_loss(lc, ls, ld, w);
        double b = (w.beta * ld + lc) + w.alpha * ls;
        REQUIRE(std::abs(a - b) < 1e-12);
    }

    REQUIRE_THROWS_AS(total_loss(std::nan(""), 0.0, 0.0, w), NumericError);
    LossWeights bad;
    bad.alpha = -0.1;
    REQUIRE_THROWS_AS(total_loss(0.0, 0.0, 0.0, bad), ConfigError);
}

TEST_CASE("negative candidate sets are anchored, distinct, and seeded") {
    SECTION("all-in-batch keeps index order and uses no randomness") {
        Rng rng(10);
        auto before = rng;
        auto cands = negative_candidates(5, -1, rng);
        REQUIRE(cands.size() == 5);
        REQUIRE(cands[1] == std::vector<int>{1, 0, 2, 3, 4});
        REQUIRE(cands[4] == std::vector<int>{4, 0, 1, 2, 3});
        REQUIRE(rng.next_u64() == before.next_u64());
    }
    SECTION("fixed count samples without replacement") {
        Rng rng(10);
        auto cands = negative_candidates(6, 3, rng);
        for (int i = 0; i < 6; ++i) {
            REQUIRE(cands[static_cast<std::size_t>(i)].size() == 4);
            REQUIRE(cands[static_cast<std::size_t>(i)][0] == i);
            std::vector<int> negs(cands[static_cast<std::size_t>(i)].begin() + 1,
                                  cands[static_cast<std::size_t>(i)].end());
            std::sort(negs.begin(), negs.end());
            REQUIRE(std::unique(negs.begin(), negs.end()) == negs.end());
            for (int x : negs) {
                REQUIRE(x != i);
                REQUIRE(x >= 0);
                REQUIRE(x < 6);
            }
        }
        Rng again(10);
        REQUIRE(negative_candidates(6, 3, again) == cands);
    }
    SECTION("validation") {
        Rng rng(1);
        REQUIRE_THROWS_AS(negative_candidates(1, -1, rng), NumericError);
        REQUIRE_THROWS_AS(negative_candidates(5, 0, rng), ConfigError);
        REQUIRE_THROWS_AS(negative_candidates(5, 5, rng), ConfigError);
        REQUIRE(negative_candidates(5, 4, rng)[0] == std::vector<int>{0, 1, 2, 3, 4});
    }
}

TEST_CASE("bound checker validates the negative-count threshold and margins") {
    SECTION("tau 1 with two negatives") {
        auto rep = theorem1_check(1.0, 2, 500, 42);
        REQUIRE(std::abs(rep.threshold - (std::exp(1.0) - 1.0)) < 1e-12);
        REQUIRE(std::abs(rep.bound - (std::log(3.0) - 1.0)) < 1e-12);
        REQUIRE(std::abs(rep.bound - 0.0986) < 5e-5);
        REQUIRE(rep.trials == 500);
        REQUIRE(rep.margins.size() == 500);
        REQUIRE(rep.scalar_observations.size() == 500);
        REQUIRE(rep.all_hold);
        REQUIRE(rep.min_margin >= 0.0);
        // Tightest case is positive similarity 1: -log p = ln(e + 2) - 1.
        REQUIRE(rep.min_margin >= std::log(std::exp(1.0) + 2.0) - 1.0 - rep.bound - 1e-9);

        auto again = theorem1_check(1.0, 2, 500, 42);
        REQUIRE(again.margins == rep.margins);
        REQUIRE(again.scalar_observations == rep.scalar_observations);

        auto j = rep.to_json();
        for (const char* key : {"tau", "negative_count", "threshold", "bound", "trials", "margins",
                                "holds", "scalar_observations", "scalar_holds", "min_margin",
                                "all_hold", "scalar_hold_count"})
            REQUIRE(j.contains(key));
    }
    SECTION("closed form at full alignment") {
        Vector anchor = basis(4, 0);
        std::vector<Vector> negs = {basis(4, 2), basis(4, 3)};
        CondDistConfig cfg;
        cfg.temperature = 1.0;
        double neg_log_p = -std::log(cond_prob_pair(anchor, anchor, negs, cfg));
        REQUIRE(std::abs(neg_log_p - (std::log(std::exp(1.0) + 2.0) - 1.0)) < 1e-12);
        REQUIRE(std::abs(neg_log_p - 0.5515) < 1e-4);
        REQUIRE(neg_log_p >= std::log(3.0) - 1.0);
    }
    SECTION("tau 0.5 with seven negatives") {
        auto rep = theorem1_check(0.5, 7, 200, 7);
        REQUIRE(std::abs(rep.threshold - (std::exp(2.0) - 1.0)) < 1e-12);
        REQUIRE(std::abs(rep.bound - (std::log(8.0) - 2.0)) < 1e-12);
        REQUIRE(std::abs(rep.bound - 0.0794) < 5e-5);
        REQUIRE(rep.all_hold);
    }
    SECTION("below-threshold negative count is rejected") {
        REQUIRE_THROWS_AS(theorem1_check(1.0, 1, 10, 0), ConfigError);
        REQUIRE_THROWS_WITH(theorem1_check(1.0, 1, 10, 0),
                            Catch::Matchers::ContainsSubstring("threshold"));
        REQUIRE_THROWS_AS(theorem1_check(-0.5, 5, 10, 0), ConfigError);
        REQUIRE_THROWS_AS(theorem1_check(1.0, 2, 0, 0), ConfigError);
    }
}

TEST_CASE("tape losses equal the plain evaluations") {
    Rng rng(991);
    Matrix h = randm(rng, 8, 6), hw = randm(rng, 8, 6), hs = randm(rng, 8, 6);
    Rng crng(17);
    auto cands = negative_candidates(8, 4, crng);
    CondDistConfig cfg;
    cfg.temperature = 0.5;

    ad::Tape t;
    ad::Var vh = t.constant(h), vw = t.param(hw), vs = t.param(hs);
    ad::Var pw = ad::cond_prob_batch(vw, vh, cfg.temperature, cands);
    ad::Var ps = ad::cond_prob_batch(vs, vh, cfg.temperature, cands);

    SECTION("conditional distribution rows") {
        REQUIRE(pw.rows() == 8);
        REQUIRE(pw.cols() == 5);
        for (long i = 0; i < 8; ++i) {
            std::vector<Vector> negs;
            for (std::size_t c = 1; c < cands[static_cast<std::size_t>(i)].size(); ++c)
                negs.push_back(hw.row(cands[static_cast<std::size_t>(i)][c]).transpose());
            Vector full =
                cond_prob_full(hw.row(i).transpose(), h.row(i).transpose(), negs, cfg);
            for (long c = 0; c < 5; ++c) REQUIRE(std::abs(pw.value()(i, c) - full(c)) <= 1e-12);

            auto od = oracle::cond_dist(hw, h, static_cast<int>(i),
                                        cands[static_cast<std::size_t>(i)], cfg.temperature);
            for (long c = 0; c < 5; ++c)
                REQUIRE(std::abs(pw.value()(i, c) - od[static_cast<std::size_t>(c)]) <= 1e-10);
        }
    }
    SECTION("divergence in both modes") {
        Vector pwv(8), psv(8);
        for (long i = 0; i < 8; ++i) {
            pwv(i) = pw.value()(i, 0);
            psv(i) = ps.value()(i, 0);
        }
        ad::Var d1 = ad::distribution_divergence(pw, ps, DivergenceMode::scalar_pair);
        REQUIRE(std::abs(d1.value()(0, 0) - distribution_divergence(pwv, psv)) <= 1e-12);
        ad::Var d2 = ad::distribution_divergence(pw, ps, DivergenceMode::full_distribution);
        REQUIRE(std::abs(d2.value()(0, 0) -
                         distribution_divergence(Matrix(pw.value()), Matrix(ps.value()))) <= 1e-12);
    }
    SECTION("similarity, nt-xent, cross entropy, total") {
        ad::Var sv = ad::similarity_loss(vw, vh);
        REQUIRE(std::abs(sv.value()(0, 0) - similarity_loss(hw, h)) <= 1e-12);
        REQUIRE(std::abs(sv.value()(0, 0) - oracle::similarity(hw, h)) <= 1e-10);

        ad::Var nv = ad::nt_xent(vw, vh, 0.5);
        REQUIRE(std::abs(nv.value()(0, 0) - nt_xent(hw, h, 0.5)) <= 1e-12);

        Matrix probs = randm(rng, 8, 3, 0.01, 1.0);
        for (long i = 0; i < 8; ++i) probs.row(i) /= probs.row(i).sum();
        std::vector<int> labels;
        for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int>(rng.below(3)));
        ad::Var cv = ad::cross_entropy(t.param(probs), labels);
        REQUIRE(std::abs(cv.value()(0, 0) - cross_entropy(probs, labels)) <= 1e-12);

        LossWeights w;
        ad::Var lt = ad::total_loss(cv, sv, ad::distribution_divergence(pw, ps, cfg.mode), w);
        double plain = total_loss(cross_entropy(probs, labels), similarity_loss(hw, h),
                                  ad::distribution_divergence(pw, ps, cfg.mode).value()(0, 0), w);
        REQUIRE(std::abs(lt.value()(0, 0) - plain) <= 1e-12);
    }
    SECTION("candidate validation") {
        auto bad = cands;
        bad[0][0] = 1;
        REQUIRE_THROWS_AS(ad::cond_prob_batch(vw, vh, 0.5, bad), NumericError);
        auto ragged = cands;
        ragged[2].pop_back();
        REQUIRE_THROWS_AS(ad::cond_prob_batch(vw, vh, 0.5, ragged), NumericError);
    }
}

TEST_CASE("tape losses differentiate") {
    Rng rng(2024);
    Matrix h = randm(rng, 5, 4, 0.2, 1.0), hw = randm(rng, 5, 4, 0.2, 1.0),
           hs = randm(rng, 5, 4, 0.2, 1.0);
    Rng crng(9);
    auto cands = negative_candidates(5, 2, crng);

    SECTION("conditional divergence pipeline, scalar mode") {
        REQUIRE(gradient_rel_err(
                    [&](ad::Tape& t, const std::vector<ad::Var>& v) {
                        ad::Var pw = ad::cond_prob_batch(v[0], v[2], 0.5, cands);
                        ad::Var ps = ad::cond_prob_batch(v[1], v[2], 0.5, cands);
                        return ad::distribution_divergence(pw, ps, DivergenceMode::scalar_pair);
                    },
                    {hw, hs, h}) < 1e-6);
    }
    SECTION("conditional divergence pipeline, full mode") {
        REQUIRE(gradient_rel_err(
                    [&](ad::Tape& t, const std::vector<ad::Var>& v) {
                        ad::Var pw = ad::cond_prob_batch(v[0], v[2], 0.5, cands);
                        ad::Var ps = ad::cond_prob_batch(v[1], v[2], 0.5, cands);
                        return ad::distribution_divergence(pw, ps,
                                                           DivergenceMode::full_distribution);
                    },
                    {hw, hs, h}) < 1e-6);
    }
    SECTION("similarity loss") {
        REQUIRE(gradient_rel_err(
                    [](ad::Tape& t, const std::vector<ad::Var>& v) {
                        return ad::similarity_loss(v[0], v[1]);
                    },
                    {hw, h}) < 1e-6);
    }
    SECTION("nt-xent") {
        REQUIRE(gradient_rel_err(
                    [](ad::Tape& t, const std::vector<ad::Var>& v) {
                        return ad::nt_xent(v[0], v[1], 0.5);
                    },
                    {hw, h}) < 1e-6);
    }
    SECTION("cross entropy") {
        Matrix probs = randm(rng, 6, 3, 0.05, 1.0);
        std::vector<int> labels;
        for (int i = 0; i < 6; ++i) labels.push_back(static_cast<int>(rng.below(3)));
        REQUIRE(gradient_rel_err(
                    [&](ad::Tape& t, const std::vector<ad::Var>& v) {
                        return ad::cross_entropy(v[0], labels);
                    },
                    {probs}) < 1e-6);
    }
}
