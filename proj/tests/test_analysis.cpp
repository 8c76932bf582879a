#include <doctest.h>

#include <cmath>
#include <sstream>

#include "apex/analysis.hpp"

using namespace apex;

namespace {

TensorD diag_matrix(std::initializer_list<double> values) {
    const int64_t n = static_cast<int64_t>(values.size());
    TensorD t({n, n});
    int64_t i = 0;
    for (double v : values) {
        t.at(i, i) = v;
        ++i;
    }
    return t;
}

// Seeded orthogonal matrix: Gram-Schmidt on a Gaussian square matrix.
TensorD random_orthogonal(int n, uint64_t seed) {
    Rng rng(seed);
    TensorD q({n, n});
    for (int j = 0; j < n; ++j) {
        for (;;) {
            for (int r = 0; r < n; ++r) q.at(r, j) = rng.gauss();
            for (int p = 0; p < j; ++p) {
                double dot = 0.0;
                for (int r = 0; r < n; ++r) dot += q.at(r, j) * q.at(r, p);
                for (int r = 0; r < n; ++r) q.at(r, j) -= dot * q.at(r, p);
            }
            double norm = 0.0;
            for (int r = 0; r < n; ++r) norm += q.at(r, j) * q.at(r, j);
            if (norm > 1e-12) {
                norm = std::sqrt(norm);
                for (int r = 0; r < n; ++r) q.at(r, j) /= norm;
                break;
            }
        }
    }
    return q;
}

struct FeasibleTuple {
    int m, n, k, rho, delta, s;
};

FeasibleTuple sample_feasible(Rng& rng) {
    for (;;) {
        FeasibleTuple t;
        t.m = 4 + static_cast<int>(rng.below(20));
        t.n = 4 + static_cast<int>(rng.below(20));
        t.k = static_cast<int>(rng.below(static_cast<uint64_t>(std::min(t.m, t.n)) + 1));
        const int max_rho = t.n - t.k;
        if (max_rho < 0) continue;
        t.rho = static_cast<int>(rng.below(static_cast<uint64_t>(max_rho) + 1));
        t.delta = static_cast<int>(rng.below(static_cast<uint64_t>(std::min(t.rho, t.k)) + 1));
        if (t.k + t.rho - t.delta > t.m) continue;
        const int max_s = std::min({t.n - t.k, t.m - t.k, t.rho - t.delta});
        if (max_s < 0) continue;
        t.s = static_cast<int>(rng.below(static_cast<uint64_t>(max_s) + 1));
        return t;
    }
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("svd of a diagonal matrix") {
    const auto sigma = svd_singular_values(diag_matrix({3.0, 2.0, 1.0}));
    REQUIRE(sigma.size() == 3);
    CHECK(sigma[0] == doctest::Approx(3.0));
    CHECK(sigma[1] == doctest::Approx(2.0));
    CHECK(sigma[2] == doctest::Approx(1.0));
}

TEST_CASE("svd of an orthogonal matrix is all ones") {
    const TensorD q = random_orthogonal(6, 99);
    for (double s : svd_singular_values(q)) CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("squared singular values sum to the Frobenius norm") {
    Rng rng(7);
    const TensorD w = TensorD::randn({20, 12}, 0.0, 1.0, rng);
    const auto sigma = svd_singular_values(w);
    double ss = 0.0;
    for (double s : sigma) ss += s * s;
    double fro = 0.0;
    for (double v : w.data) fro += v * v;
    CHECK(ss == doctest::Approx(fro).epsilon(1e-8));
}

TEST_CASE("svd handles wide matrices and rejects bad input") {
    Rng rng(8);
    const TensorD w = TensorD::randn({5, 14}, 0.0, 1.0, rng);
    const auto sigma = svd_singular_values(w);
    CHECK(sigma.size() == 5);  // min(m, n) nonzero block comes first
    CHECK_THROWS_AS(svd_singular_values(TensorD::zeros({3})), ShapeError);
}

TEST_CASE("effective rank thresholds") {
    CHECK(effective_rank(TensorD::zeros({4, 4}), 0.01) == 0);
    CHECK(effective_rank(TensorD::identity(8), 0.01) == 8);
    CHECK(effective_rank(diag_matrix({1.0, 0.005}), 0.01) == 1);
    CHECK_THROWS_AS(effective_rank(TensorD::identity(2), 0.0), ConfigError);
    CHECK_THROWS_AS(effective_rank(TensorD::identity(2), 1.0), ConfigError);
}

TEST_CASE("effective rank is monotone non-increasing in eps") {
    Rng rng(9);
    TensorD w = TensorD::randn({10, 10}, 0.0, 1.0, rng);
    for (int64_t i = 0; i < 10; ++i)
        for (int64_t j = 0; j < 10; ++j) w.at(i, j) *= (i < 3 ? 1.0 : 0.02);
    int prev = 1 << 20;
    for (double eps : {0.001, 0.01, 0.05, 0.2, 0.8}) {
        const int r = effective_rank(w, eps);
        CHECK(r <= prev);
        prev = r;
    }
}

TEST_CASE("constructed base matrix has rank exactly k + rho - delta") {
    const RankTestCase tc = construct_rank_testcase(12, 10, 4, 3, 2, 1, 5);
    CHECK(effective_rank(tc.base(), 0.01) == 4 + 3 - 2);
    // at U = 0 the augmented matrix is the base matrix
    CHECK(effective_rank(tc.augmented(), 0.01) >= 4 + std::max(3 - 2, 1));
}

TEST_CASE("oracle map cancels the in-span contamination of S columns") {
    const RankTestCase tc = construct_rank_testcase(14, 12, 5, 4, 2, 2, 8);
    const TensorD aug = tc.augmented();
    // every S column of W_N + U must be orthogonal to span(W_P)
    for (int s : tc.s_indices) {
        for (int p = 0; p < tc.k; ++p) {
            double dot = 0.0;
            for (int r = 0; r < tc.m; ++r) dot += aug.at(r, tc.k + s) * tc.w_p.at(r, p);
            CHECK(dot == doctest::Approx(0.0).epsilon(1e-9));
        }
    }
    // and M is genuinely nonzero in this configuration
    double msum = 0.0;
    for (double v : tc.oracle_m.data) msum += std::abs(v);
    CHECK(msum > 0.0);
}

TEST_CASE("degenerate all-zero case has rank zero") {
    const RankTestCase tc = construct_rank_testcase(6, 5, 0, 0, 0, 0, 3);
    CHECK(effective_rank(tc.base(), 0.01) == 0);
    CHECK(effective_rank(tc.augmented(), 0.01) == 0);
}

TEST_CASE("infeasible dimension combinations are rejected") {
    CHECK_THROWS_AS(construct_rank_testcase(4, 10, 2, 9, 0, 0, 1), ConfigError);  // rho > n-k
    CHECK_THROWS_AS(construct_rank_testcase(4, 8, 2, 3, 0, 0, 1), ConfigError);   // k+rho > m
    CHECK_THROWS_AS(construct_rank_testcase(8, 8, 2, 3, 1, 4, 1), ConfigError);   // s > rho-delta
    CHECK_THROWS_AS(construct_rank_testcase(8, 8, 1, 2, 2, 0, 1), ConfigError);   // delta > k
}

TEST_CASE("rank bounds hold over 50 random feasible tuples") {
    Rng rng(2718);
    int nontrivial = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const FeasibleTuple t = sample_feasible(rng);
        const RankTestCase tc =
            construct_rank_testcase(t.m, t.n, t.k, t.rho, t.delta, t.s, rng.next_u64());
        const int base_rank = effective_rank(tc.base(), 0.01);
        const int aug_rank = effective_rank(tc.augmented(), 0.01);
        CHECK(base_rank == t.k + t.rho - t.delta);
        CHECK(aug_rank >= t.k + std::max(t.rho - t.delta, t.s));
        if (t.s > 0) ++nontrivial;
    }
    CHECK(nontrivial > 0);
}

TEST_CASE("rank report covers checkpoints x layers x matrices") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ffn = 12;
    cfg.vocab_size = 17;
    cfg.max_seq_len = 6;
    const ModelParams a = init_params(cfg);
    ModelConfig cfg2 = cfg;
    cfg2.seed = 1;
    const ModelParams b = init_params(cfg2);

    const auto rows = rank_report({{"ck0", &a}, {"ck1", &b}},
                                  {TargetMatrix::V, TargetMatrix::U, TargetMatrix::D}, 0.01);
    CHECK(rows.size() == 2 * 2 * 3);
    for (const auto& r : rows) {
        CHECK(r.sigma_max > 0.0);
        CHECK(r.eff_rank >= 1);
        CHECK(std::is_sorted(r.sigma.rbegin(), r.sigma.rend()));
    }

    std::ostringstream os;
    write_rank_report_csv(rows, os);
    std::string header;
    std::istringstream is(os.str());
    std::getline(is, header);
    CHECK(header == "checkpoint,layer,matrix,sigma_max,eff_rank,eps_rel");

    CHECK_THROWS_AS(rank_report({}, {TargetMatrix::V}, 0.01), DataError);
}

TEST_CASE("zero-init fusion does not move reported ranks") {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.d_ffn = 16;
    cfg.vocab_size = 19;
    cfg.max_seq_len = 6;
    ModelParams p = init_params(cfg);
    const auto before = rank_report({{"pre", &p}}, {TargetMatrix::V, TargetMatrix::G}, 0.01);

    AdvantageSets sets;
    sets.mha.resize(1);
    sets.ffn.resize(1);
    sets.mha[0].p = {0};
    sets.mha[0].n = {1};
    sets.ffn[0].p = {0, 1};
    sets.ffn[0].n = {2, 3};
    OperatorBundle ops = attach_operators(p, sets, 10);
    fuse_all(p, ops);
    const auto after = rank_report({{"post", &p}}, {TargetMatrix::V, TargetMatrix::G}, 0.01);
    REQUIRE(before.size() == after.size());
    for (size_t i = 0; i < before.size(); ++i) {
        CHECK(before[i].eff_rank == after[i].eff_rank);
        CHECK(before[i].sigma_max == doctest::Approx(after[i].sigma_max));
    }
}

}  // TEST_SUITE
