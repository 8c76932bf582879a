#include "apex/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "apex/errors.hpp"
#include "apex/rng.hpp"

namespace apex {

std::vector<double> svd_singular_values(const TensorD& w) {
    if (w.ndim() != 2) throw ShapeError("svd expects a 2-d matrix");
    if (std::max(w.rows(), w.cols()) > 1024) throw ShapeError("svd_small is capped at 1024");
    // One-sided Jacobi orthogonalizes columns; work on the tall orientation.
    TensorD b = w.rows() >= w.cols() ? w : transpose(w);
    const int64_t m = b.rows(), n = b.cols();

    constexpr double kTol = 1e-12;
    constexpr int kMaxSweeps = 60;
    double fro2 = 0.0;
    for (double v : b.data) fro2 += v * v;
    // Columns whose norm collapses to rounding noise (linearly dependent
    // inputs) count as converged; rotating against them cycles forever.
    const double zero_floor = fro2 * kTol * kTol;

    bool converged = false;
    int sweep = 0;
    for (; sweep < kMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (int64_t i = 0; i < n - 1; ++i) {
            for (int64_t j = i + 1; j < n; ++j) {
                double aii = 0.0, ajj = 0.0, aij = 0.0;
                for (int64_t r = 0; r < m; ++r) {
                    const double x = b.at(r, i), y = b.at(r, j);
                    aii += x * x;
                    ajj += y * y;
                    aij += x * y;
                }
                if (aii <= zero_floor || ajj <= zero_floor) continue;
                if (std::abs(aij) <= kTol * std::sqrt(aii * ajj)) continue;
                converged = false;
                const double zeta = (ajj - aii) / (2.0 * aij);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (int64_t r = 0; r < m; ++r) {
                    const double x = b.at(r, i), y = b.at(r, j);
                    b.at(r, i) = c * x - s * y;
                    b.at(r, j) = s * x + c * y;
                }
            }
        }
    }
    if (!converged)
        throw NumericError("jacobi svd did not converge within " + std::to_string(sweep) +
                           " sweeps");

    std::vector<double> sigma(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        double ss = 0.0;
        for (int64_t r = 0; r < m; ++r) ss += b.at(r, j) * b.at(r, j);
        sigma[static_cast<size_t>(j)] = std::sqrt(ss);
    }
    std::sort(sigma.begin(), sigma.end(), std::greater<double>());
    return sigma;
}

int effective_rank(const std::vector<double>& sigma, double eps_rel) {
    if (!(eps_rel > 0.0 && eps_rel < 1.0)) throw ConfigError("eps_rel must lie in (0, 1)");
    if (sigma.empty() || sigma[0] <= 0.0) return 0;
    const double threshold = eps_rel * sigma[0];
    int count = 0;
    for (double s : sigma)
        if (s >= threshold) ++count;
    return count;
}

int effective_rank(const TensorD& w, double eps_rel) {
    return effective_rank(svd_singular_values(w), eps_rel);
}

// ---- constructed rank test cases ----

namespace {

// Orthonormal m x c matrix from seeded Gaussians via modified Gram-Schmidt.
TensorD orthonormal_columns(int m, int c, Rng& rng) {
    TensorD q({m, std::max(c, 1)});
    for (int j = 0; j < c; ++j) {
        for (;;) {
            for (int r = 0; r < m; ++r) q.at(r, j) = rng.gauss();
            for (int p = 0; p < j; ++p) {
                double dot = 0.0;
                for (int r = 0; r < m; ++r) dot += q.at(r, j) * q.at(r, p);
                for (int r = 0; r < m; ++r) q.at(r, j) -= dot * q.at(r, p);
            }
            double norm = 0.0;
            for (int r = 0; r < m; ++r) norm += q.at(r, j) * q.at(r, j);
            norm = std::sqrt(norm);
            if (norm > 1e-6) {
                for (int r = 0; r < m; ++r) q.at(r, j) /= norm;
                break;
            }
        }
    }
    return q;
}

}  // namespace

TensorD RankTestCase::base() const {
    TensorD out({m, n});
    for (int r = 0; r < m; ++r) {
        for (int j = 0; j < k; ++j) out.at(r, j) = w_p.at(r, j);
        for (int j = 0; j < n - k; ++j) out.at(r, k + j) = w_n.at(r, j);
    }
    return out;
}

TensorD RankTestCase::augmented() const {
    TensorD out = base();
    for (int r = 0; r < m; ++r)
        for (int j = 0; j < n - k; ++j) out.at(r, k + j) += u.at(r, j);
    return out;
}

RankTestCase construct_rank_testcase(int m, int n, int k, int rho, int delta, int s_cols,
                                     uint64_t seed) {
    if (m < 1 || n < 1 || k < 0 || rho < 0 || delta < 0 || s_cols < 0)
        throw ConfigError("rank testcase dims must be nonnegative (m, n >= 1)");
    if (k > n) throw ConfigError("k exceeds n");
    if (delta > rho || rho > n - k) throw ConfigError("need delta <= rho <= n - k");
    if (delta > k) throw ConfigError("need delta <= k (overlap lives inside span(W_P))");
    if (k + rho - delta > m) throw ConfigError("need k + rho - delta <= m");
    if (s_cols > std::min(n - k, m - k)) throw ConfigError("s_cols exceeds min(n-k, m-k)");
    if (s_cols > rho - delta)
        throw ConfigError("need s_cols <= rho - delta: U = W_P*M lies in span(W_P), so only "
                          "fresh W_N directions can stand orthogonal to it");

    RankTestCase tc;
    tc.m = m;
    tc.n = n;
    tc.k = k;
    tc.rho = rho;
    tc.delta = delta;
    tc.s_cols = s_cols;

    Rng rng(seed_stream(seed, 0x7a9c));
    const int fresh = rho - delta;
    const TensorD q = orthonormal_columns(m, k + fresh, rng);

    tc.w_n = TensorD({m, std::max(n - k, 1)});  // width-1 filler when n == k
    if (k > 0) {
        tc.w_p = TensorD({m, k});
        for (int r = 0; r < m; ++r)
            for (int j = 0; j < k; ++j) tc.w_p.at(r, j) = q.at(r, j);
        tc.oracle_m = TensorD({k, std::max(n - k, 1)});
    }

    // N-block columns: delta in-span, then rho-delta fresh, the rest zero.
    for (int j = 0; j < delta; ++j) {
        const double c = rng.uniform(0.7, 1.5);
        for (int r = 0; r < m; ++r) tc.w_n.at(r, j) = c * tc.w_p.at(r, j);
    }
    for (int j = 0; j < fresh; ++j) {
        const double c = rng.uniform(0.7, 1.5);
        for (int r = 0; r < m; ++r) tc.w_n.at(r, delta + j) = c * q.at(r, k + j);
    }

    // S covers the first s_cols fresh columns. When delta > 0 those columns
    // are contaminated with an in-span component that the oracle map cancels.
    tc.s_indices.clear();
    for (int j = 0; j < s_cols; ++j) {
        const int col = delta + j;
        tc.s_indices.push_back(col);
        if (delta > 0) {
            const int p = j % delta;
            const double b = rng.uniform(0.3, 0.7);
            for (int r = 0; r < m; ++r) tc.w_n.at(r, col) += b * tc.w_p.at(r, p);
            tc.oracle_m.at(p, col) = -b;
        }
    }

    tc.u = TensorD({m, std::max(n - k, 1)});
    if (k > 0 && n - k > 0) {
        const TensorD prod = matmul(tc.w_p, tc.oracle_m);
        tc.u = prod;
    }
    return tc;
}

// ---- rank report over model checkpoints ----

std::vector<SpectrumReport> rank_report(
    const std::vector<std::pair<std::string, const ModelParams*>>& checkpoints,
    const std::vector<TargetMatrix>& which, double eps_rel) {
    if (checkpoints.empty()) throw DataError("rank report needs at least one checkpoint");
    if (!(eps_rel > 0.0 && eps_rel < 1.0)) throw ConfigError("eps_rel must lie in (0, 1)");
    std::vector<SpectrumReport> rows;
    for (const auto& [label, params] : checkpoints) {
        for (size_t li = 0; li < params->layers.size(); ++li) {
            const auto& l = params->layers[li];
            for (TargetMatrix t : which) {
                const Tensor* w = nullptr;
                switch (t) {
                    case TargetMatrix::V: w = &l.wv; break;
                    case TargetMatrix::O: w = &l.wo; break;
                    case TargetMatrix::U: w = &l.wu; break;
                    case TargetMatrix::G: w = &l.wg; break;
                    case TargetMatrix::D: w = &l.wd; break;
                }
                if (!w) throw KeyError("unknown matrix id in rank report");
                SpectrumReport r;
                r.checkpoint = label;
                r.layer = static_cast<int>(li);
                r.matrix = target_matrix_name(t);
                r.eps_rel = eps_rel;
                r.sigma = svd_singular_values(w->cast<double>());
                r.sigma_max = r.sigma.empty() ? 0.0 : r.sigma[0];
                r.eff_rank = effective_rank(r.sigma, eps_rel);
                rows.push_back(std::move(r));
            }
        }
    }
    return rows;
}

void write_rank_report_csv(const std::vector<SpectrumReport>& rows, std::ostream& os) {
    os << "checkpoint,layer,matrix,sigma_max,eff_rank,eps_rel\n";
    for (const auto& r : rows)
        os << r.checkpoint << ',' << r.layer << ',' << r.matrix << ',' << r.sigma_max << ','
           << r.eff_rank << ',' << r.eps_rel << '\n';
}

}  // namespace apex
