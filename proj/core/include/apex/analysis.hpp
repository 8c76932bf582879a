#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "apex/expansion.hpp"
#include "apex/model.hpp"
#include "apex/tensor.hpp"

namespace apex {

// Singular values of a small dense matrix, descending, via one-sided Jacobi
// rotations. Converges when every off-diagonal rotation falls below 1e-12
// (relative), or throws NumericError naming the sweep count after 60 sweeps.
std::vector<double> svd_singular_values(const TensorD& w);

// rank_eps: number of singular values >= eps_rel * sigma_max. Zero matrix
// has rank 0. eps_rel must lie in (0, 1).
int effective_rank(const TensorD& w, double eps_rel);
int effective_rank(const std::vector<double>& sigma, double eps_rel);

// Constructed matrix with known rank structure: W_P holds k orthonormal
// columns; W_N spans delta directions inside span(W_P) plus rho - delta
// fresh orthonormal directions; the oracle map M cancels the in-span
// contamination of s_cols chosen columns so that (W_N + U)[:, S] is
// orthogonal to span(W_P). Consequently rank(base) = k + rho - delta
// exactly and rank(augmented) >= k + max(rho - delta, s_cols).
struct RankTestCase {
    int m = 0, n = 0, k = 0, rho = 0, delta = 0, s_cols = 0;
    TensorD w_p;       // m x k (unset when k == 0)
    TensorD w_n;       // m x (n - k)
    TensorD oracle_m;  // k x (n - k) (unset when k == 0)
    TensorD u;         // m x (n - k), equals w_p * oracle_m
    std::vector<int> s_indices;  // columns of the N block covered by S

    TensorD base() const;       // [w_p, w_n]
    TensorD augmented() const;  // [w_p, w_n + u]
};

// Feasibility: delta <= min(k, rho), rho <= n - k, k + rho - delta <= m,
// s_cols <= min(n - k, m - k) and s_cols <= rho - delta (a column of
// U = W_P * M lies in span(W_P), so only the fresh components of W_N can
// survive orthogonal to it).
RankTestCase construct_rank_testcase(int m, int n, int k, int rho, int delta, int s_cols,
                                     uint64_t seed);

struct SpectrumReport {
    std::string checkpoint;
    int layer = 0;
    std::string matrix;  // V|O|U|G|D
    double sigma_max = 0.0;
    int eff_rank = 0;
    double eps_rel = 0.0;
    std::vector<double> sigma;
};

// Effective rank of each requested expanded matrix for each checkpoint.
std::vector<SpectrumReport> rank_report(
    const std::vector<std::pair<std::string, const ModelParams*>>& checkpoints,
    const std::vector<TargetMatrix>& which, double eps_rel);

void write_rank_report_csv(const std::vector<SpectrumReport>& rows, std::ostream& os);

}  // namespace apex
