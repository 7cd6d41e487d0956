#ifndef PEFTPROF_LINALG_HPP
#define PEFTPROF_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace peftprof {

/// Thin SVD of a row-major rows x cols matrix: U is rows x k, S has k entries
/// in descending order, Vh is k x cols, k = min(rows, cols).
struct SvdResult {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::int64_t k = 0;
    std::vector<double> u;
    std::vector<double> s;
    std::vector<double> vh;
    std::int64_t ops = 0;  // scalar multiply/add count of the rotations
    int sweeps = 0;
};

namespace detail {

inline double dot(const double* a, const double* b, std::int64_t n) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

/// Replaces numerically zero columns of a len x count column-major basis with
/// unit vectors orthogonalized against the others (Gram-Schmidt twice).
inline void complete_orthonormal(std::vector<double>& cols, std::int64_t len, std::int64_t count,
                                 const std::vector<bool>& valid) {
    std::int64_t probe = 0;
    for (std::int64_t j = 0; j < count; ++j) {
        if (valid[static_cast<std::size_t>(j)]) continue;
        double* c = cols.data() + j * len;
        for (; probe < len; ++probe) {
            std::fill(c, c + len, 0.0);
            c[probe] = 1.0;
            for (int pass = 0; pass < 2; ++pass)
                for (std::int64_t q = 0; q < count; ++q) {
                    if (q == j || (!valid[static_cast<std::size_t>(q)] && q > j)) continue;
                    const double* o = cols.data() + q * len;
                    double proj = dot(c, o, len);
                    for (std::int64_t i = 0; i < len; ++i) c[i] -= proj * o[i];
                }
            double nrm = std::sqrt(dot(c, c, len));
            if (nrm > 1e-8) {
                for (std::int64_t i = 0; i < len; ++i) c[i] /= nrm;
                ++probe;
                break;
            }
        }
    }
}

}  // namespace detail

/// One-sided Jacobi SVD. Orthogonalizes the columns of A (or of A^T when A is
/// wide) until every pair is orthogonal to `tol` relative precision.
inline SvdResult jacobi_svd(const std::vector<double>& a, std::int64_t rows, std::int64_t cols, double tol = 1e-15,
                            int max_sweeps = 100) {
    SvdResult r;
    r.rows = rows;
    r.cols = cols;
    const bool tall = rows >= cols;
    const std::int64_t len = tall ? rows : cols;    // length of each working column
    const std::int64_t count = tall ? cols : rows;  // number of working columns
    r.k = count;

    // Working columns (column-major) and accumulated rotations.
    std::vector<double> w(static_cast<std::size_t>(len * count));
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) {
            double v = a[static_cast<std::size_t>(i * cols + j)];
            if (tall) w[static_cast<std::size_t>(j * len + i)] = v;
            else w[static_cast<std::size_t>(i * len + j)] = v;
        }
    std::vector<double> v(static_cast<std::size_t>(count * count), 0.0);
    for (std::int64_t j = 0; j < count; ++j) v[static_cast<std::size_t>(j * count + j)] = 1.0;

    for (r.sweeps = 0; r.sweeps < max_sweeps;) {
        ++r.sweeps;
        bool rotated = false;
        for (std::int64_t p = 0; p + 1 < count; ++p)
            for (std::int64_t q = p + 1; q < count; ++q) {
                double* wp = w.data() + p * len;
                double* wq = w.data() + q * len;
                double alpha = detail::dot(wp, wp, len);
                double beta = detail::dot(wq, wq, len);
                double gamma = detail::dot(wp, wq, len);
                r.ops += 6 * len;
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                double zeta = (beta - alpha) / (2.0 * gamma);
                double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (std::int64_t i = 0; i < len; ++i) {
                    double x = wp[i], y = wq[i];
                    wp[i] = c * x - s * y;
                    wq[i] = s * x + c * y;
                }
                double* vp = v.data() + p * count;
                double* vq = v.data() + q * count;
                for (std::int64_t i = 0; i < count; ++i) {
                    double x = vp[i], y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
                r.ops += 6 * (len + count);
            }
        if (!rotated) break;
    }

    std::vector<double> sigma(static_cast<std::size_t>(count));
    for (std::int64_t j = 0; j < count; ++j) {
        const double* wj = w.data() + j * len;
        sigma[static_cast<std::size_t>(j)] = std::sqrt(detail::dot(wj, wj, len));
    }
    std::vector<std::int64_t> order(static_cast<std::size_t>(count));
    std::iota(order.begin(), order.end(), std::int64_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::int64_t x, std::int64_t y) { return sigma[static_cast<std::size_t>(x)] > sigma[static_cast<std::size_t>(y)]; });

    const double smax = count > 0 ? sigma[static_cast<std::size_t>(order[0])] : 0.0;
    std::vector<double> basis(static_cast<std::size_t>(len * count), 0.0);  // normalized columns, sorted
    std::vector<bool> valid(static_cast<std::size_t>(count), true);
    r.s.resize(static_cast<std::size_t>(count));
    for (std::int64_t j = 0; j < count; ++j) {
        std::int64_t src = order[static_cast<std::size_t>(j)];
        double sj = sigma[static_cast<std::size_t>(src)];
        r.s[static_cast<std::size_t>(j)] = sj;
        if (sj <= 1e-13 * std::max(smax, 1e-300) || sj == 0.0) {
            valid[static_cast<std::size_t>(j)] = false;
            continue;
        }
        for (std::int64_t i = 0; i < len; ++i)
            basis[static_cast<std::size_t>(j * len + i)] = w[static_cast<std::size_t>(src * len + i)] / sj;
    }
    detail::complete_orthonormal(basis, len, count, valid);

    r.u.assign(static_cast<std::size_t>(rows * count), 0.0);
    r.vh.assign(static_cast<std::size_t>(count * cols), 0.0);
    for (std::int64_t j = 0; j < count; ++j) {
        std::int64_t src = order[static_cast<std::size_t>(j)];
        for (std::int64_t i = 0; i < len; ++i) {
            double b = basis[static_cast<std::size_t>(j * len + i)];
            if (tall) r.u[static_cast<std::size_t>(i * count + j)] = b;
            else r.vh[static_cast<std::size_t>(j * cols + i)] = b;
        }
        for (std::int64_t i = 0; i < count; ++i) {
            double x = v[static_cast<std::size_t>(src * count + i)];
            if (tall) r.vh[static_cast<std::size_t>(j * cols + i)] = x;
            else r.u[static_cast<std::size_t>(i * count + j)] = x;
        }
    }
    return r;
}

/// max |Q^T Q - I| over a row-major rows x k matrix with orthonormal columns.
inline double orthonormality_error(const std::vector<double>& q, std::int64_t rows, std::int64_t k) {
    double err = 0.0;
    for (std::int64_t a = 0; a < k; ++a)
        for (std::int64_t b = 0; b < k; ++b) {
            double s = 0.0;
            for (std::int64_t i = 0; i < rows; ++i)
                s += q[static_cast<std::size_t>(i * k + a)] * q[static_cast<std::size_t>(i * k + b)];
            err = std::max(err, std::abs(s - (a == b ? 1.0 : 0.0)));
        }
    return err;
}

}  // namespace peftprof

#endif  // PEFTPROF_LINALG_HPP
