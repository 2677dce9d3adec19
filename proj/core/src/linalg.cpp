#include "pivotmerge/linalg.hpp"

#include <algorithm>
#include <numbers>
#include <numeric>

#include <Eigen/SVD>

namespace pivotmerge {

SvdFactors thin_svd(const Matrix& m) {
    const Eigen::Index k = std::min(m.rows(), m.cols());
    SvdFactors f;
    if (k == 0) {
        f.U = Matrix::Zero(m.rows(), 0);
        f.S = Vector::Zero(0);
        f.Vt = Matrix::Zero(0, m.cols());
        return f;
    }
    if (!m.allFinite()) {
        throw NumericalError("thin_svd: input contains non-finite values");
    }
    Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) {
        throw NumericalError("thin_svd: SVD did not converge");
    }
    f.U = svd.matrixU();
    f.S = svd.singularValues();
    f.Vt = svd.matrixV().transpose();

    for (Eigen::Index j = 0; j < k; ++j) {
        Eigen::Index pivot = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < f.U.rows(); ++i) {
            const double a = std::abs(f.U(i, j));
            if (a > best) {
                best = a;
                pivot = i;
            }
        }
        if (f.U(pivot, j) < 0.0) {
            f.U.col(j) = -f.U.col(j);
            f.Vt.row(j) = -f.Vt.row(j);
        }
    }
    return f;
}

Matrix truncate_rank(const SvdFactors& factors, int r) {
    if (r < 1) {
        throw ConfigError("truncate_rank: rank must be >= 1, got " + std::to_string(r));
    }
    const Eigen::Index keep = std::min<Eigen::Index>(r, factors.S.size());
    return factors.U.leftCols(keep) * factors.S.head(keep).asDiagonal() * factors.Vt.topRows(keep);
}

Matrix truncate_rank(const Matrix& m, int r) {
    if (r < 1) {
        throw ConfigError("truncate_rank: rank must be >= 1, got " + std::to_string(r));
    }
    return truncate_rank(thin_svd(m), r);
}

int numerical_rank(const Matrix& m, double rel_tol) {
    if (m.size() == 0) return 0;
    const Vector s = thin_svd(m).S;
    if (s.size() == 0 || s(0) == 0.0) return 0;
    const double cutoff = rel_tol * s(0);
    return static_cast<int>((s.array() > cutoff).count());
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    using ConstMap = Eigen::Map<const Vector>;
    return cosine(ConstMap(a.data(), static_cast<Eigen::Index>(a.size())),
                  ConstMap(b.data(), static_cast<Eigen::Index>(b.size())));
}

double flat_cosine(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("flat_cosine: shape mismatch");
    }
    using ConstMap = Eigen::Map<const Vector>;
    return cosine(ConstMap(a.data(), a.size()), ConstMap(b.data(), b.size()));
}

Matrix orthonormal_basis(const Matrix& m, double rel_tol) {
    const SvdFactors f = thin_svd(m);
    if (f.S.size() == 0 || f.S(0) == 0.0) {
        throw NumericalError("orthonormal_basis: zero matrix has no column space");
    }
    const double cutoff = rel_tol * f.S(0);
    const auto rank = static_cast<Eigen::Index>((f.S.array() > cutoff).count());
    return f.U.leftCols(rank);
}

std::vector<double> principal_angles(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("principal_angles: ambient dimensions differ (" + std::to_string(a.rows()) + " vs " +
                         std::to_string(b.rows()) + ")");
    }
    if (a.rows() < 1) {
        throw ShapeError("principal_angles: empty ambient space");
    }
    Matrix qa = orthonormal_basis(a);
    Matrix qb = orthonormal_basis(b);
    if (qa.cols() < qb.cols()) std::swap(qa, qb);
    // Now dim(qa) >= dim(qb); there are q = dim(qb) angles.
    const Eigen::Index q = qb.cols();

    // Cosines are accurate for large angles, sines for small ones.
    const Matrix cross = qa.transpose() * qb;
    const Vector cosines = thin_svd(cross).S; // descending -> angles ascending
    const Matrix orth = qb - qa * cross;
    Vector sines = thin_svd(orth).S; // descending -> reverse for ascending angles
    std::reverse(sines.data(), sines.data() + sines.size());

    constexpr double to_deg = 180.0 / std::numbers::pi;
    std::vector<double> angles(static_cast<std::size_t>(q));
    for (Eigen::Index i = 0; i < q; ++i) {
        const double c = std::clamp(i < cosines.size() ? cosines(i) : 0.0, 0.0, 1.0);
        const double s = std::clamp(i < sines.size() ? sines(i) : 1.0, 0.0, 1.0);
        const double theta = (c * c >= 0.5) ? std::asin(s) : std::acos(c);
        angles[static_cast<std::size_t>(i)] = theta * to_deg;
    }
    std::sort(angles.begin(), angles.end());
    return angles;
}

double mean(const std::vector<double>& values) {
    if (values.empty()) return 0.0;
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

} // namespace pivotmerge
