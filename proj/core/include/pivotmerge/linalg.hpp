#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pivotmerge/error.hpp"

namespace pivotmerge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Thin SVD M = U * diag(S) * Vt with k = min(m, n).
//
// Signs are canonical: the largest-magnitude entry of every column of U is
// positive (first such entry on ties), with the matching row of Vt flipped.
struct SvdFactors {
    Matrix U;  // m x k
    Vector S;  // k, non-increasing, >= 0
    Matrix Vt; // k x n

    Matrix reconstruct() const { return U * S.asDiagonal() * Vt; }
};

SvdFactors thin_svd(const Matrix& m);

// Best rank-r approximation. r >= 1; r >= rank returns the reconstruction.
Matrix truncate_rank(const SvdFactors& factors, int r);
Matrix truncate_rank(const Matrix& m, int r);

// Number of singular values above rel_tol * sigma_max.
int numerical_rank(const Matrix& m, double rel_tol = 1e-10);

inline constexpr double kCosineZeroNorm = 1e-12;

// <a,b> / (|a| |b|), or 0 when either norm is below 1e-12. Works on any
// pair of equal-length vector expressions (rows, columns, Eigen vectors).
template <class A, class B>
double cosine(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
    if (a.size() != b.size()) {
        throw ShapeError("cosine: length mismatch (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double x = a.derived().coeff(i);
        const double y = b.derived().coeff(i);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < kCosineZeroNorm || nb < kCosineZeroNorm) return 0.0;
    const double c = dot / (na * nb);
    return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Cosine between two equal-shape matrices viewed as flat vectors.
double flat_cosine(const Matrix& a, const Matrix& b);

// Orthonormal basis for the column space of m, dropping directions whose
// singular value is below rel_tol * sigma_max. Throws NumericalError for a
// zero matrix.
Matrix orthonormal_basis(const Matrix& m, double rel_tol = 1e-10);

// Principal angles (degrees, ascending) between the column spaces of a and
// b. Returns min(rank a, rank b) angles. Throws NumericalError when either
// input is zero.
std::vector<double> principal_angles(const Matrix& a, const Matrix& b);

double mean(const std::vector<double>& values);

} // namespace pivotmerge
