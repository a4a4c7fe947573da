#ifndef DPE_MOMENTS_HPP
#define DPE_MOMENTS_HPP

#include <cmath>
#include <cstdint>
#include <span>

#include <Eigen/Dense>

namespace dpe {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/**
 * Count, mean and population covariance (divisor n) of a set of 2-D points.
 * Sets can be merged without revisiting the points, which is how cluster
 * moments are pooled from member primitives.
 */
struct Moments {
    std::uint64_t count = 0;
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Zero();

    void add(const Vec2& x) {
        ++count;
        const Vec2 delta = x - mean;
        mean += delta / static_cast<double>(count);
        // Welford update on the scatter matrix, then rescale.
        const Mat2 scatter = cov * static_cast<double>(count - 1) + delta * (x - mean).transpose();
        cov = scatter / static_cast<double>(count);
        cov = 0.5 * (cov + cov.transpose());
    }

    static Moments merge(const Moments& a, const Moments& b) {
        if (a.count == 0) return b;
        if (b.count == 0) return a;
        const double na = static_cast<double>(a.count);
        const double nb = static_cast<double>(b.count);
        const double n = na + nb;
        Moments out;
        out.count = a.count + b.count;
        const Vec2 delta = b.mean - a.mean;
        out.mean = a.mean + delta * (nb / n);
        const Mat2 scatter = a.cov * na + b.cov * nb + delta * delta.transpose() * (na * nb / n);
        out.cov = scatter / n;
        out.cov = 0.5 * (out.cov + out.cov.transpose());
        return out;
    }

    static Moments of(std::span<const Vec2> points) {
        Moments m;
        for (const auto& p : points) m.add(p);
        return m;
    }
};

/// Result of flooring a covariance's eigenvalues.
struct FlooredCov {
    Mat2 cov;
    bool applied = false;
};

/// Raise every eigenvalue of a symmetric matrix to at least `floor`.
inline FlooredCov floor_eigenvalues(const Mat2& cov, double floor) {
    const Mat2 sym = 0.5 * (cov + cov.transpose());
    Eigen::SelfAdjointEigenSolver<Mat2> es(sym);
    Vec2 ev = es.eigenvalues();
    bool applied = false;
    for (int i = 0; i < 2; ++i) {
        if (!(ev[i] >= floor)) {
            ev[i] = floor;
            applied = true;
        }
    }
    if (!applied) return {sym, false};
    Mat2 out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return {0.5 * (out + out.transpose()), true};
}

inline bool is_spd(const Mat2& m) {
    if (!m.allFinite()) return false;
    if (std::abs(m(0, 1) - m(1, 0)) > 1e-12 * (1.0 + m.cwiseAbs().maxCoeff())) return false;
    Eigen::LLT<Mat2> llt(m);
    return llt.info() == Eigen::Success;
}

}  // namespace dpe

#endif  // DPE_MOMENTS_HPP
