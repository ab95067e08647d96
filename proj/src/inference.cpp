#include "sigfit/inference.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace sigfit {

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw DomainError("normal_quantile: p must be in (0,1)");
    // Acklam's algorithm.
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double p_low = 0.02425, p_high = 1.0 - p_low;
    double x;
    if (p < p_low) {
        const double u = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * u + c[1]) * u + c[2]) * u + c[3]) * u + c[4]) * u + c[5]) /
            ((((d[0] * u + d[1]) * u + d[2]) * u + d[3]) * u + 1.0);
    } else if (p <= p_high) {
        const double u = p - 0.5, r = u * u;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * u /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double u = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * u + c[1]) * u + c[2]) * u + c[3]) * u + c[4]) * u + c[5]) /
            ((((d[0] * u + d[1]) * u + d[2]) * u + d[3]) * u + 1.0);
    }
    return x;
}

namespace {

Eigen::Matrix4d group_covariance(const NlmeModel& m, const std::string& group_id) {
    auto it = m.conditional_b_covariance.find(group_id);
    if (it == m.conditional_b_covariance.end()) throw NotFound("unknown group: " + group_id);
    return m.beta_covariance + it->second;
}

void require_converged(const NlmeModel& m) {
    if (!m.converged) throw NotConverged("mixed model did not converge");
}

}  // namespace

std::array<IntervalEstimate, 4> phi_intervals(const NlmeModel& m, const std::string& group_id,
                                              double level) {
    require_converged(m);
    const FplmParams p = m.group_params(group_id);
    const Eigen::Matrix4d cov = group_covariance(m, group_id);
    const double zq = normal_quantile(0.5 + level / 2.0);
    const double point[4] = {p.phi1, p.phi2, p.phi3, p.phi4};
    std::array<IntervalEstimate, 4> out;
    for (int k = 0; k < 4; ++k) {
        const double se = std::sqrt(std::max(cov(k, k), 0.0));
        out[k] = {point[k], point[k] - zq * se, point[k] + zq * se, level,
                  IntervalMethod::WaldEndpointTransform};
    }
    return out;
}

IntervalEstimate nmax_interval(const NlmeModel& m, const std::string& group_id,
                               const TransformKind& k, double level) {
    const IntervalEstimate phi2 = phi_intervals(m, group_id, level)[1];
    return {k.invert(phi2.point), k.invert(phi2.lower), k.invert(phi2.upper), level,
            IntervalMethod::WaldEndpointTransform};
}

DateInterval inflection_date_interval(const NlmeModel& m, const std::string& group_id,
                                      const TransformKind& k, Date origin, double level,
                                      std::uint64_t seed, int draws) {
    require_converged(m);
    const FplmParams p = m.group_params(group_id);
    const double t_point = inflection_time(k, p);

    const Eigen::Matrix4d cov = group_covariance(m, group_id);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(cov);
    const Eigen::Vector4d ev = es.eigenvalues().cwiseMax(0.0);
    const Eigen::Matrix4d root = es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
    const Eigen::Vector4d mean(p.phi1, p.phi2, p.phi3, p.phi4);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> t_stars;
    t_stars.reserve(draws);
    int degenerate = 0;
    for (int i = 0; i < draws; ++i) {
        Eigen::Vector4d u;
        for (int j = 0; j < 4; ++j) u[j] = gauss(rng);
        const Eigen::Vector4d v = mean + root * u;
        const FplmParams cand{v[0], v[1], v[2], v[3]};
        if (!cand.valid()) {
            ++degenerate;
            continue;
        }
        try {
            t_stars.push_back(inflection_time(k, cand));
        } catch (const NoInflection&) {
            ++degenerate;
        }
    }
    if (t_stars.empty()) throw NoInflection("all resampled draws degenerate for " + group_id);
    std::sort(t_stars.begin(), t_stars.end());

    auto quantile = [&](double prob) {
        const double pos = prob * (t_stars.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, t_stars.size() - 1);
        const double frac = pos - lo;
        return t_stars[lo] * (1.0 - frac) + t_stars[hi] * frac;
    };
    const double alpha = (1.0 - level) / 2.0;

    DateInterval out;
    out.point = origin + static_cast<int>(std::lround(t_point));
    out.lower = origin + static_cast<int>(std::lround(quantile(alpha)));
    out.upper = origin + static_cast<int>(std::lround(quantile(1.0 - alpha)));
    out.level = level;
    out.warn_unstable = degenerate > draws / 5;
    return out;
}

}  // namespace sigfit
