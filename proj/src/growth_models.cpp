#include "sigfit/growth_models.hpp"

#include <cmath>
#include <limits>

namespace sigfit {

TransformKind TransformKind::power(double theta) {
    if (!(theta > 0.0 && theta <= 1.0))
        throw DomainError("power exponent must satisfy 0 < theta <= 1, got " +
                          std::to_string(theta));
    return TransformKind(Id::Power, theta);
}

TransformKind TransformKind::model(int which) {
    switch (which) {
        case 1: return identity();
        case 2: return power(0.5);
        case 3: return log10();
    }
    throw DomainError("unknown model number " + std::to_string(which));
}

std::string TransformKind::name() const {
    switch (id_) {
        case Id::Identity: return "identity";
        case Id::Log10: return "log10";
        case Id::Power:
            return theta_ == 0.5 ? std::string("sqrt") : "power" + std::to_string(theta_);
    }
    return "?";
}

double TransformKind::apply(double y) const {
    switch (id_) {
        case Id::Identity:
            return y;
        case Id::Power:
            if (y < 0.0) throw DomainError("power transform requires y >= 0");
            return std::pow(y, theta_);
        case Id::Log10:
            if (y <= 0.0) throw DomainError("log10 transform requires y > 0");
            return std::log10(y);
    }
    return y;
}

double TransformKind::invert(double z) const {
    switch (id_) {
        case Id::Identity:
            return z;
        case Id::Power:
            return z <= 0.0 ? 0.0 : std::pow(z, 1.0 / theta_);
        case Id::Log10:
            return std::pow(10.0, z);
    }
    return z;
}

bool FplmParams::valid() const {
    return std::isfinite(phi1) && std::isfinite(phi2) && std::isfinite(phi3) &&
           std::isfinite(phi4) && phi4 > 0.0 && phi2 > phi1;
}

void FplmParams::require_valid() const {
    if (!valid()) throw DomainError("invalid FPLM parameters (need phi4 > 0, phi2 > phi1)");
}

namespace {

inline double sigmoid_at(const FplmParams& p, double t) {
    return 1.0 / (1.0 + std::exp((p.phi3 - t) / p.phi4));
}

}  // namespace

double fplm_eval(const FplmParams& p, double t) {
    p.require_valid();
    if (!std::isfinite(t)) throw DomainError("fplm_eval: non-finite time");
    return p.phi1 + (p.phi2 - p.phi1) * sigmoid_at(p, t);
}

std::array<double, 4> fplm_gradient(const FplmParams& p, double t) {
    p.require_valid();
    if (!std::isfinite(t)) throw DomainError("fplm_gradient: non-finite time");
    const double s = sigmoid_at(p, t);
    const double span = p.phi2 - p.phi1;
    const double sq = s * (1.0 - s);
    return {1.0 - s, s, -span * sq / p.phi4, span * sq * (p.phi3 - t) / (p.phi4 * p.phi4)};
}

namespace {

// Sign expression of the second derivative of the back-transformed curve,
// as a function of the logistic level s in (0,1). Positive before the
// inflection of n(t), negative after.
//
//   Power(theta), m = 1/theta:  n = u^m with u = phi1 + span*s (u > 0)
//     n'' sign  ~  u*(1-2s) + (m-1)*span*s*(1-s)
//   Log10:  n = 10^f
//     n'' sign  ~  (1-2s) + ln(10)*span*s*(1-s)
struct CurvatureSign {
    const TransformKind& k;
    const FplmParams& p;

    double operator()(double t) const {
        const double s = sigmoid_at(p, t);
        const double span = p.phi2 - p.phi1;
        if (k.id() == TransformKind::Id::Log10)
            return (1.0 - 2.0 * s) + std::log(10.0) * span * s * (1.0 - s);
        const double m = 1.0 / k.theta();
        const double u = p.phi1 + span * s;
        return u * (1.0 - 2.0 * s) + (m - 1.0) * span * s * (1.0 - s);
    }
};

}  // namespace

double inflection_time(const TransformKind& k, const FplmParams& p) {
    p.require_valid();
    if (k.id() == TransformKind::Id::Identity) return p.phi3;

    double lo = p.phi3 - 20.0 * p.phi4;
    double hi = p.phi3 + 20.0 * p.phi4;
    if (k.id() == TransformKind::Id::Power && p.phi1 < 0.0) {
        // Restrict to the region where the transformed curve is positive.
        const double s0 = -p.phi1 / (p.phi2 - p.phi1);
        if (s0 >= 1.0) throw NoInflection("curve never positive on the transformed scale");
        const double t0 = p.phi3 + p.phi4 * std::log(s0 / (1.0 - s0));
        lo = std::max(lo, t0 + 1e-9 * p.phi4);
    }
    if (!(lo < hi)) throw NoInflection("degenerate search bracket");

    const CurvatureSign g{k, p};

    // Coarse scan for the first + to - sign change, then bisect.
    constexpr int kScan = 4096;
    const double step = (hi - lo) / kScan;
    double a = lo, ga = g(a);
    double b = 0.0, gb = 0.0;
    bool bracketed = false;
    for (int i = 1; i <= kScan; ++i) {
        b = lo + i * step;
        gb = g(b);
        if (ga > 0.0 && gb <= 0.0) {
            bracketed = true;
            break;
        }
        a = b;
        ga = gb;
    }
    if (!bracketed) throw NoInflection("no curvature sign change in bracket");

    const double tol = 1e-9 * p.phi4;
    while (b - a > tol) {
        const double mid = 0.5 * (a + b);
        if (g(mid) > 0.0)
            a = mid;
        else
            b = mid;
    }
    return 0.5 * (a + b);
}

DerivedQuantities derived_quantities(const TransformKind& k, const FplmParams& p) {
    p.require_valid();
    DerivedQuantities q;
    q.n_max = k.invert(p.phi2);
    q.n0 = std::max(0.0, k.invert(p.phi1));
    if (k.id() == TransformKind::Id::Identity)
        q.n_infl_midway = std::max(0.0, 0.5 * (p.phi1 + p.phi2));
    else
        q.n_infl_midway = std::sqrt(q.n0 * q.n_max);
    q.t_star = inflection_time(k, p);
    q.n_infl_curve = std::max(0.0, k.invert(fplm_eval(p, q.t_star)));
    return q;
}

}  // namespace sigfit
