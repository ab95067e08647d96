#pragma once

#include <array>
#include <string>

#include "sigfit/errors.hpp"

namespace sigfit {

// Response transform applied to cumulative case counts before curve fitting.
// Model 1 = Identity, Model 2 = Power(0.5), Model 3 = Log10. A general power
// exponent theta in (0, 1] is allowed; Log10 plays the theta -> 0 member.
class TransformKind {
  public:
    enum class Id { Identity, Power, Log10 };

    static TransformKind identity() { return TransformKind(Id::Identity, 1.0); }
    static TransformKind power(double theta);
    static TransformKind log10() { return TransformKind(Id::Log10, 0.0); }
    static TransformKind model(int which);  // 1 / 2 / 3

    Id id() const { return id_; }
    double theta() const { return theta_; }
    std::string name() const;

    // Cases -> transformed scale. Power requires y >= 0, Log10 requires y > 0.
    double apply(double y) const;
    // Transformed scale -> cases. Negative Power-scale inputs clamp to 0.
    double invert(double z) const;

    bool operator==(const TransformKind&) const = default;

  private:
    TransformKind(Id id, double theta) : id_(id), theta_(theta) {}
    Id id_;
    double theta_;
};

// Four-parameter logistic curve on the transformed scale:
//   f(t) = phi1 + (phi2 - phi1) / (1 + exp((phi3 - t) / phi4))
// phi1/phi2 are the lower/upper asymptotes, phi3 the midpoint time and
// phi4 the time scale in days.
struct FplmParams {
    double phi1 = 0.0;
    double phi2 = 0.0;
    double phi3 = 0.0;
    double phi4 = 1.0;

    bool valid() const;
    void require_valid() const;  // throws DomainError
};

struct DerivedQuantities {
    double n0 = 0.0;            // back-transformed lower asymptote, clamped at 0
    double n_max = 0.0;         // back-transformed upper asymptote
    double n_infl_midway = 0.0; // sqrt(n0 * n_max) resp. midway on raw scale
    double n_infl_curve = 0.0;  // back-transformed curve value at t_star
    double t_star = 0.0;        // day index of the back-transformed inflection
};

double fplm_eval(const FplmParams& p, double t);

// d f / d phi_k, analytic.
std::array<double, 4> fplm_gradient(const FplmParams& p, double t);

// Inflection (second-derivative sign change + to -) of the back-transformed
// cumulative curve invert(k, f(t)). Identity returns phi3 exactly; otherwise
// bisection on the analytic second-derivative expression inside the bracket
// phi3 +/- 20*phi4. Throws NoInflection when no sign change exists there.
double inflection_time(const TransformKind& k, const FplmParams& p);

DerivedQuantities derived_quantities(const TransformKind& k, const FplmParams& p);

}  // namespace sigfit
