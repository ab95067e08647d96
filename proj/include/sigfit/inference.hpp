#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "sigfit/date.hpp"
#include "sigfit/estimation.hpp"
#include "sigfit/growth_models.hpp"

namespace sigfit {

enum class IntervalMethod { WaldEndpointTransform, Bootstrap };

struct IntervalEstimate {
    double point = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    double level = 0.95;
    IntervalMethod method = IntervalMethod::WaldEndpointTransform;
};

struct DateInterval {
    Date point;
    Date lower;
    Date upper;
    double level = 0.95;
    bool warn_unstable = false;  // > 20% of resampled draws degenerate
};

// Standard normal quantile (Acklam's rational approximation, |err| < 1.2e-9).
double normal_quantile(double p);

// Wald intervals for each component of beta + b_i, from the fixed-effect
// covariance plus the conditional random-effect covariance at convergence.
std::array<IntervalEstimate, 4> phi_intervals(const NlmeModel& m, const std::string& group_id,
                                              double level = 0.95);

// Endpoint-transformed interval for the outbreak size invert(k, phi2).
IntervalEstimate nmax_interval(const NlmeModel& m, const std::string& group_id,
                               const TransformKind& k, double level = 0.95);

// Point inflection date plus a seeded parametric-resampling interval.
DateInterval inflection_date_interval(const NlmeModel& m, const std::string& group_id,
                                      const TransformKind& k, Date origin, double level = 0.95,
                                      std::uint64_t seed = 20200615ull, int draws = 1000);

}  // namespace sigfit
