#pragma once

// Shared synthetic-data generators for the test suites. Data are produced on
// the transformed scale directly so estimation tests are independent of the
// ingest/transform code paths.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sigfit/estimation.hpp"
#include "sigfit/growth_models.hpp"

namespace testhelpers {

struct SyntheticDataset {
    std::vector<sigfit::GroupObservations> groups;
    std::vector<sigfit::FplmParams> true_params;  // beta + b_i per group
    sigfit::FplmParams beta;
};

// One noisy logistic series on t = 0..n-1.
inline sigfit::GroupObservations make_logistic_obs(const std::string& id,
                                                   const sigfit::FplmParams& p, int n,
                                                   double noise_sd, std::mt19937_64& rng) {
    sigfit::GroupObservations obs;
    obs.group_id = id;
    std::normal_distribution<double> noise(0.0, noise_sd);
    for (int j = 0; j < n; ++j) {
        obs.t.push_back(static_cast<double>(j));
        double e = noise_sd > 0.0 ? noise(rng) : 0.0;
        obs.z.push_back(sigfit::fplm_eval(p, static_cast<double>(j)) + e);
    }
    return obs;
}

// M groups drawn from beta + b_i, b_i ~ N(0, diag(sigma_diag)), observation
// noise sigma_eps; infeasible draws (phi4 <= 0.5 or phi2 - phi1 too small)
// are redrawn so every group satisfies the model invariants.
inline SyntheticDataset make_nlme_dataset(std::uint64_t seed, int M, int n_i,
                                          const sigfit::FplmParams& beta,
                                          const std::array<double, 4>& sigma_diag,
                                          double sigma_eps) {
    SyntheticDataset ds;
    ds.beta = beta;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> std_normal(0.0, 1.0);
    for (int i = 0; i < M; ++i) {
        sigfit::FplmParams p;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            double b1 = std_normal(rng) * std::sqrt(sigma_diag[0]);
            double b2 = std_normal(rng) * std::sqrt(sigma_diag[1]);
            double b3 = std_normal(rng) * std::sqrt(sigma_diag[2]);
            double b4 = std_normal(rng) * std::sqrt(sigma_diag[3]);
            p = {beta.phi1 + b1, beta.phi2 + b2, beta.phi3 + b3, beta.phi4 + b4};
            if (p.phi4 > 0.5 && p.phi2 - p.phi1 > 10.0) break;
        }
        ds.true_params.push_back(p);
        ds.groups.push_back(
            make_logistic_obs("g" + std::to_string(i), p, n_i, sigma_eps, rng));
    }
    return ds;
}

// The default synthetic oracle used across estimation/inference tests.
inline SyntheticDataset default_oracle(std::uint64_t seed, int n_i = 100) {
    return make_nlme_dataset(seed, 12, n_i, {0.0, 300.0, 60.0, 12.0},
                             {1.0, 400.0, 25.0, 4.0}, 2.0);
}

}  // namespace testhelpers
