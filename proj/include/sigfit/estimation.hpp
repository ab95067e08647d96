#pragma once

#include <Eigen/Dense>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "sigfit/growth_models.hpp"

namespace sigfit {

// One group's transformed-scale observations on its own day index.
struct GroupObservations {
    std::string group_id;
    std::vector<double> t;  // strictly increasing day indices
    std::vector<double> z;  // transformed cumulative cases

    void require_valid() const;  // throws DomainError
    int size() const { return static_cast<int>(t.size()); }
};

struct SolverControls {
    int max_iterations = 200;       // per LM solve
    double rss_tol = 1e-10;         // relative RSS decrease
    double grad_tol = 1e-8;         // gradient infinity norm
    double lambda0 = 1e-3;          // initial LM damping
    int nlme_max_outer = 50;
    double nlme_tol = 1e-6;         // max relative change in (beta, diag Sigma, sigma^2)
    bool full_sigma = false;        // off-diagonal Sigma entries allowed
};

struct NlsFit {
    FplmParams params;
    double rss = 0.0;
    Eigen::MatrixXd jacobian_at_opt;  // n x 4
    Eigen::Matrix4d covariance;       // sigma_hat^2 * (J'J)^-1
    bool converged = false;
    int iterations = 0;
    bool ridged = false;  // singular J'J encountered, ridge added
};

using RandomMask = std::array<bool, 4>;

struct NlmeModel {
    Eigen::Vector4d beta = Eigen::Vector4d::Zero();
    std::map<std::string, Eigen::Vector4d> b;  // random effects, zeros off-mask
    Eigen::Matrix4d sigma = Eigen::Matrix4d::Zero();  // random-effect covariance
    double sigma2 = 0.0;                              // residual variance
    RandomMask random_mask{true, true, true, true};
    double loglik_linearized = 0.0;
    bool converged = false;
    int iterations = 0;
    bool psd_projected = false;  // Sigma update needed an eigenvalue floor

    // Linearized-model covariances at convergence, for interval construction.
    Eigen::Matrix4d beta_covariance = Eigen::Matrix4d::Zero();
    std::map<std::string, Eigen::Matrix4d> conditional_b_covariance;

    std::vector<std::string> group_order;
    std::vector<std::string> excluded_groups;  // degenerate inputs, skipped with warning

    // Penalized objective at the start and end of each outer iteration's PNLS
    // stage (fixed variance components within a stage); end <= start always.
    std::vector<std::pair<double, double>> pnls_objective_trace;

    FplmParams group_params(const std::string& group_id) const;  // beta + b_i
};

// Heuristic feasible starting point from the data alone.
FplmParams self_start(const GroupObservations& obs);

// Per-group Levenberg-Marquardt least squares. phi4 is kept positive by an
// internal log reparameterization; returned parameters are on natural scale.
NlsFit fit_nls(const GroupObservations& obs, const FplmParams& init,
               const SolverControls& ctrl = {});

// Alternating nonlinear mixed-effects estimator: penalized NLS over
// (beta, b_i) alternating with restricted-likelihood variance updates on a
// first-order linearization.
NlmeModel fit_nlme(const std::vector<GroupObservations>& groups, RandomMask random_mask,
                   const SolverControls& ctrl = {});

std::vector<double> predict_group(const NlmeModel& m, const std::string& group_id,
                                  const std::vector<double>& t_grid);

}  // namespace sigfit
