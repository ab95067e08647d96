#include "sigfit/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>

namespace sigfit {

namespace {

Eigen::Vector4d to_vec(const FplmParams& p) { return {p.phi1, p.phi2, p.phi3, p.phi4}; }
FplmParams from_vec(const Eigen::Vector4d& v) { return {v[0], v[1], v[2], v[3]}; }

// Unvalidated curve evaluation, usable mid-solve on tentative parameters.
double eval_raw(const Eigen::Vector4d& p, double t) {
    const double s = 1.0 / (1.0 + std::exp((p[2] - t) / p[3]));
    return p[0] + (p[1] - p[0]) * s;
}

Eigen::Vector4d grad_raw(const Eigen::Vector4d& p, double t) {
    const double s = 1.0 / (1.0 + std::exp((p[2] - t) / p[3]));
    const double span = p[1] - p[0];
    const double sq = s * (1.0 - s);
    return {1.0 - s, s, -span * sq / p[3], span * sq * (p[2] - t) / (p[3] * p[3])};
}

struct LmResult {
    Eigen::VectorXd x;
    double rss = 0.0;
    int iterations = 0;
    bool converged = false;
    bool ridged = false;
};

// Levenberg-Marquardt on a generic residual system. `fill` writes residuals
// and the Jacobian d r / d x for a candidate point, returning false when the
// candidate is infeasible. Damping: x10 on a rejected step, /10 on accepted.
LmResult lm_minimize(Eigen::VectorXd x,
                     const std::function<bool(const Eigen::VectorXd&, Eigen::VectorXd&,
                                              Eigen::MatrixXd&)>& fill,
                     const SolverControls& ctrl) {
    LmResult out;
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    if (!fill(x, r, J)) throw DomainError("infeasible starting point for least squares");
    double rss = r.squaredNorm();
    double lambda = ctrl.lambda0;
    const int dim = static_cast<int>(x.size());

    for (int iter = 1; iter <= ctrl.max_iterations; ++iter) {
        out.iterations = iter;
        const Eigen::VectorXd g = J.transpose() * r;
        if (g.lpNorm<Eigen::Infinity>() < ctrl.grad_tol) {
            out.converged = true;
            break;
        }
        const Eigen::MatrixXd normal = J.transpose() * J;
        Eigen::VectorXd scale = normal.diagonal().cwiseMax(1e-12);

        bool accepted = false;
        Eigen::VectorXd r_new;
        Eigen::MatrixXd J_new;
        Eigen::VectorXd x_new;
        double rss_new = rss;
        while (lambda <= 1e12) {
            Eigen::MatrixXd damped = normal;
            damped.diagonal() += lambda * scale;
            Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
            Eigen::VectorXd step = ldlt.solve(-g);
            if (!step.allFinite() || ldlt.info() != Eigen::Success) {
                damped.diagonal().array() += 1e-10;
                out.ridged = true;
                step = damped.ldlt().solve(-g);
                if (!step.allFinite()) {
                    lambda *= 10.0;
                    continue;
                }
            }
            x_new = x + step;
            if (fill(x_new, r_new, J_new)) {
                rss_new = r_new.squaredNorm();
                if (std::isfinite(rss_new) && rss_new < rss) {
                    accepted = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if (!accepted) break;  // stalled; converged stays as-is

        // A vanishing improvement can still come with a large move along a
        // flat direction; stop without committing such a step.
        const double rel_decrease = (rss - rss_new) / std::max(rss, 1e-300);
        if (rel_decrease < ctrl.rss_tol) {
            out.converged = true;
            break;
        }
        x = x_new;
        r = std::move(r_new);
        J = std::move(J_new);
        rss = rss_new;
        lambda = std::max(lambda / 10.0, 1e-12);
    }
    out.x = std::move(x);
    out.rss = rss;
    return out;
}

Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m, bool& flagged) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const double floor = 1e-10 * std::max(m.trace(), 0.0);
    Eigen::VectorXd ev = es.eigenvalues();
    bool touched = false;
    for (int i = 0; i < ev.size(); ++i)
        if (ev[i] < floor) {
            ev[i] = floor;
            touched = true;
        }
    if (!touched) return m;
    flagged = true;
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

void GroupObservations::require_valid() const {
    if (t.size() != z.size())
        throw DomainError("group " + group_id + ": t and z length mismatch");
    if (t.size() < 8)
        throw DomainError("group " + group_id + ": need at least 8 observations");
    for (size_t j = 0; j < t.size(); ++j) {
        if (!std::isfinite(t[j]) || !std::isfinite(z[j]))
            throw DomainError("group " + group_id + ": non-finite observation");
        if (j > 0 && t[j] <= t[j - 1])
            throw DomainError("group " + group_id + ": day indices not strictly increasing");
    }
}

FplmParams self_start(const GroupObservations& obs) {
    obs.require_valid();
    const auto [lo_it, hi_it] = std::minmax_element(obs.z.begin(), obs.z.end());
    const double lo = *lo_it, hi = *hi_it;
    const double range = hi - lo;
    if (range <= 0.0) throw DegenerateSeries("group " + obs.group_id + ": flat series");

    FplmParams p;
    p.phi1 = lo - 0.05 * range;
    p.phi2 = hi + 0.05 * range;

    const double mid = 0.5 * (lo + hi);
    size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < obs.z.size(); ++j) {
        const double d = std::abs(obs.z[j] - mid);
        if (d < best_dist) {
            best_dist = d;
            best = j;
        }
    }
    p.phi3 = obs.t[best];

    auto first_crossing = [&](double level) {
        for (size_t j = 0; j < obs.z.size(); ++j)
            if (obs.z[j] >= level) return obs.t[j];
        return obs.t.back();
    };
    const double t25 = first_crossing(lo + 0.25 * range);
    const double t75 = first_crossing(lo + 0.75 * range);
    p.phi4 = std::max(0.5, (t75 - t25) / (2.0 * std::log(3.0)));
    return p;
}

NlsFit fit_nls(const GroupObservations& obs, const FplmParams& init,
               const SolverControls& ctrl) {
    obs.require_valid();
    init.require_valid();
    const int n = obs.size();

    // Internal coordinates (phi1, phi2, phi3, log phi4).
    Eigen::VectorXd x0(4);
    x0 << init.phi1, init.phi2, init.phi3, std::log(init.phi4);

    auto fill = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd& J) {
        Eigen::Vector4d p(x[0], x[1], x[2], std::exp(x[3]));
        if (!std::isfinite(p[3]) || p[3] <= 0.0) return false;
        r.resize(n);
        J.resize(n, 4);
        for (int j = 0; j < n; ++j) {
            r[j] = obs.z[j] - eval_raw(p, obs.t[j]);
            Eigen::Vector4d g = grad_raw(p, obs.t[j]);
            g[3] *= p[3];  // chain rule for log phi4
            J.row(j) = -g.transpose();
        }
        return r.allFinite() && J.allFinite();
    };

    LmResult lm = lm_minimize(x0, fill, ctrl);

    NlsFit fit;
    fit.params = {lm.x[0], lm.x[1], lm.x[2], std::exp(lm.x[3])};
    fit.rss = lm.rss;
    fit.converged = lm.converged;
    fit.iterations = lm.iterations;
    fit.ridged = lm.ridged;

    const Eigen::Vector4d p = to_vec(fit.params);
    fit.jacobian_at_opt.resize(n, 4);
    for (int j = 0; j < n; ++j)
        fit.jacobian_at_opt.row(j) = grad_raw(p, obs.t[j]).transpose();

    const double dof = std::max(1, n - 4);
    const double sigma2_hat = fit.rss / dof;
    Eigen::Matrix4d jtj = fit.jacobian_at_opt.transpose() * fit.jacobian_at_opt;
    Eigen::LDLT<Eigen::Matrix4d> ldlt(jtj);
    Eigen::Matrix4d inv = ldlt.solve(Eigen::Matrix4d::Identity());
    if (ldlt.info() != Eigen::Success || !inv.allFinite()) {
        jtj.diagonal().array() += 1e-10;
        fit.ridged = true;
        inv = jtj.ldlt().solve(Eigen::Matrix4d::Identity());
    }
    fit.covariance = sigma2_hat * 0.5 * (inv + inv.transpose());
    return fit;
}

FplmParams NlmeModel::group_params(const std::string& group_id) const {
    auto it = b.find(group_id);
    if (it == b.end()) throw NotFound("unknown group: " + group_id);
    return from_vec(beta + it->second);
}

namespace {

struct MaskIndex {
    std::vector<int> idx;  // masked-in parameter positions
    int q() const { return static_cast<int>(idx.size()); }
};

MaskIndex mask_index(const RandomMask& mask) {
    MaskIndex mi;
    for (int k = 0; k < 4; ++k)
        if (mask[k]) mi.idx.push_back(k);
    return mi;
}

// Residual sum of squares of group i at natural parameters p.
double group_rss(const GroupObservations& obs, const Eigen::Vector4d& p) {
    double rss = 0.0;
    for (int j = 0; j < obs.size(); ++j) {
        const double r = obs.z[j] - eval_raw(p, obs.t[j]);
        rss += r * r;
    }
    return rss;
}

bool natural_feasible(const Eigen::Vector4d& p) {
    return p.allFinite() && p[3] > 0.0 && p[1] > p[0];
}

}  // namespace

NlmeModel fit_nlme(const std::vector<GroupObservations>& groups, RandomMask random_mask,
                   const SolverControls& ctrl) {
    NlmeModel model;
    model.random_mask = random_mask;
    const MaskIndex mi = mask_index(random_mask);
    const int q = mi.q();

    // Stage 0: individual fits; degenerate groups are skipped with a warning.
    std::vector<const GroupObservations*> valid;
    std::vector<NlsFit> nls;
    for (const auto& g : groups) {
        try {
            FplmParams start = self_start(g);
            nls.push_back(fit_nls(g, start, ctrl));
            valid.push_back(&g);
            model.group_order.push_back(g.group_id);
        } catch (const Error& e) {
            std::cerr << "warning: excluding group " << g.group_id << ": " << e.what() << "\n";
            model.excluded_groups.push_back(g.group_id);
        }
    }
    const int M = static_cast<int>(valid.size());
    if (M < 3) throw InsufficientGroups("nonlinear mixed model needs at least 3 usable groups");

    Eigen::Vector4d beta = Eigen::Vector4d::Zero();
    for (const auto& f : nls) beta += to_vec(f.params);
    beta /= M;

    Eigen::MatrixXd sigma_m = Eigen::MatrixXd::Zero(std::max(q, 1), std::max(q, 1));
    std::vector<Eigen::VectorXd> b(M, Eigen::VectorXd::Zero(std::max(q, 1)));
    if (q > 0) {
        Eigen::MatrixXd dev(M, q);
        for (int i = 0; i < M; ++i) {
            const Eigen::Vector4d d = to_vec(nls[i].params) - beta;
            for (int k = 0; k < q; ++k) dev(i, k) = d[mi.idx[k]];
            b[i] = dev.row(i).transpose();
        }
        sigma_m = dev.transpose() * dev / std::max(1, M - 1);
        if (!ctrl.full_sigma) {
            const Eigen::VectorXd diag = sigma_m.diagonal();
            sigma_m = Eigen::MatrixXd(diag.asDiagonal());
        }
        for (int k = 0; k < q; ++k) {
            const double bk = beta[mi.idx[k]];
            sigma_m(k, k) = std::max(sigma_m(k, k), 1e-12 * (bk * bk + 1.0));
        }
        sigma_m = project_psd(sigma_m, model.psd_projected);
    }

    double sigma2 = 0.0;
    {
        long long dof = 0;
        for (int i = 0; i < M; ++i) {
            sigma2 += nls[i].rss;
            dof += std::max(1, valid[i]->size() - 4);
        }
        sigma2 /= static_cast<double>(dof);
    }
    double zscale = 0.0;
    long long ntot = 0;
    for (int i = 0; i < M; ++i) {
        for (double zj : valid[i]->z) zscale += zj * zj;
        ntot += valid[i]->size();
    }
    const double sigma2_floor = 1e-12 * (zscale / std::max<long long>(1, ntot) + 1.0);
    sigma2 = std::max(sigma2, sigma2_floor);

    const Eigen::VectorXd sigma_init_diag = sigma_m.diagonal();
    std::vector<int> dec_streak(std::max(q, 1), 0);
    std::vector<char> pinned(std::max(q, 1), 0);

    SolverControls inner = ctrl;
    inner.max_iterations = 40;  // per block update inside PNLS

    Eigen::Matrix4d beta_cov = Eigen::Matrix4d::Zero();
    std::vector<Eigen::MatrixXd> cond_cov(M, Eigen::MatrixXd::Zero(std::max(q, 1), std::max(q, 1)));
    double loglik = 0.0;

    auto pnls_objective = [&](const Eigen::Vector4d& bta, const Eigen::LLT<Eigen::MatrixXd>& prec_llt) {
        double obj = 0.0;
        for (int i = 0; i < M; ++i) {
            Eigen::Vector4d p = bta;
            for (int k = 0; k < q; ++k) p[mi.idx[k]] += b[i][k];
            obj += group_rss(*valid[i], p) / sigma2;
            if (q > 0) {
                Eigen::VectorXd lb = prec_llt.matrixU() * b[i];
                obj += lb.squaredNorm();
            }
        }
        return obj;
    };

    bool converged = false;
    int outer = 0;
    for (outer = 1; outer <= ctrl.nlme_max_outer; ++outer) {
        const Eigen::Vector4d beta_prev = beta;
        const Eigen::VectorXd diag_prev = sigma_m.diagonal();
        const double sigma2_prev = sigma2;

        // (a) PNLS: block-coordinate LM over {b_i} and beta with fixed
        // variance components. Penalty factor: U with U'U = Sigma^-1.
        Eigen::MatrixXd prec = Eigen::MatrixXd::Identity(std::max(q, 1), std::max(q, 1));
        Eigen::LLT<Eigen::MatrixXd> sig_llt(sigma_m);
        if (q > 0) {
            if (sig_llt.info() != Eigen::Success) {
                sigma_m = project_psd(sigma_m, model.psd_projected);
                sigma_m.diagonal().array() += 1e-12 * (1.0 + sigma_m.trace());
                sig_llt.compute(sigma_m);
            }
            prec = sig_llt.solve(Eigen::MatrixXd::Identity(q, q));
        }
        Eigen::LLT<Eigen::MatrixXd> prec_llt(0.5 * (prec + prec.transpose()));

        const double obj_start = pnls_objective(beta, prec_llt);
        const double sd = std::sqrt(sigma2);

        double obj = obj_start;
        for (int pass = 0; pass < 10; ++pass) {
            // b_i given beta
            for (int i = 0; i < M && q > 0; ++i) {
                const GroupObservations& g = *valid[i];
                const int n = g.size();
                auto fill = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd& J) {
                    Eigen::Vector4d p = beta;
                    for (int k = 0; k < q; ++k) p[mi.idx[k]] += x[k];
                    if (!natural_feasible(p)) return false;
                    r.resize(n + q);
                    J.resize(n + q, q);
                    for (int j = 0; j < n; ++j) {
                        r[j] = (g.z[j] - eval_raw(p, g.t[j])) / sd;
                        const Eigen::Vector4d gr = grad_raw(p, g.t[j]);
                        for (int k = 0; k < q; ++k) J(j, k) = -gr[mi.idx[k]] / sd;
                    }
                    r.tail(q) = prec_llt.matrixU() * x;
                    J.bottomRows(q) = prec_llt.matrixU();
                    return r.allFinite() && J.allFinite();
                };
                LmResult lr = lm_minimize(b[i], fill, inner);
                b[i] = lr.x;
            }
            // beta given {b_i}
            {
                int ntotal = 0;
                for (int i = 0; i < M; ++i) ntotal += valid[i]->size();
                auto fill = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd& J) {
                    r.resize(ntotal);
                    J.resize(ntotal, 4);
                    int row = 0;
                    for (int i = 0; i < M; ++i) {
                        Eigen::Vector4d p(x[0], x[1], x[2], x[3]);
                        for (int k = 0; k < q; ++k) p[mi.idx[k]] += b[i][k];
                        if (!natural_feasible(p)) return false;
                        const GroupObservations& g = *valid[i];
                        for (int j = 0; j < g.size(); ++j, ++row) {
                            r[row] = (g.z[j] - eval_raw(p, g.t[j])) / sd;
                            J.row(row) = -grad_raw(p, g.t[j]).transpose() / sd;
                        }
                    }
                    return r.allFinite() && J.allFinite();
                };
                Eigen::VectorXd x0 = beta;
                LmResult lr = lm_minimize(x0, fill, inner);
                beta = lr.x;
            }
            const double obj_new = pnls_objective(beta, prec_llt);
            const bool settled = (obj - obj_new) < 1e-8 * std::max(obj, 1.0);
            obj = obj_new;
            if (settled) break;
        }
        if (q > 0) {
            // Recentre the random effects: a common shift of beta against
            // mean(b_i) leaves every group curve unchanged but is resolved
            // only slowly by the block alternation. Recentring minimizes the
            // penalty along that direction at constant residual sum, so the
            // PNLS objective never increases.
            Eigen::VectorXd bbar = Eigen::VectorXd::Zero(q);
            for (int i = 0; i < M; ++i) bbar += b[i];
            bbar /= M;
            Eigen::Vector4d beta_c = beta;
            for (int k = 0; k < q; ++k) beta_c[mi.idx[k]] += bbar[k];
            if (natural_feasible(beta_c)) {
                beta = beta_c;
                for (int i = 0; i < M; ++i) b[i] -= bbar;
                obj = pnls_objective(beta, prec_llt);
            }
        }
        model.pnls_objective_trace.emplace_back(obj_start, obj);

        // (b) LME: variance-component update on the first-order linearization
        // around the current (beta, b_i). The closed-form updates are
        // iterated to their own fixed point on the fixed linearization, so
        // the restricted likelihood of the linear mixed model is maximized
        // within the stage and the outer loop only tracks how much the
        // linearization itself still moves. A single update per outer
        // converges only at the EM rate, which can be arbitrarily close
        // to one for weakly identified variance components.
        struct GroupLin {
            Eigen::MatrixXd X;   // n x 4
            Eigen::MatrixXd Z;   // n x q
            Eigen::VectorXd w;   // working response
        };
        std::vector<GroupLin> lin(M);
        long long n_total = 0;
        for (int i = 0; i < M; ++i) {
            const GroupObservations& g = *valid[i];
            const int n = g.size();
            n_total += n;
            Eigen::Vector4d p = beta;
            for (int k = 0; k < q; ++k) p[mi.idx[k]] += b[i][k];
            GroupLin& L = lin[i];
            L.X.resize(n, 4);
            L.Z.resize(n, std::max(q, 1));
            L.w.resize(n);
            for (int j = 0; j < n; ++j) {
                const Eigen::Vector4d gr = grad_raw(p, g.t[j]);
                L.X.row(j) = gr.transpose();
                for (int k = 0; k < q; ++k) L.Z(j, k) = gr[mi.idx[k]];
                double zb = 0.0;
                for (int k = 0; k < q; ++k) zb += L.Z(j, k) * b[i][k];
                L.w[j] = g.z[j] - eval_raw(p, g.t[j]) + gr.dot(beta) + zb;
            }
        }

        // Restricted log-likelihood of the current linearization under a
        // candidate (Sigma, sigma^2). Used to decide whether a collapsing
        // variance component has its optimum on the boundary.
        auto linearized_reml = [&](const Eigen::MatrixXd& sig_try, double s2_try) {
            Eigen::LLT<Eigen::MatrixXd> sig_try_llt(sig_try);
            Eigen::MatrixXd prec_t = sig_try_llt.solve(Eigen::MatrixXd::Identity(q, q));
            Eigen::LLT<Eigen::MatrixXd> prec_t_llt(0.5 * (prec_t + prec_t.transpose()));
            double logdet_sig_t = 0.0;
            {
                const Eigen::MatrixXd Lp = prec_t_llt.matrixL();
                for (int k = 0; k < q; ++k) logdet_sig_t -= 2.0 * std::log(Lp(k, k));
            }
            Eigen::Matrix4d A_t = Eigen::Matrix4d::Zero();
            Eigen::Vector4d rhs_t = Eigen::Vector4d::Zero();
            std::vector<Eigen::MatrixXd> W_t(M);
            std::vector<double> logdet_R2_t(M, 0.0);
            for (int i = 0; i < M; ++i) {
                const GroupLin& L = lin[i];
                const int n = static_cast<int>(L.w.size());
                Eigen::MatrixXd G(n + q, q);
                G.topRows(n) = L.Z / std::sqrt(s2_try);
                G.bottomRows(q) = prec_t_llt.matrixU();
                Eigen::HouseholderQR<Eigen::MatrixXd> qr_t(G);
                const Eigen::MatrixXd R =
                    qr_t.matrixQR().topRows(q).triangularView<Eigen::Upper>();
                Eigen::MatrixXd Rinv = R.triangularView<Eigen::Upper>().solve(
                    Eigen::MatrixXd::Identity(q, q));
                W_t[i] = (Rinv * Rinv.transpose()) / s2_try;
                for (int k = 0; k < q; ++k)
                    logdet_R2_t[i] += 2.0 * std::log(std::abs(R(k, k)));
                const Eigen::MatrixXd VinvX =
                    (L.X - L.Z * (W_t[i] * (L.Z.transpose() * L.X))) / s2_try;
                const Eigen::VectorXd Vinvw =
                    (L.w - L.Z * (W_t[i] * (L.Z.transpose() * L.w))) / s2_try;
                A_t += L.X.transpose() * VinvX;
                rhs_t += L.X.transpose() * Vinvw;
            }
            Eigen::LDLT<Eigen::Matrix4d> A_t_ldlt(A_t);
            const Eigen::Vector4d beta_t = A_t_ldlt.solve(rhs_t);
            double ll_t = 0.0;
            for (int i = 0; i < M; ++i) {
                const GroupLin& L = lin[i];
                const int n = static_cast<int>(L.w.size());
                const Eigen::VectorXd resid = L.w - L.X * beta_t;
                const Eigen::VectorXd b_hat = W_t[i] * (L.Z.transpose() * resid);
                const Eigen::VectorXd e_hat = resid - L.Z * b_hat;
                ll_t += -0.5 * (n * std::log(s2_try) + logdet_sig_t + logdet_R2_t[i] +
                                resid.dot(e_hat) / s2_try);
            }
            ll_t += -0.5 * std::log(std::max(A_t.determinant(), 1e-300));
            return ll_t;
        };

        const int max_em = 200;
        const double em_tol = 0.1 * ctrl.nlme_tol;
        for (int em = 0; em < max_em; ++em) {
            const Eigen::VectorXd em_diag_prev = sigma_m.diagonal();
            const double em_s2_prev = sigma2;

            Eigen::MatrixXd prec_em = Eigen::MatrixXd::Identity(std::max(q, 1), std::max(q, 1));
            if (q > 0) {
                Eigen::LLT<Eigen::MatrixXd> s_llt(sigma_m);
                if (s_llt.info() != Eigen::Success) {
                    sigma_m = project_psd(sigma_m, model.psd_projected);
                    sigma_m.diagonal().array() += 1e-12 * (1.0 + sigma_m.trace());
                    s_llt.compute(sigma_m);
                }
                prec_em = s_llt.solve(Eigen::MatrixXd::Identity(q, q));
            }
            Eigen::LLT<Eigen::MatrixXd> prec_em_llt(0.5 * (prec_em + prec_em.transpose()));
            double logdet_sigma = 0.0;
            if (q > 0) {
                const Eigen::MatrixXd Lp = prec_em_llt.matrixL();
                for (int k = 0; k < q; ++k) logdet_sigma -= 2.0 * std::log(Lp(k, k));
            }

            Eigen::Matrix4d A = Eigen::Matrix4d::Zero();
            Eigen::Vector4d rhs = Eigen::Vector4d::Zero();
            std::vector<Eigen::MatrixXd> Wg(M);
            std::vector<double> logdet_R2(M, 0.0);
            for (int i = 0; i < M; ++i) {
                const GroupLin& L = lin[i];
                const int n = static_cast<int>(L.w.size());
                if (q > 0) {
                    // W = (sigma2 * Sigma^-1 + Z'Z)^-1 via QR of the stacked
                    // matrix [Z/sigma; U] with U'U = Sigma^-1: R'R =
                    // Z'Z/sigma2 + Sigma^-1, which halves the effective
                    // condition number relative to forming the normal
                    // equations directly. For saturated groups Z is near
                    // rank-1 and the direct inverse loses enough digits to
                    // keep the iteration from settling.
                    Eigen::MatrixXd G(n + q, q);
                    G.topRows(n) = L.Z / std::sqrt(sigma2);
                    G.bottomRows(q) = prec_em_llt.matrixU();
                    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
                    const Eigen::MatrixXd R =
                        qr.matrixQR().topRows(q).triangularView<Eigen::Upper>();
                    Eigen::MatrixXd Rinv = R.triangularView<Eigen::Upper>().solve(
                        Eigen::MatrixXd::Identity(q, q));
                    Wg[i] = (Rinv * Rinv.transpose()) / sigma2;
                    for (int k = 0; k < q; ++k)
                        logdet_R2[i] += 2.0 * std::log(std::abs(R(k, k)));
                } else {
                    Wg[i] = Eigen::MatrixXd::Zero(1, 1);
                }
                // V^-1 M = (M - Z W Z'M) / sigma2
                Eigen::MatrixXd VinvX =
                    (L.X - L.Z * (Wg[i] * (L.Z.transpose() * L.X))) / sigma2;
                Eigen::VectorXd Vinvw =
                    (L.w - L.Z * (Wg[i] * (L.Z.transpose() * L.w))) / sigma2;
                A += L.X.transpose() * VinvX;
                rhs += L.X.transpose() * Vinvw;
            }
            Eigen::LDLT<Eigen::Matrix4d> A_ldlt(A);
            const Eigen::Vector4d beta_gls = A_ldlt.solve(rhs);
            const Eigen::Matrix4d A_inv = A_ldlt.solve(Eigen::Matrix4d::Identity());

            Eigen::MatrixXd sigma_new =
                Eigen::MatrixXd::Zero(std::max(q, 1), std::max(q, 1));
            double rss_term = 0.0;
            double ll = 0.0;
            for (int i = 0; i < M; ++i) {
                const GroupLin& L = lin[i];
                const int n = static_cast<int>(L.w.size());
                const Eigen::VectorXd resid = L.w - L.X * beta_gls;

                // BLUP of b_i on the linearized model; used for the variance
                // update only, the working b_i stays at its PNLS value.
                // b_hat = Sigma Z' V^-1 r = W Z' r, which avoids the
                // cancellation in forming V^-1 r directly.
                Eigen::VectorXd b_hat = Eigen::VectorXd::Zero(std::max(q, 1));
                if (q > 0) b_hat = Wg[i] * (L.Z.transpose() * resid);
                const Eigen::VectorXd e_hat =
                    resid - (q > 0 ? Eigen::VectorXd(L.Z * b_hat)
                                   : Eigen::VectorXd::Zero(n));
                const Eigen::VectorXd Vinv_resid = e_hat / sigma2;
                const Eigen::MatrixXd VinvX =
                    q > 0 ? Eigen::MatrixXd(
                                (L.X - L.Z * (Wg[i] * (L.Z.transpose() * L.X))) / sigma2)
                          : Eigen::MatrixXd(L.X / sigma2);

                if (q > 0) {
                    // REML conditional covariance of b_i. The textbook form
                    // Sigma - Sigma Z' P Z Sigma cancels catastrophically
                    // when Sigma is large; the equivalent
                    //   C_i = sigma2 W + (W Z'X) A^-1 (W Z'X)'
                    // is positive semidefinite by construction.
                    const Eigen::MatrixXd WZtX = Wg[i] * (L.Z.transpose() * L.X);
                    Eigen::MatrixXd Ci = sigma2 * Wg[i] + WZtX * A_inv * WZtX.transpose();
                    cond_cov[i] = 0.5 * (Ci + Ci.transpose());
                    sigma_new += b_hat * b_hat.transpose() + cond_cov[i];
                }

                // E[e'e | w] with Var(e|w) = sigma2 I - sigma2^2 P.
                // tr(W Z'Z) = q - sigma2 tr(W Sigma^-1) avoids the large
                // product.
                const double trVinv =
                    q > 0 ? (n - q + sigma2 * (Wg[i] * prec_em).trace()) / sigma2
                          : n / sigma2;
                const double trP = trVinv - (A_inv * (VinvX.transpose() * VinvX)).trace();
                rss_term += e_hat.squaredNorm() + sigma2 * n - sigma2 * sigma2 * trP;

                // REML log-likelihood pieces: log|V_i| and the quadratic
                // form. log|V| = n log sigma2 + log|Sigma| +
                // log|Z'Z/sigma2 + Sigma^-1|.
                const double logdetV =
                    n * std::log(sigma2) + (q > 0 ? logdet_sigma + logdet_R2[i] : 0.0);
                ll += -0.5 * (logdetV + resid.dot(Vinv_resid));
            }
            ll += -0.5 * std::log(std::max(A.determinant(), 1e-300));
            loglik = ll;
            beta_cov = 0.5 * (A_inv + A_inv.transpose());

            if (q > 0) {
                sigma_new /= M;
                if (!ctrl.full_sigma) {
                    const Eigen::VectorXd diag = sigma_new.diagonal();
                    sigma_new = Eigen::MatrixXd(diag.asDiagonal());
                }
                sigma_new = project_psd(sigma_new, model.psd_projected);
                for (int k = 0; k < q; ++k) {
                    const double bk = beta[mi.idx[k]];
                    sigma_new(k, k) = std::max(sigma_new(k, k), 1e-12 * (bk * bk + 1.0));
                }
                // A component whose restricted-likelihood optimum sits on
                // the boundary (variance zero) is approached by the
                // closed-form update only sublinearly, so no finite budget
                // reaches it. Once a component has shrunk monotonically well
                // below its starting scale, compare the restricted
                // likelihood at the floor with the crawling value and pin it
                // there if the boundary is no worse.
                const double s2_cand =
                    std::max(rss_term / static_cast<double>(n_total), sigma2_floor);
                for (int k = 0; k < q; ++k) {
                    if (pinned[k]) continue;
                    dec_streak[k] =
                        sigma_new(k, k) < em_diag_prev[k] ? dec_streak[k] + 1 : 0;
                }
                for (int k = 0; k < q; ++k) {
                    const double bk = beta[mi.idx[k]];
                    const double floor_k = 1e-12 * (bk * bk + 1.0);
                    if (pinned[k]) {
                        sigma_new(k, k) = floor_k;
                        continue;
                    }
                    if (dec_streak[k] < 5 ||
                        sigma_new(k, k) >= 0.3 * sigma_init_diag[k] ||
                        sigma_new(k, k) <= 1.5 * floor_k)
                        continue;
                    Eigen::MatrixXd cand = sigma_new;
                    cand(k, k) = floor_k;
                    const double ll_keep = linearized_reml(sigma_new, s2_cand);
                    const double ll_floor = linearized_reml(cand, s2_cand);
                    if (ll_floor >= ll_keep - 1e-7 * (1.0 + std::abs(ll_keep))) {
                        sigma_new = cand;
                        pinned[k] = 1;
                    }
                }
                sigma_m = sigma_new;
            }
            sigma2 = std::max(rss_term / static_cast<double>(n_total), sigma2_floor);

            double em_rel = std::abs(sigma2 - em_s2_prev) / std::max(em_s2_prev, 1e-12);
            for (int k = 0; k < q; ++k)
                em_rel = std::max(em_rel, std::abs(sigma_m(k, k) - em_diag_prev[k]) /
                                              std::max(std::abs(em_diag_prev[k]), 1e-8));
            if (em_rel < em_tol) break;
        }

        // Convergence on relative change of (beta, diag Sigma, sigma^2).
        double rel = 0.0;
        for (int k = 0; k < 4; ++k)
            rel = std::max(rel, std::abs(beta[k] - beta_prev[k]) /
                                    std::max(std::abs(beta_prev[k]), 1e-8));
        for (int k = 0; k < q; ++k)
            rel = std::max(rel, std::abs(sigma_m(k, k) - diag_prev[k]) /
                                    std::max(std::abs(diag_prev[k]), 1e-8));
        rel = std::max(rel, std::abs(sigma2 - sigma2_prev) / std::max(sigma2_prev, 1e-12));
        if (rel < ctrl.nlme_tol) {
            converged = true;
            break;
        }
    }

    model.beta = beta;
    model.sigma2 = sigma2;
    model.converged = converged;
    model.iterations = std::min(outer, ctrl.nlme_max_outer);
    model.loglik_linearized = loglik;
    model.beta_covariance = beta_cov;
    model.sigma = Eigen::Matrix4d::Zero();
    for (int a = 0; a < q; ++a)
        for (int c = 0; c < q; ++c) model.sigma(mi.idx[a], mi.idx[c]) = sigma_m(a, c);
    for (int i = 0; i < M; ++i) {
        Eigen::Vector4d bi = Eigen::Vector4d::Zero();
        for (int k = 0; k < q; ++k) bi[mi.idx[k]] = b[i][k];
        model.b[valid[i]->group_id] = bi;
        Eigen::Matrix4d ci = Eigen::Matrix4d::Zero();
        for (int a = 0; a < q; ++a)
            for (int c = 0; c < q; ++c) ci(mi.idx[a], mi.idx[c]) = cond_cov[i](a, c);
        model.conditional_b_covariance[valid[i]->group_id] = ci;
    }
    return model;
}

std::vector<double> predict_group(const NlmeModel& m, const std::string& group_id,
                                  const std::vector<double>& t_grid) {
    const FplmParams p = m.group_params(group_id);
    std::vector<double> out;
    out.reserve(t_grid.size());
    for (double t : t_grid) out.push_back(fplm_eval(p, t));
    return out;
}

}  // namespace sigfit
