#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "sigfit/errors.hpp"
#include "sigfit/growth_models.hpp"

using namespace sigfit;

namespace {

// Central finite differences with per-component step 1e-6 * max(1, |phi_k|).
std::array<double, 4> fd_gradient(const FplmParams& p, double t) {
    std::array<double, 4> g{};
    std::array<double, 4> base{p.phi1, p.phi2, p.phi3, p.phi4};
    for (int k = 0; k < 4; ++k) {
        const double h = 1e-6 * std::max(1.0, std::abs(base[k]));
        auto shifted = [&](double delta) {
            std::array<double, 4> q = base;
            q[k] += delta;
            return fplm_eval({q[0], q[1], q[2], q[3]}, t);
        };
        g[k] = (shifted(h) - shifted(-h)) / (2.0 * h);
    }
    return g;
}

// Brute-force inflection oracle: argmax of the central first difference of
// the back-transformed curve on a fine grid, refined by parabolic
// interpolation of the three points around the maximum.
double grid_inflection(const TransformKind& k, const FplmParams& p) {
    const double step = 1e-3 * p.phi4;
    const double lo = p.phi3 - 10.0 * p.phi4;
    const int n = static_cast<int>(20.0 * p.phi4 / step);
    double best_t = lo;
    double best_d = -1.0;
    auto curve = [&](double t) {
        const double z = fplm_eval(p, t);
        if (k.id() == TransformKind::Id::Power && z < 0.0) return 0.0;
        return k.invert(z);
    };
    std::vector<double> deriv(n);
    for (int i = 0; i < n; ++i) {
        const double t = lo + i * step;
        deriv[i] = curve(t + step) - curve(t - step);
        if (deriv[i] > best_d) {
            best_d = deriv[i];
            best_t = t;
        }
    }
    // Parabolic refinement around the grid maximum.
    const int i = static_cast<int>(std::lround((best_t - lo) / step));
    if (i > 0 && i + 1 < n) {
        const double d1 = deriv[i - 1], d2 = deriv[i], d3 = deriv[i + 1];
        const double denom = d1 - 2.0 * d2 + d3;
        if (std::abs(denom) > 1e-300) best_t += step * 0.5 * (d1 - d3) / denom;
    }
    return best_t;
}

}  // namespace

TEST_CASE("fplm_eval basics") {
    FplmParams unit{0.0, 1.0, 0.0, 1.0};
    CHECK(fplm_eval(unit, 0.0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(fplm_eval(unit, 50.0) > 1.0 - 1e-15);
    CHECK(fplm_eval(unit, 50.0) <= 1.0);

    // China, Model 2 published row: value at t = phi3 is the transformed
    // midway point (phi1 + phi2) / 2.
    FplmParams china{-11.62, 295.34, 12.65, 6.05};
    CHECK(fplm_eval(china, 12.65) == doctest::Approx(141.86).epsilon(1e-10));
}

TEST_CASE("fplm_eval rejects invalid inputs") {
    FplmParams unit{0.0, 1.0, 0.0, 1.0};
    CHECK_THROWS_AS(fplm_eval(unit, std::nan("")), DomainError);
    FplmParams bad_scale{0.0, 1.0, 0.0, -1.0};
    CHECK_FALSE(bad_scale.valid());
    CHECK_THROWS_AS(bad_scale.require_valid(), DomainError);
    FplmParams bad_order{2.0, 1.0, 0.0, 1.0};
    CHECK_FALSE(bad_order.valid());
}

TEST_CASE("fplm_gradient at the symmetry point") {
    FplmParams unit{0.0, 1.0, 0.0, 1.0};
    auto g = fplm_gradient(unit, 0.0);
    CHECK(g[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(g[2] == doctest::Approx(-0.25).epsilon(1e-14));
}

TEST_CASE("fplm_gradient matches finite differences on a published row") {
    FplmParams china{-11.62, 295.34, 12.65, 6.05};
    auto g = fplm_gradient(china, 20.0);
    auto fd = fd_gradient(china, 20.0);
    for (int k = 0; k < 4; ++k)
        CHECK(g[k] == doctest::Approx(fd[k]).epsilon(1e-6));
}

TEST_CASE("fplm_gradient matches finite differences over 1000 random draws") {
    std::mt19937_64 rng(7001);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int checked = 0;
    for (int i = 0; i < 1000; ++i) {
        FplmParams p;
        p.phi1 = -200.0 + 400.0 * u(rng);
        p.phi2 = p.phi1 + 10.0 + 2000.0 * u(rng);
        p.phi3 = -30.0 + 120.0 * u(rng);
        p.phi4 = 1.0 + 19.0 * u(rng);
        const double t = p.phi3 + (u(rng) - 0.5) * 8.0 * p.phi4;
        auto g = fplm_gradient(p, t);
        auto fd = fd_gradient(p, t);
        for (int k = 0; k < 4; ++k) {
            const double denom = std::max(std::abs(fd[k]), 1e-10);
            CHECK(std::abs(g[k] - fd[k]) / denom < 1e-6);
        }
        ++checked;
    }
    CHECK(checked == 1000);
}

TEST_CASE("transform apply/invert examples") {
    CHECK(TransformKind::power(0.5).apply(87225.0) ==
          doctest::Approx(295.3387885124472).epsilon(1e-12));
    CHECK(TransformKind::identity().apply(12345.0) == 12345.0);
    CHECK(TransformKind::identity().invert(12345.0) == 12345.0);
    // 10^4.94 by direct exponentiation.
    CHECK(TransformKind::log10().invert(4.94) ==
          doctest::Approx(87096.35899560814).epsilon(1e-12));
    CHECK_THROWS_AS(TransformKind::log10().apply(0.0), DomainError);
    CHECK_THROWS_AS(TransformKind::log10().apply(-3.0), DomainError);
    CHECK_THROWS_AS(TransformKind::power(0.5).apply(-1.0), DomainError);
    // Negative power-scale values clamp to zero cases.
    CHECK(TransformKind::power(0.5).invert(-11.62) == 0.0);
    CHECK_THROWS_AS(TransformKind::power(0.0), DomainError);
    CHECK_THROWS_AS(TransformKind::power(1.5), DomainError);
}

TEST_CASE("transform round-trip over twelve decades") {
    std::vector<TransformKind> kinds{TransformKind::identity(), TransformKind::power(0.5),
                                     TransformKind::power(0.7), TransformKind::log10()};
    for (const auto& k : kinds) {
        for (double e = -6.0; e <= 12.0; e += 0.25) {
            const double y = std::pow(10.0, e);
            CHECK(k.invert(k.apply(y)) == doctest::Approx(y).epsilon(1e-12));
        }
    }
}

TEST_CASE("model factory maps 1/2/3") {
    CHECK(TransformKind::model(1) == TransformKind::identity());
    CHECK(TransformKind::model(2) == TransformKind::power(0.5));
    CHECK(TransformKind::model(3) == TransformKind::log10());
    CHECK_THROWS_AS(TransformKind::model(4), DomainError);
}

TEST_CASE("monotonicity, midpoint and symmetry properties") {
    std::mt19937_64 rng(7002);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        FplmParams p;
        p.phi1 = -100.0 + 200.0 * u(rng);
        p.phi2 = p.phi1 + 5.0 + 500.0 * u(rng);
        p.phi3 = -20.0 + 60.0 * u(rng);
        p.phi4 = 0.5 + 15.0 * u(rng);

        const double t1 = p.phi3 + (u(rng) - 0.5) * 10.0 * p.phi4;
        const double t2 = t1 + 0.01 + 5.0 * u(rng);
        CHECK(fplm_eval(p, t1) < fplm_eval(p, t2));

        const double mid = (p.phi1 + p.phi2) / 2.0;
        CHECK(fplm_eval(p, p.phi3) == doctest::Approx(mid).epsilon(1e-12));

        const double delta = u(rng) * 6.0 * p.phi4;
        const double sum = fplm_eval(p, p.phi3 + delta) + fplm_eval(p, p.phi3 - delta);
        CHECK(sum == doctest::Approx(p.phi1 + p.phi2).epsilon(1e-10));
    }
}

TEST_CASE("derived_quantities on published rows") {
    SUBCASE("square-root scale, China") {
        FplmParams p{-11.62, 295.34, 12.65, 6.05};
        auto d = derived_quantities(TransformKind::power(0.5), p);
        CHECK(d.n_max == doctest::Approx(87225.7).epsilon(1e-5));
        CHECK(d.n0 == 0.0);  // negative phi1 clamps
    }
    SUBCASE("identity scale, China") {
        FplmParams p{-2076.92, 86984.68, 18.27, 4.94};
        auto d = derived_quantities(TransformKind::identity(), p);
        CHECK(d.n_max == doctest::Approx(86984.68).epsilon(1e-12));
        CHECK(d.n_infl_midway == doctest::Approx(42453.88).epsilon(1e-12));
        CHECK(d.t_star == doctest::Approx(18.27).epsilon(1e-12));
    }
    SUBCASE("identity, simple curve") {
        FplmParams p{0.0, 100.0, 5.0, 2.0};
        auto d = derived_quantities(TransformKind::identity(), p);
        CHECK(d.n0 == 0.0);
        CHECK(d.n_max == 100.0);
        CHECK(d.n_infl_midway == doctest::Approx(50.0).epsilon(1e-12));
        CHECK(d.n_infl_curve == doctest::Approx(50.0).epsilon(1e-12));
        CHECK(d.t_star == doctest::Approx(5.0).epsilon(1e-12));
    }
}

TEST_CASE("derived_quantities ordering over random draws and transforms") {
    std::mt19937_64 rng(7003);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TransformKind> kinds{TransformKind::identity(), TransformKind::power(0.5),
                                     TransformKind::log10()};
    for (const auto& k : kinds) {
        for (int i = 0; i < 100; ++i) {
            FplmParams p;
            if (k.id() == TransformKind::Id::Log10) {
                p.phi1 = -1.0 + 2.0 * u(rng);
                p.phi2 = p.phi1 + 1.0 + 5.0 * u(rng);
            } else {
                // phi2 > 0 always: a fit of cumulative counts above a
                // positive trim threshold cannot put the upper asymptote
                // below zero.
                p.phi1 = -150.0 + 300.0 * u(rng);
                p.phi2 = std::max(p.phi1, 0.0) + 20.0 + 500.0 * u(rng);
            }
            p.phi3 = -10.0 + 40.0 * u(rng);
            p.phi4 = 2.0 + 12.0 * u(rng);
            auto d = derived_quantities(k, p);
            CHECK(d.n0 >= 0.0);
            CHECK(d.n0 <= d.n_infl_curve + 1e-9 * std::max(1.0, d.n_max));
            CHECK(d.n_infl_curve <= d.n_max + 1e-9 * std::max(1.0, d.n_max));
        }
    }
}

TEST_CASE("inflection_time closed forms") {
    SUBCASE("identity returns phi3 exactly") {
        FplmParams p{-50.0, 900.0, 17.25, 3.5};
        CHECK(inflection_time(TransformKind::identity(), p) == 17.25);
    }
    SUBCASE("square root with phi1 = 0: phi3 + phi4 ln 2") {
        FplmParams p{0.0, 300.0, 50.0, 10.0};
        const double t = inflection_time(TransformKind::power(0.5), p);
        CHECK(t == doctest::Approx(50.0 + 10.0 * std::log(2.0)).epsilon(1e-9));
    }
    SUBCASE("square root, China row (quadratic-in-s oracle)") {
        FplmParams p{-11.62, 295.34, 12.65, 6.05};
        const double t = inflection_time(TransformKind::power(0.5), p);
        CHECK(t == doctest::Approx(17.02115480042031).epsilon(1e-7));
    }
    SUBCASE("log scale, China row (quadratic-in-s oracle)") {
        FplmParams p{0.11, 4.94, -0.91, 7.08};
        const double t = inflection_time(TransformKind::log10(), p);
        // s* = ((c-2)+sqrt(c^2+4))/(2c), c = ln10*(phi2-phi1) -> 0.918104...
        CHECK(t == doctest::Approx(16.201421788468835).epsilon(1e-7));
        const double s = 1.0 / (1.0 + std::exp((p.phi3 - t) / p.phi4));
        CHECK(s == doctest::Approx(0.918104523306746).epsilon(1e-6));
    }
}

TEST_CASE("inflection_time with no sign change in the bracket") {
    // The positive part of the curve starts beyond phi3 + 20*phi4.
    FplmParams p{-1e6, 1e-4, 0.0, 1.0};
    CHECK_THROWS_AS(inflection_time(TransformKind::power(0.5), p), NoInflection);
}

TEST_CASE("inflection_time agrees with a second-difference grid oracle") {
    std::mt19937_64 rng(7004);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TransformKind> kinds{TransformKind::identity(), TransformKind::power(0.5),
                                     TransformKind::log10()};
    for (const auto& k : kinds) {
        for (int i = 0; i < 100; ++i) {
            FplmParams p;
            if (k.id() == TransformKind::Id::Log10) {
                p.phi1 = -0.5 + 1.5 * u(rng);
                p.phi2 = p.phi1 + 1.5 + 4.0 * u(rng);
            } else {
                p.phi1 = -80.0 + 160.0 * u(rng);
                p.phi2 = std::max(p.phi1, 0.0) + 50.0 + 400.0 * u(rng);
            }
            p.phi3 = -10.0 + 40.0 * u(rng);
            p.phi4 = 2.0 + 10.0 * u(rng);
            const double t = inflection_time(k, p);
            const double oracle = grid_inflection(k, p);
            CHECK(std::abs(t - oracle) < 1e-3 * p.phi4);
        }
    }
}
