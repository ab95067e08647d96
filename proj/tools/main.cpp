#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sigfit/pipeline.hpp"

namespace {

struct CliOptions {
    std::string input;
    std::string cutoff = "2020-06-15";
    std::vector<std::string> groups = {"paper12"};
    std::vector<std::string> models = {"2"};
    std::vector<double> thetas;
    long long trim = 100;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out_dir = "out";
    std::string mask = "1111";
    int horizon = 120;
    bool full_sigma = false;
};

void add_common_flags(CLI::App* cmd, CliOptions& o) {
    cmd->add_option("--input", o.input, "ECDC-format CSV path, or - for stdin")->required();
    cmd->add_option("--cutoff", o.cutoff, "last date to include (YYYY-MM-DD)");
    cmd->add_option("--groups", o.groups, "comma-separated geoIds/continents, or paper12")
        ->delimiter(',');
    cmd->add_option("--models", o.models, "comma-separated subset of 1,2,3")->delimiter(',');
    cmd->add_option("--theta", o.thetas, "extra power-transform exponents");
    cmd->add_option("--trim", o.trim, "cumulative-case trim threshold");
    cmd->add_option("--seed", o.seed, "resampling seed (env SIGFIT_SEED as fallback)")
        ->each([&o](const std::string&) { o.seed_given = true; });
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--random-mask", o.mask, "which phi carry random effects, e.g. 1111");
    cmd->add_option("--horizon", o.horizon, "forecast days past the last observation");
    cmd->add_flag("--full-sigma", o.full_sigma, "allow off-diagonal random-effect covariance");
}

sigfit::RunConfig build_config(const CliOptions& o) {
    sigfit::RunConfig cfg;
    cfg.input_path = o.input;
    cfg.cutoff = sigfit::Date::parse(o.cutoff);
    cfg.groups = o.groups;
    for (const auto& label : o.models) cfg.models.push_back(sigfit::model_from_label(label));
    for (double th : o.thetas) cfg.models.push_back(sigfit::model_from_theta(th));
    cfg.trim_threshold = o.trim;
    cfg.out_dir = o.out_dir;
    cfg.horizon_days = o.horizon;
    cfg.solver.full_sigma = o.full_sigma;

    if (o.mask.size() != 4) throw sigfit::DomainError("--random-mask must be 4 flags, e.g. 1101");
    for (int k = 0; k < 4; ++k) cfg.random_mask[k] = o.mask[k] == '1';

    if (o.seed_given) {
        cfg.seed = o.seed;
    } else if (const char* env = std::getenv("SIGFIT_SEED")) {
        cfg.seed = std::strtoull(env, nullptr, 10);
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sigfit: logistic growth-curve fitting for grouped epidemic case series"};
    app.require_subcommand(1);
    // key=value config file mirroring the flags, under a [fit] or [validate]
    // section; command-line flags take precedence
    app.set_config("--config", "", "key=value config file with a [fit]/[validate] section");

    CliOptions fit_opts, val_opts;
    std::string dump_path;

    CLI::App* fit = app.add_subcommand("fit", "ingest, fit all requested models, write reports");
    fit->fallthrough();
    add_common_flags(fit, fit_opts);

    CLI::App* val = app.add_subcommand("validate", "observed vs fitted daily incidence");
    val->fallthrough();
    add_common_flags(val, val_opts);
    val->add_option("--dump", dump_path, "fitdump.json from a previous fit run")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (fit->parsed()) return sigfit::run_fit(build_config(fit_opts));
        return sigfit::run_validate(build_config(val_opts), dump_path);
    } catch (const sigfit::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
