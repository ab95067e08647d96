#include "sigfit/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "sigfit/inference.hpp"

namespace sigfit {

using nlohmann::json;

std::vector<std::string> paper12_groups() {
    return {"AU", "CN", "FR", "DE", "IT", "RU", "ES", "UK", "US", "BR", "IN", "Africa"};
}

ModelSpec model_from_label(const std::string& label) {
    if (label == "1" || label == "2" || label == "3")
        return {label, TransformKind::model(std::stoi(label))};
    if (label.rfind("theta=", 0) == 0) return model_from_theta(std::stod(label.substr(6)));
    throw DomainError("unknown model label '" + label + "' (expect 1, 2, 3 or theta=X)");
}

ModelSpec model_from_theta(double theta) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "theta%.2f", theta);
    return {buf, TransformKind::power(theta)};
}

namespace {

ParseResult ingest(const std::string& path) {
    if (path == "-") return parse_csv(std::cin);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open input: " + path);
    return parse_csv(f);
}

std::vector<std::string> expand_groups(const std::vector<std::string>& tokens) {
    std::vector<std::string> out;
    for (const auto& t : tokens) {
        if (t == "paper12") {
            auto preset = paper12_groups();
            out.insert(out.end(), preset.begin(), preset.end());
        } else {
            out.push_back(t);
        }
    }
    if (out.empty()) throw DomainError("no groups requested");
    return out;
}

GroupSelector make_selector(const std::set<std::string>& continents, const std::string& token) {
    if (continents.count(token)) return GroupSelector::continent(token);
    return GroupSelector::country(token);
}

json json_transform(const TransformKind& k) {
    json j;
    switch (k.id()) {
        case TransformKind::Id::Identity: j["id"] = "identity"; break;
        case TransformKind::Id::Power: j["id"] = "power"; break;
        case TransformKind::Id::Log10: j["id"] = "log10"; break;
    }
    j["theta"] = k.theta();
    return j;
}

TransformKind transform_from_json(const json& j) {
    const std::string id = j.at("id");
    if (id == "identity") return TransformKind::identity();
    if (id == "power") return TransformKind::power(j.at("theta").get<double>());
    if (id == "log10") return TransformKind::log10();
    throw ValidationError("fit dump: unknown transform '" + id + "'");
}

}  // namespace

int run_fit(const RunConfig& config) {
    if (config.models.empty()) throw DomainError("at least one model is required");
    const ParseResult parsed = ingest(config.input_path);
    if (!parsed.rejects.empty())
        std::cerr << "note: " << parsed.rejects.size() << " malformed rows rejected\n";

    std::set<std::string> continents;
    for (const auto& r : parsed.records) continents.insert(r.continent);

    const std::vector<std::string> group_tokens = expand_groups(config.groups);
    if (group_tokens.size() < 3)
        throw InsufficientGroups("mixed-effects fitting needs at least 3 groups");

    std::error_code ec;
    std::filesystem::create_directories(config.out_dir, ec);

    std::vector<FitReport> reports;
    json dump;
    dump["config"] = {{"input", config.input_path},
                      {"cutoff", config.cutoff.iso()},
                      {"trim_threshold", config.trim_threshold},
                      {"seed", config.seed},
                      {"groups", group_tokens}};
    dump["models"] = json::array();

    bool all_converged = true;
    for (const ModelSpec& spec : config.models) {
        // Build series and observations for every requested group.
        std::vector<GroupSeries> series;
        std::vector<GroupObservations> obs;
        for (const auto& token : group_tokens) {
            GroupSeries g = build_group(parsed.records, make_selector(continents, token),
                                        config.trim_threshold, config.cutoff);
            obs.push_back(to_observations(g, spec.transform));
            series.push_back(std::move(g));
        }

        NlmeModel model = fit_nlme(obs, config.random_mask, config.solver);
        if (!model.converged || !model.excluded_groups.empty()) all_converged = false;

        json jm;
        jm["label"] = spec.label;
        jm["transform"] = json_transform(spec.transform);
        jm["beta"] = {model.beta[0], model.beta[1], model.beta[2], model.beta[3]};
        jm["sigma_diag"] = {model.sigma(0, 0), model.sigma(1, 1), model.sigma(2, 2),
                            model.sigma(3, 3)};
        jm["sigma2"] = model.sigma2;
        jm["converged"] = model.converged;
        jm["iterations"] = model.iterations;
        jm["loglik_linearized"] = model.loglik_linearized;
        jm["excluded_groups"] = model.excluded_groups;
        jm["random_mask"] = {model.random_mask[0], model.random_mask[1], model.random_mask[2],
                             model.random_mask[3]};
        jm["groups"] = json::object();

        for (const auto& gid : model.group_order) {
            const auto it = std::find_if(series.begin(), series.end(),
                                         [&](const GroupSeries& s) { return s.group_id == gid; });
            const GroupSeries& g = *it;
            const FplmParams p = model.group_params(gid);

            FitReport rep;
            rep.group_id = gid;
            rep.model_label = spec.label;
            rep.phi = p;
            rep.converged = model.converged;
            try {
                const DerivedQuantities dq = derived_quantities(spec.transform, p);
                rep.n0 = dq.n0;
                rep.n_max = dq.n_max;
                rep.n_infl_midway = dq.n_infl_midway;
                rep.n_infl_curve = dq.n_infl_curve;
            } catch (const NoInflection&) {
                rep.n_max = spec.transform.invert(p.phi2);
                rep.n0 = std::max(0.0, spec.transform.invert(p.phi1));
            }
            if (model.converged) {
                rep.n_max_interval = nmax_interval(model, gid, spec.transform);
                try {
                    rep.inflection = inflection_date_interval(model, gid, spec.transform,
                                                              g.origin, 0.95, config.seed);
                    rep.has_inflection = true;
                } catch (const NoInflection&) {
                    rep.has_inflection = false;
                }
                export_curve(model, spec.transform, g, spec.label, config.horizon_days,
                             config.out_dir);
            } else {
                rep.n_max_interval = {rep.n_max, rep.n_max, rep.n_max, 0.95,
                                      IntervalMethod::WaldEndpointTransform};
            }
            reports.push_back(rep);

            const Eigen::Vector4d& bi = model.b.at(gid);
            jm["groups"][gid] = {{"b", {bi[0], bi[1], bi[2], bi[3]}},
                                 {"origin", g.origin.iso()},
                                 {"n_obs", g.dates.size()},
                                 {"trimmed_prefix", g.trimmed_prefix}};
        }
        dump["models"].push_back(jm);
    }

    write_file_atomic(config.out_dir + "/results.csv",
                      results_table(reports, TableFormat::Csv));
    write_file_atomic(config.out_dir + "/results.md",
                      results_table(reports, TableFormat::Markdown));
    write_file_atomic(config.out_dir + "/fitdump.json", dump.dump(2) + "\n");
    return all_converged ? 0 : 2;
}

namespace {

std::string incidence_svg(const std::string& title, const std::vector<IncidencePoint>& pts) {
    const double w = 760, h = 440, ml = 70, mr = 20, mt = 36, mb = 40;
    double ymax = 1.0;
    for (const auto& p : pts) ymax = std::max({ymax, p.observed, p.fitted});
    ymax *= 1.05;
    auto px = [&](size_t j) {
        return ml + static_cast<double>(j) / std::max<size_t>(1, pts.size() - 1) * (w - ml - mr);
    };
    auto py = [&](double v) { return h - mb - v / ymax * (h - mt - mb); };
    std::ostringstream s;
    s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << "<text x='" << w / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
      << "</text>\n";
    for (size_t j = 0; j < pts.size(); ++j)
        s << "<line x1='" << px(j) << "' y1='" << h - mb << "' x2='" << px(j) << "' y2='"
          << py(pts[j].observed) << "' stroke='steelblue' stroke-width='2'/>\n";
    s << "<polyline fill='none' stroke='crimson' stroke-width='2' points='";
    for (size_t j = 0; j < pts.size(); ++j) s << px(j) << "," << py(pts[j].fitted) << " ";
    s << "'/>\n</svg>\n";
    return s.str();
}

}  // namespace

int run_validate(const RunConfig& config, const std::string& dump_path) {
    std::ifstream f(dump_path);
    if (!f) throw IoError("cannot open fit dump: " + dump_path);
    json dump;
    try {
        f >> dump;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("unreadable fit dump: ") + e.what());
    }

    const ParseResult parsed = ingest(config.input_path);
    std::set<std::string> continents;
    for (const auto& r : parsed.records) continents.insert(r.continent);

    std::error_code ec;
    std::filesystem::create_directories(config.out_dir, ec);

    if (!dump.contains("models") || !dump["models"].is_array() || dump["models"].empty())
        throw ValidationError("fit dump has no models");

    for (const json& jm : dump["models"]) {
        const double sigma2 = jm.at("sigma2").get<double>();
        if (!(sigma2 > 0.0)) throw ValidationError("fit dump: sigma^2 must be positive");
        const TransformKind k = transform_from_json(jm.at("transform"));
        const std::string label = jm.at("label").get<std::string>();
        const auto beta = jm.at("beta").get<std::vector<double>>();
        if (beta.size() != 4) throw ValidationError("fit dump: beta must have 4 entries");

        for (const auto& [gid, jg] : jm.at("groups").items()) {
            GroupSeries g = build_group(parsed.records, make_selector(continents, gid),
                                        config.trim_threshold, config.cutoff);
            if (g.origin.iso() != jg.at("origin").get<std::string>() ||
                g.dates.size() != jg.at("n_obs").get<size_t>())
                throw ValidationError("fit dump does not match data for group " + gid +
                                      " (origin or length differs)");
            const auto b = jg.at("b").get<std::vector<double>>();
            if (b.size() != 4) throw ValidationError("fit dump: b must have 4 entries");
            const FplmParams p{beta[0] + b[0], beta[1] + b[1], beta[2] + b[2], beta[3] + b[3]};
            if (!p.valid())
                throw ValidationError("fit dump: invalid parameters for group " + gid);

            std::vector<double> fitted(g.dates.size());
            for (size_t j = 0; j < fitted.size(); ++j)
                fitted[j] = std::max(0.0, k.invert(fplm_eval(p, static_cast<double>(j))));
            const std::vector<IncidencePoint> pts = validation_series(g, fitted);

            std::ostringstream csv;
            csv << "date,observed_incidence,fitted_incidence\n";
            char buf[64];
            for (const auto& pt : pts) {
                std::snprintf(buf, sizeof buf, "%.0f,%.2f", pt.observed, pt.fitted);
                csv << pt.date.iso() << "," << buf << "\n";
            }
            std::string base = gid + "_" + label + "_validation";
            for (char& c : base)
                if (c == '/' || c == ' ') c = '_';
            write_file_atomic(config.out_dir + "/" + base + ".csv", csv.str());
            write_file_atomic(config.out_dir + "/" + base + ".svg",
                              incidence_svg(gid + " daily incidence (model " + label + ")", pts));
        }
    }
    return 0;
}

}  // namespace sigfit
