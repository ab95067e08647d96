#include "sigfit/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sigfit {

namespace {

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string as_count(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.0f", v);
    return buf;
}

}  // namespace

std::string results_table(std::vector<FitReport> reports, TableFormat format) {
    if (reports.empty()) throw DomainError("results_table: no reports");
    std::sort(reports.begin(), reports.end(), [](const FitReport& a, const FitReport& b) {
        if (a.group_id != b.group_id) return a.group_id < b.group_id;
        return a.model_label < b.model_label;
    });

    static const char* cols[] = {"country",      "model",      "infl_date", "n_infl_midway",
                                 "n_infl_curve", "n_max",      "n_max_lo",  "n_max_hi",
                                 "phi1",         "phi2",       "phi3",      "phi4",
                                 "converged"};
    constexpr int ncol = 13;

    std::vector<std::array<std::string, ncol>> rows;
    for (const auto& r : reports) {
        rows.push_back({csv_quote(r.group_id), r.model_label,
                        r.has_inflection ? r.inflection.point.iso() : "NA",
                        as_count(r.n_infl_midway), as_count(r.n_infl_curve),
                        as_count(r.n_max), as_count(r.n_max_interval.lower),
                        as_count(r.n_max_interval.upper), fixed2(r.phi.phi1),
                        fixed2(r.phi.phi2), fixed2(r.phi.phi3), fixed2(r.phi.phi4),
                        r.converged ? "yes" : "no"});
    }

    std::ostringstream out;
    if (format == TableFormat::Csv) {
        for (int c = 0; c < ncol; ++c) out << (c ? "," : "") << cols[c];
        out << "\n";
        for (const auto& row : rows) {
            for (int c = 0; c < ncol; ++c) out << (c ? "," : "") << row[c];
            out << "\n";
        }
    } else {
        out << "|";
        for (int c = 0; c < ncol; ++c) out << " " << cols[c] << " |";
        out << "\n|";
        for (int c = 0; c < ncol; ++c) out << "---|";
        out << "\n";
        for (const auto& row : rows) {
            out << "|";
            for (int c = 0; c < ncol; ++c) out << " " << row[c] << " |";
            out << "\n";
        }
    }
    return out.str();
}

std::vector<IncidencePoint> validation_series(const GroupSeries& g,
                                              const std::vector<double>& fitted_cumulative) {
    if (fitted_cumulative.size() != g.dates.size())
        throw ShapeError("validation_series: fitted length " +
                         std::to_string(fitted_cumulative.size()) + " vs " +
                         std::to_string(g.dates.size()) + " dates");
    std::vector<IncidencePoint> out(g.dates.size());
    for (size_t j = 0; j < g.dates.size(); ++j) {
        out[j].date = g.dates[j];
        out[j].observed = static_cast<double>(j == 0 ? g.cumulative[0]
                                                     : g.cumulative[j] - g.cumulative[j - 1]);
        const double df = j == 0 ? fitted_cumulative[0]
                                 : fitted_cumulative[j] - fitted_cumulative[j - 1];
        out[j].fitted = std::max(0.0, df);
    }
    return out;
}

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + tmp);
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw IoError("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path + " (" + ec.message() + ")");
}

namespace {

std::string svg_chart(const std::string& title, const std::vector<double>& day,
                      const std::vector<double>& fitted, const std::vector<double>& obs_day,
                      const std::vector<double>& observed, double n_max, double n_max_hi) {
    const double w = 760, h = 440, ml = 70, mr = 20, mt = 36, mb = 40;
    const double x0 = day.front(), x1 = day.back();
    double y1 = std::max(n_max_hi, *std::max_element(observed.begin(), observed.end()));
    y1 = std::max(y1, *std::max_element(fitted.begin(), fitted.end())) * 1.05 + 1.0;
    auto px = [&](double t) { return ml + (t - x0) / std::max(1.0, x1 - x0) * (w - ml - mr); };
    auto py = [&](double v) { return h - mb - v / y1 * (h - mt - mb); };

    std::ostringstream s;
    s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << "<text x='" << w / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
      << "</text>\n"
      << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
      << "' stroke='black'/>\n"
      << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
      << "' stroke='black'/>\n";
    // asymptote and upper-CI segments
    s << "<line x1='" << ml << "' y1='" << py(n_max) << "' x2='" << w - mr << "' y2='"
      << py(n_max) << "' stroke='gray' stroke-dasharray='6,4'/>\n";
    s << "<line x1='" << ml << "' y1='" << py(n_max_hi) << "' x2='" << w - mr << "' y2='"
      << py(n_max_hi) << "' stroke='gray' stroke-dasharray='2,4'/>\n";
    s << "<polyline fill='none' stroke='crimson' stroke-width='2' points='";
    for (size_t j = 0; j < day.size(); ++j) s << px(day[j]) << "," << py(fitted[j]) << " ";
    s << "'/>\n";
    for (size_t j = 0; j < observed.size(); ++j)
        s << "<circle cx='" << px(obs_day[j]) << "' cy='" << py(observed[j])
          << "' r='2' fill='black' fill-opacity='0.6'/>\n";
    s << "<text x='" << w - mr << "' y='" << py(n_max) - 4
      << "' text-anchor='end' font-size='11' fill='gray'>n_max</text>\n";
    s << "</svg>\n";
    return s.str();
}

}  // namespace

CurveExport export_curve(const NlmeModel& m, const TransformKind& k, const GroupSeries& g,
                         const std::string& model_label, int horizon_days,
                         const std::string& out_dir) {
    if (!m.converged) throw NotConverged("export_curve: model not converged");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (!std::filesystem::is_directory(out_dir))
        throw IoError("not a writable directory: " + out_dir);

    const FplmParams p = m.group_params(g.group_id);
    const IntervalEstimate ci = nmax_interval(m, g.group_id, k);
    const int n_obs = static_cast<int>(g.dates.size());
    const int n = n_obs + std::max(0, horizon_days);

    std::vector<double> day(n), fitted(n), observed;
    for (int j = 0; j < n; ++j) {
        day[j] = static_cast<double>(j);
        fitted[j] = std::max(0.0, k.invert(fplm_eval(p, day[j])));
    }
    observed.reserve(n_obs);
    for (long long c : g.cumulative) observed.push_back(static_cast<double>(c));
    std::vector<double> obs_day(day.begin(), day.begin() + n_obs);

    std::ostringstream csv;
    csv << "date,fitted_cumulative,fitted_incidence,n_max,n_max_hi\n";
    for (int j = 0; j < n; ++j) {
        const double inc = j == 0 ? fitted[0] : std::max(0.0, fitted[j] - fitted[j - 1]);
        csv << (g.origin + j).iso() << "," << fixed2(fitted[j]) << "," << fixed2(inc) << ","
            << fixed2(ci.point) << "," << fixed2(ci.upper) << "\n";
    }

    std::string base = g.group_id + "_" + model_label;
    for (char& c : base)
        if (c == '/' || c == ' ') c = '_';
    CurveExport out;
    out.csv_path = out_dir + "/" + base + ".csv";
    out.svg_path = out_dir + "/" + base + ".svg";
    write_file_atomic(out.csv_path, csv.str());
    write_file_atomic(out.svg_path,
                      svg_chart(g.group_id + " (model " + model_label + ")", day, fitted,
                                obs_day, observed, ci.point, ci.upper));
    return out;
}

}  // namespace sigfit
