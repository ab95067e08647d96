#include "sigfit/data_ingest.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

namespace sigfit {

namespace {

// RFC-4180-ish line splitter: handles quoted fields with embedded commas and
// doubled quotes. The feed has no embedded newlines.
std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

bool parse_ll(const std::string& s, long long& out) {
    const char* b = s.data();
    const char* e = b + s.size();
    auto [ptr, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && ptr == e && !s.empty();
}

}  // namespace

ParseResult parse_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("empty input: no header row");
    // Tolerate a UTF-8 BOM.
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

    const std::vector<std::string> header = split_csv_line(line);
    std::map<std::string, int> col;
    for (size_t i = 0; i < header.size(); ++i) col[header[i]] = static_cast<int>(i);

    static const char* required[] = {"dateRep", "cases", "deaths", "countriesAndTerritories",
                                     "geoId", "continentExp"};
    std::string missing;
    for (const char* name : required)
        if (!col.count(name)) missing += std::string(missing.empty() ? "" : ", ") + name;
    if (!missing.empty()) throw SchemaError("missing required columns: " + missing);

    const int c_date = col["dateRep"], c_cases = col["cases"], c_deaths = col["deaths"];
    const int c_name = col["countriesAndTerritories"], c_geo = col["geoId"];
    const int c_cont = col["continentExp"];
    const int c_pop = col.count("popData2019") ? col["popData2019"] : -1;
    const int max_col = std::max({c_date, c_cases, c_deaths, c_name, c_geo, c_cont, c_pop});

    ParseResult out;
    long long line_no = 1;
    long long data_rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        ++data_rows;
        const std::vector<std::string> f = split_csv_line(line);
        auto reject = [&](const std::string& why) {
            out.rejects.push_back("line " + std::to_string(line_no) + ": " + why);
        };
        if (static_cast<int>(f.size()) <= max_col) {
            reject("too few fields");
            continue;
        }
        DailyRecord rec;
        try {
            rec.date = Date::parse(f[c_date]);
        } catch (const DomainError& e) {
            reject(e.what());
            continue;
        }
        if (!parse_ll(f[c_cases], rec.cases)) {
            reject("bad cases field '" + f[c_cases] + "'");
            continue;
        }
        if (!parse_ll(f[c_deaths], rec.deaths)) {
            reject("bad deaths field '" + f[c_deaths] + "'");
            continue;
        }
        rec.geo_id = f[c_geo];
        if (rec.geo_id.empty()) {
            reject("empty geoId");
            continue;
        }
        rec.country_name = f[c_name];
        rec.continent = f[c_cont];
        if (c_pop >= 0) {
            long long pop;
            if (parse_ll(f[c_pop], pop)) rec.population = pop;
        }
        out.records.push_back(std::move(rec));
    }
    if (data_rows > 0 && out.rejects.size() * 20 > static_cast<size_t>(data_rows))
        throw CorruptFeed("more than 5% of rows rejected (" +
                          std::to_string(out.rejects.size()) + " of " +
                          std::to_string(data_rows) + ")");
    return out;
}

GroupSeries build_group(const std::vector<DailyRecord>& records, const GroupSelector& sel,
                        long long trim_threshold, Date as_of) {
    if (trim_threshold < 1) throw DomainError("trim threshold must be >= 1");

    // Daily totals by date; continent selectors sum across member countries.
    std::map<Date, long long> daily;
    for (const auto& r : records) {
        const bool match = sel.is_continent ? r.continent == sel.key : r.geo_id == sel.key;
        if (!match || r.date > as_of) continue;
        daily[r.date] += std::max<long long>(r.cases, 0);  // clamp corrections
    }
    if (daily.empty()) throw UnknownGroup("no records match group '" + sel.key + "'");

    GroupSeries g;
    g.group_id = sel.key;

    // Cumulate over consecutive days, carrying forward across feed gaps.
    const Date first = daily.begin()->first;
    const Date last = daily.rbegin()->first;
    long long cum = 0;
    std::vector<Date> dates;
    std::vector<long long> cumulative;
    for (Date d = first; d <= last; d = d + 1) {
        auto it = daily.find(d);
        if (it != daily.end()) cum += it->second;
        dates.push_back(d);
        cumulative.push_back(cum);
    }

    size_t start = 0;
    while (start < cumulative.size() && cumulative[start] < trim_threshold) ++start;
    if (start == cumulative.size())
        throw BelowThreshold("group '" + sel.key + "' never reaches cumulative " +
                             std::to_string(trim_threshold));
    g.trimmed_prefix = static_cast<int>(start);
    g.origin = dates[start];
    g.dates.assign(dates.begin() + start, dates.end());
    g.cumulative.assign(cumulative.begin() + start, cumulative.end());
    return g;
}

GroupObservations to_observations(const GroupSeries& g, const TransformKind& k) {
    GroupObservations obs;
    obs.group_id = g.group_id;
    obs.t.reserve(g.cumulative.size());
    obs.z.reserve(g.cumulative.size());
    for (size_t j = 0; j < g.cumulative.size(); ++j) {
        obs.t.push_back(static_cast<double>(j));
        try {
            obs.z.push_back(k.apply(static_cast<double>(g.cumulative[j])));
        } catch (const DomainError&) {
            throw DomainError("group " + g.group_id + ": " + k.name() +
                              " transform undefined at " + g.dates[j].iso() + " (cumulative " +
                              std::to_string(g.cumulative[j]) + ")");
        }
    }
    return obs;
}

}  // namespace sigfit
