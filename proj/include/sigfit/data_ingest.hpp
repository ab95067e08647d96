#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "sigfit/date.hpp"
#include "sigfit/estimation.hpp"
#include "sigfit/growth_models.hpp"

namespace sigfit {

// One ECDC feed row. `cases` may be negative in the raw feed (corrections).
struct DailyRecord {
    Date date;
    long long cases = 0;
    long long deaths = 0;
    std::string geo_id;
    std::string country_name;
    std::optional<long long> population;
    std::string continent;
};

struct ParseResult {
    std::vector<DailyRecord> records;
    std::vector<std::string> rejects;  // "line N: reason"
};

// Parses the ECDC daily-case CSV. Malformed rows are collected, not fatal,
// unless they exceed 5% of data rows (CorruptFeed). Missing required columns
// raise SchemaError.
ParseResult parse_csv(std::istream& in);

struct GroupSelector {
    bool is_continent = false;
    std::string key;  // geoId, or continentExp value

    static GroupSelector country(std::string geo_id) { return {false, std::move(geo_id)}; }
    static GroupSelector continent(std::string name) { return {true, std::move(name)}; }
};

struct GroupSeries {
    std::string group_id;
    Date origin;                        // calendar date of day index 0
    std::vector<Date> dates;            // consecutive days
    std::vector<long long> cumulative;  // nondecreasing
    int trimmed_prefix = 0;             // leading days dropped below threshold
};

// Filter/aggregate records, clamp negative daily counts to 0, cumulate,
// carry forward over missing feed days, drop the sub-threshold prefix and
// truncate at the cutoff date.
GroupSeries build_group(const std::vector<DailyRecord>& records, const GroupSelector& sel,
                        long long trim_threshold, Date as_of);

GroupObservations to_observations(const GroupSeries& g, const TransformKind& k);

}  // namespace sigfit
