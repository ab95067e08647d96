#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sigfit/data_ingest.hpp"
#include "sigfit/estimation.hpp"
#include "sigfit/reporting.hpp"

namespace sigfit {

struct ModelSpec {
    std::string label;  // "1", "2", "3" or "theta0.70"
    TransformKind transform = TransformKind::identity();
};

struct RunConfig {
    std::string input_path;                 // "-" reads standard input
    Date cutoff = Date::from_ymd(2020, 6, 15);
    std::vector<std::string> groups;        // tokens; "paper12" expands to the preset
    std::vector<ModelSpec> models;
    long long trim_threshold = 100;
    RandomMask random_mask{true, true, true, true};
    std::uint64_t seed = 20200615ull;
    std::string out_dir = "out";
    int horizon_days = 120;
    SolverControls solver;
};

// The twelve-group preset: eleven countries plus Africa as a continent.
std::vector<std::string> paper12_groups();

ModelSpec model_from_label(const std::string& label);  // "1"/"2"/"3" or "theta=X"
ModelSpec model_from_theta(double theta);

// Full ingest -> NLME fit -> inference -> report pipeline. Writes
// results.csv / results.md, per-group curve exports and fitdump.json under
// config.out_dir. Returns 0, or 2 when any model failed to converge or any
// group was excluded (results still written). Throws on IO/schema errors.
int run_fit(const RunConfig& config);

// Re-ingests the input, checks it against a fit dump and writes per-group
// observed-vs-fitted incidence CSVs and SVGs. Throws ValidationError on a
// dump/model mismatch.
int run_validate(const RunConfig& config, const std::string& dump_path);

}  // namespace sigfit
