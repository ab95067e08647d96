#pragma once

#include <string>
#include <vector>

#include "sigfit/data_ingest.hpp"
#include "sigfit/estimation.hpp"
#include "sigfit/inference.hpp"

namespace sigfit {

// One row of the per-group results table.
struct FitReport {
    std::string group_id;
    std::string model_label;  // "1" / "2" / "3" or a theta value
    bool has_inflection = false;
    DateInterval inflection;
    double n0 = 0.0;
    double n_max = 0.0;
    IntervalEstimate n_max_interval;
    double n_infl_midway = 0.0;
    double n_infl_curve = 0.0;
    FplmParams phi;
    bool converged = false;
};

enum class TableFormat { Csv, Markdown };

// Rows sorted by (group, model); phi printed to 2 decimals, case counts as
// integers; CSV uses RFC-4180-style quoting.
std::string results_table(std::vector<FitReport> reports, TableFormat format);

struct IncidencePoint {
    Date date;
    double observed = 0.0;
    double fitted = 0.0;
};

// Observed vs fitted daily incidence (first differences; the first element is
// the first day's cumulative). Fitted incidence floors at 0.
std::vector<IncidencePoint> validation_series(const GroupSeries& g,
                                              const std::vector<double>& fitted_cumulative);

struct CurveExport {
    std::string csv_path;
    std::string svg_path;
};

// Per-group fitted-curve CSV (date, fitted_cumulative, fitted_incidence,
// n_max, n_max_hi) extending horizon_days past the data, plus a standalone
// SVG chart of fit over data with asymptote and upper-CI segments.
CurveExport export_curve(const NlmeModel& m, const TransformKind& k, const GroupSeries& g,
                         const std::string& model_label, int horizon_days,
                         const std::string& out_dir);

// Atomic file write (temp + rename). Throws IoError.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace sigfit
