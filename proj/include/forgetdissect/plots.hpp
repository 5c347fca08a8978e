#pragma once

#include <map>
#include <string>
#include <vector>

namespace forgetdissect::plots {

struct Series {
    std::string label;
    std::vector<double> values;  // values[i] plotted at x = i + 1
};

/// Line chart with one polyline per series, x = 1..n, y in [0, 1].
std::string line_chart_svg(const std::string& title, const std::string& y_label,
                           const std::vector<Series>& series, const std::string& x_label = "block");

/// Bar chart of block id -> count.
std::string histogram_svg(const std::string& title, const std::map<int, int>& counts,
                          int num_blocks);

}  // namespace forgetdissect::plots
