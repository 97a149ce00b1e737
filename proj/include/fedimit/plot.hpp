#pragma once

// Plain SVG charts written by hand: polyline curves and grouped bars.

#include <string>
#include <vector>

namespace fedimit::plot {

struct Series {
    std::string label;
    std::vector<double> y;  // x is the index
};

/// Non-positive values are dropped when log_y is set.
std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series, bool log_y, const std::string& config_hash = {});

struct BarGroup {
    std::string label;
    std::vector<double> values;  // one per entry of `keys`
};

std::string bar_chart(const std::string& title, const std::string& y_label, const std::vector<std::string>& keys,
                      const std::vector<BarGroup>& groups, const std::string& config_hash = {});

/// Escapes &, <, > and quotes for SVG text.
std::string xml_escape(const std::string& s);

}  // namespace fedimit::plot
