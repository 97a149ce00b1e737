#include "fedimit/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace fedimit::plot {

namespace {

constexpr double kW = 720, kH = 420;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 50;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

void header(std::ostringstream& os, const std::string& title, const std::string& config_hash) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
       << kW << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    if (!config_hash.empty()) os << "<!-- config_hash=" << config_hash << " -->\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
       << "</text>\n";
}

void axes(std::ostringstream& os, const std::string& x_label, const std::string& y_label) {
    const double x1 = kW - kRight, y1 = kH - kBottom;
    os << "<line x1=\"" << kLeft << "\" y1=\"" << y1 << "\" x2=\"" << x1 << "\" y2=\"" << y1
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << y1
       << "\" stroke=\"black\"/>\n";
    if (!x_label.empty())
        os << "<text x=\"" << (kLeft + x1) / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">"
           << xml_escape(x_label) << "</text>\n";
    os << "<text transform=\"translate(16," << (kTop + y1) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << xml_escape(y_label) << "</text>\n";
}

}  // namespace

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series, bool log_y, const std::string& config_hash) {
    auto tr = [&](double v) { return log_y ? std::log10(v) : v; };
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t n_max = 1;
    for (const auto& s : series) {
        n_max = std::max(n_max, s.y.size());
        for (double v : s.y) {
            if (!std::isfinite(v) || (log_y && v <= 0)) continue;
            lo = std::min(lo, tr(v));
            hi = std::max(hi, tr(v));
        }
    }
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) hi = lo + 1.0;
    const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
    auto px = [&](std::size_t i) { return kLeft + pw * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(1, n_max - 1)); };
    auto py = [&](double v) { return kTop + ph * (1.0 - (tr(v) - lo) / (hi - lo)); };

    std::ostringstream os;
    header(os, title, config_hash);
    axes(os, x_label, log_y ? y_label + " (log)" : y_label);
    for (int k = 0; k <= 4; ++k) {
        const double t = lo + (hi - lo) * k / 4.0;
        const double y = kTop + ph * (1.0 - k / 4.0);
        os << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << num(y) << "\" x2=\"" << kLeft << "\" y2=\"" << num(y)
           << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">"
           << tick_label(log_y ? std::pow(10.0, t) : t) << "</text>\n";
    }
    os << "<text x=\"" << kLeft << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">0</text>\n";
    os << "<text x=\"" << kW - kRight << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">" << n_max - 1
       << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % std::size(kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        bool first = true;
        for (std::size_t i = 0; i < series[s].y.size(); ++i) {
            const double v = series[s].y[i];
            if (!std::isfinite(v) || (log_y && v <= 0)) continue;
            os << (first ? "" : " ") << num(px(i)) << ',' << num(py(v));
            first = false;
        }
        os << "\"/>\n";
        const double ly = kTop + 10 + 18.0 * static_cast<double>(s);
        os << "<line x1=\"" << kW - kRight + 12 << "\" y1=\"" << ly << "\" x2=\"" << kW - kRight + 32 << "\" y2=\""
           << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << kW - kRight + 36 << "\" y=\"" << ly + 4 << "\">" << xml_escape(series[s].label)
           << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string bar_chart(const std::string& title, const std::string& y_label, const std::vector<std::string>& keys,
                      const std::vector<BarGroup>& groups, const std::string& config_hash) {
    double hi = 0.0;
    for (const auto& g : groups)
        for (double v : g.values)
            if (std::isfinite(v)) hi = std::max(hi, v);
    if (hi <= 0.0) hi = 1.0;
    const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
    const double group_w = pw / static_cast<double>(std::max<std::size_t>(1, groups.size()));
    const double bar_w = 0.8 * group_w / static_cast<double>(std::max<std::size_t>(1, keys.size()));

    std::ostringstream os;
    header(os, title, config_hash);
    axes(os, "", y_label);
    for (int k = 0; k <= 4; ++k) {
        const double y = kTop + ph * (1.0 - k / 4.0);
        os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">"
           << tick_label(hi * k / 4.0) << "</text>\n";
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double x0 = kLeft + group_w * static_cast<double>(g) + 0.1 * group_w;
        for (std::size_t k = 0; k < groups[g].values.size() && k < keys.size(); ++k) {
            const double v = std::isfinite(groups[g].values[k]) ? std::max(0.0, groups[g].values[k]) : 0.0;
            const double h = ph * v / hi;
            os << "<rect x=\"" << num(x0 + bar_w * static_cast<double>(k)) << "\" y=\"" << num(kTop + ph - h)
               << "\" width=\"" << num(bar_w) << "\" height=\"" << num(h) << "\" fill=\""
               << kPalette[k % std::size(kPalette)] << "\"/>\n";
        }
        os << "<text x=\"" << num(kLeft + group_w * (static_cast<double>(g) + 0.5)) << "\" y=\""
           << kH - kBottom + 16 << "\" text-anchor=\"middle\">" << xml_escape(groups[g].label) << "</text>\n";
    }
    for (std::size_t k = 0; k < keys.size(); ++k) {
        const double ly = kTop + 10 + 18.0 * static_cast<double>(k);
        os << "<rect x=\"" << kW - kRight + 12 << "\" y=\"" << ly - 6 << "\" width=\"14\" height=\"10\" fill=\""
           << kPalette[k % std::size(kPalette)] << "\"/>\n";
        os << "<text x=\"" << kW - kRight + 32 << "\" y=\"" << ly + 4 << "\">" << xml_escape(keys[k]) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace fedimit::plot
