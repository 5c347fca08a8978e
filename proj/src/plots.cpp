#include "forgetdissect/plots.hpp"

#include <algorithm>
#include <cstdio>
#include <string_view>

#include "forgetdissect/error.hpp"

namespace forgetdissect::plots {

namespace {

constexpr double kWidth = 480;
constexpr double kHeight = 320;
constexpr double kLeft = 60;
constexpr double kRight = 130;
constexpr double kTop = 40;
constexpr double kBottom = 50;

constexpr const char* kPalette[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape(std::string_view text) {
    std::string out;
    for (char c : text) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Frame {
    int num_ticks;
    double y_max;

    double x(double block) const {
        const double span = kWidth - kLeft - kRight;
        return num_ticks == 1 ? kLeft + span / 2 : kLeft + span * (block - 1) / (num_ticks - 1);
    }
    double y(double value) const {
        const double span = kHeight - kTop - kBottom;
        return kHeight - kBottom - span * std::clamp(value / y_max, 0.0, 1.0);
    }
};

std::string header(const std::string& title) {
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) +
                    "\" height=\"" + num(kHeight) + "\" font-family=\"monospace\" font-size=\"11\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + num(kWidth / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" +
         escape(title) + "</text>\n";
    return s;
}

std::string axes(const Frame& f, const std::string& x_label, const std::string& y_label, int y_ticks) {
    std::string s;
    s += "<line class=\"axis\" x1=\"" + num(kLeft) + "\" y1=\"" + num(kHeight - kBottom) + "\" x2=\"" +
         num(kWidth - kRight) + "\" y2=\"" + num(kHeight - kBottom) + "\" stroke=\"black\"/>\n";
    s += "<line class=\"axis\" x1=\"" + num(kLeft) + "\" y1=\"" + num(kTop) + "\" x2=\"" + num(kLeft) +
         "\" y2=\"" + num(kHeight - kBottom) + "\" stroke=\"black\"/>\n";
    for (int b = 1; b <= f.num_ticks; ++b) {
        s += "<g class=\"xtick\"><line x1=\"" + num(f.x(b)) + "\" y1=\"" + num(kHeight - kBottom) +
             "\" x2=\"" + num(f.x(b)) + "\" y2=\"" + num(kHeight - kBottom + 5) +
             "\" stroke=\"black\"/><text x=\"" + num(f.x(b)) + "\" y=\"" + num(kHeight - kBottom + 18) +
             "\" text-anchor=\"middle\">" + std::to_string(b) + "</text></g>\n";
    }
    for (int i = 0; i <= y_ticks; ++i) {
        const double v = f.y_max * i / y_ticks;
        s += "<g class=\"ytick\"><line x1=\"" + num(kLeft - 5) + "\" y1=\"" + num(f.y(v)) + "\" x2=\"" +
             num(kLeft) + "\" y2=\"" + num(f.y(v)) + "\" stroke=\"black\"/><text x=\"" + num(kLeft - 8) +
             "\" y=\"" + num(f.y(v) + 4) + "\" text-anchor=\"end\">" + num(v) + "</text></g>\n";
    }
    s += "<text x=\"" + num((kLeft + kWidth - kRight) / 2) + "\" y=\"" + num(kHeight - 12) +
         "\" text-anchor=\"middle\">" + escape(x_label) + "</text>\n";
    s += "<text x=\"16\" y=\"" + num((kTop + kHeight - kBottom) / 2) +
         "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " + num((kTop + kHeight - kBottom) / 2) +
         ")\">" + escape(y_label) + "</text>\n";
    return s;
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& y_label, const std::vector<Series>& series,
                           const std::string& x_label) {
    require(!series.empty(), ErrorKind::Input, "line chart needs at least one series");
    std::size_t ticks = 0;
    for (const auto& s : series) ticks = std::max(ticks, s.values.size());
    require(ticks > 0, ErrorKind::Input, "line chart series are empty");

    const Frame f{static_cast<int>(ticks), 1.0};
    std::string svg = header(title) + axes(f, x_label, y_label, 5);
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kPalette[i % std::size(kPalette)];
        std::string points;
        for (std::size_t b = 0; b < series[i].values.size(); ++b) {
            if (b) points += ' ';
            points += num(f.x(static_cast<double>(b + 1))) + "," + num(f.y(series[i].values[b]));
        }
        svg += "<polyline class=\"series\" fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
        const double ly = kTop + 16.0 * static_cast<double>(i);
        svg += "<line x1=\"" + num(kWidth - kRight + 10) + "\" y1=\"" + num(ly) + "\" x2=\"" +
               num(kWidth - kRight + 30) + "\" y2=\"" + num(ly) + "\" stroke=\"" + color +
               "\" stroke-width=\"2\"/><text x=\"" + num(kWidth - kRight + 34) + "\" y=\"" + num(ly + 4) +
               "\">" + escape(series[i].label) + "</text>\n";
    }
    return svg + "</svg>\n";
}

std::string histogram_svg(const std::string& title, const std::map<int, int>& counts, int num_blocks) {
    require(num_blocks > 0, ErrorKind::Input, "histogram needs at least one block");
    int max_count = 1;
    for (const auto& [block, count] : counts) max_count = std::max(max_count, count);
    const Frame f{num_blocks, static_cast<double>(max_count)};
    std::string svg = header(title) + axes(f, "block", "fragile verdicts", std::min(max_count, 5));
    const double bar = (kWidth - kLeft - kRight) / (num_blocks + 1) * 0.6;
    for (int b = 1; b <= num_blocks; ++b) {
        const auto it = counts.find(b);
        const double v = it == counts.end() ? 0.0 : it->second;
        svg += "<rect class=\"bar\" x=\"" + num(f.x(b) - bar / 2) + "\" y=\"" + num(f.y(v)) + "\" width=\"" +
               num(bar) + "\" height=\"" + num(kHeight - kBottom - f.y(v)) + "\" fill=\"" + kPalette[1] +
               "\"/>\n";
    }
    return svg + "</svg>\n";
}

}  // namespace forgetdissect::plots
