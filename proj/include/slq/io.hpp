#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "slq/errors.hpp"

namespace slq {

/// Writes through `fill` into `path.tmp`, then renames over `path`.
inline void write_atomically(const std::filesystem::path& path, const std::function<void(std::ostream&)>& fill) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp.string() + " for writing");
        fill(out);
        out.flush();
        if (!out) throw Error("write to " + tmp.string() + " failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

inline void write_text_atomically(const std::filesystem::path& path, const std::string& text) {
    write_atomically(path, [&](std::ostream& os) { os << text; });
}

struct PlotSeries {
    std::string label;
    std::vector<double> x, y;
};

/// Self-contained SVG line plot with linear axes.
inline std::string svg_line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                 const std::vector<PlotSeries>& series) {
    constexpr double W = 640, H = 420, L = 70, R = 160, Tm = 40, B = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-300) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-12 * std::max(1.0, std::abs(y0))) {
        const double pad = 0.5 * std::max(1e-3, std::abs(y0) * 1e-3);
        y0 -= pad;
        y1 += pad;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tm - B); };
    auto esc = [](const std::string& s) {
        std::string o;
        for (char c : s) {
            if (c == '<') o += "&lt;";
            else if (c == '>') o += "&gt;";
            else if (c == '&') o += "&amp;";
            else o += c;
        }
        return o;
    };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

    std::ostringstream os;
    os << std::setprecision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
    os << "<rect x=\"" << L << "\" y=\"" << Tm << "\" width=\"" << W - L - R << "\" height=\"" << H - Tm - B
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
        os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
        os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
        os << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << py(yv) << "\" y2=\"" << py(yv)
           << "\" stroke=\"#ddd\"/>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << esc(xlabel)
       << "</text>\n";
    os << "<text x=\"16\" y=\"" << (Tm + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
       << (Tm + H - B) / 2 << ")\">" << esc(ylabel) << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = colors[s % 6];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
        for (std::size_t i = 0; i < std::min(series[s].x.size(), series[s].y.size()); ++i) {
            if (!std::isfinite(series[s].y[i])) continue;
            os << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
        }
        os << "\"/>\n";
        if (series[s].x.size() <= 40) {
            for (std::size_t i = 0; i < std::min(series[s].x.size(), series[s].y.size()); ++i) {
                if (!std::isfinite(series[s].y[i])) continue;
                os << "<circle cx=\"" << px(series[s].x[i]) << "\" cy=\"" << py(series[s].y[i])
                   << "\" r=\"3\" fill=\"" << color << "\"/>\n";
            }
        }
        const double ly = Tm + 16 + 18.0 * static_cast<double>(s);
        os << "<line x1=\"" << W - R + 10 << "\" x2=\"" << W - R + 30 << "\" y1=\"" << ly << "\" y2=\"" << ly
           << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\">" << esc(series[s].label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace slq
