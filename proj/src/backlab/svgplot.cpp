#include "backlab/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "backlab/common.hpp"

namespace backlab::plot {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 64, kRight = 18, kTop = 36, kBottom = 48;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
constexpr int kPaletteSize = 8;

std::string esc(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += ch;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

struct Range {
    double lo = 0, hi = 1;
    void grow(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    void pad() {
        if (hi - lo < 1e-12) {
            lo -= 0.5;
            hi += 0.5;
        } else {
            double m = 0.05 * (hi - lo);
            lo -= m;
            hi += m;
        }
    }
};

Range data_range(const std::vector<Series>& series, bool use_x) {
    Range r;
    bool seen = false;
    for (const auto& s : series) {
        const auto& v = use_x ? s.x : s.y;
        for (double d : v) {
            if (!std::isfinite(d)) continue;
            if (!seen) {
                r.lo = r.hi = d;
                seen = true;
            } else {
                r.grow(d);
            }
        }
    }
    r.pad();
    return r;
}

void axes(std::ostringstream& os, const std::string& title, const std::string& xlabel,
          const std::string& ylabel, const Range& rx, const Range& ry) {
    os << "<rect width=\"" << num(kWidth) << "\" height=\"" << num(kHeight)
       << "\" fill=\"#ffffff\"/>\n";
    double px0 = kLeft, px1 = kWidth - kRight, py0 = kHeight - kBottom, py1 = kTop;
    os << "<rect x=\"" << num(px0) << "\" y=\"" << num(py1) << "\" width=\"" << num(px1 - px0)
       << "\" height=\"" << num(py0 - py1) << "\" fill=\"none\" stroke=\"#333333\"/>\n";
    os << "<text x=\"" << num(kWidth / 2) << "\" y=\"20\" font-size=\"14\" text-anchor=\"middle\" "
          "font-family=\"sans-serif\">"
       << esc(title) << "</text>\n";
    os << "<text x=\"" << num((px0 + px1) / 2) << "\" y=\"" << num(kHeight - 10)
       << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">" << esc(xlabel)
       << "</text>\n";
    os << "<text x=\"16\" y=\"" << num((py0 + py1) / 2)
       << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "transform=\"rotate(-90 16 "
       << num((py0 + py1) / 2) << ")\">" << esc(ylabel) << "</text>\n";
    // 5 ticks per axis
    for (int i = 0; i <= 4; ++i) {
        double fx = rx.lo + (rx.hi - rx.lo) * i / 4.0;
        double fy = ry.lo + (ry.hi - ry.lo) * i / 4.0;
        double sx = px0 + (px1 - px0) * i / 4.0;
        double sy = py0 - (py0 - py1) * i / 4.0;
        os << "<line x1=\"" << num(sx) << "\" y1=\"" << num(py0) << "\" x2=\"" << num(sx)
           << "\" y2=\"" << num(py0 + 4) << "\" stroke=\"#333333\"/>\n";
        os << "<text x=\"" << num(sx) << "\" y=\"" << num(py0 + 16)
           << "\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\">"
           << esc(format_double(fx, 4)) << "</text>\n";
        os << "<line x1=\"" << num(px0 - 4) << "\" y1=\"" << num(sy) << "\" x2=\"" << num(px0)
           << "\" y2=\"" << num(sy) << "\" stroke=\"#333333\"/>\n";
        os << "<text x=\"" << num(px0 - 7) << "\" y=\"" << num(sy + 3)
           << "\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">"
           << esc(format_double(fy, 4)) << "</text>\n";
    }
}

void legend(std::ostringstream& os, const std::vector<std::string>& names) {
    double x = kWidth - kRight - 150, y = kTop + 14;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i].empty()) continue;
        const char* color = kPalette[i % kPaletteSize];
        os << "<line x1=\"" << num(x) << "\" y1=\"" << num(y - 4) << "\" x2=\"" << num(x + 22)
           << "\" y2=\"" << num(y - 4) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << num(x + 28) << "\" y=\"" << num(y)
           << "\" font-size=\"11\" font-family=\"sans-serif\">" << esc(names[i]) << "</text>\n";
        y += 15;
    }
}

void write_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    check(bool(out), "cannot write plot: ", path);
    out << body;
}

}  // namespace

std::string LineChart::render() const {
    Range rx = data_range(series, true);
    Range ry = data_range(series, false);
    double px0 = kLeft, px1 = kWidth - kRight, py0 = kHeight - kBottom, py1 = kTop;
    auto sx = [&](double v) { return px0 + (v - rx.lo) / (rx.hi - rx.lo) * (px1 - px0); };
    auto sy = [&](double v) { return py0 - (v - ry.lo) / (ry.hi - ry.lo) * (py0 - py1); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\""
       << num(kHeight) << "\" viewBox=\"0 0 " << num(kWidth) << " " << num(kHeight) << "\">\n";
    axes(os, title, xlabel, ylabel, rx, ry);
    for (std::size_t si = 0; si < series.size(); ++si) {
        const Series& s = series[si];
        check(s.x.size() == s.y.size(), "series '", s.label, "': x/y length mismatch");
        const char* color = kPalette[si % kPaletteSize];
        std::string pts;
        auto flush = [&]() {
            if (!pts.empty())
                os << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << color
                   << "\" stroke-width=\"1.5\"/>\n";
            pts.clear();
        };
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
                flush();
                continue;
            }
            if (!pts.empty()) pts += " ";
            pts += num(sx(s.x[i])) + "," + num(sy(s.y[i]));
            if (markers)
                os << "<circle cx=\"" << num(sx(s.x[i])) << "\" cy=\"" << num(sy(s.y[i]))
                   << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
        }
        flush();
    }
    std::vector<std::string> names;
    for (const auto& s : series) names.push_back(s.label);
    legend(os, names);
    os << "</svg>\n";
    return os.str();
}

void LineChart::save(const std::string& path) const { write_file(path, render()); }

std::string BarChart::render() const {
    check(!groups.empty(), "bar chart needs at least one group");
    for (const auto& g : groups)
        check(g.size() == labels.size(), "bar chart group size must match label count");
    Range ry;
    ry.lo = 0;
    ry.hi = 0;
    for (const auto& g : groups)
        for (double v : g) ry.grow(v);
    ry.pad();
    ry.lo = std::min(ry.lo, 0.0);

    double px0 = kLeft, px1 = kWidth - kRight, py0 = kHeight - kBottom, py1 = kTop;
    auto sy = [&](double v) { return py0 - (v - ry.lo) / (ry.hi - ry.lo) * (py0 - py1); };
    int ncat = static_cast<int>(labels.size());
    int ngrp = static_cast<int>(groups.size());
    double slot = (px1 - px0) / std::max(1, ncat);
    double bar = slot * 0.8 / std::max(1, ngrp);

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\""
       << num(kHeight) << "\" viewBox=\"0 0 " << num(kWidth) << " " << num(kHeight) << "\">\n";
    Range rx;  // dummy tick range for the x axis (categories are labeled directly)
    rx.lo = 0;
    rx.hi = ncat;
    os << "<rect width=\"" << num(kWidth) << "\" height=\"" << num(kHeight)
       << "\" fill=\"#ffffff\"/>\n";
    os << "<rect x=\"" << num(px0) << "\" y=\"" << num(py1) << "\" width=\"" << num(px1 - px0)
       << "\" height=\"" << num(py0 - py1) << "\" fill=\"none\" stroke=\"#333333\"/>\n";
    os << "<text x=\"" << num(kWidth / 2) << "\" y=\"20\" font-size=\"14\" text-anchor=\"middle\" "
          "font-family=\"sans-serif\">"
       << esc(title) << "</text>\n";
    os << "<text x=\"" << num((px0 + px1) / 2) << "\" y=\"" << num(kHeight - 10)
       << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">" << esc(xlabel)
       << "</text>\n";
    os << "<text x=\"16\" y=\"" << num((py0 + py1) / 2)
       << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "transform=\"rotate(-90 16 "
       << num((py0 + py1) / 2) << ")\">" << esc(ylabel) << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        double fy = ry.lo + (ry.hi - ry.lo) * i / 4.0;
        double y = py0 - (py0 - py1) * i / 4.0;
        os << "<line x1=\"" << num(px0 - 4) << "\" y1=\"" << num(y) << "\" x2=\"" << num(px0)
           << "\" y2=\"" << num(y) << "\" stroke=\"#333333\"/>\n";
        os << "<text x=\"" << num(px0 - 7) << "\" y=\"" << num(y + 3)
           << "\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">"
           << esc(format_double(fy, 4)) << "</text>\n";
    }
    double base = sy(std::max(0.0, ry.lo));
    for (int c = 0; c < ncat; ++c) {
        for (int g = 0; g < ngrp; ++g) {
            double v = groups[g][c];
            if (!std::isfinite(v)) continue;
            double x = px0 + c * slot + slot * 0.1 + g * bar;
            double top = sy(v);
            double y = std::min(top, base), h = std::fabs(base - top);
            os << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(bar)
               << "\" height=\"" << num(h) << "\" fill=\"" << kPalette[g % kPaletteSize]
               << "\"/>\n";
        }
        os << "<text x=\"" << num(px0 + c * slot + slot / 2) << "\" y=\"" << num(py0 + 16)
           << "\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\">"
           << esc(labels[c]) << "</text>\n";
    }
    legend(os, group_names);
    os << "</svg>\n";
    return os.str();
}

void BarChart::save(const std::string& path) const { write_file(path, render()); }

}  // namespace backlab::plot
