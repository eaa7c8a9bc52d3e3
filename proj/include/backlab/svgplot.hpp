#pragma once
// Minimal deterministic SVG charts for run reports. Output depends only on
// the data handed in (fixed canvas, fixed precision, no timestamps), so
// regenerating a report from the same artifacts reproduces identical bytes.

#include <string>
#include <vector>

namespace backlab::plot {

struct Series {
    std::string label;
    std::vector<double> x, y;  // equal length; non-finite points break the line
};

struct LineChart {
    std::string title, xlabel, ylabel;
    std::vector<Series> series;
    bool markers = false;

    void save(const std::string& path) const;
    std::string render() const;
};

struct BarChart {
    std::string title, xlabel, ylabel;
    std::vector<std::string> labels;          // one per category
    std::vector<std::string> group_names;     // one per group
    std::vector<std::vector<double>> groups;  // [group][category]

    void save(const std::string& path) const;
    std::string render() const;
};

}  // namespace backlab::plot
