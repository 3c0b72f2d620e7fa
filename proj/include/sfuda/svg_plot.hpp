#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sfuda/errors.hpp"

namespace sfuda {

// Static SVG line charts for metric histories; no external plotting
// dependency.
class SvgLineChart {
public:
    SvgLineChart(std::string title, std::string x_label, std::string y_label)
        : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)) {}

    void add_series(const std::string& name, std::vector<std::pair<double, double>> points) {
        static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
        Series s;
        s.name = name;
        s.color = palette[series_.size() % 6];
        s.points = std::move(points);
        series_.push_back(std::move(s));
    }

    void write(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("svg: cannot write " + path);
        os << render();
    }

    std::string render() const {
        const int w = 720, h = 420, ml = 70, mr = 160, mt = 50, mb = 55;
        double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
        bool any = false;
        for (const auto& s : series_)
            for (const auto& [x, y] : s.points) {
                if (!any) {
                    xmin = xmax = x;
                    ymin = ymax = y;
                    any = true;
                } else {
                    xmin = std::min(xmin, x);
                    xmax = std::max(xmax, x);
                    ymin = std::min(ymin, y);
                    ymax = std::max(ymax, y);
                }
            }
        if (xmax == xmin) xmax = xmin + 1;
        if (ymax == ymin) ymax = ymin + 1;
        const double ypad = 0.05 * (ymax - ymin);
        ymin -= ypad;
        ymax += ypad;

        auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
        auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };

        std::ostringstream os;
        os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
        os << "<rect width='100%' height='100%' fill='white'/>\n";
        os << "<text x='" << w / 2 << "' y='24' text-anchor='middle' font-size='16' font-family='sans-serif'>"
           << title_ << "</text>\n";
        // axes
        os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
           << "' stroke='black'/>\n";
        os << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
           << "' stroke='black'/>\n";
        for (int i = 0; i <= 4; ++i) {
            const double xv = xmin + (xmax - xmin) * i / 4.0;
            const double yv = ymin + (ymax - ymin) * i / 4.0;
            os << "<text x='" << px(xv) << "' y='" << h - mb + 18
               << "' text-anchor='middle' font-size='11' font-family='sans-serif'>" << round3(xv)
               << "</text>\n";
            os << "<text x='" << ml - 8 << "' y='" << py(yv) + 4
               << "' text-anchor='end' font-size='11' font-family='sans-serif'>" << round3(yv)
               << "</text>\n";
            os << "<line x1='" << ml << "' y1='" << py(yv) << "' x2='" << w - mr << "' y2='" << py(yv)
               << "' stroke='#dddddd'/>\n";
        }
        os << "<text x='" << (ml + w - mr) / 2 << "' y='" << h - 12
           << "' text-anchor='middle' font-size='12' font-family='sans-serif'>" << x_label_ << "</text>\n";
        os << "<text x='16' y='" << (mt + h - mb) / 2
           << "' text-anchor='middle' font-size='12' font-family='sans-serif' transform='rotate(-90 16 "
           << (mt + h - mb) / 2 << ")'>" << y_label_ << "</text>\n";

        int li = 0;
        for (const auto& s : series_) {
            if (!s.points.empty()) {
                os << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.6' points='";
                for (const auto& [x, y] : s.points) os << px(x) << "," << py(y) << " ";
                os << "'/>\n";
            }
            const int ly = mt + 16 + 18 * li++;
            os << "<line x1='" << w - mr + 12 << "' y1='" << ly << "' x2='" << w - mr + 34 << "' y2='" << ly
               << "' stroke='" << s.color << "' stroke-width='2'/>\n";
            os << "<text x='" << w - mr + 40 << "' y='" << ly + 4
               << "' font-size='11' font-family='sans-serif'>" << s.name << "</text>\n";
        }
        os << "</svg>\n";
        return os.str();
    }

private:
    struct Series {
        std::string name;
        std::string color;
        std::vector<std::pair<double, double>> points;
    };

    static std::string round3(double v) {
        std::ostringstream ss;
        ss.precision(3);
        ss << v;
        return ss.str();
    }

    std::string title_, x_label_, y_label_;
    std::vector<Series> series_;
};

}  // namespace sfuda
