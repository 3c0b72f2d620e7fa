#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sfuda/errors.hpp"

namespace sfuda {

// Minimal CSV writer for metric histories: a header row plus numeric rows.
// Empty cells encode missing values.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& columns) : os_(path) {
        if (!os_) throw IoError("csv: cannot open " + path + " for writing");
        for (std::size_t i = 0; i < columns.size(); ++i) {
            os_ << columns[i];
            if (i + 1 < columns.size()) os_ << ",";
        }
        os_ << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            os_ << cells[i];
            if (i + 1 < cells.size()) os_ << ",";
        }
        os_ << "\n";
    }

    static std::string num(double v, int precision = 6) {
        std::ostringstream ss;
        ss << std::setprecision(precision) << v;
        return ss.str();
    }

private:
    std::ofstream os_;
};

struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    int column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return static_cast<int>(i);
        throw InputError("csv: no column named " + name);
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("csv: cannot open " + path);
    CsvTable table;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        if (first) {
            table.columns = cells;
            first = false;
        } else if (!cells.empty()) {
            table.rows.push_back(cells);
        }
    }
    return table;
}

}  // namespace sfuda
