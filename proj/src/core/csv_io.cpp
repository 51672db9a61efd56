#include "ki67/core/csv_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace ki67 {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void write_centroid_csv(const std::string& path, const CentroidSet& set) {
    std::ofstream out(path);
    if (!out) throw CsvError("cannot open '" + path + "' for writing");
    out << "x,y,class\n";
    char buf[80];
    for (const auto& p : set.points) {
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,%s\n", static_cast<double>(p.x),
                      static_cast<double>(p.y), to_string(p.cls));
        out << buf;
    }
    if (!out) throw CsvError("short write to '" + path + "'");
}

CentroidSet read_centroid_csv(const std::string& path, int width, int height,
                              float microns_per_pixel) {
    std::ifstream in(path);
    if (!in) throw CsvError("cannot open '" + path + "'");
    CentroidSet set;
    set.width = width;
    set.height = height;
    set.microns_per_pixel = microns_per_pixel;

    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) continue;
        if (lineno == 1) {
            if (line != "x,y,class")
                throw CsvError(path + ":1: expected header 'x,y,class', got '" + line + "'");
            continue;
        }
        std::istringstream ss(line);
        std::string fx, fy, fc;
        if (!std::getline(ss, fx, ',') || !std::getline(ss, fy, ',') || !std::getline(ss, fc))
            throw CsvError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
        Centroid c;
        try {
            c.x = std::stof(trim(fx));
            c.y = std::stof(trim(fy));
        } catch (const std::exception&) {
            throw CsvError(path + ":" + std::to_string(lineno) + ": bad coordinate");
        }
        const std::string cls = trim(fc);
        if (cls == "neg")
            c.cls = Ki67Class::Neg;
        else if (cls == "pos")
            c.cls = Ki67Class::Pos;
        else
            throw CsvError(path + ":" + std::to_string(lineno) + ": bad class '" + cls + "'");
        if (c.x < 0 || c.y < 0 || c.x >= static_cast<float>(width) ||
            c.y >= static_cast<float>(height))
            throw CsvError(path + ":" + std::to_string(lineno) + ": centroid outside image");
        set.points.push_back(c);
    }
    return set;
}

}  // namespace ki67
