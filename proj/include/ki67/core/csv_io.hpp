#pragma once

#include <string>

#include "ki67/core/types.hpp"

namespace ki67 {

struct CsvError : Error {
    explicit CsvError(const std::string& what) : Error(what) {}
};

// Centroid lists are exchanged as CSV with header "x,y,class", class in
// {neg,pos}, coordinates printed with enough digits to round-trip floats.
// Image extent and calibration are not part of the file; the caller supplies
// them on load.
void write_centroid_csv(const std::string& path, const CentroidSet& set);
CentroidSet read_centroid_csv(const std::string& path, int width, int height,
                              float microns_per_pixel);

}  // namespace ki67
