#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "trajmoe/types.hpp"

namespace trajmoe {

// Raw per-location attributes as stored in a city file.
struct Location {
    int id = 0;
    std::vector<int> poi_counts;
    double lat = 0.0;
    double lon = 0.0;
    double flow = 0.0;
};

// A city owns its candidate vocabulary: location ids are dense in [0, N)
// and never shared across cities. Derived feature arrays are filled by
// featurize_city() before the city is used by any encoder.
struct City {
    int city_id = 0;
    int poi_categories = 0;
    std::vector<Location> locations;

    // Derived (featurize_city):
    Matrix poi_features;     // N x 2c, counts followed by proportions
    Matrix coords_norm;      // N x 2, per-city standardized (lat, lon)
    std::vector<int> ranks;  // N, quintile buckets in [1, 5]

    int size() const { return static_cast<int>(locations.size()); }
    bool featurized() const { return poi_features.rows() == size() && size() > 0; }
};

// One visit: location id plus arrival time in epoch seconds.
struct Step {
    int location = 0;
    std::int64_t time = 0;
};

struct Trajectory {
    int city_id = 0;
    int user_id = 0;
    std::vector<Step> steps;

    int length() const { return static_cast<int>(steps.size()); }
};

}  // namespace trajmoe
