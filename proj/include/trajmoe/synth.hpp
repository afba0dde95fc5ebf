#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "trajmoe/data.hpp"

namespace trajmoe {

// Deterministic multi-city generator. Users move through small anchor
// groups with time-of-day-dependent successors: in the AM half of the day
// the next anchor is the most POI-similar one, in the PM half the nearest
// one. The next location is therefore a function of (current location,
// AM/PM) at noise 0, the pattern is learnable by construction, and the rule
// itself is feature-based and city-agnostic. Excursions jump uniformly
// within the user's anchor group with probability `noise`.
struct GeneratorConfig {
    std::uint64_t seed = 7;
    int cities = 3;
    int locations = 50;  // per city
    int poi_categories = 8;
    int users = 100;  // per city
    int days = 9;
    int anchors = 3;           // anchor-group size (home/work style)
    double noise = 0.0;        // excursion probability, 0 = fully deterministic
    bool time_agnostic = false;  // same successor in both day halves

    void validate() const;
    nlohmann::json to_json() const;
    static GeneratorConfig from_json(const nlohmann::json& j);
};

// Seeded city: sparse POI counts, jittered grid coordinates, heavy-tailed
// flows. The returned city is already featurized.
City gen_city(const GeneratorConfig& cfg, int city_index);

// Location successor tables for one city (AM half and PM half of the day).
// Shared by all users, so transitions are globally consistent. In
// time-agnostic mode both halves follow a plain cycle through the group.
struct SuccessorTables {
    std::vector<int> am;
    std::vector<int> pm;
    std::vector<std::vector<int>> groups;     // anchor groups partitioning the city
    std::vector<int> group_of;                // location -> group index
};

SuccessorTables successor_tables(const GeneratorConfig& cfg, const City& city);

// Raw per-user streams spanning cfg.days; arrival gaps are 30min..3h.
std::vector<Trajectory> gen_trajectories(const City& city, const GeneratorConfig& cfg);

// Windows each user stream into consecutive `window_days` segments
// (`stride_days` < window_days gives overlapping windows), drops windows
// with fewer than min_len points, and splits windows longer than max_len
// (0 = no limit) into chunks, dropping short tails.
std::vector<Trajectory> preprocess(const std::vector<Trajectory>& raw, int window_days = 3,
                                   int min_len = 5, int max_len = 0, int stride_days = 0);

void save_city(const City& city, const std::string& path);
City load_city(const std::string& path);
void save_trajectories(const std::vector<Trajectory>& trajs, const std::string& path);
std::vector<Trajectory> load_trajectories(const std::string& path);

struct Dataset {
    GeneratorConfig config;
    std::vector<City> cities;
    std::vector<std::vector<Trajectory>> trajectories;  // raw streams, per city
};

Dataset generate_dataset(const GeneratorConfig& cfg);

// city_<k>.city / city_<k>.traj pairs under `dir`, plus generator.json.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace trajmoe
