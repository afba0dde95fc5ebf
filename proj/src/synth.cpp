#include "trajmoe/synth.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "trajmoe/geo.hpp"
#include "trajmoe/rng.hpp"
#include "trajmoe/traj.hpp"

namespace trajmoe {

namespace {

// Monday 2023-01-02 00:00 UTC.
constexpr std::int64_t kBaseTime = 1672617600;
constexpr std::int64_t kDaySeconds = 86400;

std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

[[noreturn]] void parse_fail(const std::string& path, int line, const std::string& what) {
    throw std::runtime_error(path + ": parse error at line " + std::to_string(line) + ": " + what);
}

}  // namespace

void GeneratorConfig::validate() const {
    if (cities < 1) throw std::invalid_argument("generator: need at least one city");
    if (locations < 2) throw std::invalid_argument("generator: need at least two locations");
    if (poi_categories < 1) throw std::invalid_argument("generator: need at least one POI category");
    if (users < 1) throw std::invalid_argument("generator: need at least one user");
    if (days < 1) throw std::invalid_argument("generator: need at least one day");
    if (anchors < 1 || anchors > locations)
        throw std::invalid_argument("generator: anchor count must be in [1, locations]");
    if (noise < 0.0 || noise > 1.0)
        throw std::invalid_argument("generator: noise level must be in [0, 1]");
}

nlohmann::json GeneratorConfig::to_json() const {
    return nlohmann::json{{"seed", seed},
                          {"cities", cities},
                          {"locations", locations},
                          {"poi_categories", poi_categories},
                          {"users", users},
                          {"days", days},
                          {"anchors", anchors},
                          {"noise", noise},
                          {"time_agnostic", time_agnostic}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.cities = j.at("cities").get<int>();
    c.locations = j.at("locations").get<int>();
    c.poi_categories = j.at("poi_categories").get<int>();
    c.users = j.at("users").get<int>();
    c.days = j.at("days").get<int>();
    c.anchors = j.at("anchors").get<int>();
    c.noise = j.at("noise").get<double>();
    c.time_agnostic = j.at("time_agnostic").get<bool>();
    return c;
}

City gen_city(const GeneratorConfig& cfg, int city_index) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, "gen-city", static_cast<std::uint64_t>(city_index)));
    City city;
    city.city_id = city_index;
    city.poi_categories = cfg.poi_categories;
    const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.locations))));
    for (int i = 0; i < cfg.locations; ++i) {
        Location loc;
        loc.id = i;
        loc.poi_counts.resize(cfg.poi_categories);
        for (int c = 0; c < cfg.poi_categories; ++c)
            loc.poi_counts[c] = rng.uniform() < 0.4 ? 0 : 1 + rng.below_int(9);
        loc.lat = (i / grid) + 0.4 * (rng.uniform() - 0.5);
        loc.lon = (i % grid) + 0.4 * (rng.uniform() - 0.5);
        // Pareto-shaped flows keep the quintile buckets well separated.
        loc.flow = 10.0 * std::pow(1.0 - rng.uniform(), -1.0 / 1.2);
        city.locations.push_back(std::move(loc));
    }
    featurize_city(city);
    return city;
}

namespace {

double poi_cosine(const std::vector<int>& a, const std::vector<int>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * b[i];
        na += double(a[i]) * a[i];
        nb += double(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

}  // namespace

SuccessorTables successor_tables(const GeneratorConfig& cfg, const City& city) {
    cfg.validate();
    if (city.size() != cfg.locations)
        throw std::invalid_argument("successor_tables: city size does not match configuration");
    const int n = cfg.locations;
    Rng rng(derive_seed(cfg.seed, "gen-groups", static_cast<std::uint64_t>(city.city_id)));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    SuccessorTables t;
    t.am.resize(n);
    t.pm.resize(n);
    t.group_of.resize(n);
    for (int start = 0; start < n; start += cfg.anchors) {
        const int end = std::min(n, start + cfg.anchors);
        std::vector<int> group(order.begin() + start, order.begin() + end);
        const int m = static_cast<int>(group.size());
        const int gi = static_cast<int>(t.groups.size());
        for (int j = 0; j < m; ++j) {
            const int loc = group[j];
            t.group_of[loc] = gi;
            if (m == 1 || cfg.time_agnostic) {
                t.am[loc] = group[(j + 1) % m];
                t.pm[loc] = t.am[loc];
                continue;
            }
            // AM follows functional semantics, PM follows proximity; both
            // rules are global, so trajectories stay learnable and the two
            // day halves reward different feature streams.
            int best_am = -1, best_pm = -1;
            double best_sim = -2.0, best_dist = std::numeric_limits<double>::infinity();
            for (int k = 0; k < m; ++k) {
                if (k == j) continue;
                const int cand = group[k];
                const double sim = poi_cosine(city.locations[loc].poi_counts,
                                              city.locations[cand].poi_counts);
                if (sim > best_sim || (sim == best_sim && cand < best_am)) {
                    best_sim = sim;
                    best_am = cand;
                }
                const double dlat = city.locations[loc].lat - city.locations[cand].lat;
                const double dlon = city.locations[loc].lon - city.locations[cand].lon;
                const double dist = dlat * dlat + dlon * dlon;
                if (dist < best_dist || (dist == best_dist && cand < best_pm)) {
                    best_dist = dist;
                    best_pm = cand;
                }
            }
            t.am[loc] = best_am;
            t.pm[loc] = best_pm;
        }
        t.groups.push_back(std::move(group));
    }
    return t;
}

namespace {

int half_of_day(std::int64_t time) {
    const std::int64_t sod = ((time % kDaySeconds) + kDaySeconds) % kDaySeconds;
    const int slot = static_cast<int>(((sod + 900) / 1800) % kTodSlots);
    return slot < kTodSlots / 2 ? 0 : 1;
}

}  // namespace

std::vector<Trajectory> gen_trajectories(const City& city, const GeneratorConfig& cfg) {
    cfg.validate();
    if (city.size() != cfg.locations)
        throw std::invalid_argument("gen_trajectories: city size does not match configuration");
    const SuccessorTables tables = successor_tables(cfg, city);
    std::vector<Trajectory> out;
    out.reserve(cfg.users);
    for (int u = 0; u < cfg.users; ++u) {
        Rng rng(derive_seed(cfg.seed, "gen-user",
                            (static_cast<std::uint64_t>(city.city_id) << 32) |
                                static_cast<std::uint64_t>(u)));
        const auto& group = tables.groups[u % tables.groups.size()];
        Trajectory tr;
        tr.city_id = city.city_id;
        tr.user_id = u;
        int cur = group[u % group.size()];
        std::int64_t t = kBaseTime + static_cast<std::int64_t>(rng.below(4 * 3600));
        const std::int64_t horizon = kBaseTime + static_cast<std::int64_t>(cfg.days) * kDaySeconds;
        while (t < horizon) {
            tr.steps.push_back(Step{cur, t});
            if (rng.bernoulli(cfg.noise))
                cur = group[rng.below_int(static_cast<int>(group.size()))];
            else
                cur = half_of_day(t) == 0 ? tables.am[cur] : tables.pm[cur];
            t += 1800 + static_cast<std::int64_t>(rng.below(9001));
        }
        out.push_back(std::move(tr));
    }
    return out;
}

std::vector<Trajectory> preprocess(const std::vector<Trajectory>& raw, int window_days,
                                   int min_len, int max_len, int stride_days) {
    if (window_days < 1) throw std::invalid_argument("preprocess: window must be >= 1 day");
    if (stride_days <= 0) stride_days = window_days;
    const std::int64_t window = static_cast<std::int64_t>(window_days) * kDaySeconds;
    const std::int64_t stride = static_cast<std::int64_t>(stride_days) * kDaySeconds;
    std::vector<Trajectory> out;
    for (const Trajectory& tr : raw) {
        if (tr.steps.empty()) continue;
        const std::int64_t t0 = tr.steps.front().time;
        const std::int64_t t_last = tr.steps.back().time;
        for (std::int64_t ws = t0; ws <= t_last; ws += stride) {
            Trajectory win;
            win.city_id = tr.city_id;
            win.user_id = tr.user_id;
            for (const Step& s : tr.steps)
                if (s.time >= ws && s.time < ws + window) win.steps.push_back(s);
            if (win.length() < min_len) continue;
            if (max_len > 0 && win.length() > max_len) {
                for (int start = 0; start < win.length(); start += max_len) {
                    Trajectory chunk;
                    chunk.city_id = win.city_id;
                    chunk.user_id = win.user_id;
                    const int end = std::min(win.length(), start + max_len);
                    chunk.steps.assign(win.steps.begin() + start, win.steps.begin() + end);
                    if (chunk.length() >= min_len) out.push_back(std::move(chunk));
                }
            } else {
                out.push_back(std::move(win));
            }
        }
    }
    return out;
}

void save_city(const City& city, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_city: cannot open " + path);
    out << "city " << city.city_id << " locations " << city.size() << " poi_categories "
        << city.poi_categories << "\n";
    for (const Location& loc : city.locations) {
        out << loc.id;
        for (int n : loc.poi_counts) out << ' ' << n;
        out << ' ' << fmt_real(loc.lat) << ' ' << fmt_real(loc.lon) << ' ' << fmt_real(loc.flow)
            << "\n";
    }
    if (!out) throw std::runtime_error("save_city: write to " + path + " failed");
}

City load_city(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_city: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) parse_fail(path, 1, "empty file");
    City city;
    int n = 0;
    {
        std::istringstream hdr(line);
        std::string kw_city, kw_loc, kw_poi;
        if (!(hdr >> kw_city >> city.city_id >> kw_loc >> n >> kw_poi >> city.poi_categories) ||
            kw_city != "city" || kw_loc != "locations" || kw_poi != "poi_categories")
            parse_fail(path, 1, "bad header, expected 'city <id> locations <n> poi_categories <c>'");
        if (n < 1 || city.poi_categories < 1) parse_fail(path, 1, "non-positive header counts");
    }
    for (int i = 0; i < n; ++i) {
        if (!std::getline(in, line))
            parse_fail(path, 2 + i, "expected " + std::to_string(n) + " location records");
        std::istringstream rec(line);
        Location loc;
        if (!(rec >> loc.id)) parse_fail(path, 2 + i, "missing location id");
        loc.poi_counts.resize(city.poi_categories);
        for (int c = 0; c < city.poi_categories; ++c)
            if (!(rec >> loc.poi_counts[c])) parse_fail(path, 2 + i, "missing POI count");
        if (!(rec >> loc.lat >> loc.lon >> loc.flow))
            parse_fail(path, 2 + i, "missing coordinates or flow");
        city.locations.push_back(std::move(loc));
    }
    try {
        featurize_city(city);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": invalid city: " + e.what());
    }
    return city;
}

void save_trajectories(const std::vector<Trajectory>& trajs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_trajectories: cannot open " + path);
    const int city_id = trajs.empty() ? 0 : trajs.front().city_id;
    out << "trajectories " << trajs.size() << " city " << city_id << "\n";
    for (const Trajectory& tr : trajs) {
        out << tr.user_id << ' ' << tr.city_id << ' ' << tr.length();
        for (const Step& s : tr.steps) out << ' ' << s.location << ' ' << s.time;
        out << "\n";
    }
    if (!out) throw std::runtime_error("save_trajectories: write to " + path + " failed");
}

std::vector<Trajectory> load_trajectories(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_trajectories: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) parse_fail(path, 1, "empty file");
    std::size_t count = 0;
    int city_id = 0;
    {
        std::istringstream hdr(line);
        std::string kw_traj, kw_city;
        if (!(hdr >> kw_traj >> count >> kw_city >> city_id) || kw_traj != "trajectories" ||
            kw_city != "city")
            parse_fail(path, 1, "bad header, expected 'trajectories <n> city <id>'");
    }
    std::vector<Trajectory> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line))
            parse_fail(path, static_cast<int>(2 + i),
                       "expected " + std::to_string(count) + " records");
        std::istringstream rec(line);
        Trajectory tr;
        int len = 0;
        if (!(rec >> tr.user_id >> tr.city_id >> len) || len < 0)
            parse_fail(path, static_cast<int>(2 + i), "bad record header");
        tr.steps.resize(len);
        for (int s = 0; s < len; ++s)
            if (!(rec >> tr.steps[s].location >> tr.steps[s].time))
                parse_fail(path, static_cast<int>(2 + i),
                           "record truncated, expected " + std::to_string(len) + " steps");
        out.push_back(std::move(tr));
    }
    return out;
}

Dataset generate_dataset(const GeneratorConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    for (int c = 0; c < cfg.cities; ++c) {
        ds.cities.push_back(gen_city(cfg, c));
        ds.trajectories.push_back(gen_trajectories(ds.cities.back(), cfg));
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream cfg(dir + "/generator.json", std::ios::binary);
    if (!cfg) throw std::runtime_error("save_dataset: cannot open " + dir + "/generator.json");
    cfg << ds.config.to_json().dump(2) << "\n";
    for (std::size_t c = 0; c < ds.cities.size(); ++c) {
        const std::string base = dir + "/city_" + std::to_string(c);
        save_city(ds.cities[c], base + ".city");
        save_trajectories(ds.trajectories[c], base + ".traj");
    }
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    std::ifstream cfg(dir + "/generator.json");
    if (!cfg) throw std::runtime_error("load_dataset: missing " + dir + "/generator.json");
    nlohmann::json j;
    try {
        cfg >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_dataset: bad generator.json: " + std::string(e.what()));
    }
    ds.config = GeneratorConfig::from_json(j);
    for (int c = 0;; ++c) {
        const std::string base = dir + "/city_" + std::to_string(c);
        if (!std::filesystem::exists(base + ".city")) break;
        ds.cities.push_back(load_city(base + ".city"));
        ds.trajectories.push_back(load_trajectories(base + ".traj"));
    }
    if (ds.cities.empty()) throw std::runtime_error("load_dataset: no city files under " + dir);
    return ds;
}

}  // namespace trajmoe
