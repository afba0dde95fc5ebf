#include "trajmoe/geo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace trajmoe {

std::vector<double> poi_feature(const std::vector<int>& counts) {
    long long total = 0;
    for (int n : counts) {
        if (n < 0)
            throw std::invalid_argument("poi_feature: negative count " + std::to_string(n));
        total += n;
    }
    std::vector<double> out(counts.size() * 2, 0.0);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        out[i] = static_cast<double>(counts[i]);
        if (total > 0) out[counts.size() + i] = static_cast<double>(counts[i]) / total;
    }
    return out;
}

Matrix normalize_coords(const std::vector<std::pair<double, double>>& coords) {
    if (coords.empty()) throw std::invalid_argument("normalize_coords: empty city");
    const Index n = static_cast<Index>(coords.size());
    Matrix out(n, 2);
    for (Index i = 0; i < n; ++i) {
        out(i, 0) = coords[i].first;
        out(i, 1) = coords[i].second;
    }
    for (Index axis = 0; axis < 2; ++axis) {
        const double mean = out.col(axis).mean();
        const double var = (out.col(axis).array() - mean).square().sum() / double(n);
        const double sd = std::sqrt(var);
        if (sd == 0.0)
            out.col(axis).setZero();
        else
            out.col(axis) = (out.col(axis).array() - mean) / sd;
    }
    return out;
}

std::vector<int> popularity_rank(const std::vector<double>& flows) {
    if (flows.empty()) throw std::invalid_argument("popularity_rank: empty city");
    const int n = static_cast<int>(flows.size());
    std::vector<int> order(flows.size());
    std::iota(order.begin(), order.end(), 0);
    for (double f : flows)
        if (f < 0.0) throw std::invalid_argument("popularity_rank: negative flow");
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (flows[a] != flows[b]) return flows[a] > flows[b];
        return a < b;
    });
    std::vector<int> ranks(flows.size());
    for (int pos = 1; pos <= n; ++pos) {
        int k = 1;
        while (k < kRankBuckets && pos > (n * k + kRankBuckets - 1) / kRankBuckets) ++k;
        ranks[order[pos - 1]] = k;
    }
    return ranks;
}

void featurize_city(City& city) {
    if (city.locations.empty()) throw std::invalid_argument("featurize_city: empty city");
    for (std::size_t i = 0; i < city.locations.size(); ++i) {
        if (city.locations[i].id != static_cast<int>(i))
            throw std::invalid_argument("featurize_city: location ids must be dense in [0, N)");
        if (static_cast<int>(city.locations[i].poi_counts.size()) != city.poi_categories)
            throw std::invalid_argument("featurize_city: POI count length mismatch at location " +
                                        std::to_string(i));
    }
    const int n = city.size();
    const int c = city.poi_categories;
    city.poi_features.resize(n, 2 * c);
    std::vector<std::pair<double, double>> coords;
    std::vector<double> flows;
    coords.reserve(n);
    flows.reserve(n);
    for (int i = 0; i < n; ++i) {
        const auto f = poi_feature(city.locations[i].poi_counts);
        for (int j = 0; j < 2 * c; ++j) city.poi_features(i, j) = f[j];
        coords.emplace_back(city.locations[i].lat, city.locations[i].lon);
        flows.push_back(city.locations[i].flow);
    }
    city.coords_norm = normalize_coords(coords);
    city.ranks = popularity_rank(flows);
}

GeoEncoderParams GeoEncoderParams::create(ParamStore& store, const GeoEncoderConfig& cfg,
                                          const std::string& prefix) {
    const int d = cfg.dim;
    const int c = cfg.poi_categories;
    GeoEncoderParams p;
    p.poi_w = &store.create(prefix + ".poi.w", 2 * c, d);
    p.poi_b = &store.create(prefix + ".poi.b", 1, d);
    p.coord_w = &store.create(prefix + ".coord.w", 2, d);
    p.coord_b = &store.create(prefix + ".coord.b", 1, d);
    p.rank_table = &store.create(prefix + ".rank.e", kRankBuckets, d);
    for (int i = 0; i < cfg.cross_layers; ++i) {
        const std::string base = prefix + ".cross" + std::to_string(i);
        p.cross_w.push_back(&store.create(base + ".w", d, cfg.cross_matrix ? d : 1));
        p.cross_b.push_back(&store.create(base + ".b", 1, d));
    }
    p.deep_w1 = &store.create(prefix + ".deep.w1", d, 2 * d);
    p.deep_b1 = &store.create(prefix + ".deep.b1", 1, 2 * d);
    p.deep_w2 = &store.create(prefix + ".deep.w2", 2 * d, d);
    p.deep_b2 = &store.create(prefix + ".deep.b2", 1, d);
    p.out_w = &store.create(prefix + ".out.w", 2 * d, d);
    p.out_b = &store.create(prefix + ".out.b", 1, d);
    return p;
}

Var embed_location_rows(Tape& tape, Var poi_feats, Var coords, const std::vector<int>& ranks,
                        const GeoEncoderParams& params) {
    std::vector<int> rank_rows(ranks.size());
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        if (ranks[i] < 1 || ranks[i] > kRankBuckets)
            throw std::out_of_range("embed_location: rank " + std::to_string(ranks[i]) +
                                    " outside [1, " + std::to_string(kRankBuckets) + "]");
        rank_rows[i] = ranks[i] - 1;
    }
    Var e_poi = affine(poi_feats, tape.use(*params.poi_w), tape.use(*params.poi_b));
    Var e_geo = affine(coords, tape.use(*params.coord_w), tape.use(*params.coord_b));
    Var e_rank = rows_lookup(tape.use(*params.rank_table), std::move(rank_rows));
    return add(add(e_poi, e_geo), e_rank);
}

Var cross_layer(Var e0, Var ei, Var w, Var b, bool matrix_mode) {
    check_same_shape(e0.value(), ei.value(), "cross_layer");
    Var gated = matrix_mode ? mul(e0, affine(ei, w, b)) : add_rowvec(row_scale(e0, matmul(ei, w)), b);
    return add(gated, ei);
}

Var encode_candidates(Tape& tape, const City& city, const GeoEncoderParams& params,
                      const GeoEncoderConfig& cfg) {
    if (city.size() == 0) throw std::invalid_argument("encode_candidates: empty city");
    if (!city.featurized())
        throw std::invalid_argument("encode_candidates: city has not been featurized");
    Var poi = tape.constant(city.poi_features);
    Var coords = tape.constant(city.coords_norm);
    Var e0 = embed_location_rows(tape, poi, coords, city.ranks, params);

    Var cross = e0;
    for (std::size_t i = 0; i < params.cross_w.size(); ++i)
        cross = cross_layer(e0, cross, tape.use(*params.cross_w[i]), tape.use(*params.cross_b[i]),
                            cfg.cross_matrix);

    Var deep = affine(gelu(affine(e0, tape.use(*params.deep_w1), tape.use(*params.deep_b1))),
                      tape.use(*params.deep_w2), tape.use(*params.deep_b2));

    return affine(concat_cols(cross, deep), tape.use(*params.out_w), tape.use(*params.out_b));
}

}  // namespace trajmoe
