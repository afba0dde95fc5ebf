#pragma once

#include <string>
#include <vector>

#include "trajmoe/data.hpp"
#include "trajmoe/ops.hpp"

namespace trajmoe {

// Quintile buckets for the popularity rank; rank 1 is the most popular.
constexpr int kRankBuckets = 5;

// [n_1..n_c, p_1..p_c] with p_i = n_i / sum(n). All proportions are 0 when
// the counts sum to 0.
std::vector<double> poi_feature(const std::vector<int>& counts);

// Per-axis standardization to mean 0 / population std 1 within one city.
// A constant axis maps to all zeros.
Matrix normalize_coords(const std::vector<std::pair<double, double>>& coords);

// Bucket boundaries sit at ceil(N*k/5) positions of the descending-flow
// order; ties are broken by ascending location id.
std::vector<int> popularity_rank(const std::vector<double>& flows);

// Fills the derived feature arrays of a city in place.
void featurize_city(City& city);

struct GeoEncoderConfig {
    int poi_categories = 8;
    int dim = 64;
    int cross_layers = 2;
    bool cross_matrix = false;  // DCN-v2 style d x d cross weight instead of a d-vector gate
};

// Unified location encoder: three embedding layers summed, then a Deep &
// Cross stack whose concatenated output projects back to the model
// dimension. Parameter count is independent of how many cities exist.
struct GeoEncoderParams {
    Param* poi_w = nullptr;
    Param* poi_b = nullptr;
    Param* coord_w = nullptr;
    Param* coord_b = nullptr;
    Param* rank_table = nullptr;
    std::vector<Param*> cross_w;
    std::vector<Param*> cross_b;
    Param* deep_w1 = nullptr;
    Param* deep_b1 = nullptr;
    Param* deep_w2 = nullptr;
    Param* deep_b2 = nullptr;
    Param* out_w = nullptr;
    Param* out_b = nullptr;

    static GeoEncoderParams create(ParamStore& store, const GeoEncoderConfig& cfg,
                                   const std::string& prefix = "geo");
};

// E_l rows for a batch of locations: affine(POI features) + affine(coords)
// + rank table lookup. `ranks` uses the 1-based bucket values.
Var embed_location_rows(Tape& tape, Var poi_feats, Var coords, const std::vector<int>& ranks,
                        const GeoEncoderParams& params);

// One cross layer: e0 gated by a scalar (or, in matrix mode, an affine map)
// of e_i, plus bias and the e_i residual.
Var cross_layer(Var e0, Var ei, Var w, Var b, bool matrix_mode);

// Candidate matrix L for every location of one city, rows indexed by
// location id.
Var encode_candidates(Tape& tape, const City& city, const GeoEncoderParams& params,
                      const GeoEncoderConfig& cfg);

}  // namespace trajmoe
