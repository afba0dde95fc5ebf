#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trajmoe/data.hpp"
#include "trajmoe/ops.hpp"

namespace trajmoe {

constexpr int kTodSlots = 48;    // half-hour slots
constexpr int kDowDays = 7;      // 0 = Monday
constexpr int kStayBuckets = 49; // half-hour stay buckets, >= 24h collapses into the last

struct TemporalFeatures {
    int tod = 0;
    int dow = 0;
    int stay_bucket = 0;
};

// tod is the nearest half-hour slot (ties round up, 24:00 wraps to slot 0),
// dow comes from the UTC calendar day, and the stay bucket is
// floor(gap / 30min) capped at 48. The final step has no next arrival and
// gets stay bucket 0.
std::vector<TemporalFeatures> temporal_features(const std::vector<std::int64_t>& times);

// Per-step foundational streams for one trajectory: POI feature rows,
// normalized coordinates, and popularity rank buckets.
struct FoundationalSteps {
    Matrix poi;              // L x 2c
    Matrix coords;           // L x 2
    std::vector<int> ranks;  // L, 1-based buckets
};

FoundationalSteps build_foundational(const Trajectory& traj, const City& city);

// Entry (i, j) is 1 iff position i may attend to position j (j <= i).
Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> causal_mask(int seq);

// Right-padded token arrays for one mini-batch from a single city. Rows are
// trajectory-major: position (b, t) lives at row b * seq + t.
struct PaddedBatch {
    int batch = 0;
    int seq = 0;
    int city_id = 0;
    Matrix poi_tokens;                       // (B*T) x 2c
    Matrix coord_tokens;                     // (B*T) x 2
    std::vector<int> rank_tokens;            // 1-based; 1 on padding (masked out)
    std::vector<int> tod;
    std::vector<int> dow;
    std::vector<int> stay;
    BatchMask mask;                          // real-token mask
    std::vector<int> targets;                // next-location ids, 0 where invalid
    std::vector<std::uint8_t> valid_target;  // false at the last real step and on padding
};

PaddedBatch pad_batch(const std::vector<Trajectory>& trajs, const City& city, int seq);

struct StreamEmbedConfig {
    int poi_categories = 8;
    int dim = 64;
};

struct StreamEmbedParams {
    Param* poi_w = nullptr;
    Param* poi_b = nullptr;
    Param* pos_w = nullptr;
    Param* pos_b = nullptr;
    Param* pop_table = nullptr;
    Param* tod_table = nullptr;
    Param* dow_table = nullptr;
    Param* stay_table = nullptr;

    static StreamEmbedParams create(ParamStore& store, const StreamEmbedConfig& cfg,
                                    const std::string& prefix = "emb");
};

// The three foundational embeddings, their sum E_traj, and the temporal
// embedding E_ts. Padded positions embed to exactly zero in every stream.
struct StreamEmbeddings {
    Var poi;
    Var pos;
    Var pop;
    Var traj;
    Var ts;
};

StreamEmbeddings embed_streams(Tape& tape, const PaddedBatch& batch,
                               const StreamEmbedParams& params);

}  // namespace trajmoe
